//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tensor`] is an immutable node in a dynamically built graph. Every op
//! that has at least one gradient-carrying input records a backward closure;
//! ops on constants fold to plain values. Node ids increase monotonically,
//! so visiting reachable nodes in descending id order is a valid reverse
//! topological order.
//!
//! Layouts are row-major. Image-like tensors are `[N, C, H, W]`.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: usize,
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(data.len(), numel(&shape), "data length does not match shape {shape:?}");
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            shape,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A constant (no gradient) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::leaf(data, shape.to_vec(), false)
    }

    /// A leaf whose gradient is tracked.
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::leaf(data, shape.to_vec(), true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Self::new(vec![v; numel(shape)], shape)
    }

    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            shape,
            requires_grad,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::new(self.0.data.clone(), &self.0.shape)
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match *self.shape() {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::Shape(format!("expected 4-d tensor, got {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match *self.shape() {
            [m, k] => Ok([m, k]),
            ref s => Err(Error::Shape(format!("expected 2-d tensor, got {s:?}"))),
        }
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.0.data.clone(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out_vals = if self.requires_grad() { out.clone() } else { Vec::new() };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let gx = g
                .iter()
                .zip(input.data())
                .zip(&out_vals)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    /// `ln(1 + e^x)`, stable for large |x|.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    fn binary(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let (a, b) = (self.clone(), other.clone());
        if a.shape() == b.shape() {
            let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            let (pa, pb) = (a.clone(), b.clone());
            return Ok(Tensor::from_op(out, a.shape().to_vec(), vec![a, b], move |g| {
                let ga = pa.requires_grad().then(|| {
                    g.iter()
                        .zip(pa.data().iter().zip(pb.data()))
                        .map(|(&g, (&x, &y))| g * da(x, y))
                        .collect()
                });
                let gb = pb.requires_grad().then(|| {
                    g.iter()
                        .zip(pa.data().iter().zip(pb.data()))
                        .map(|(&g, (&x, &y))| g * db(x, y))
                        .collect()
                });
                vec![ga, gb]
            }));
        }
        // scalar broadcast on either side
        let (big, small, swapped) = if b.numel() == 1 {
            (a, b, false)
        } else if a.numel() == 1 {
            (b, a, true)
        } else {
            return Err(Error::Shape(format!(
                "incompatible shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        };
        let s = small.item();
        let out = big
            .data()
            .iter()
            .map(|&x| if swapped { f(s, x) } else { f(x, s) })
            .collect();
        let (pbig, psmall) = (big.clone(), small.clone());
        let shape = big.shape().to_vec();
        let parents = if swapped { vec![small, big] } else { vec![big, small] };
        Ok(Tensor::from_op(out, shape, parents, move |g| {
            let s = psmall.item();
            let gbig = pbig.requires_grad().then(|| {
                g.iter()
                    .zip(pbig.data())
                    .map(|(&g, &x)| if swapped { g * db(s, x) } else { g * da(x, s) })
                    .collect::<Vec<f64>>()
            });
            let gsmall = psmall.requires_grad().then(|| {
                let total: f64 = g
                    .iter()
                    .zip(pbig.data())
                    .map(|(&g, &x)| if swapped { g * da(s, x) } else { g * db(x, s) })
                    .sum();
                vec![total]
            });
            if swapped {
                vec![gsmall, gbig]
            } else {
                vec![gbig, gsmall]
            }
        }))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    pub fn sum_all(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// `op(a) · op(b)` for 2-d operands, where `op` optionally transposes.
    pub fn matmul_t(&self, trans_a: bool, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let [ar, ac] = self.dims2()?;
        let [br, bc] = other.dims2()?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                self.shape(),
                if trans_a { "ᵀ" } else { "" },
                other.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), trans_a, other.data(), trans_b, &mut out, 0.0);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(out, vec![m, n], vec![self.clone(), other.clone()], move |g| {
            // C = op(A) op(B);  dop(A) = G op(B)ᵀ,  dop(B) = op(A)ᵀ G
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![0.0; m * k];
                if trans_a {
                    // dA (k×m) = op(B) Gᵀ
                    gemm(k, n, m, b.data(), trans_b, g, true, &mut ga, 0.0);
                } else {
                    gemm(m, n, k, g, false, b.data(), !trans_b, &mut ga, 0.0);
                }
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![0.0; k * n];
                if trans_b {
                    // dB (n×k) = Gᵀ op(A)
                    gemm(n, m, k, g, true, a.data(), trans_a, &mut gb, 0.0);
                } else {
                    gemm(k, m, n, a.data(), !trans_a, g, false, &mut gb, 0.0);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(false, other, false)
    }

    /// Adds `bias[C]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || bias.numel() != shape[1] {
            return Err(Error::Shape(format!(
                "bias of {} entries for tensor {:?}",
                bias.numel(),
                shape
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner = numel(&shape[2..]);
        let mut out = self.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let b = bias.data()[ci];
                let base = (ni * c + ci) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let (x, bb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(out, shape, vec![self.clone(), bias.clone()], move |g| {
            let gx = x.requires_grad().then(|| g.to_vec());
            let gb = bb.requires_grad().then(|| {
                let mut gb = vec![0.0; c];
                for ni in 0..n {
                    for (ci, acc) in gb.iter_mut().enumerate() {
                        let base = (ni * c + ci) * inner;
                        *acc += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                gb
            });
            vec![gx, gb]
        }))
    }

    /// Multiplies each row of an `[M, D]` tensor by the matching entry of `s[M]`.
    pub fn scale_rows(&self, s: &Tensor) -> Result<Tensor> {
        let [m, d] = self.dims2()?;
        if s.numel() != m {
            return Err(Error::Shape(format!("{} row scales for {m} rows", s.numel())));
        }
        let mut out = self.data().to_vec();
        for (row, &f) in out.chunks_mut(d).zip(s.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let (x, sc) = (self.clone(), s.clone());
        Ok(Tensor::from_op(out, vec![m, d], vec![self.clone(), s.clone()], move |g| {
            let gx = x.requires_grad().then(|| {
                let mut gx = g.to_vec();
                for (row, &f) in gx.chunks_mut(d).zip(sc.data()) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
                gx
            });
            let gs = sc.requires_grad().then(|| {
                g.chunks(d)
                    .zip(x.data().chunks(d))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect()
            });
            vec![gx, gs]
        }))
    }

    /// Row sums of an `[M, D]` tensor, shape `[M]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let [m, d] = self.dims2()?;
        let out = self.data().chunks(d).map(|r| r.iter().sum()).collect();
        Ok(Tensor::from_op(out, vec![m], vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(m * d);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi, d));
            }
            vec![Some(gx)]
        }))
    }

    /// Divides each row of `[M, D]` by its L2 norm (floored at `eps`).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let [m, d] = self.dims2()?;
        let norms: Vec<f64> = self
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let mut out = self.data().to_vec();
        for (row, &nrm) in out.chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let y = out.clone();
        let x = self.clone();
        Ok(Tensor::from_op(out, vec![m, d], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; m * d];
            for i in 0..m {
                let nrm = norms[i];
                let gr = &g[i * d..(i + 1) * d];
                let dst = &mut gx[i * d..(i + 1) * d];
                let raw_norm: f64 = x.data()[i * d..(i + 1) * d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if raw_norm < nrm {
                    // clamped: y = x / eps is linear in x
                    for (o, &gv) in dst.iter_mut().zip(gr) {
                        *o = gv / nrm;
                    }
                } else {
                    let yr = &y[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / nrm;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Squared Euclidean distances from rows of `[M, D]` to fixed `centers[K, D]`.
    ///
    /// The centers are treated as constants: no gradient is routed to them.
    pub fn sq_dist_to(&self, centers: &Tensor) -> Result<Tensor> {
        let [m, d] = self.dims2()?;
        let [k, dc] = centers.dims2()?;
        if d != dc {
            return Err(Error::Shape(format!("feature dim {d} vs center dim {dc}")));
        }
        let c = centers.data().to_vec();
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let xi = &self.data()[i * d..(i + 1) * d];
            for j in 0..k {
                let cj = &c[j * d..(j + 1) * d];
                out[i * k + j] = xi.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        let x = self.clone();
        Ok(Tensor::from_op(out, vec![m, k], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; m * d];
            for i in 0..m {
                let xi = &x.data()[i * d..(i + 1) * d];
                let dst = &mut gx[i * d..(i + 1) * d];
                for j in 0..k {
                    let gij = g[i * k + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let cj = &c[j * d..(j + 1) * d];
                    for ((o, &a), &b) in dst.iter_mut().zip(xi).zip(cj) {
                        *o += 2.0 * gij * (a - b);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])` over rows of `[M, K]`.
    ///
    /// Rows with weight zero contribute neither value nor gradient.
    pub fn nll_sum(&self, targets: &[usize], weights: Option<&[f64]>) -> Result<Tensor> {
        let [m, k] = self.dims2()?;
        if targets.len() != m {
            return Err(Error::Shape(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Label(format!("target {t} outside 0..{k}")));
        }
        let w: Vec<f64> = match weights {
            Some(w) if w.len() == m => w.to_vec(),
            Some(w) => {
                return Err(Error::Shape(format!("{} weights for {m} rows", w.len())));
            }
            None => vec![1.0; m],
        };
        let mut probs = vec![0.0; m * k];
        let mut total = 0.0;
        for i in 0..m {
            let row = &self.data()[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            if w[i] != 0.0 {
                total += w[i] * (lse - row[targets[i]]);
            }
        }
        let targets = targets.to_vec();
        Ok(Tensor::from_op(vec![total], vec![1], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; m * k];
            for i in 0..m {
                if w[i] == 0.0 {
                    continue;
                }
                let s = g[0] * w[i];
                for j in 0..k {
                    gx[i * k + j] = s * probs[i * k + j];
                }
                gx[i * k + targets[i]] -= s;
            }
            vec![Some(gx)]
        }))
    }

    /// 2-d convolution of `[N, C, H, W]` with weights `[O, C, KH, KW]`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        let [o, wc, kh, kw] = weight.dims4()?;
        if wc != c {
            return Err(Error::Shape(format!("conv expects {wc} channels, got {c}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!("input {h}x{w} smaller than kernel")));
        }
        let geo = ConvGeometry { c, h, w, kh, kw, stride, pad };
        let (ho, wo) = geo.out_size();
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let mut out = vec![0.0; n * o * hw];
        let mut cols_all = Vec::with_capacity(if self.requires_grad() || weight.requires_grad() {
            n * ckk * hw
        } else {
            0
        });
        let mut cols = vec![0.0; ckk * hw];
        for ni in 0..n {
            let img = &self.data()[ni * c * h * w..(ni + 1) * c * h * w];
            geo.im2col(img, &mut cols);
            gemm(o, ckk, hw, weight.data(), false, &cols, false, &mut out[ni * o * hw..(ni + 1) * o * hw], 0.0);
            if cols_all.capacity() > 0 {
                cols_all.extend_from_slice(&cols);
            }
        }
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(out, vec![n, o, ho, wo], vec![self.clone(), weight.clone()], move |g| {
            let gw = wt.requires_grad().then(|| {
                let mut gw = vec![0.0; o * ckk];
                for ni in 0..n {
                    let gn = &g[ni * o * hw..(ni + 1) * o * hw];
                    let cn = &cols_all[ni * ckk * hw..(ni + 1) * ckk * hw];
                    gemm(o, hw, ckk, gn, false, cn, true, &mut gw, 1.0);
                }
                gw
            });
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![0.0; n * c * h * w];
                let mut gcols = vec![0.0; ckk * hw];
                for ni in 0..n {
                    let gn = &g[ni * o * hw..(ni + 1) * o * hw];
                    gemm(ckk, o, hw, wt.data(), true, gn, false, &mut gcols, 0.0);
                    geo.col2im(&gcols, &mut gx[ni * c * h * w..(ni + 1) * c * h * w]);
                }
                gx
            });
            vec![gx, gw]
        }))
    }

    /// Non-overlapping `k×k` average pooling; partial border windows average
    /// over their valid cells.
    pub fn avg_pool(&self, k: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
        let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let ys = oy * k..((oy + 1) * k).min(h);
                let xs = ox * k..((ox + 1) * k).min(w);
                let cnt = (ys.len() * xs.len()) as f64;
                let mut t = Vec::new();
                for y in ys {
                    for x in xs.clone() {
                        t.push((y * w + x, 1.0 / cnt));
                    }
                }
                taps.push(t);
            }
        }
        let plan = ResamplePlan { in_h: h, in_w: w, out_h: ho, out_w: wo, taps };
        let _ = (n, c);
        self.resample(&Rc::new(plan))
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        let hw = h * w;
        let out = self
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(Tensor::from_op(out, vec![n, c], vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi / hw as f64, hw));
            }
            vec![Some(gx)]
        }))
    }

    /// Applies a fixed sparse spatial linear map to every channel.
    pub fn resample(&self, plan: &Rc<ResamplePlan>) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if (h, w) != (plan.in_h, plan.in_w) {
            return Err(Error::Shape(format!(
                "resample plan built for {}x{}, input is {h}x{w}",
                plan.in_h, plan.in_w
            )));
        }
        let ohw = plan.out_h * plan.out_w;
        let mut out = vec![0.0; n * c * ohw];
        for (plane, dst) in self.data().chunks(h * w).zip(out.chunks_mut(ohw)) {
            for (o, taps) in dst.iter_mut().zip(&plan.taps) {
                *o = taps.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
        let p = Rc::clone(plan);
        Ok(Tensor::from_op(
            out,
            vec![n, c, plan.out_h, plan.out_w],
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for (gp, dst) in g.chunks(ohw).zip(gx.chunks_mut(h * w)) {
                    for (&gv, taps) in gp.iter().zip(&p.taps) {
                        for &(i, wt) in taps {
                            dst[i] += gv * wt;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// `[N, C, H, W] -> [N·H·W, C]` (one row per pixel).
    pub fn to_rows(&self) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        let hw = h * w;
        let src = self.data();
        let mut out = vec![0.0; n * hw * c];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    out[(ni * hw + p) * c + ci] = src[(ni * c + ci) * hw + p];
                }
            }
        }
        Ok(Tensor::from_op(out, vec![n * hw, c], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * c * hw];
            for ni in 0..n {
                for ci in 0..c {
                    for p in 0..hw {
                        gx[(ni * c + ci) * hw + p] = g[(ni * hw + p) * c + ci];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Inverse of [`Tensor::to_rows`].
    pub fn from_rows(&self, n: usize, h: usize, w: usize) -> Result<Tensor> {
        let [m, c] = self.dims2()?;
        if m != n * h * w {
            return Err(Error::Shape(format!("{m} rows cannot form {n}x{h}x{w}")));
        }
        let hw = h * w;
        let src = self.data();
        let mut out = vec![0.0; m * c];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    out[(ni * c + ci) * hw + p] = src[(ni * hw + p) * c + ci];
                }
            }
        }
        Ok(Tensor::from_op(out, vec![n, c, h, w], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; m * c];
            for ni in 0..n {
                for ci in 0..c {
                    for p in 0..hw {
                        gx[(ni * hw + p) * c + ci] = g[(ni * c + ci) * hw + p];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Slice `len` entries starting at `start` along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::Shape(format!("narrow {start}+{len} of {shape:?}")));
        }
        let inner = numel(&shape[1..]);
        let out = self.data()[start * inner..(start + len) * inner].to_vec();
        let mut new_shape = shape.clone();
        new_shape[0] = len;
        let total = self.numel();
        Ok(Tensor::from_op(out, new_shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; total];
            gx[start * inner..(start + len) * inner].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn cat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cat0 of zero tensors".into()))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "cat0 of {:?} and {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            rows += p.shape()[0];
            out.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let mut shape = vec![rows];
        shape.extend(&tail);
        Ok(Tensor::from_op(out, shape, parts.to_vec(), move |g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g[off..off + s].to_vec();
                    off += s;
                    Some(part)
                })
                .collect()
        }))
    }

    /// Reverse-mode sweep from a single-element tensor.
    pub fn backward(&self) -> Result<Grads> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.shape()
            )));
        }
        let mut grads = Grads::default();
        if !self.requires_grad() {
            return Ok(grads);
        }
        let mut nodes: HashMap<usize, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            for p in &t.0.parents {
                if p.requires_grad() && !nodes.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
            nodes.insert(t.id(), t);
        }
        let mut order: Vec<usize> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));
        grads.map.insert(self.id(), vec![1.0]);
        for id in order {
            let node = &nodes[&id];
            let Some(backward) = &node.0.backward else {
                continue;
            };
            let Some(g) = grads.map.get(&id) else {
                continue;
            };
            let parent_grads = backward(g);
            // interior grads are no longer needed once propagated
            grads.map.remove(&id);
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                match grads.map.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.map.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Gradients of leaf tensors after [`Tensor::backward`].
#[derive(Default, Debug)]
pub struct Grads {
    map: HashMap<usize, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }
}

/// Sparse spatial map: each output cell is a weighted sum of input cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl ResamplePlan {
    /// Bilinear resampling of the box `(top, left, h, w)` (input pixel units,
    /// may be fractional) onto an `out_h × out_w` grid, half-pixel centers,
    /// optionally mirrored horizontally. Samples clamp to the box.
    #[allow(clippy::too_many_arguments)]
    pub fn bilinear_box(
        in_h: usize,
        in_w: usize,
        top: f64,
        left: f64,
        box_h: f64,
        box_w: f64,
        out_h: usize,
        out_w: usize,
        hflip: bool,
    ) -> ResamplePlan {
        let axis = |start: f64, len: f64, n_out: usize, n_in: usize| -> Vec<[(usize, f64); 2]> {
            let lo = start.max(0.0);
            let hi = (start + len - 1.0).min(n_in as f64 - 1.0).max(lo);
            (0..n_out)
                .map(|o| {
                    let s = start + (o as f64 + 0.5) * len / n_out as f64 - 0.5;
                    let s = s.clamp(lo, hi);
                    let i0 = s.floor() as usize;
                    let frac = s - i0 as f64;
                    let i1 = (i0 + 1).min(n_in - 1);
                    if frac == 0.0 || i1 == i0 {
                        [(i0, 1.0), (i0, 0.0)]
                    } else {
                        [(i0, 1.0 - frac), (i1, frac)]
                    }
                })
                .collect()
        };
        let ys = axis(top, box_h, out_h, in_h);
        let mut xs = axis(left, box_w, out_w, in_w);
        if hflip {
            xs.reverse();
        }
        let mut taps = Vec::with_capacity(out_h * out_w);
        for y in &ys {
            for x in &xs {
                let mut t = Vec::with_capacity(4);
                for &(yi, wy) in y {
                    for &(xi, wx) in x {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            t.push((yi * in_w + xi, wgt));
                        }
                    }
                }
                taps.push(t);
            }
        }
        ResamplePlan { in_h, in_w, out_h, out_w, taps }
    }

    /// Whole-input bilinear resize.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> ResamplePlan {
        Self::bilinear_box(in_h, in_w, 0.0, 0.0, in_h as f64, in_w as f64, out_h, out_w, false)
    }

    /// Apply to a single `H×W` plane of raw values.
    pub fn apply_plane(&self, plane: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| plane[i] * w).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn out_size(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (ho, wo) = self.out_size();
        let hw = ho * wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (ho, wo) = self.out_size();
        let hw = ho * wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            img[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C = op(A)·op(B) + beta·C` with `op(A)` of size m×k and `op(B)` k×n,
/// all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices cover the strided extents computed from (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
