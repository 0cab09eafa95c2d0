//! Fully connected CRF with Gaussian appearance/smoothness kernels and Potts
//! compatibility, solved by exact mean-field iterations.
//!
//! Pairwise sums are computed densely, which costs O(N²K) per iteration and
//! is intended for small images. The kernel matrix is cached when it fits in
//! [`DENSE_CACHE_PIXELS`]² entries, otherwise rows are recomputed on the fly.

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::gemm;

pub const DENSE_CACHE_PIXELS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    /// Whether `segment` runs the refinement by default.
    pub enabled: bool,
    pub iters: i64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams { enabled: true, iters: 10, theta_alpha: 40.0, theta_beta: 0.2, theta_gamma: 3.0, w1: 4.0, w2: 3.0 }
    }
}

/// Per-pixel class distributions, `n × k` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    pub n: usize,
    pub k: usize,
    pub probs: Vec<f64>,
}

impl UnaryField {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n).map(|i| argmax(self.row(i))).collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Softmax over negated distances per pixel.
pub fn unary_from_distances(distances: &[f64], k: usize) -> Result<UnaryField> {
    if k == 0 || distances.len() % k != 0 {
        return Err(Error::Shape(format!("{} distances not divisible into K={k}", distances.len())));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite distance".into()));
    }
    let n = distances.len() / k;
    let mut probs = vec![0.0; n * k];
    let mut neg = vec![0.0; k];
    for i in 0..n {
        for (j, v) in neg.iter_mut().enumerate() {
            *v = -distances[i * k + j];
        }
        softmax_into(&neg, &mut probs[i * k..(i + 1) * k]);
    }
    Ok(UnaryField { n, k, probs })
}

/// Pairwise kernel between all pixels of one image.
pub struct PairwiseKernel<'a> {
    image: &'a Image,
    params: CrfParams,
    cached: Option<Vec<f64>>,
    /// Spatial factors indexed by `|dy| * width + |dx|`.
    near: Vec<f64>,
    far: Vec<f64>,
}

impl<'a> PairwiseKernel<'a> {
    pub fn new(image: &'a Image, params: CrfParams) -> Self {
        let n = image.height * image.width;
        Self::build(image, params, n <= DENSE_CACHE_PIXELS)
    }

    fn build(image: &'a Image, params: CrfParams, cache: bool) -> Self {
        let n = image.height * image.width;
        let ia = 1.0 / (2.0 * params.theta_alpha * params.theta_alpha);
        let ig = 1.0 / (2.0 * params.theta_gamma * params.theta_gamma);
        let (mut near, mut far) = (vec![0.0; n], vec![0.0; n]);
        for dy in 0..image.height {
            for dx in 0..image.width {
                let dp = (dy * dy + dx * dx) as f64;
                near[dy * image.width + dx] = params.w1 * (-dp * ia).exp();
                far[dy * image.width + dx] = params.w2 * (-dp * ig).exp();
            }
        }
        let mut k = PairwiseKernel { image, params, cached: None, near, far };
        if cache {
            let mut m = vec![0.0; n * n];
            let mut row = vec![0.0; n];
            for i in 0..n {
                k.fill_upper(i, &mut row);
                for j in i + 1..n {
                    m[i * n + j] = row[j];
                    m[j * n + i] = row[j];
                }
            }
            k.cached = Some(m);
        }
        k
    }

    pub fn n(&self) -> usize {
        self.image.height * self.image.width
    }

    fn fill_row(&self, i: usize, row: &mut [f64]) {
        self.fill_from(i, 0, row);
    }

    fn fill_upper(&self, i: usize, row: &mut [f64]) {
        self.fill_from(i, i + 1, row);
    }

    /// `k(i, j)` for `j >= from`, with the self term zeroed.
    fn fill_from(&self, i: usize, from: usize, row: &mut [f64]) {
        let img = self.image;
        let w = img.width;
        let (yi, xi) = (i / w, i % w);
        let ib = 1.0 / (2.0 * self.params.theta_beta * self.params.theta_beta);
        let plane = img.height * w;
        for (j, r) in row.iter_mut().enumerate().skip(from) {
            if j == i {
                *r = 0.0;
                continue;
            }
            let o = (j / w).abs_diff(yi) * w + (j % w).abs_diff(xi);
            let mut dc = 0.0;
            for c in 0..img.channels {
                let d = img.data[c * plane + i] - img.data[c * plane + j];
                dc += d * d;
            }
            let mut v = self.far[o];
            if self.near[o] != 0.0 {
                v += self.near[o] * (-dc * ib).exp();
            }
            *r = v;
        }
    }

    /// `m[i][l] = Σ_{j≠i} k(i,j) q[j][l]`.
    pub fn messages(&self, q: &[f64], k: usize) -> Vec<f64> {
        let n = self.n();
        let mut m = vec![0.0; n * k];
        if let Some(c) = &self.cached {
            gemm(n, n, k, c, false, q, false, &mut m, 0.0);
            return m;
        }
        let mut row = vec![0.0; n];
        for i in 0..n {
            self.fill_row(i, &mut row);
            let out = &mut m[i * k..(i + 1) * k];
            for (j, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, &qv) in out.iter_mut().zip(&q[j * k..(j + 1) * k]) {
                    *o += w * qv;
                }
            }
        }
        m
    }
}

/// One mean-field update with Potts compatibility:
/// `q'_i(l) ∝ exp(ln u_i(l) − Σ_{l'≠l} m_i(l'))`.
pub fn meanfield_step(kernel: &PairwiseKernel, unary: &UnaryField, q: &[f64]) -> Vec<f64> {
    let k = unary.k;
    let m = kernel.messages(q, k);
    let mut out = vec![0.0; unary.n * k];
    let mut energy = vec![0.0; k];
    for i in 0..unary.n {
        let mi = &m[i * k..(i + 1) * k];
        let total: f64 = mi.iter().sum();
        for l in 0..k {
            let u = unary.probs[i * k + l].max(f64::MIN_POSITIVE).ln();
            energy[l] = u - (total - mi[l]);
        }
        softmax_into(&energy, &mut out[i * k..(i + 1) * k]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    pub labels: Vec<usize>,
    pub q: UnaryField,
}

/// Runs `iters` mean-field updates from the unary distribution and returns
/// the argmax labels (ties to the lowest class).
pub fn meanfield_refine(unary: &UnaryField, image: &Image, params: &CrfParams, iters: i64) -> Result<CrfOutput> {
    if iters < 0 {
        return Err(Error::InvalidArgument(format!("crf iterations must be >= 0, got {iters}")));
    }
    if unary.n != image.height * image.width {
        return Err(Error::Shape(format!("unary has {} pixels, image {}x{}", unary.n, image.height, image.width)));
    }
    let mut q = unary.probs.clone();
    if iters > 0 && (params.w1 != 0.0 || params.w2 != 0.0) {
        let kernel = PairwiseKernel::new(image, *params);
        for _ in 0..iters {
            q = meanfield_step(&kernel, unary, &q);
        }
    }
    let q = UnaryField { n: unary.n, k: unary.k, probs: q };
    if q.probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("crf produced non-finite marginals".into()));
    }
    Ok(CrfOutput { labels: q.argmax(), q })
}
