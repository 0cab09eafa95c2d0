//! Parameters, basic layers and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grads, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param {name}");
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, shape: shape.to_vec(), data });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &[Param]) -> Result<()> {
        for p in &mut self.params {
            let src = other.iter().find(|o| o.name == p.name).ok_or_else(|| Error::Corrupt {
                what: "checkpoint".into(),
                reason: format!("missing parameter {}", p.name),
            })?;
            if src.shape != p.shape {
                return Err(Error::Corrupt {
                    what: "checkpoint".into(),
                    reason: format!("parameter {} has shape {:?}, expected {:?}", p.name, src.shape, p.shape),
                });
            }
            p.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Graph leaves for one forward pass.
    pub fn vars(&self, trainable: bool) -> Vars {
        Vars {
            leaves: self
                .params
                .iter()
                .map(|p| {
                    if trainable {
                        Tensor::var(p.data.clone(), &p.shape)
                    } else {
                        Tensor::new(p.data.clone(), &p.shape)
                    }
                })
                .collect(),
        }
    }
}

/// Per-pass leaf tensors, indexed by [`ParamId`].
pub struct Vars {
    leaves: Vec<Tensor>,
}

impl Vars {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0]
    }

    /// Gradient per parameter, zero-filled where none flowed.
    pub fn collect_grads(&self, grads: &Grads) -> Vec<Vec<f64>> {
        self.leaves
            .iter()
            .map(|t| grads.get(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }
}

pub fn kaiming_normal(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            kaiming_normal(rng, fan_in, cout * fan_in),
        );
        let bias = store.add(format!("{name}.bias"), &[cout], vec![0.0; cout]);
        Conv2d { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Result<Tensor> {
        x.conv2d(vars.get(self.weight), self.stride, self.pad)?
            .add_bias(vars.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// `[out, in]`
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), &[dout, din], kaiming_normal(rng, din, din * dout));
        let bias = store.add(format!("{name}.bias"), &[dout], vec![0.0; dout]);
        Linear { weight, bias }
    }

    /// `[N, in] -> [N, out]`
    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(false, vars.get(self.weight), true)?.add_bias(vars.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// `(step, first moments, second moments)`, one moment vector per parameter.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn set_state(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let shapes_ok = |x: &[Vec<f64>]| x.len() == self.m.len() && x.iter().zip(&self.m).all(|(a, b)| a.len() == b.len());
        if !shapes_ok(&m) || !shapes_ok(&v) {
            return Err(Error::Corrupt { what: "optimizer state".into(), reason: "moment shapes differ from parameters".into() });
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update; gradients are rescaled first if their global norm exceeds
    /// `clip_norm`. Returns the pre-clip global norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], clip_norm: Option<f64>) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} grads for {} params", grads.len(), store.len())));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        let scale = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.params[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * scale + self.cfg.weight_decay * p[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", &[2], vec![3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
        for _ in 0..500 {
            let vars = store.vars(true);
            let loss = vars.get(id).powf(2.0).sum_all();
            let g = vars.collect_grads(&loss.backward().unwrap());
            opt.step(&mut store, &g, None).unwrap();
        }
        assert!(store.get(id).data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_first_step() {
        let mut store = ParamStore::new();
        store.add("x", &[1], vec![0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let norm = opt.step(&mut store, &[vec![100.0]], Some(10.0)).unwrap();
        assert_eq!(norm, 100.0);
        // Adam's first step has magnitude lr regardless of scale
        assert!((store.params()[0].data[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", &[1], vec![0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(
            opt.step(&mut store, &[vec![f64::NAN]], None),
            Err(Error::Numerical(_))
        ));
    }
}
