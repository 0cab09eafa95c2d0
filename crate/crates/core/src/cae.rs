//! Context-aware embedding: non-local refinement where feature cosine
//! similarity is gated by Gaussian kernels over color and grid position.
//!
//! For downsampled features `f_i`, colors `I_i` and grid positions `p_i`:
//!
//! ```text
//! k1_ij = exp(-|p_i - p_j|² / (2 θ1²) - |I_i - I_j|² / (2 θ2))
//! k2_ij = exp(-|p_i - p_j|² / (2 θ3²))
//! P_ij  = cos(f_i, f_j) · (ω1 k1_ij + ω2 k2_ij)
//! F_i   = h(F_i) + up(Σ_j P_ij f_j)
//! ```
//!
//! `ω` and `θ` are stored as raw values and mapped through softplus, so they
//! stay positive under any update.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamId, ParamStore, Vars};
use crate::tensor::{softplus_inv, ResamplePlan, Tensor};

/// Feature stride of the maps entering [`Cae::refine`].
pub const INPUT_STRIDE: usize = 8;
/// Stride of the grid on which affinities are computed.
pub const AFFINITY_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaeMode {
    #[default]
    Full,
    /// Similarity fixed to 1; only the color/position kernels remain.
    RawOnly,
    /// Kernels fixed to 1; only feature similarity remains.
    FeatureOnly,
    /// Module bypassed.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaeConfig {
    pub mode: CaeMode,
    /// Aggregate `(Σ_j P_ij) f_i` instead of `Σ_j P_ij f_j`.
    pub literal_aggregation: bool,
    /// Use `2 θ2²` in the color term instead of `2 θ2`.
    pub theta2_squared: bool,
    pub init_omega: f64,
    pub init_theta_color: f64,
    /// Spatial bandwidth at init; `None` means a quarter of the grid diagonal.
    pub init_theta_pos: Option<f64>,
}

impl Default for CaeConfig {
    fn default() -> Self {
        CaeConfig {
            mode: CaeMode::Full,
            literal_aggregation: false,
            theta2_squared: false,
            init_omega: 0.5,
            init_theta_color: 0.3,
            init_theta_pos: None,
        }
    }
}

/// Positive kernel parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct KernelParams {
    pub omega1: Tensor,
    pub omega2: Tensor,
    pub theta1: Tensor,
    pub theta2: Tensor,
    pub theta3: Tensor,
}

impl KernelParams {
    /// Constant parameters, for evaluation and tests.
    pub fn constant(omega1: f64, omega2: f64, theta1: f64, theta2: f64, theta3: f64) -> Self {
        KernelParams {
            omega1: Tensor::scalar(omega1),
            omega2: Tensor::scalar(omega2),
            theta1: Tensor::scalar(theta1),
            theta2: Tensor::scalar(theta2),
            theta3: Tensor::scalar(theta3),
        }
    }
}

/// Parameter handles of the module inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Cae {
    pub cfg: CaeConfig,
    pub raw_omega1: ParamId,
    pub raw_omega2: ParamId,
    pub raw_theta1: ParamId,
    pub raw_theta2: ParamId,
    pub raw_theta3: ParamId,
    pub h: Conv2d,
}

fn pairwise_sq(points: &[f64], dim: usize) -> Vec<f64> {
    let n = points.len() / dim;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..dim)
                .map(|t| (points[i * dim + t] - points[j * dim + t]).powi(2))
                .sum();
        }
    }
    out
}

/// Row-major `(y, x)` coordinates of an `h × w` grid.
pub fn grid_positions(h: usize, w: usize) -> Vec<f64> {
    (0..h * w).flat_map(|i| [(i / w) as f64, (i % w) as f64]).collect()
}

/// `P[N, N]` for features `f[N, D]`, colors `N × 3` and positions `N × 2`.
pub fn pairwise_affinity(
    f: &Tensor,
    colors: &[f64],
    positions: &[f64],
    params: &KernelParams,
    mode: CaeMode,
    theta2_squared: bool,
) -> Result<Tensor> {
    let [n, _] = f.dims2()?;
    if colors.len() != 3 * n || positions.len() != 2 * n {
        return Err(Error::Shape(format!(
            "{n} features, {} color and {} position values",
            colors.len(),
            positions.len()
        )));
    }
    let similarity = || -> Result<Tensor> {
        if let Some(i) = f
            .data()
            .chunks(f.shape()[1])
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(Error::Numerical(format!("feature {i} has zero norm")));
        }
        let u = f.l2_normalize_rows(0.0)?;
        u.matmul_t(false, &u, true)
    };
    let kernels = || -> Result<Tensor> {
        let dp = Tensor::new(pairwise_sq(positions, 2), &[n, n]);
        let dc = Tensor::new(pairwise_sq(colors, 3), &[n, n]);
        let inv2sq = |t: &Tensor| t.powf(2.0).scale(2.0).recip();
        let color_den = if theta2_squared { inv2sq(&params.theta2) } else { params.theta2.scale(2.0).recip() };
        let k1 = dp.mul(&inv2sq(&params.theta1))?.add(&dc.mul(&color_den)?)?.neg().exp();
        let k2 = dp.mul(&inv2sq(&params.theta3))?.neg().exp();
        k1.mul(&params.omega1)?.add(&k2.mul(&params.omega2)?)
    };
    match mode {
        CaeMode::Full => similarity()?.mul(&kernels()?),
        CaeMode::RawOnly => kernels(),
        CaeMode::FeatureOnly => similarity(),
        CaeMode::Off => Err(Error::InvalidArgument("affinity requested with CAE off".into())),
    }
}

impl Cae {
    /// `dim` feature channels; `grid` is the affinity grid `(h, w)` used to
    /// pick the spatial bandwidth at init.
    pub fn new(store: &mut ParamStore, cfg: CaeConfig, dim: usize, grid: (usize, usize), _rng: &mut impl Rng) -> Self {
        let diag = ((grid.0 * grid.0 + grid.1 * grid.1) as f64).sqrt();
        let theta_pos = cfg.init_theta_pos.unwrap_or((diag / 4.0).max(0.5));
        let mut scalar = |name: &str, v: f64| store.add(format!("cae.{name}"), &[1], vec![softplus_inv(v)]);
        let raw_omega1 = scalar("raw_omega1", cfg.init_omega);
        let raw_omega2 = scalar("raw_omega2", cfg.init_omega);
        let raw_theta1 = scalar("raw_theta1", theta_pos);
        let raw_theta2 = scalar("raw_theta2", cfg.init_theta_color);
        let raw_theta3 = scalar("raw_theta3", theta_pos);
        let mut eye = vec![0.0; dim * dim];
        (0..dim).for_each(|i| eye[i * dim + i] = 1.0);
        let weight = store.add("cae.h.weight", &[dim, dim, 1, 1], eye);
        let bias = store.add("cae.h.bias", &[dim], vec![0.0; dim]);
        Cae {
            cfg,
            raw_omega1,
            raw_omega2,
            raw_theta1,
            raw_theta2,
            raw_theta3,
            h: Conv2d { weight, bias, stride: 1, pad: 0 },
        }
    }

    pub fn kernel_params(&self, vars: &Vars) -> KernelParams {
        KernelParams {
            omega1: vars.get(self.raw_omega1).softplus(),
            omega2: vars.get(self.raw_omega2).softplus(),
            theta1: vars.get(self.raw_theta1).softplus(),
            theta2: vars.get(self.raw_theta2).softplus(),
            theta3: vars.get(self.raw_theta3).softplus(),
        }
    }

    /// Current `(ω1, ω2, θ1, θ2, θ3)`.
    pub fn values(&self, store: &ParamStore) -> [f64; 5] {
        [self.raw_omega1, self.raw_omega2, self.raw_theta1, self.raw_theta2, self.raw_theta3]
            .map(|id| crate::tensor::softplus(store.get(id).data[0]))
    }

    /// Aggregated context at the affinity grid: `[B, D, h16, w16]`.
    pub fn context(&self, vars: &Vars, f: &Tensor, image: &Tensor) -> Result<Tensor> {
        let [b, d, h8, w8] = f.dims4()?;
        let [bi, ci, hi, wi] = image.dims4()?;
        if bi != b || ci != 3 {
            return Err(Error::Shape(format!("image batch {:?} for features {:?}", image.shape(), f.shape())));
        }
        let fd = f.avg_pool(AFFINITY_STRIDE / INPUT_STRIDE)?;
        let colors = image.detach().avg_pool(AFFINITY_STRIDE)?;
        let (hd, wd) = (h8.div_ceil(2), w8.div_ceil(2));
        if colors.shape()[2..] != [hd, wd] {
            return Err(Error::Shape(format!(
                "image {hi}x{wi} does not match features {h8}x{w8} at stride {INPUT_STRIDE}"
            )));
        }
        let n = hd * wd;
        let positions = grid_positions(hd, wd);
        let params = self.kernel_params(vars);
        let color_rows = colors.to_rows()?;
        let mut parts = Vec::with_capacity(b);
        for bi in 0..b {
            let rows = fd.narrow0(bi, 1)?.to_rows()?;
            let col = &color_rows.data()[bi * n * 3..(bi + 1) * n * 3];
            let p = pairwise_affinity(&rows, col, &positions, &params, self.cfg.mode, self.cfg.theta2_squared)?;
            let agg = if self.cfg.literal_aggregation {
                rows.scale_rows(&p.sum_rows()?)?
            } else {
                p.matmul(&rows)?
            };
            parts.push(agg.from_rows(1, hd, wd)?);
        }
        let _ = d;
        Tensor::cat0(&parts)
    }

    /// Refined features at the input's 1/8 grid.
    pub fn refine(&self, vars: &Vars, f: &Tensor, image: &Tensor) -> Result<Tensor> {
        if self.cfg.mode == CaeMode::Off {
            return Ok(f.clone());
        }
        let [_, _, h8, w8] = f.dims4()?;
        let ctx = self.context(vars, f, image)?;
        let [_, _, hd, wd] = ctx.dims4()?;
        let up = ctx.resample(&Rc::new(ResamplePlan::resize(hd, wd, h8, w8)))?;
        self.h.forward(vars, f)?.add(&up)
    }
}
