//! Strided convolutional encoder with an FPN-style decoder (stride 8), a
//! projector for global embeddings and the CAM classification heads.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cae::{Cae, CaeConfig, AFFINITY_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore, Vars};
use crate::tensor::{ResamplePlan, Tensor};

pub const OUTPUT_STRIDE: usize = 8;
pub const MIN_INPUT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    /// `q = GAP(g(F))`
    Classic,
    /// `q = g1(ReLU(GAP(g2(F))))`
    #[default]
    Modified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the four encoder stages.
    pub widths: [usize; 4],
    /// Output embedding dimension.
    pub dim: usize,
    pub cam: CamMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { widths: [32, 64, 128, 256], dim: 256, cam: CamMode::Modified }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig { widths: [16, 32, 64, 64], dim: 64, cam: CamMode::Modified }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stages: [Conv2d; 4],
    pub lat2: Conv2d,
    pub lat3: Conv2d,
    pub lat4: Conv2d,
    pub smooth: Conv2d,
    pub dim: usize,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.widths;
        let cin = [3, w[0], w[1], w[2]];
        let stages = std::array::from_fn(|i| Conv2d::new(store, &format!("enc.{i}"), cin[i], w[i], 3, 2, rng));
        FeatureExtractor {
            stages,
            lat2: Conv2d::new(store, "fpn.lat2", w[1], cfg.dim, 1, 1, rng),
            lat3: Conv2d::new(store, "fpn.lat3", w[2], cfg.dim, 1, 1, rng),
            lat4: Conv2d::new(store, "fpn.lat4", w[3], cfg.dim, 1, 1, rng),
            smooth: Conv2d::new(store, "fpn.smooth", cfg.dim, cfg.dim, 3, 1, rng),
            dim: cfg.dim,
        }
    }

    /// `[B, 3, H, W] -> [B, D, ⌈H/8⌉, ⌈W/8⌉]`.
    pub fn forward(&self, vars: &Vars, images: &Tensor) -> Result<Tensor> {
        let [_, c, h, w] = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} is smaller than {MIN_INPUT}x{MIN_INPUT}"
            )));
        }
        let mut x = images.clone();
        let mut feats = Vec::with_capacity(4);
        for s in &self.stages {
            x = s.forward(vars, &x)?.relu();
            feats.push(x.clone());
        }
        let [_, _, h3, w3] = feats[2].dims4()?;
        let [_, _, h4, w4] = feats[3].dims4()?;
        let top = self
            .lat4
            .forward(vars, &feats[3])?
            .resample(&Rc::new(ResamplePlan::resize(h4, w4, h3, w3)))?;
        let fine = self.lat2.forward(vars, &feats[1])?.avg_pool(2)?;
        let merged = self.lat3.forward(vars, &feats[2])?.add(&top)?.add(&fine)?;
        self.smooth.forward(vars, &merged)
    }
}

/// Two-layer perceptron on pooled features, unit-normalized output.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    pub l1: Linear,
    pub l2: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Projector { l1: Linear::new(store, "proj.0", dim, dim, rng), l2: Linear::new(store, "proj.1", dim, dim, rng) }
    }

    /// `[B, D, h, w] -> [B, D]`, rows of unit norm.
    pub fn forward(&self, vars: &Vars, features: &Tensor) -> Result<Tensor> {
        let pooled = features.global_avg_pool()?;
        let z = self.l2.forward(vars, &self.l1.forward(vars, &pooled)?.relu())?;
        let d = z.shape()[1];
        if let Some(i) = z.data().chunks(d).position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Numerical(format!("embedding {i} is the zero vector")));
        }
        z.l2_normalize_rows(0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum CamHead {
    Classic { g: Conv2d },
    Modified { g2: Conv2d, g1: Linear },
}

impl CamHead {
    pub fn new(store: &mut ParamStore, mode: CamMode, dim: usize, n_global: usize, rng: &mut ChaCha8Rng) -> Self {
        match mode {
            CamMode::Classic => CamHead::Classic { g: Conv2d::new(store, "cam.g", dim, n_global, 1, 1, rng) },
            CamMode::Modified => CamHead::Modified {
                g2: Conv2d::new(store, "cam.g2", dim, n_global, 1, 1, rng),
                g1: Linear::new(store, "cam.g1", n_global, n_global, rng),
            },
        }
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        let w = match self {
            CamHead::Classic { g } => g.weight,
            CamHead::Modified { g2, .. } => g2.weight,
        };
        store.get(w).shape[1]
    }

    /// `[B, D, h, w] -> [B, K_g]`.
    pub fn forward(&self, vars: &Vars, f: &Tensor) -> Result<Tensor> {
        let w = match self {
            CamHead::Classic { g } => g.weight,
            CamHead::Modified { g2, .. } => g2.weight,
        };
        let want = vars.get(w).shape()[1];
        let [_, d, _, _] = f.dims4()?;
        if d != want {
            return Err(Error::Shape(format!("CAM head expects {want} channels, got {d}")));
        }
        match self {
            CamHead::Classic { g } => g.forward(vars, f)?.global_avg_pool(),
            CamHead::Modified { g2, g1 } => g1.forward(vars, &g2.forward(vars, f)?.global_avg_pool()?.relu()),
        }
    }
}

/// All trainable parts and their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub net: FeatureExtractor,
    pub projector: Projector,
    pub head: CamHead,
    pub cae: Cae,
}

impl Model {
    /// `input_size` is the training resolution, used for the CAE bandwidth init.
    pub fn new(cfg: &ModelConfig, cae_cfg: CaeConfig, n_global: usize, input_size: usize, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || cfg.widths.contains(&0) || n_global == 0 {
            return Err(Error::Config("model widths, dim and K_global must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = FeatureExtractor::new(&mut store, cfg, &mut rng);
        let projector = Projector::new(&mut store, cfg.dim, &mut rng);
        let head = CamHead::new(&mut store, cfg.cam, cfg.dim, n_global, &mut rng);
        let grid = input_size.div_ceil(AFFINITY_STRIDE);
        let cae = Cae::new(&mut store, cae_cfg, cfg.dim, (grid, grid), &mut rng);
        Ok(Model { store, net, projector, head, cae })
    }

    pub fn dim(&self) -> usize {
        self.net.dim
    }

    /// Backbone features and their CAE refinement.
    pub fn forward(&self, vars: &Vars, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.net.forward(vars, images)?;
        let refined = self.cae.refine(vars, &f, images)?;
        Ok((f, refined))
    }
}

/// Backbone features with frozen parameters.
pub fn extract_features(model: &Model, images: &Tensor) -> Result<Tensor> {
    model.net.forward(&model.store.vars(false), images)
}

/// Unit-norm global embedding per image.
pub fn global_embed(model: &Model, images: &Tensor) -> Result<Tensor> {
    let vars = model.store.vars(false);
    model.projector.forward(&vars, &model.net.forward(&vars, images)?)
}

pub fn cam_logits(model: &Model, f: &Tensor) -> Result<Tensor> {
    model.head.forward(&model.store.vars(false), f)
}
