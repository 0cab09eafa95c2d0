//! Run configuration: defaults, a TOML file, and dotted `key=value`
//! overrides, merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cae::CaeConfig;
use crate::crf::CrfParams;
use crate::error::{Error, IoContext, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pgg::RankScope;

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "SEGBOOT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; defaults to `<out>/synth-data`.
    pub root: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PggConfig {
    /// When false the weak loss weight is forced to 0.
    pub enabled: bool,
    pub keep_frac: f64,
    pub scope: RankScope,
    /// Side length pyramid views are resized to before embedding.
    pub view_size: usize,
    pub kmeans_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub k_pixel: usize,
    pub k_global: usize,
    /// Training resolution; full images and crops are resized to it.
    pub crop_size: usize,
    pub clip_norm: f64,
    pub kmeans_iters: usize,
    /// Per-image cap on pixels fed to the per-epoch K-means fit.
    pub fit_pixels_per_image: usize,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub kmeans_iters: usize,
    pub fit_pixels_per_image: usize,
    pub baseline_shuffles: usize,
    pub overlays: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub cae: CaeConfig,
    pub pgg: PggConfig,
    pub train: TrainConfig,
    pub crf: CrfParams,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk-scale settings.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataConfig { root: None, n_train: 200, n_test: 50, size: 64, classes: 4 },
            model: ModelConfig::desk(),
            cae: CaeConfig::default(),
            pgg: PggConfig { enabled: true, keep_frac: 0.4, scope: RankScope::Dataset, view_size: 64, kmeans_iters: 100 },
            train: TrainConfig {
                epochs: 5,
                batch_size: 16,
                lr: 1e-4,
                weight_decay: 0.0,
                k_pixel: 4,
                k_global: 4,
                crop_size: 64,
                clip_norm: 10.0,
                kmeans_iters: 50,
                fit_pixels_per_image: 1024,
                loss: LossConfig::default(),
                pretrain: PretrainConfig { steps: 150, batch_size: 16, lr: 1e-3, tau: 0.2 },
            },
            crf: CrfParams::default(),
            eval: EvalConfig { kmeans_iters: 100, fit_pixels_per_image: 1024, baseline_shuffles: 10, overlays: true },
        }
    }
}

/// Recursively overlays `src` onto `dst`, rejecting keys `dst` lacks.
fn merge(dst: &mut toml::Table, src: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s, &key)?,
            (Some(slot), v) => *slot = v,
            (None, v) if optional_key(&key) => {
                dst.insert(k, v);
            }
            (None, _) => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }
    Ok(())
}

/// Keys whose default is unset and therefore absent from the default table.
fn optional_key(key: &str) -> bool {
    matches!(key, "data.root" | "cae.init_theta_pos")
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override to a table.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{assignment}`")))?;
    let mut node = &mut *table;
    for p in parts {
        node = match node.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        };
    }
    if !node.contains_key(leaf) && !optional_key(key) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    node.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then `env_out`, then each `sets` entry.
    pub fn load(file: Option<&Path>, env_out: Option<&str>, sets: &[String]) -> Result<RunConfig> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            if !path.exists() {
                return Err(Error::Config(format!("config file {} not found", path.display())));
            }
            let text = fs::read_to_string(path).at(path)?;
            let src: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, src, "")?;
        }
        if let Some(out) = env_out.filter(|s| !s.is_empty()) {
            table.insert("out".into(), toml::Value::String(out.into()));
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let positive = [
            ("data.n_train", self.data.n_train),
            ("data.n_test", self.data.n_test),
            ("train.epochs", t.epochs),
            ("train.batch_size", t.batch_size),
            ("train.k_pixel", t.k_pixel),
            ("train.k_global", t.k_global),
            ("train.kmeans_iters", t.kmeans_iters),
            ("train.fit_pixels_per_image", t.fit_pixels_per_image),
            ("train.pretrain.batch_size", t.pretrain.batch_size),
            ("pgg.kmeans_iters", self.pgg.kmeans_iters),
            ("eval.kmeans_iters", self.eval.kmeans_iters),
            ("eval.fit_pixels_per_image", self.eval.fit_pixels_per_image),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(t.lr > 0.0) || !(t.pretrain.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(t.pretrain.tau > 0.0) {
            return Err(Error::Config("train.pretrain.tau must be positive".into()));
        }
        if t.crop_size < 32 || t.crop_size % 16 != 0 {
            return Err(Error::Config(format!("train.crop_size must be a multiple of 16 and >= 32, got {}", t.crop_size)));
        }
        if self.pgg.view_size < 32 {
            return Err(Error::Config("pgg.view_size must be >= 32".into()));
        }
        if !(self.pgg.keep_frac > 0.0 && self.pgg.keep_frac <= 1.0) {
            return Err(Error::Config("pgg.keep_frac must lie in (0, 1]".into()));
        }
        if t.pretrain.steps > 0 && t.pretrain.batch_size < 2 {
            return Err(Error::Config("train.pretrain.batch_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.out.join("synth-data"))
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    /// Weak-loss weight after applying the PGG switch.
    pub fn weak_weight(&self) -> f64 {
        if self.pgg.enabled {
            self.train.loss.weak_weight
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::load(None, None, &[]).unwrap(), cfg);
    }

    #[test]
    fn file_env_and_overrides_merge_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 3\nout = \"a\"\n[train]\nepochs = 2\n[cae]\nmode = \"raw_only\"\n").unwrap();
        let sets = vec!["train.k_pixel=6".to_string(), "out=c".to_string(), "cae.init_theta_pos=2.5".to_string()];
        let cfg = RunConfig::load(Some(&path), Some("b"), &sets).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.k_pixel, 6);
        assert_eq!(cfg.cae.mode, crate::cae::CaeMode::RawOnly);
        assert_eq!(cfg.cae.init_theta_pos, Some(2.5));
        assert_eq!(cfg.out, PathBuf::from("c"));
        assert_eq!(RunConfig::load(Some(&path), Some("b"), &[]).unwrap().out, PathBuf::from("b"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in ["train.epoch=3", "nope=1", "train.loss.extra=1", "train=1", "seed"] {
            assert!(matches!(RunConfig::load(None, None, &[bad.to_string()]), Err(Error::Config(_))), "{bad}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nwidth = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&path), None, &[]), Err(Error::Config(_))));
        for bad in ["train.lr=0", "train.crop_size=40", "pgg.keep_frac=0", "train.epochs=0", "train.lr=\"x\""] {
            assert!(RunConfig::load(None, None, &[bad.to_string()]).is_err(), "{bad}");
        }
    }

    #[test]
    fn pgg_switch_controls_weak_weight() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.weak_weight(), 1.0);
        cfg.pgg.enabled = false;
        assert_eq!(cfg.weak_weight(), 0.0);
    }
}
