//! Model checkpoints: parameters (and optionally Adam moments) as F64
//! safetensors with a JSON metadata record.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::cae::CaeConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, Param};

pub const FORMAT: &str = "segboot-checkpoint";
pub const VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "model.safetensors";
const META_KEY: &str = "segboot";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Everything needed to rebuild a model with the same parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub cae: CaeConfig,
    pub n_global: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model> {
        Model::new(&self.model, self.cae, self.n_global, self.input_size, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    /// Completed training epochs (0 for pretraining output).
    pub epoch: usize,
    /// Free-form provenance such as the run config snapshot.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<Param>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    /// Rebuilds the model and loads its parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = self.meta.spec.build()?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes `<dir>/model.safetensors`.
pub fn save_checkpoint(dir: &Path, model: &Model, adam: Option<&Adam>, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), f64_bytes(&p.data)))
        .collect();
    let adam_step = adam.map(|opt| {
        let (step, m, v) = opt.state();
        for (p, (mi, vi)) in model.store.iter().zip(m.iter().zip(v)) {
            blobs.push((format!("{ADAM_M}{}", p.name), p.shape.clone(), f64_bytes(mi)));
            blobs.push((format!("{ADAM_V}{}", p.name), p.shape.clone(), f64_bytes(vi)));
        }
        step
    });
    let views = blobs
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F64, s.clone(), b).map(|v| (n.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| corrupt(format!("{e:?}")))?;
    let mut record = serde_json::to_value(meta)?;
    if let Some(step) = adam_step {
        record["adam_step"] = step.into();
    }
    let info = HashMap::from([(META_KEY.to_string(), record.to_string())]);
    let bytes = safetensors::tensor::serialize(views, &Some(info)).map_err(|e| corrupt(format!("{e:?}")))?;
    let path = dir.join(WEIGHTS_FILE);
    fs::write(&path, bytes).at(&path)
}

fn corrupt(reason: String) -> Error {
    Error::Corrupt { what: "checkpoint".into(), reason }
}

fn read_f64(view: &TensorView) -> Result<Vec<f64>> {
    if view.dtype() != Dtype::F64 {
        return Err(corrupt(format!("dtype {:?}, expected F64", view.dtype())));
    }
    Ok(view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Loads `<dir>/model.safetensors`; a missing file names `producer`.
pub fn load_checkpoint(dir: &Path, producer: &str) -> Result<Checkpoint> {
    let path = dir.join(WEIGHTS_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact { path, producer: producer.into() });
    }
    let bytes = fs::read(&path).at(&path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(format!("{e:?}")))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| corrupt("metadata record missing".into()))?;
    let mut record: serde_json::Value = serde_json::from_str(raw)?;
    let adam_step = record.as_object_mut().and_then(|o| o.remove("adam_step")).and_then(|v| v.as_u64());
    let meta: CheckpointMeta = serde_json::from_value(record)?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(corrupt(format!("format {} v{}", meta.format, meta.version)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(format!("{e:?}")))?;
    let template = meta.spec.build()?;
    let mut params = Vec::with_capacity(template.store.len());
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in template.store.iter() {
        let fetch = |name: &str| -> Result<Vec<f64>> {
            let view = st.tensor(name).map_err(|_| corrupt(format!("missing tensor {name}")))?;
            if view.shape() != p.shape.as_slice() {
                return Err(corrupt(format!("tensor {name} has shape {:?}, expected {:?}", view.shape(), p.shape)));
            }
            read_f64(&view)
        };
        params.push(Param { name: p.name.clone(), shape: p.shape.clone(), data: fetch(&p.name)? });
        if adam_step.is_some() {
            m.push(fetch(&format!("{ADAM_M}{}", p.name))?);
            v.push(fetch(&format!("{ADAM_V}{}", p.name))?);
        }
    }
    let adam = adam_step.map(|step| AdamState { step, m, v });
    Ok(Checkpoint { meta, params, adam })
}
