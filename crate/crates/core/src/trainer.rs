//! Instance-discrimination pretraining and the per-epoch
//! cluster-then-train schedule.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta, ModelSpec};
use crate::clustering::{assign, kmeans_fit, ClusterModel, FeatureCache, FeatureCacheWriter, InMemory};
use crate::config::{PretrainConfig, RunConfig};
use crate::data::{
    apply_geometric, apply_geometric_tensor, apply_photometric, sample_transform_specs, BranchViews, Domain, Image,
    ImageSample,
};
use crate::error::{Error, IoContext, Result};
use crate::losses::{l_pixel, l_total, l_weak, inverse_frequency_weights, BranchTargets, LossReport, PixelLabel, WeakTarget};
use crate::model::{Model, OUTPUT_STRIDE};
use crate::nn::{Adam, AdamConfig};
use crate::pgg::{extract_pyramid_views, PseudoLabelSet};
use crate::tensor::Tensor;

pub const METRICS_LOG: &str = "metrics.log";
pub const CLUSTERS_BRANCH1: &str = "clusters_branch1.json";
pub const CLUSTERS_BRANCH2: &str = "clusters_branch2.json";
const FEATURE_SHARD_ROWS: usize = 16_384;
const GEOMETRY_ALIGN: usize = OUTPUT_STRIDE;

const TAG_PRETRAIN: u64 = 1;
const TAG_VIEWS: u64 = 2;
const TAG_ORDER: u64 = 3;
const TAG_FIT: u64 = 4;

/// Independent deterministic stream for a tuple of keys.
pub fn keyed_rng(keys: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for k in keys {
        h.update(k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn ckpt_dir(train_dir: &Path, epoch: usize) -> PathBuf {
    train_dir.join(format!("ckpt_epoch_{epoch}"))
}

pub fn model_spec(cfg: &RunConfig) -> ModelSpec {
    ModelSpec {
        model: cfg.model.clone(),
        cae: cfg.cae,
        n_global: cfg.train.k_global,
        input_size: cfg.train.crop_size,
        seed: cfg.seed,
    }
}

pub fn checkpoint_meta(cfg: &RunConfig, epoch: usize, extra: BTreeMap<String, String>) -> CheckpointMeta {
    let mut extra = extra;
    extra.insert("config".into(), cfg.to_toml());
    CheckpointMeta {
        format: checkpoint::FORMAT.into(),
        version: checkpoint::VERSION,
        spec: model_spec(cfg),
        epoch,
        extra,
    }
}

fn adam_for(model: &Model, lr: f64, weight_decay: f64) -> Adam {
    Adam::new(AdamConfig { lr, weight_decay, ..Default::default() }, &model.store)
}

/// Random resized crop with flip plus photometric jitter.
fn instance_view(image: &Image, rng: &mut ChaCha8Rng, size: usize) -> Result<Image> {
    let (p, _, g) = sample_transform_specs(rng, (image.height, image.width), (size, size), GEOMETRY_ALIGN);
    apply_geometric(&apply_photometric(image, &p), &g, Domain::Image)
}

/// Symmetric InfoNCE over `z[2B, D]` (unit rows), positives at `i ± B`.
pub fn info_nce(z: &Tensor, tau: f64) -> Result<Tensor> {
    let [n, _] = z.dims2()?;
    if n < 2 || n % 2 != 0 {
        return Err(Error::Shape(format!("InfoNCE needs an even batch of two views, got {n}")));
    }
    let b = n / 2;
    let mut mask = vec![0.0; n * n];
    (0..n).for_each(|i| mask[i * n + i] = -1e9);
    let logits = z.matmul_t(false, z, true)?.scale(1.0 / tau).add(&Tensor::new(mask, &[n, n]))?;
    let targets: Vec<usize> = (0..n).map(|i| if i < b { i + b } else { i - b }).collect();
    Ok(logits.nll_sum(&targets, None)?.scale(1.0 / n as f64))
}

/// Trains the backbone and projector with a two-view contrastive objective.
/// Returns the loss per step; zero steps leave the model untouched.
pub fn pretrain_instance_embeddings(
    model: &mut Model,
    images: &[&Image],
    cfg: &PretrainConfig,
    view_size: usize,
    seed: u64,
    clip_norm: f64,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if images.len() < 2 {
        return Err(Error::InvalidArgument("pretraining needs at least two images".into()));
    }
    let b = cfg.batch_size.min(images.len());
    let mut adam = adam_for(model, cfg.lr, 0.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = keyed_rng(&[seed, TAG_PRETRAIN, step as u64]);
        let picks = rand::seq::index::sample(&mut rng, images.len(), b).into_vec();
        let mut a = Vec::with_capacity(b);
        let mut c = Vec::with_capacity(b);
        for &i in &picks {
            a.push(instance_view(images[i], &mut rng, view_size)?);
            c.push(instance_view(images[i], &mut rng, view_size)?);
        }
        let views: Vec<&Image> = a.iter().chain(&c).collect();
        let vars = model.store.vars(true);
        let f = model.net.forward(&vars, &Image::batch_tensor(&views)?)?;
        let z = model.projector.forward(&vars, &f)?;
        let loss = info_nce(&z, cfg.tau)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss is {value} at step {step}")));
        }
        let grads = vars.collect_grads(&loss.backward()?);
        adam.step(&mut model.store, &grads, Some(clip_norm))?;
        losses.push(value);
        log::debug!("pretrain step {step} loss {value:.6}");
    }
    Ok(losses)
}

/// One training image: a full image or a selected pyramid crop at the
/// training resolution.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub key: String,
    pub sample: ImageSample,
    pub weak: WeakTarget,
}

/// Selected views of `labels`, in cache order.
pub fn build_train_items(samples: &[ImageSample], labels: &PseudoLabelSet, size: usize) -> Result<Vec<TrainItem>> {
    let by_id: HashMap<&str, &ImageSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut views_of: HashMap<&str, Vec<crate::pgg::PyramidView>> = HashMap::new();
    let mut items = Vec::new();
    for entry in labels.selected() {
        let sample = by_id.get(entry.parent_id.as_str()).ok_or_else(|| Error::Corrupt {
            what: "pseudo labels".into(),
            reason: format!("unknown image {}", entry.parent_id),
        })?;
        if !views_of.contains_key(entry.parent_id.as_str()) {
            views_of.insert(entry.parent_id.as_str(), extract_pyramid_views(sample, size)?);
        }
        let view = views_of[entry.parent_id.as_str()]
            .iter()
            .find(|v| v.slot == entry.slot)
            .expect("every slot is extracted");
        let key = format!("{}#{}", entry.parent_id, entry.slot.name());
        items.push(TrainItem {
            sample: ImageSample::new(key.clone(), view.image.clone(), None)?,
            key,
            weak: WeakTarget { label: entry.label, selected: true },
        });
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no selected views to train on".into()));
    }
    Ok(items)
}

fn branch_views(item: &TrainItem, seed: u64, epoch: usize, index: usize, size: usize) -> Result<BranchViews> {
    let mut rng = keyed_rng(&[seed, TAG_VIEWS, epoch as u64, index as u64]);
    crate::data::make_branch_views(&item.sample, &mut rng, (size, size), GEOMETRY_ALIGN)
}

/// Forward both branches of a batch; branch 1 gets the shared geometric
/// transform in the feature domain. Returns `[M, D]` row tensors.
/// Also returns both branches' refined maps for the CAM head.
fn branch_rows(model: &Model, vars: &crate::nn::Vars, views: &[BranchViews]) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let v1: Vec<&Image> = views.iter().map(|v| &v.view1_image).collect();
    let v2: Vec<&Image> = views.iter().map(|v| &v.view2_image).collect();
    let (_, r1) = model.forward(vars, &Image::batch_tensor(&v1)?)?;
    let (_, r2) = model.forward(vars, &Image::batch_tensor(&v2)?)?;
    let mut parts = Vec::with_capacity(views.len());
    for (b, v) in views.iter().enumerate() {
        parts.push(apply_geometric_tensor(&r1.narrow0(b, 1)?, &v.shared_geo, Domain::FeatureMap { stride: OUTPUT_STRIDE })?);
    }
    let g1 = Tensor::cat0(&parts)?;
    if g1.shape() != r2.shape() {
        return Err(Error::Shape(format!("branch grids {:?} vs {:?}", g1.shape(), r2.shape())));
    }
    Ok((g1.to_rows()?, r2.to_rows()?, r1, r2))
}

/// Summary of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: Vec<LossReport>,
    pub objective_branch1: f64,
    pub objective_branch2: f64,
    /// Digest of centers and assignments before and after the gradient phase.
    pub targets_digest: (String, String),
    pub pseudo_label_hash: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochSummary>,
    /// First epoch run by this call (later than 1 when resumed).
    pub start_epoch: usize,
}

struct EpochTargets {
    centers1: ClusterModel,
    centers2: ClusterModel,
    labels1: Vec<Vec<usize>>,
    labels2: Vec<Vec<usize>>,
    objective1: f64,
    objective2: f64,
}

impl EpochTargets {
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in self.centers1.centers.iter().chain(&self.centers2.centers) {
            c.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        for l in self.labels1.iter().chain(&self.labels2).flatten() {
            h.update((*l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn rows_of(t: &Tensor) -> Vec<f64> {
    let d = t.shape()[1];
    let mut v = t.data().to_vec();
    for r in v.chunks_mut(d) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|x| *x /= n);
        }
    }
    v
}

/// Frozen forward pass over all items into two on-disk caches, then
/// K-means per branch.
fn cluster_epoch(cfg: &RunConfig, model: &Model, items: &[TrainItem], epoch: usize, work: &Path) -> Result<EpochTargets> {
    let size = cfg.train.crop_size;
    let d = model.dim();
    let dir1 = work.join("cache_branch1");
    let dir2 = work.join("cache_branch2");
    let mut w1 = FeatureCacheWriter::create(&dir1, d, FEATURE_SHARD_ROWS)?;
    let mut w2 = FeatureCacheWriter::create(&dir2, d, FEATURE_SHARD_ROWS)?;
    let vars = model.store.vars(false);
    let mut fit1 = Vec::new();
    let mut fit2 = Vec::new();
    let mut fit_rng = keyed_rng(&[cfg.seed, TAG_FIT, epoch as u64]);
    for (chunk_idx, chunk) in items.chunks(cfg.train.batch_size).enumerate() {
        let base = chunk_idx * cfg.train.batch_size;
        let views = chunk
            .iter()
            .enumerate()
            .map(|(j, it)| branch_views(it, cfg.seed, epoch, base + j, size))
            .collect::<Result<Vec<_>>>()?;
        let (rows1, rows2, _, _) = branch_rows(model, &vars, &views)?;
        let (a, b) = (rows_of(&rows1), rows_of(&rows2));
        let per = a.len() / d / chunk.len();
        let keep = per.min(cfg.train.fit_pixels_per_image);
        for j in 0..chunk.len() {
            let (s, e) = (j * per * d, (j + 1) * per * d);
            w1.append(&(base + j).to_string(), &a[s..e])?;
            w2.append(&(base + j).to_string(), &b[s..e])?;
            let picks = if keep == per {
                (0..per).collect()
            } else {
                let mut p = rand::seq::index::sample(&mut fit_rng, per, keep).into_vec();
                p.sort_unstable();
                p
            };
            for p in picks {
                fit1.extend_from_slice(&a[s + p * d..s + (p + 1) * d]);
                fit2.extend_from_slice(&b[s + p * d..s + (p + 1) * d]);
            }
        }
    }
    let cache1 = w1.finish()?;
    let cache2 = w2.finish()?;
    let k = cfg.train.k_pixel;
    let iters = cfg.train.kmeans_iters;
    let f1 = kmeans_fit(&InMemory { data: &fit1, dim: d }, k, iters, cfg.seed ^ ((epoch as u64) << 1))?;
    let f2 = kmeans_fit(&InMemory { data: &fit2, dim: d }, k, iters, cfg.seed ^ ((epoch as u64) << 1 | 1))?;
    let labels_of = |cache: &FeatureCache, m: &ClusterModel| -> Result<Vec<Vec<usize>>> {
        (0..items.len()).map(|i| Ok(assign(m, &cache.get(&i.to_string())?, d)?.labels)).collect()
    };
    let labels1 = labels_of(&cache1, &f1.model)?;
    let labels2 = labels_of(&cache2, &f2.model)?;
    let objective1 = f1.objective.last().copied().unwrap_or(f64::NAN);
    let objective2 = f2.objective.last().copied().unwrap_or(f64::NAN);
    Ok(EpochTargets { centers1: f1.model, centers2: f2.model, labels1, labels2, objective1, objective2 })
}

fn centers_tensor(m: &ClusterModel) -> Tensor {
    Tensor::new(m.centers.concat(), &[m.k, m.d])
}

fn format_step(epoch: usize, step: usize, r: &LossReport, grad_norm: f64) -> String {
    format!(
        "epoch={epoch} step={step} l_within={:.9} l_cross={:.9} l_pixel={:.9} l_weak={:.9} l_total={:.9} n_pixels={} n_views={} grad_norm={:.9}",
        r.l_within, r.l_cross, r.l_pixel, r.l_weak, r.l_total, r.n_pixels, r.n_labeled_views, grad_norm
    )
}

/// Latest `ckpt_epoch_<n>` under `train_dir`.
pub fn latest_checkpoint(train_dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = fs::read_dir(train_dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("ckpt_epoch_")?.parse().ok()?;
            e.path().join(checkpoint::WEIGHTS_FILE).exists().then(|| (n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
}

/// Runs `cfg.train.epochs` epochs of offline clustering followed by
/// gradient steps on the total loss, checkpointing after each epoch.
///
/// With `resume`, training continues after the latest checkpoint in
/// `train_dir`. `labels_dir` is re-read after every epoch to confirm the
/// frozen pseudo labels did not change.
pub fn train(
    cfg: &RunConfig,
    init: &Checkpoint,
    samples: &[ImageSample],
    labels: &PseudoLabelSet,
    labels_dir: Option<&Path>,
    train_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    let size = cfg.train.crop_size;
    let items = build_train_items(samples, labels, size)?;
    let label_hash = labels.hash();
    fs::create_dir_all(train_dir).at(train_dir)?;

    let mut model = init.model()?;
    let mut adam = adam_for(&model, cfg.train.lr, cfg.train.weight_decay);
    let mut start_epoch = 1;
    let log_path = train_dir.join(METRICS_LOG);
    let mut kept_log = String::new();
    if let Some((n, dir)) = latest_checkpoint(train_dir).filter(|_| resume) {
        let ck = checkpoint::load_checkpoint(&dir, "train")?;
        model = ck.model()?;
        if let Some(st) = ck.adam {
            adam.set_state(st.step, st.m, st.v)?;
        }
        start_epoch = n + 1;
        if let Ok(text) = fs::read_to_string(&log_path) {
            for line in text.lines() {
                let e = line.strip_prefix("epoch=").and_then(|r| r.split(' ').next()).and_then(|v| v.parse::<usize>().ok());
                if e.is_some_and(|e| e <= n) {
                    kept_log.push_str(line);
                    kept_log.push('\n');
                }
            }
        }
        log::info!("resuming after epoch {n}");
    }
    fs::write(&log_path, &kept_log).at(&log_path)?;
    let mut log_file = fs::OpenOptions::new().append(true).open(&log_path).at(&log_path)?;

    let weak_weight = cfg.weak_weight();
    let mut epochs = Vec::new();
    for epoch in start_epoch..=cfg.train.epochs {
        let work = train_dir.join(format!("work_epoch_{epoch}"));
        let targets = cluster_epoch(cfg, &model, &items, epoch, &work)?;
        let digest_before = targets.digest();
        let c1 = centers_tensor(&targets.centers1);
        let c2 = centers_tensor(&targets.centers2);
        let w1 = cfg.train.loss.balanced.then(|| inverse_frequency_weights(&targets.labels1.concat(), cfg.train.k_pixel));
        let w2 = cfg.train.loss.balanced.then(|| inverse_frequency_weights(&targets.labels2.concat(), cfg.train.k_pixel));

        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut keyed_rng(&[cfg.seed, TAG_ORDER, epoch as u64]));
        let mut steps = Vec::new();
        for (step, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let views = batch
                .iter()
                .map(|&i| branch_views(&items[i], cfg.seed, epoch, i, size))
                .collect::<Result<Vec<_>>>()?;
            let vars = model.store.vars(true);
            let (rows1, rows2, r1, r2) = branch_rows(&model, &vars, &views)?;
            let f1 = rows1.l2_normalize_rows(1e-12)?;
            let f2 = rows2.l2_normalize_rows(1e-12)?;
            let y1: Vec<PixelLabel> = batch.iter().flat_map(|&i| targets.labels1[i].iter().map(|&l| Some(l))).collect();
            let y2: Vec<PixelLabel> = batch.iter().flat_map(|&i| targets.labels2[i].iter().map(|&l| Some(l))).collect();
            let (within, cross, n_pix) = l_pixel(
                &BranchTargets { features: &f1, labels: &y1, centers: &c1, cluster_weights: w1.as_deref() },
                &BranchTargets { features: &f2, labels: &y2, centers: &c2, cluster_weights: w2.as_deref() },
            )?;
            let weak_targets: Vec<WeakTarget> = batch.iter().chain(batch).map(|&i| items[i].weak).collect();
            let weak = if weak_weight == 0.0 {
                Tensor::scalar(0.0)
            } else {
                l_weak(&model.head.forward(&vars, &Tensor::cat0(&[r1, r2])?)?, &weak_targets)?
            };
            let (total, report) = l_total(&within, &cross, &weak, weak_weight, n_pix, weak_targets.len())?;
            let grads = vars.collect_grads(&total.backward()?);
            let norm = adam.step(&mut model.store, &grads, Some(cfg.train.clip_norm))?;
            writeln!(log_file, "{}", format_step(epoch, step, &report, norm)).at(&log_path)?;
            steps.push(report);
        }
        let digest_after = targets.digest();

        if let Some(dir) = labels_dir {
            let on_disk = PseudoLabelSet::load(dir)?.hash();
            if on_disk != label_hash {
                return Err(Error::Corrupt {
                    what: "pseudo labels".into(),
                    reason: format!("hash changed during training: {label_hash} -> {on_disk}"),
                });
            }
        }
        let dir = ckpt_dir(train_dir, epoch);
        let extra = BTreeMap::from([
            ("pseudo_label_hash".to_string(), label_hash.clone()),
            ("targets_digest".to_string(), digest_before.clone()),
        ]);
        checkpoint::save_checkpoint(&dir, &model, Some(&adam), &checkpoint_meta(cfg, epoch, extra))?;
        targets.centers1.save(&dir.join(CLUSTERS_BRANCH1))?;
        targets.centers2.save(&dir.join(CLUSTERS_BRANCH2))?;
        fs::remove_dir_all(&work).at(&work)?;
        log::info!(
            "epoch {epoch}: {} steps, mean l_total {:.4}",
            steps.len(),
            steps.iter().map(|r| r.l_total).sum::<f64>() / steps.len().max(1) as f64
        );
        epochs.push(EpochSummary {
            epoch,
            steps,
            objective_branch1: targets.objective1,
            objective_branch2: targets.objective2,
            targets_digest: (digest_before, digest_after),
            pseudo_label_hash: label_hash.clone(),
        });
    }
    Ok(TrainOutcome { model, epochs, start_epoch })
}
