//! Pipeline stages. Each stage reads its upstream artifacts from the output
//! root, writes into `<out>/<stage>/` and records a manifest there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta};
use crate::clustering::{assign, kmeans_fit, ClusterModel, InMemory};
use crate::config::RunConfig;
use crate::crf::{meanfield_refine, unary_from_distances, UnaryField};
use crate::data::{gen_synthetic_dataset, image_to_rgb, load_dataset, save_dataset, DatasetMeta, Image, ImageSample};
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{evaluate_section, render_report, shuffled_baseline_miou, ConfusionMatrix, Partition};
use crate::model::Model;
use crate::pgg::{active_select, assign_pseudo_labels, build_global_clusters, extract_pyramid_views, PseudoLabelSet};
use crate::tensor::ResamplePlan;
use crate::trainer::{self, keyed_rng};

pub const SYNTH: &str = "synth-data";
pub const PRETRAIN: &str = "pretrain";
pub const PSEUDO_LABEL: &str = "pseudo-label";
pub const TRAIN: &str = "train";
pub const SEGMENT: &str = "segment";
pub const EVAL: &str = "eval";
pub const REPORT: &str = "report";

pub const MANIFEST: &str = "manifest.json";
pub const GLOBAL_CLUSTERS: &str = "global_clusters.json";
pub const PIXEL_CLUSTERS: &str = "clusters.json";
pub const LABELS_DIR: &str = "labels";
pub const LABELS_CRF_DIR: &str = "labels_crf";
pub const OVERLAYS_DIR: &str = "overlays";
pub const REPORT_FILE: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const PRETRAIN_LOG: &str = "losses.log";

const FEATURE_BATCH: usize = 16;
const TAG_EVAL_FIT: u64 = 11;
const TAG_BASELINE: u64 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub config: String,
    pub wall_time_secs: f64,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Content hash of a file, or of a directory tree (relative paths and file
/// hashes in sorted order; manifests excluded).
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = fs::read(path).at(path)?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(hash_path(&path.join(&rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let p = entry.at(dir)?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST) {
            out.push(p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, stage: &str, inputs: &[PathBuf], cfg: &RunConfig, start: Instant) -> Result<Manifest> {
    let hashes = |paths: &[PathBuf]| -> Result<Vec<ArtifactHash>> {
        paths
            .iter()
            .map(|p| Ok(ArtifactHash { path: p.display().to_string(), sha256: hash_path(p)? }))
            .collect()
    };
    let manifest = Manifest {
        stage: stage.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        inputs: hashes(inputs)?,
        outputs: hashes(&[dir.to_path_buf()])?,
        config: cfg.to_toml(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), producer: producer.into() })
    }
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::create_dir_all(dir).at(dir)
}

/// What a stage produced, for the command line.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub dir: PathBuf,
    pub summary: String,
}

pub fn synth_data(cfg: &RunConfig) -> Result<StageOutcome> {
    let start = Instant::now();
    let root = cfg.data_root();
    let d = &cfg.data;
    let data = gen_synthetic_dataset(d.n_train + d.n_test, d.size, d.classes, cfg.seed)?;
    fresh_dir(&root)?;
    let (train, test) = data.samples.split_at(d.n_train);
    save_dataset(&root, "train", train, &data.meta)?;
    save_dataset(&root, "test", test, &data.meta)?;
    write_manifest(&root, SYNTH, &[], cfg, start)?;
    Ok(StageOutcome {
        dir: root.clone(),
        summary: format!("{} train / {} test images of {}x{} with {} classes in {}", d.n_train, d.n_test, d.size, d.size, d.classes, root.display()),
    })
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<(Vec<ImageSample>, Option<DatasetMeta>)> {
    let ds = load_dataset(&cfg.data_root(), split, Some(cfg.train.crop_size))?;
    if ds.samples.is_empty() {
        return Err(Error::InvalidArgument(format!("no usable images in {}/{split}", cfg.data_root().display())));
    }
    Ok((ds.samples, ds.meta))
}

fn train_split_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_root().join("train")
}

pub fn pretrain(cfg: &RunConfig) -> Result<StageOutcome> {
    let start = Instant::now();
    let (samples, _) = load_split(cfg, "train")?;
    let mut model = trainer::model_spec(cfg).build()?;
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let losses = trainer::pretrain_instance_embeddings(
        &mut model,
        &images,
        &cfg.train.pretrain,
        cfg.train.crop_size,
        cfg.seed,
        cfg.train.clip_norm,
    )?;
    let dir = cfg.stage_dir(PRETRAIN);
    fresh_dir(&dir)?;
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("pretrain_steps".to_string(), losses.len().to_string());
    checkpoint::save_checkpoint(&dir, &model, None, &trainer::checkpoint_meta(cfg, 0, extra))?;
    let log: String = losses.iter().enumerate().map(|(i, l)| format!("step={i} loss={l:.9}\n")).collect();
    fs::write(dir.join(PRETRAIN_LOG), log).at(dir.join(PRETRAIN_LOG))?;
    write_manifest(&dir, PRETRAIN, &[train_split_dir(cfg)], cfg, start)?;
    let last = losses.last().map_or("n/a".to_string(), |l| format!("{l:.4}"));
    Ok(StageOutcome { dir, summary: format!("{} pretraining steps, final loss {last}", losses.len()) })
}

fn load_model(dir: &Path, producer: &str) -> Result<(Model, CheckpointMeta)> {
    let ck = checkpoint::load_checkpoint(dir, producer)?;
    Ok((ck.model()?, ck.meta))
}

pub fn pseudo_label(cfg: &RunConfig) -> Result<StageOutcome> {
    let start = Instant::now();
    let ckpt = cfg.stage_dir(PRETRAIN);
    let (model, _) = load_model(&ckpt, PRETRAIN)?;
    let (samples, _) = load_split(cfg, "train")?;
    let size = cfg.pgg.view_size;
    let mut views = Vec::with_capacity(samples.len() * 6);
    for s in &samples {
        views.extend(extract_pyramid_views(s, size)?);
    }
    let full: Vec<&Image> = views.iter().filter(|v| v.slot == crate::pgg::Slot::Full).map(|v| &v.image).collect();
    let centers = build_global_clusters(&model, &full, cfg.train.k_global, cfg.pgg.kmeans_iters, cfg.seed)?;
    let set = active_select(&assign_pseudo_labels(&views, &centers, &model)?, cfg.pgg.keep_frac, cfg.pgg.scope)?;
    let dir = cfg.stage_dir(PSEUDO_LABEL);
    fresh_dir(&dir)?;
    set.save(&dir)?;
    centers.save(&dir.join(GLOBAL_CLUSTERS))?;
    write_manifest(&dir, PSEUDO_LABEL, &[ckpt, train_split_dir(cfg)], cfg, start)?;
    Ok(StageOutcome {
        dir,
        summary: format!(
            "{} views, {} selected, label hash {}",
            set.entries.len(),
            set.selected().count(),
            set.hash()
        ),
    })
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<StageOutcome> {
    let start = Instant::now();
    let init_dir = cfg.stage_dir(PRETRAIN);
    let init = checkpoint::load_checkpoint(&init_dir, PRETRAIN)?;
    let labels_dir = cfg.stage_dir(PSEUDO_LABEL);
    let labels = PseudoLabelSet::load(&labels_dir)?;
    let (samples, _) = load_split(cfg, "train")?;
    let dir = cfg.stage_dir(TRAIN);
    if !resume {
        fresh_dir(&dir)?;
    }
    let out = trainer::train(cfg, &init, &samples, &labels, Some(&labels_dir), &dir, resume)?;
    write_manifest(&dir, TRAIN, &[init_dir, labels_dir, train_split_dir(cfg)], cfg, start)?;
    let last = out.epochs.last().and_then(|e| e.steps.last()).map_or("n/a".to_string(), |r| format!("{:.4}", r.l_total));
    Ok(StageOutcome {
        dir,
        summary: format!("epochs {}..={} done, last l_total {last}", out.start_epoch, cfg.train.epochs),
    })
}

/// Unit-norm post-CAE feature rows per image, `[h8·w8, D]`, with the grid size.
pub fn dense_rows(model: &Model, images: &[&Image]) -> Result<Vec<(Vec<f64>, usize, usize)>> {
    let vars = model.store.vars(false);
    let d = model.dim();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(FEATURE_BATCH) {
        let (_, r) = model.forward(&vars, &Image::batch_tensor(chunk)?)?;
        let [b, _, h, w] = r.dims4()?;
        let rows = r.to_rows()?;
        for block in rows.data().chunks(h * w * d).take(b) {
            let mut v = block.to_vec();
            for row in v.chunks_mut(d) {
                crate::clustering::normalize(row)?;
            }
            out.push((v, h, w));
        }
    }
    Ok(out)
}

/// Pixel clusters refit on the training images with the final model.
pub fn fit_eval_clusters(cfg: &RunConfig, model: &Model, train: &[ImageSample]) -> Result<ClusterModel> {
    let d = model.dim();
    let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    let mut rng = keyed_rng(&[cfg.seed, TAG_EVAL_FIT]);
    let mut fit = Vec::new();
    for (rows, h, w) in dense_rows(model, &images)? {
        let n = h * w;
        let keep = n.min(cfg.eval.fit_pixels_per_image);
        let mut picks: Vec<usize> = if keep == n { (0..n).collect() } else { rand::seq::index::sample(&mut rng, n, keep).into_vec() };
        picks.sort_unstable();
        for p in picks {
            fit.extend_from_slice(&rows[p * d..(p + 1) * d]);
        }
    }
    Ok(kmeans_fit(&InMemory { data: &fit, dim: d }, cfg.train.k_pixel, cfg.eval.kmeans_iters, cfg.seed)?.model)
}

/// Bilinearly upsampled cluster probabilities at image resolution.
pub fn upsampled_unary(distances: &[f64], k: usize, grid: (usize, usize), out: (usize, usize)) -> Result<UnaryField> {
    let low = unary_from_distances(distances, k)?;
    let plan = ResamplePlan::resize(grid.0, grid.1, out.0, out.1);
    let n = out.0 * out.1;
    let mut probs = vec![0.0; n * k];
    for l in 0..k {
        let plane: Vec<f64> = (0..low.n).map(|i| low.probs[i * k + l]).collect();
        for (i, v) in plan.apply_plane(&plane).into_iter().enumerate() {
            probs[i * k + l] = v;
        }
    }
    for row in probs.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(UnaryField { n, k, probs })
}

fn palette(k: usize) -> [u8; 3] {
    const P: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    let base = P[k % P.len()];
    let shift = (k / P.len()) as u8 * 37;
    base.map(|c| c.wrapping_add(shift))
}

/// Image blended half-and-half with a color per cluster.
pub fn color_overlay(image: &Image, labels: &[usize]) -> RgbImage {
    let rgb = image_to_rgb(image);
    RgbImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let px = rgb.get_pixel(x, y).0;
        let col = palette(labels[y as usize * image.width + x as usize]);
        image::Rgb([0, 1, 2].map(|c| ((px[c] as u16 + col[c] as u16) / 2) as u8))
    })
}

fn save_labels(path: &Path, h: usize, w: usize, labels: &[usize]) -> Result<()> {
    let data: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches size").save(path)?;
    Ok(())
}

/// Latest training checkpoint directory.
pub fn final_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    let train_dir = cfg.stage_dir(TRAIN);
    trainer::latest_checkpoint(&train_dir)
        .map(|(_, p)| p)
        .ok_or(Error::MissingArtifact { path: trainer::ckpt_dir(&train_dir, cfg.train.epochs), producer: TRAIN.into() })
}

pub fn segment(cfg: &RunConfig, crf: Option<bool>) -> Result<StageOutcome> {
    let start = Instant::now();
    let ckpt = final_checkpoint(cfg)?;
    let (model, _) = load_model(&ckpt, TRAIN)?;
    let (train, _) = load_split(cfg, "train")?;
    let (test, _) = load_split(cfg, "test")?;
    if cfg.train.k_pixel > u8::MAX as usize {
        return Err(Error::Config("train.k_pixel must fit in an 8-bit label map".into()));
    }
    let clusters = fit_eval_clusters(cfg, &model, &train)?;
    let use_crf = crf.unwrap_or(cfg.crf.enabled);
    let dir = cfg.stage_dir(SEGMENT);
    fresh_dir(&dir)?;
    clusters.save(&dir.join(PIXEL_CLUSTERS))?;
    let mut subdirs = vec![LABELS_DIR];
    if use_crf {
        subdirs.push(LABELS_CRF_DIR);
    }
    if cfg.eval.overlays {
        subdirs.push(OVERLAYS_DIR);
    }
    for s in &subdirs {
        fs::create_dir_all(dir.join(s)).at(dir.join(s))?;
    }
    let d = model.dim();
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    for (sample, (rows, gh, gw)) in test.iter().zip(dense_rows(&model, &images)?) {
        let table = assign(&clusters, &rows, d)?;
        let (h, w) = (sample.height(), sample.width());
        let unary = upsampled_unary(&table.distances, clusters.k, (gh, gw), (h, w))?;
        let labels = unary.argmax();
        save_labels(&dir.join(LABELS_DIR).join(format!("{}.png", sample.id)), h, w, &labels)?;
        if use_crf {
            let refined = meanfield_refine(&unary, &sample.image, &cfg.crf, cfg.crf.iters)?;
            save_labels(&dir.join(LABELS_CRF_DIR).join(format!("{}.png", sample.id)), h, w, &refined.labels)?;
        }
        if cfg.eval.overlays {
            let path = dir.join(OVERLAYS_DIR).join(format!("{}.png", sample.id));
            color_overlay(&sample.image, &labels).save(&path)?;
        }
    }
    write_manifest(&dir, SEGMENT, &[ckpt, train_split_dir(cfg), cfg.data_root().join("test")], cfg, start)?;
    Ok(StageOutcome {
        dir,
        summary: format!("{} test images segmented into {} clusters (crf {})", test.len(), clusters.k, if use_crf { "on" } else { "off" }),
    })
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), producer: SEGMENT.into() });
    }
    let img = image::open(path)?.into_luma8();
    if img.len() != n {
        return Err(Error::Shape(format!("{} has {} pixels, expected {n}", path.display(), img.len())));
    }
    Ok(img.into_raw().into_iter().map(usize::from).collect())
}

/// Headline numbers of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_images: usize,
    pub n_pixels: u64,
    pub accuracy: f64,
    pub miou: f64,
    pub things_miou: f64,
    pub stuff_miou: f64,
    pub baseline_miou: f64,
    pub crf_accuracy: Option<f64>,
    pub crf_miou: Option<f64>,
}

pub fn eval(cfg: &RunConfig) -> Result<StageOutcome> {
    let start = Instant::now();
    let seg = cfg.stage_dir(SEGMENT);
    require(&seg.join(PIXEL_CLUSTERS), SEGMENT)?;
    let (test, meta) = load_split(cfg, "test")?;
    let meta = meta.ok_or_else(|| Error::MissingArtifact { path: cfg.data_root().join(DatasetMeta::FILE), producer: SYNTH.into() })?;
    let k = cfg.train.k_pixel;
    let c = meta.n_classes();
    let with_crf = seg.join(LABELS_CRF_DIR).is_dir();
    let mut plain = ConfusionMatrix::zeros(k, c);
    let mut refined = ConfusionMatrix::zeros(k, c);
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    for s in &test {
        let gt = s.gt.as_ref().ok_or_else(|| Error::Sample { id: s.id.clone(), reason: "no ground truth".into() })?;
        let n = gt.data.len();
        let pred = read_labels(&seg.join(LABELS_DIR).join(format!("{}.png", s.id)), n)?;
        plain.accumulate(&pred, &gt.data)?;
        all_pred.extend_from_slice(&pred);
        all_gt.extend_from_slice(&gt.data);
        if with_crf {
            refined.accumulate(&read_labels(&seg.join(LABELS_CRF_DIR).join(format!("{}.png", s.id)), n)?, &gt.data)?;
        }
    }
    let mut rng_seed = keyed_rng(&[cfg.seed, TAG_BASELINE]);
    let baseline_seed = rand::Rng::random::<u64>(&mut rng_seed);
    let baseline = shuffled_baseline_miou(&all_pred, &all_gt, k, c, cfg.eval.baseline_shuffles, baseline_seed)?;

    let mut sections = vec![evaluate_section("without crf", plain, &meta)?];
    if with_crf {
        sections.push(evaluate_section("with crf", refined, &meta)?);
    }
    let part = |i: usize, p: Partition| sections[i].partitions.iter().find(|(q, _)| *q == p).map(|(_, m)| m.clone()).expect("all partitions");
    let all = part(0, Partition::All);
    let summary = EvalSummary {
        n_images: test.len(),
        n_pixels: all.n_pixels,
        accuracy: all.accuracy,
        miou: all.miou,
        things_miou: part(0, Partition::Things).miou,
        stuff_miou: part(0, Partition::Stuff).miou,
        baseline_miou: baseline,
        crf_accuracy: with_crf.then(|| part(1, Partition::All).accuracy),
        crf_miou: with_crf.then(|| part(1, Partition::All).miou),
    };
    let extra = vec![
        ("test images".to_string(), test.len().to_string()),
        ("pixel clusters".to_string(), k.to_string()),
        (format!("shuffled-label baseline mIoU (median of {})", cfg.eval.baseline_shuffles), format!("{baseline:.6}")),
    ];
    let text = render_report(&sections, &meta, &extra);
    let dir = cfg.stage_dir(EVAL);
    fresh_dir(&dir)?;
    fs::write(dir.join(REPORT_FILE), &text).at(dir.join(REPORT_FILE))?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&summary)?).at(dir.join(METRICS_FILE))?;
    write_manifest(&dir, EVAL, &[seg, cfg.data_root().join("test")], cfg, start)?;
    Ok(StageOutcome { dir, summary: text })
}

pub fn load_eval_summary(cfg: &RunConfig) -> Result<EvalSummary> {
    let path = cfg.stage_dir(EVAL).join(METRICS_FILE);
    require(&path, EVAL)?;
    Ok(serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?)
}

/// Per-epoch mean of each loss component from a metrics log.
pub fn epoch_means(log: &str) -> Vec<(usize, usize, [f64; 5])> {
    let mut out: Vec<(usize, usize, [f64; 5])> = Vec::new();
    for line in log.lines() {
        let mut epoch = None;
        let mut vals = [0.0; 5];
        for tok in line.split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                let idx = match k {
                    "epoch" => {
                        epoch = v.parse().ok();
                        continue;
                    }
                    "l_within" => 0,
                    "l_cross" => 1,
                    "l_pixel" => 2,
                    "l_weak" => 3,
                    "l_total" => 4,
                    _ => continue,
                };
                vals[idx] = v.parse().unwrap_or(f64::NAN);
            }
        }
        let Some(e) = epoch else { continue };
        match out.last_mut() {
            Some((le, n, acc)) if *le == e => {
                *n += 1;
                acc.iter_mut().zip(vals).for_each(|(a, v)| *a += v);
            }
            _ => out.push((e, 1, vals)),
        }
    }
    for (_, n, acc) in &mut out {
        acc.iter_mut().for_each(|a| *a /= *n as f64);
    }
    out
}

pub fn report(cfg: &RunConfig) -> Result<StageOutcome> {
    let start = Instant::now();
    let eval_dir = cfg.stage_dir(EVAL);
    require(&eval_dir.join(REPORT_FILE), EVAL)?;
    let mut s = String::from("# run summary\n\n## stages\n");
    for stage in [PRETRAIN, PSEUDO_LABEL, TRAIN, SEGMENT, EVAL] {
        match Manifest::load(&cfg.stage_dir(stage)) {
            Ok(m) => {
                let out = m.outputs.first().map_or("-", |o| &o.sha256[..12]);
                s.push_str(&format!("{stage:<13} output {out}  {:.1}s\n", m.wall_time_secs));
            }
            Err(_) => s.push_str(&format!("{stage:<13} missing\n")),
        }
    }
    let log_path = cfg.stage_dir(TRAIN).join(trainer::METRICS_LOG);
    if let Ok(log) = fs::read_to_string(&log_path) {
        s.push_str("\n## training losses (epoch means)\n");
        s.push_str(&format!("{:<6} {:>8} {:>10} {:>10} {:>10} {:>10} {:>10}\n", "epoch", "steps", "within", "cross", "pixel", "weak", "total"));
        for (e, n, v) in epoch_means(&log) {
            s.push_str(&format!(
                "{e:<6} {n:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                v[0], v[1], v[2], v[3], v[4]
            ));
        }
    }
    s.push('\n');
    s.push_str(&fs::read_to_string(eval_dir.join(REPORT_FILE)).at(eval_dir.join(REPORT_FILE))?);
    let dir = cfg.stage_dir(REPORT);
    fresh_dir(&dir)?;
    fs::write(dir.join(SUMMARY_FILE), &s).at(dir.join(SUMMARY_FILE))?;
    write_manifest(&dir, REPORT, &[eval_dir, cfg.stage_dir(TRAIN).join(trainer::METRICS_LOG)], cfg, start)?;
    Ok(StageOutcome { dir, summary: s })
}

/// Every stage after data generation, in order.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    pretrain(cfg)?;
    pseudo_label(cfg)?;
    train(cfg, false)?;
    segment(cfg, None)?;
    eval(cfg)?;
    report(cfg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_tracks_content_and_ignores_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.txt"), "1").unwrap();
        fs::write(dir.path().join("y.txt"), "2").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST), "{}").unwrap();
        assert_eq!(h1, hash_path(dir.path()).unwrap());
        fs::write(dir.path().join("a/x.txt"), "3").unwrap();
        assert_ne!(h1, hash_path(dir.path()).unwrap());
    }

    #[test]
    fn upsampled_unary_is_normalized_and_matches_low_res_on_identity() {
        let d = vec![0.0, 2.0, 1.0, 1.0, 3.0, 0.5, 0.2, 0.2];
        let u = upsampled_unary(&d, 2, (2, 2), (2, 2)).unwrap();
        let low = unary_from_distances(&d, 2).unwrap();
        for (a, b) in u.probs.iter().zip(&low.probs) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = upsampled_unary(&d, 2, (2, 2), (16, 16)).unwrap();
        for i in 0..big.n {
            assert!((big.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn epoch_means_parse_metrics_lines() {
        let log = "epoch=1 step=0 l_within=1 l_cross=2 l_pixel=3 l_weak=0 l_total=3 n_pixels=1 n_views=1 grad_norm=1\n\
                   epoch=1 step=1 l_within=3 l_cross=2 l_pixel=5 l_weak=0 l_total=5 n_pixels=1 n_views=1 grad_norm=1\n\
                   epoch=2 step=0 l_within=1 l_cross=1 l_pixel=2 l_weak=1 l_total=3 n_pixels=1 n_views=1 grad_norm=1\n";
        let m = epoch_means(log);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], (1, 2, [2.0, 2.0, 4.0, 0.0, 4.0]));
        assert_eq!(m[1].2[3], 1.0);
    }

    #[test]
    fn stages_name_their_missing_producer() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out = dir.path().to_path_buf();
        let producer = |r: Result<StageOutcome>| match r {
            Err(Error::MissingArtifact { producer, .. }) => producer,
            other => panic!("{other:?}"),
        };
        assert_eq!(producer(pretrain(&cfg)), SYNTH);
        assert_eq!(producer(pseudo_label(&cfg)), PRETRAIN);
        assert_eq!(producer(train(&cfg, false)), PRETRAIN);
        assert_eq!(producer(segment(&cfg, None)), TRAIN);
        assert_eq!(producer(eval(&cfg)), SEGMENT);
        assert_eq!(producer(report(&cfg)), EVAL);
    }
}
