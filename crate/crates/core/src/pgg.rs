//! Pyramid-global-guided pseudo labels: six views per image, image-level
//! labels from frozen global clusters, and confidence-ranked selection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{kmeans_fit, ClusterModel, InMemory};
use crate::data::{CropBox, Image, ImageSample};
use crate::error::{Error, IoContext, Result};
use crate::model::{global_embed, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Full,
    Tl,
    Tr,
    Bl,
    Br,
    Center,
}

impl Slot {
    pub const ALL: [Slot; 6] = [Slot::Full, Slot::Tl, Slot::Tr, Slot::Bl, Slot::Br, Slot::Center];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Full => "full",
            Slot::Tl => "tl",
            Slot::Tr => "tr",
            Slot::Bl => "bl",
            Slot::Br => "br",
            Slot::Center => "center",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankScope {
    /// One ranking over all crop views of the dataset.
    #[default]
    Dataset,
    /// A separate ranking per image.
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidView {
    pub parent_id: String,
    pub slot: Slot,
    pub crop_box: CropBox,
    pub image: Image,
}

/// Crop boxes for the six slots of an `h × w` image.
pub fn pyramid_boxes(h: usize, w: usize) -> [(Slot, CropBox); 6] {
    let (ch, cw) = (h.div_ceil(2), w.div_ceil(2));
    let b = |top, left, height, width| CropBox { top, left, height, width };
    [
        (Slot::Full, b(0, 0, h, w)),
        (Slot::Tl, b(0, 0, ch, cw)),
        (Slot::Tr, b(0, w - cw, ch, cw)),
        (Slot::Bl, b(h - ch, 0, ch, cw)),
        (Slot::Br, b(h - ch, w - cw, ch, cw)),
        (Slot::Center, b((h - ch) / 2, (w - cw) / 2, ch, cw)),
    ]
}

/// Full image plus four corner crops and a center crop, each resized to
/// `size × size`.
pub fn extract_pyramid_views(sample: &ImageSample, size: usize) -> Result<Vec<PyramidView>> {
    let (h, w) = (sample.height(), sample.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("image {h}x{w} too small for pyramid views")));
    }
    pyramid_boxes(h, w)
        .into_iter()
        .map(|(slot, b)| {
            let crop = sample.image.crop(b.top, b.left, b.height, b.width)?;
            Ok(PyramidView {
                parent_id: sample.id.clone(),
                slot,
                crop_box: b,
                image: crop.resize_bilinear(size, size),
            })
        })
        .collect()
}

const EMBED_BATCH: usize = 32;

/// Unit-norm global embeddings, `[n, D]` row-major.
pub fn embed_images(model: &Model, images: &[&Image]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * model.dim());
    for chunk in images.chunks(EMBED_BATCH) {
        out.extend_from_slice(global_embed(model, &Image::batch_tensor(chunk)?)?.data());
    }
    Ok(out)
}

/// K-means over the global embeddings of full images.
pub fn build_global_clusters(
    model: &Model,
    images: &[&Image],
    k_global: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterModel> {
    if images.len() < k_global {
        return Err(Error::InvalidArgument(format!(
            "{} images for K_global = {k_global}",
            images.len()
        )));
    }
    let emb = embed_images(model, images)?;
    Ok(kmeans_fit(&InMemory { data: &emb, dim: model.dim() }, k_global, max_iters, seed)?.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub parent_id: String,
    pub slot: Slot,
    pub crop_box: CropBox,
    pub label: usize,
    /// Cosine similarity to the assigned center.
    pub confidence: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub k_global: usize,
    pub entries: Vec<PseudoLabel>,
}

/// Label and cosine confidence for each unit-norm embedding row.
pub fn nearest_by_cosine(centers: &ClusterModel, emb: &[f64]) -> Vec<(usize, f64)> {
    emb.chunks(centers.d)
        .map(|e| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, c) in centers.centers.iter().enumerate() {
                let cos: f64 = c.iter().zip(e).map(|(a, b)| a * b).sum();
                if cos > best.1 {
                    best = (k, cos);
                }
            }
            best
        })
        .collect()
}

/// Nearest center by cosine similarity for every view. Nothing is selected yet.
pub fn assign_pseudo_labels(views: &[PyramidView], centers: &ClusterModel, model: &Model) -> Result<PseudoLabelSet> {
    if model.dim() != centers.d {
        return Err(Error::Shape(format!("embedding dim {} vs centers {}", model.dim(), centers.d)));
    }
    let imgs: Vec<&Image> = views.iter().map(|v| &v.image).collect();
    let emb = if imgs.is_empty() { Vec::new() } else { embed_images(model, &imgs)? };
    let entries = views
        .iter()
        .zip(nearest_by_cosine(centers, &emb))
        .map(|(v, (label, confidence))| PseudoLabel {
            parent_id: v.parent_id.clone(),
            slot: v.slot,
            crop_box: v.crop_box,
            label,
            confidence,
            selected: false,
        })
        .collect();
    Ok(PseudoLabelSet { k_global: centers.k, entries })
}

fn keep_count(frac: f64, n: usize) -> usize {
    // guard against 0.7 * 10 = 7.000000000000001
    ((frac * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Marks full views and the top `⌈keep_frac · n⌉` crop views as selected.
/// Ranking: confidence descending, then parent id, then slot order.
pub fn active_select(set: &PseudoLabelSet, keep_frac: f64, scope: RankScope) -> Result<PseudoLabelSet> {
    if set.entries.is_empty() {
        return Err(Error::InvalidArgument("empty pseudo-label set".into()));
    }
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_frac {keep_frac} outside (0, 1]")));
    }
    let mut out = set.clone();
    let mut crops: Vec<usize> = (0..out.entries.len()).filter(|&i| out.entries[i].slot != Slot::Full).collect();
    let e = &out.entries;
    crops.sort_by(|&a, &b| {
        e[b].confidence
            .total_cmp(&e[a].confidence)
            .then_with(|| e[a].parent_id.cmp(&e[b].parent_id))
            .then_with(|| e[a].slot.cmp(&e[b].slot))
    });
    let chosen: Vec<usize> = match scope {
        RankScope::Dataset => crops[..keep_count(keep_frac, crops.len())].to_vec(),
        RankScope::Image => {
            let mut by_parent: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
            for &i in &crops {
                by_parent.entry(&e[i].parent_id).or_default().push(i);
            }
            by_parent
                .values()
                .flat_map(|v| v[..keep_count(keep_frac, v.len())].to_vec())
                .collect()
        }
    };
    for p in out.entries.iter_mut() {
        p.selected = p.slot == Slot::Full;
    }
    for i in chosen {
        out.entries[i].selected = true;
    }
    Ok(out)
}

impl PseudoLabelSet {
    pub const FILE: &'static str = "pseudo_labels.json";
    pub const SIDECAR: &'static str = "pseudo_labels.txt";

    /// Human-readable table, one view per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("k_global {}\nparent_id slot top left height width label confidence selected\n", self.k_global);
        for p in &self.entries {
            let b = p.crop_box;
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {:.17e} {}",
                p.parent_id,
                p.slot.name(),
                b.top,
                b.left,
                b.height,
                b.width,
                p.label,
                p.confidence,
                u8::from(p.selected)
            );
        }
        s
    }

    /// Content hash over the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let p = dir.join(Self::FILE);
        fs::write(&p, serde_json::to_string_pretty(self)?).at(&p)?;
        let t = dir.join(Self::SIDECAR);
        fs::write(&t, self.to_text()).at(&t)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(Self::FILE);
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, producer: "pseudo-label".into() });
        }
        let set: PseudoLabelSet = serde_json::from_str(&fs::read_to_string(&p).at(&p)?)?;
        if set.entries.iter().any(|e| e.label >= set.k_global) {
            return Err(Error::Corrupt { what: p.display().to_string(), reason: "label outside K_global".into() });
        }
        Ok(set)
    }

    pub fn selected(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.iter().filter(|e| e.selected)
    }
}
