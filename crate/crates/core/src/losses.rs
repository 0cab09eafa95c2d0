//! Training objectives: cluster cross-entropy on pixel features, the
//! within/cross pixel loss, the weak image-level loss and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Multiplier on the weak loss in the total.
    pub weak_weight: f64,
    /// Inverse-frequency weighting of cluster labels.
    pub balanced: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weak_weight: 1.0, balanced: false }
    }
}

/// Per-pixel cluster label; `None` pixels are excluded.
pub type PixelLabel = Option<usize>;

/// Per-cluster weights `n / (k_present · n_k)`, zero for empty clusters.
pub fn inverse_frequency_weights(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l < k {
            counts[l] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (present * c) as f64 })
        .collect()
}

/// `Σ_i w_i · −log softmax(−d(F_i, μ))[y_i]` over labeled rows, and the
/// number of labeled rows. Centers are constants.
fn cluster_nll(
    f: &Tensor,
    labels: &[PixelLabel],
    centers: &Tensor,
    cluster_weights: Option<&[f64]>,
) -> Result<(Tensor, usize)> {
    let [m, _] = f.dims2()?;
    let [k, _] = centers.dims2()?;
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} features", labels.len())));
    }
    if let Some(cw) = cluster_weights {
        if cw.len() != k {
            return Err(Error::Shape(format!("{} cluster weights for K = {k}", cw.len())));
        }
    }
    let mut targets = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut count = 0;
    for l in labels {
        match *l {
            Some(y) if y >= k => return Err(Error::Label(format!("cluster label {y} outside 0..{k}"))),
            Some(y) => {
                targets.push(y);
                weights.push(cluster_weights.map_or(1.0, |cw| cw[y]));
                count += 1;
            }
            None => {
                targets.push(0);
                weights.push(0.0);
            }
        }
    }
    let logits = f.sq_dist_to(&centers.detach())?.neg();
    Ok((logits.nll_sum(&targets, Some(&weights))?, count))
}

/// Mean cluster loss over rows of `f[M, D]`.
pub fn l_clust(f: &Tensor, labels: &[usize], centers: &Tensor) -> Result<Tensor> {
    let labels: Vec<PixelLabel> = labels.iter().copied().map(Some).collect();
    let (sum, n) = cluster_nll(f, &labels, centers, None)?;
    Ok(if n == 0 { Tensor::scalar(0.0) } else { sum.scale(1.0 / n as f64) })
}

/// One branch: features, offline labels, offline centers and optional
/// per-cluster weights.
pub struct BranchTargets<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [PixelLabel],
    pub centers: &'a Tensor,
    pub cluster_weights: Option<&'a [f64]>,
}

/// `(l_within, l_cross, n_pixels)`. Both terms are means over pixels labeled
/// in both branches, each summing the two branch terms.
pub fn l_pixel(b1: &BranchTargets, b2: &BranchTargets) -> Result<(Tensor, Tensor, usize)> {
    let s1 = b1.features.shape();
    let s2 = b2.features.shape();
    if s1 != s2 || b1.labels.len() != b2.labels.len() {
        return Err(Error::Shape(format!("branch features {s1:?} vs {s2:?}")));
    }
    let both: Vec<bool> = b1.labels.iter().zip(b2.labels).map(|(a, b)| a.is_some() && b.is_some()).collect();
    let mask = |l: &[PixelLabel]| -> Vec<PixelLabel> {
        l.iter().zip(&both).map(|(&y, &ok)| if ok { y } else { None }).collect()
    };
    let (y1, y2) = (mask(b1.labels), mask(b2.labels));
    let n = both.iter().filter(|&&b| b).count();
    if n == 0 {
        return Ok((Tensor::scalar(0.0), Tensor::scalar(0.0), 0));
    }
    let term = |f: &Tensor, y: &[PixelLabel], b: &BranchTargets| {
        cluster_nll(f, y, b.centers, b.cluster_weights).map(|(t, _)| t)
    };
    let inv = 1.0 / n as f64;
    let within = term(b1.features, &y1, b1)?.add(&term(b2.features, &y2, b2)?)?.scale(inv);
    let cross = term(b1.features, &y2, b2)?.add(&term(b2.features, &y1, b1)?)?.scale(inv);
    Ok((within, cross, n))
}

/// A view's image-level pseudo label and whether it passed selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeakTarget {
    pub label: usize,
    pub selected: bool,
}

/// Mean cross-entropy of `scores[B, K_g]` against selected pseudo labels.
/// Returns 0 for an empty batch.
pub fn l_weak(scores: &Tensor, targets: &[WeakTarget]) -> Result<Tensor> {
    let [b, _] = scores.dims2()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} pseudo labels for {b} score rows", targets.len())));
    }
    if targets.iter().any(|t| !t.selected) {
        return Err(Error::InvalidArgument("unselected view passed to the weak loss".into()));
    }
    if b == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let labels: Vec<usize> = targets.iter().map(|t| t.label).collect();
    Ok(scores.nll_sum(&labels, None)?.scale(1.0 / b as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_within: f64,
    pub l_cross: f64,
    pub l_pixel: f64,
    pub l_weak: f64,
    pub l_total: f64,
    pub n_pixels: usize,
    pub n_labeled_views: usize,
}

/// `weak_weight · l_weak + (l_within + l_cross)`.
pub fn l_total(
    within: &Tensor,
    cross: &Tensor,
    weak: &Tensor,
    weak_weight: f64,
    n_pixels: usize,
    n_labeled_views: usize,
) -> Result<(Tensor, LossReport)> {
    let pixel = within.add(cross)?;
    let total = if weak_weight == 0.0 { pixel.clone() } else { pixel.add(&weak.scale(weak_weight))? };
    let report = LossReport {
        l_within: within.item(),
        l_cross: cross.item(),
        l_pixel: pixel.item(),
        l_weak: weak.item(),
        l_total: total.item(),
        n_pixels,
        n_labeled_views,
    };
    if !report.l_total.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", report.l_total)));
    }
    Ok((total, report))
}
