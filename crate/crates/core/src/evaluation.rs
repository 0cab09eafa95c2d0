//! Confusion counting, optimal cluster-to-class matching, accuracy/IoU and
//! the text report.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassKind, DatasetMeta, IGNORE_LABEL};
use crate::error::{Error, Result};

/// `K_pred × C_gt` pixel counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub c: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize, c: usize) -> Self {
        ConfusionMatrix { k, c, counts: vec![0; k * c] }
    }

    pub fn get(&self, k: usize, c: usize) -> u64 {
        self.counts[k * self.c + c]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds aligned prediction/ground-truth maps; `IGNORE_LABEL` pixels are skipped.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p >= self.k || g as usize >= self.c {
                return Err(Error::Label(format!("pred {p} / gt {g} outside {}x{}", self.k, self.c)));
            }
            self.counts[p * self.c + g as usize] += 1;
        }
        Ok(())
    }
}

pub fn confusion(pred: &[usize], gt: &[u8], k: usize, c: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(k, c);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// Class for each cluster, `None` when unmatched.
    pub mapping: Vec<Option<usize>>,
    pub matched: u64,
}

/// Minimum-cost perfect assignment on a square matrix (shortest augmenting
/// paths with potentials, O(n³)). Returns the column of each row.
fn min_cost_assignment(n: usize, cost: &[i64]) -> Vec<usize> {
    const INF: i64 = i64::MAX / 4;
    // 1-based internals; index 0 is the virtual source
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Injective cluster → class mapping maximizing the matched pixel count.
/// The matrix is zero-padded to square; clusters matched to padding stay
/// unmatched.
pub fn hungarian_match(cm: &ConfusionMatrix) -> Result<Matching> {
    if cm.k == 0 || cm.c == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let n = cm.k.max(cm.c);
    let mut cost = vec![0i64; n * n];
    for k in 0..cm.k {
        for c in 0..cm.c {
            cost[k * n + c] = -(cm.get(k, c) as i64);
        }
    }
    let cols = min_cost_assignment(n, &cost);
    let mapping: Vec<Option<usize>> = (0..cm.k).map(|k| (cols[k] < cm.c).then_some(cols[k])).collect();
    let matched = mapping
        .iter()
        .enumerate()
        .filter_map(|(k, m)| m.map(|c| cm.get(k, c)))
        .sum();
    Ok(Matching { mapping, matched })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    All,
    Things,
    Stuff,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::All => "all",
            Partition::Things => "things",
            Partition::Stuff => "stuff",
        }
    }

    pub fn classes(self, meta: &DatasetMeta) -> Vec<usize> {
        match self {
            Partition::All => (0..meta.n_classes()).collect(),
            Partition::Things => meta.indices_of(ClassKind::Thing),
            Partition::Stuff => meta.indices_of(ClassKind::Stuff),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Per gt class; `None` for classes outside the partition or absent from gt.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub n_pixels: u64,
}

/// Accuracy and IoU on pixels whose gt class is in `classes`, with clusters
/// relabeled by `mapping`. Clusters mapped outside `classes` count as errors.
pub fn metrics(cm: &ConfusionMatrix, mapping: &Matching, classes: &[usize]) -> MetricsReport {
    let in_part = |c: usize| classes.contains(&c);
    let mut tp = vec![0u64; cm.c];
    let mut pred_as = vec![0u64; cm.c];
    let mut gt_count = vec![0u64; cm.c];
    let mut total = 0u64;
    for k in 0..cm.k {
        let mapped = mapping.mapping.get(k).copied().flatten();
        for c in (0..cm.c).filter(|&c| in_part(c)) {
            let n = cm.get(k, c);
            total += n;
            gt_count[c] += n;
            if let Some(m) = mapped {
                pred_as[m] += n;
                if m == c {
                    tp[c] += n;
                }
            }
        }
    }
    let correct: u64 = tp.iter().sum();
    let iou: Vec<Option<f64>> = (0..cm.c)
        .map(|c| {
            if !in_part(c) || gt_count[c] == 0 {
                return None;
            }
            let union = gt_count[c] + pred_as[c] - tp[c];
            Some(tp[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    MetricsReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        miou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        iou,
        n_pixels: total,
    }
}

/// Median mIoU after matching randomly permuted predictions against gt.
pub fn shuffled_baseline_miou(pred: &[usize], gt: &[u8], k: usize, c: usize, n_shuffles: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..c).collect();
    let mut values = Vec::with_capacity(n_shuffles);
    let mut shuffled = pred.to_vec();
    for _ in 0..n_shuffles {
        shuffled.shuffle(&mut rng);
        let cm = confusion(&shuffled, gt, k, c)?;
        values.push(metrics(&cm, &hungarian_match(&cm)?, &all).miou);
    }
    Ok(median(&mut values))
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One evaluated prediction set (plain or CRF-refined).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub title: String,
    pub confusion: ConfusionMatrix,
    pub matching: Matching,
    pub partitions: Vec<(Partition, MetricsReport)>,
}

pub fn evaluate_section(title: &str, cm: ConfusionMatrix, meta: &DatasetMeta) -> Result<EvalSection> {
    let matching = hungarian_match(&cm)?;
    let partitions = [Partition::All, Partition::Things, Partition::Stuff]
        .into_iter()
        .map(|p| (p, metrics(&cm, &matching, &p.classes(meta))))
        .collect();
    Ok(EvalSection { title: title.into(), confusion: cm, matching, partitions })
}

/// Deterministic text report: mapping, per-partition summaries and
/// per-class IoU tables.
pub fn render_report(sections: &[EvalSection], meta: &DatasetMeta, extra: &[(String, String)]) -> String {
    let mut s = String::from("# segmentation evaluation\n");
    for (k, v) in extra {
        let _ = writeln!(s, "{k}: {v}");
    }
    for sec in sections {
        let _ = writeln!(s, "\n[{}]", sec.title);
        let _ = writeln!(s, "clusters: {}  classes: {}  pixels: {}", sec.confusion.k, sec.confusion.c, sec.confusion.total());
        let map: Vec<String> = sec
            .matching
            .mapping
            .iter()
            .enumerate()
            .map(|(k, m)| match m {
                Some(c) => format!("{k}->{}", meta.classes[*c].name),
                None => format!("{k}->none"),
            })
            .collect();
        let _ = writeln!(s, "mapping: {}", map.join(" "));
        let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>10}", "split", "accuracy", "mIoU", "pixels");
        for (p, m) in &sec.partitions {
            let _ = writeln!(s, "{:<8} {:>10.6} {:>10.6} {:>10}", p.name(), m.accuracy, m.miou, m.n_pixels);
        }
        let _ = writeln!(s, "{:<12} {:<6} {:>10}", "class", "kind", "IoU");
        let all = &sec.partitions[0].1;
        for (c, info) in meta.classes.iter().enumerate() {
            let kind = match info.kind {
                ClassKind::Thing => "thing",
                ClassKind::Stuff => "stuff",
            };
            let v = all.iou[c].map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{:<12} {:<6} {:>10}", info.name, kind, v);
        }
    }
    s
}
