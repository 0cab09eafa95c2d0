//! Spherical K-means over unit-normalized feature vectors, nearest-center
//! assignment, and an on-disk feature cache that streams into the same fit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const DISTANCE_KIND: &str = "squared_euclidean_unit";
pub const CENTER_SHIFT_TOL: f64 = 1e-4;

/// `K` unit-norm centers of dimension `D`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub d: usize,
    pub distance_kind: String,
    pub centers: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let k = centers.len();
        if k == 0 {
            return Err(Error::InvalidArgument("cluster model needs K >= 1".into()));
        }
        let d = centers[0].len();
        for (i, c) in centers.iter().enumerate() {
            if c.len() != d {
                return Err(Error::Shape(format!("center {i} has dim {}, expected {d}", c.len())));
            }
            let n = norm(c);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("center {i} has norm {n}")));
            }
        }
        Ok(ClusterModel { k, d, distance_kind: DISTANCE_KIND.into(), centers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.into(), producer: "train".into() });
        }
        let m: ClusterModel = serde_json::from_str(&fs::read_to_string(path).at(path)?)?;
        if m.distance_kind != DISTANCE_KIND || m.centers.len() != m.k {
            return Err(Error::Corrupt { what: path.display().to_string(), reason: "bad header".into() });
        }
        ClusterModel::new(m.centers)
    }

    /// Index of the nearest center and the squared distances to all centers.
    pub fn nearest(&self, x: &[f64], dist: &mut [f64]) -> usize {
        let mut best = 0;
        for (k, c) in self.centers.iter().enumerate() {
            dist[k] = sq_dist(x, c);
            if dist[k] < dist[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentTable {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Row-major `N × K` squared distances.
    pub distances: Vec<f64>,
}

impl AssignmentTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit-normalize in place. Zero vectors are an error.
pub fn normalize(x: &mut [f64]) -> Result<()> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numerical(format!("cannot normalize vector with norm {n}")));
    }
    x.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// Nearest center for each row of `features` (`N × D`, row-major).
pub fn assign(model: &ClusterModel, features: &[f64], d: usize) -> Result<AssignmentTable> {
    if d != model.d || features.len() % d != 0 {
        return Err(Error::Shape(format!("features of dim {d} vs centers of dim {}", model.d)));
    }
    let n = features.len() / d;
    let mut labels = Vec::with_capacity(n);
    let mut distances = vec![0.0; n * model.k];
    for (i, x) in features.chunks_exact(d).enumerate() {
        labels.push(model.nearest(x, &mut distances[i * model.k..(i + 1) * model.k]));
    }
    Ok(AssignmentTable { k: model.k, labels, distances })
}

/// Rows of dimension [`FeatureSource::dim`], visited in a fixed order.
pub trait FeatureSource {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Calls `f(index, row)` for every row in order.
    fn visit(&self, f: &mut dyn FnMut(usize, &[f64])) -> Result<()>;
    fn row(&self, i: usize) -> Result<Vec<f64>>;
}

/// Row-major in-memory features.
pub struct InMemory<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl FeatureSource for InMemory<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn visit(&self, f: &mut dyn FnMut(usize, &[f64])) -> Result<()> {
        self.data.chunks_exact(self.dim).enumerate().for_each(|(i, r)| f(i, r));
        Ok(())
    }

    fn row(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.data[i * self.dim..(i + 1) * self.dim].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Objective `Σ min_k d(x, μ_k)` at every assignment pass, including the
    /// final centers.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub reseeds: usize,
}

fn unit_row(src: &dyn FeatureSource, i: usize) -> Result<Vec<f64>> {
    let mut r = src.row(i)?;
    normalize(&mut r)?;
    Ok(r)
}

fn normalized(row: &[f64], buf: &mut Vec<f64>) -> bool {
    buf.clear();
    buf.extend_from_slice(row);
    normalize(buf).is_ok()
}

/// k-means++ seeding followed by Lloyd iterations with renormalized centers.
/// Inputs are unit-normalized as they are read.
pub fn kmeans_fit(src: &dyn FeatureSource, k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = src.len();
    let d = src.dim();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} inputs for K = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::with_capacity(d);
    let mut bad = None;

    // k-means++: D² sampling with a running min-distance table
    let mut centers = vec![unit_row(src, rng.random_range(0..n))?];
    let mut min_d = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = centers.last().expect("nonempty").clone();
        src.visit(&mut |i, row| {
            if !normalized(row, &mut buf) {
                bad.get_or_insert(i);
                return;
            }
            min_d[i] = min_d[i].min(sq_dist(&buf, &last));
        })?;
        if let Some(i) = bad {
            return Err(Error::Numerical(format!("feature row {i} has zero norm")));
        }
        let total: f64 = min_d.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fewer than K = {k} distinct inputs"
            )));
        }
        // greedy variant: draw several candidates, keep the one with the lowest potential
        let trials = 2 + (k as f64).ln() as usize;
        let mut cands = Vec::with_capacity(trials);
        for _ in 0..trials {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &m) in min_d.iter().enumerate() {
                acc += m;
                if acc > target && m > 0.0 {
                    pick = i;
                    break;
                }
            }
            while min_d[pick] <= 0.0 {
                pick -= 1;
            }
            cands.push((pick, unit_row(src, pick)?));
        }
        let mut potential = vec![0.0; trials];
        src.visit(&mut |i, row| {
            if normalized(row, &mut buf) {
                for (p, (_, c)) in potential.iter_mut().zip(&cands) {
                    *p += min_d[i].min(sq_dist(&buf, c));
                }
            }
        })?;
        let best = (0..trials).fold(0, |b, t| if potential[t] < potential[b] { t } else { b });
        let pick = cands[best].0;
        centers.push(unit_row(src, pick)?);
    }

    let mut objective = Vec::new();
    let mut reseeds = 0;
    let mut iterations = 0;
    let mut dist = vec![0.0; k];
    loop {
        let model = ClusterModel { k, d, distance_kind: DISTANCE_KIND.into(), centers: centers.clone() };
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        let mut obj = 0.0;
        // farthest points, kept sorted by (distance desc, index asc)
        let mut far: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        src.visit(&mut |i, row| {
            if !normalized(row, &mut buf) {
                bad.get_or_insert(i);
                return;
            }
            let j = model.nearest(&buf, &mut dist);
            obj += dist[j];
            counts[j] += 1;
            sums[j].iter_mut().zip(&buf).for_each(|(s, x)| *s += x);
            if far.len() < k || dist[j] > far[far.len() - 1].0 {
                let pos = far.partition_point(|&(fd, _)| fd >= dist[j]);
                far.insert(pos, (dist[j], i));
                far.truncate(k);
            }
        })?;
        if let Some(i) = bad {
            return Err(Error::Numerical(format!("feature row {i} has zero norm")));
        }
        objective.push(obj);
        if iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut next = Vec::with_capacity(k);
        let mut far_iter = far.iter().filter(|&&(fd, _)| fd > 0.0);
        for j in 0..k {
            if counts[j] == 0 {
                let &(_, i) = far_iter.next().ok_or_else(|| {
                    Error::Numerical(format!("cluster {j} empty and no point left to reseed"))
                })?;
                reseeds += 1;
                next.push(unit_row(src, i)?);
            } else {
                let mut c = sums[j].clone();
                // antipodal members can cancel; keep the old center then
                if normalize(&mut c).is_err() || norm(&c) < 0.5 {
                    c.clone_from(&centers[j]);
                }
                next.push(c);
            }
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < CENTER_SHIFT_TOL {
            // one more pass records the objective at the final centers
            let model = ClusterModel { k, d, distance_kind: DISTANCE_KIND.into(), centers: centers.clone() };
            let mut obj = 0.0;
            src.visit(&mut |_, row| {
                if normalized(row, &mut buf) {
                    let j = model.nearest(&buf, &mut dist);
                    obj += dist[j];
                }
            })?;
            objective.push(obj);
            break;
        }
    }
    Ok(KMeansFit { model: ClusterModel::new(centers)?, objective, iterations, reseeds })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub shard: usize,
    /// Row offset within the shard.
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub dim: usize,
    pub shards: Vec<ShardInfo>,
    pub entries: Vec<CacheEntry>,
}

/// Writes rows as little-endian `f32` shards plus `index.json`.
pub struct FeatureCacheWriter {
    dir: PathBuf,
    shard_rows: usize,
    index: CacheIndex,
    current: Vec<u8>,
    current_rows: usize,
}

impl FeatureCacheWriter {
    pub const INDEX: &'static str = "index.json";

    pub fn create(dir: &Path, dim: usize, shard_rows: usize) -> Result<Self> {
        if dir.exists() {
            fs::remove_dir_all(dir).at(dir)?;
        }
        fs::create_dir_all(dir).at(dir)?;
        Ok(FeatureCacheWriter {
            dir: dir.into(),
            shard_rows: shard_rows.max(1),
            index: CacheIndex { dim, shards: Vec::new(), entries: Vec::new() },
            current: Vec::new(),
            current_rows: 0,
        })
    }

    pub fn append(&mut self, id: &str, rows: &[f64]) -> Result<()> {
        let dim = self.index.dim;
        if rows.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values for dim {dim}", rows.len())));
        }
        let count = rows.len() / dim;
        if self.current_rows > 0 && self.current_rows + count > self.shard_rows {
            self.flush()?;
        }
        self.index.entries.push(CacheEntry {
            id: id.into(),
            shard: self.index.shards.len(),
            offset: self.current_rows,
            count,
        });
        for v in rows {
            self.current.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.current_rows += count;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let file = format!("shard_{:05}.f32", self.index.shards.len());
        let path = self.dir.join(&file);
        let mut f = fs::File::create(&path).at(&path)?;
        f.write_all(&self.current).at(&path)?;
        self.index.shards.push(ShardInfo {
            file,
            rows: self.current_rows,
            sha256: hex::encode(Sha256::digest(&self.current)),
        });
        self.current.clear();
        self.current_rows = 0;
        Ok(())
    }

    pub fn finish(mut self) -> Result<FeatureCache> {
        if self.current_rows > 0 {
            self.flush()?;
        }
        let path = self.dir.join(Self::INDEX);
        fs::write(&path, serde_json::to_string(&self.index)?).at(&path)?;
        FeatureCache::open(&self.dir)
    }
}

/// Read side of the feature cache; every shard is verified on read.
pub struct FeatureCache {
    dir: PathBuf,
    pub index: CacheIndex,
    shard_start: Vec<usize>,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(FeatureCacheWriter::INDEX);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, producer: "train".into() });
        }
        let index: CacheIndex = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)
            .map_err(|e| Error::Corrupt { what: "feature cache index".into(), reason: e.to_string() })?;
        let mut shard_start = Vec::with_capacity(index.shards.len());
        let mut acc = 0;
        for s in &index.shards {
            shard_start.push(acc);
            acc += s.rows;
        }
        Ok(FeatureCache { dir: dir.into(), index, shard_start })
    }

    pub fn read_shard(&self, s: usize) -> Result<Vec<f64>> {
        let info = &self.index.shards[s];
        let path = self.dir.join(&info.file);
        let bytes = fs::read(&path).at(&path)?;
        let corrupt = |reason: String| Error::Corrupt { what: path.display().to_string(), reason };
        if bytes.len() != info.rows * self.index.dim * 4 {
            return Err(corrupt(format!("{} bytes for {} rows", bytes.len(), info.rows)));
        }
        if hex::encode(Sha256::digest(&bytes)) != info.sha256 {
            return Err(corrupt("checksum mismatch".into()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }

    /// Rows stored for `id`.
    pub fn get(&self, id: &str) -> Result<Vec<f64>> {
        let e = self
            .index
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("no cached features for {id}")))?;
        let shard = self.read_shard(e.shard)?;
        let d = self.index.dim;
        Ok(shard[e.offset * d..(e.offset + e.count) * d].to_vec())
    }
}

impl FeatureSource for FeatureCache {
    fn dim(&self) -> usize {
        self.index.dim
    }

    fn len(&self) -> usize {
        self.index.shards.iter().map(|s| s.rows).sum()
    }

    fn visit(&self, f: &mut dyn FnMut(usize, &[f64])) -> Result<()> {
        let d = self.index.dim;
        for s in 0..self.index.shards.len() {
            let data = self.read_shard(s)?;
            for (r, row) in data.chunks_exact(d).enumerate() {
                f(self.shard_start[s] + r, row);
            }
        }
        Ok(())
    }

    fn row(&self, i: usize) -> Result<Vec<f64>> {
        let s = self.shard_start.partition_point(|&st| st <= i) - 1;
        let d = self.index.dim;
        let local = i - self.shard_start[s];
        Ok(self.read_shard(s)?[local * d..(local + 1) * d].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        v.chunks_exact_mut(d).for_each(|r| normalize(r).unwrap());
        v
    }

    fn brute_nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in centers.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..x.len() {
                s += (x[j] - c[j]).powi(2);
            }
            if s < best.0 {
                best = (s, k);
            }
        }
        best.1
    }

    #[test]
    fn recovers_blob_means() {
        let d = 8;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let means: Vec<Vec<f64>> = (0..4)
                .map(|k| {
                    let mut m = vec![0.0; d];
                    m[k] = 1.0;
                    m
                })
                .collect();
            let mut data = Vec::new();
            for i in 0..400 {
                let m = &means[i % 4];
                let mut x: Vec<f64> = m.iter().map(|v| { let z: f64 = StandardNormal.sample(&mut rng); v + 0.05 * z }).collect();
                normalize(&mut x).unwrap();
                data.extend(x);
            }
            let fit = kmeans_fit(&InMemory { data: &data, dim: d }, 4, 100, seed).unwrap();
            for m in &means {
                let best = fit.model.centers.iter().map(|c| sq_dist(c, m).sqrt()).fold(f64::INFINITY, f64::min);
                assert!(best < 0.05, "seed {seed}: {best}");
            }
        }
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let data = [3.0, 0.0, 0.0, 2.0, 1.0, 1.0];
        let fit = kmeans_fit(&InMemory { data: &data, dim: 2 }, 1, 10, 0).unwrap();
        let mut want = vec![1.0 + 0.0 + 0.5f64.sqrt(), 0.0 + 1.0 + 0.5f64.sqrt()];
        normalize(&mut want).unwrap();
        assert!(sq_dist(&fit.model.centers[0], &want).sqrt() < 1e-12);
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_unit(&mut rng, 1000, 6);
        for k in [2, 5, 12] {
            let fit = kmeans_fit(&InMemory { data: &data, dim: 6 }, k, 50, 3).unwrap();
            for w in fit.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{:?}", fit.objective);
            }
            let centers = &fit.model.centers;
            for a in 0..k {
                assert!((norm(&centers[a]) - 1.0).abs() < 1e-6);
                for b in 0..a {
                    assert!(sq_dist(&centers[a], &centers[b]) > 1e-8);
                }
            }
        }
    }

    #[test]
    fn too_few_distinct_inputs() {
        let data = [1.0, 0.0, 2.0, 0.0, 0.0, 1.0];
        assert!(kmeans_fit(&InMemory { data: &data, dim: 2 }, 3, 10, 0).is_err());
        assert!(kmeans_fit(&InMemory { data: &data, dim: 2 }, 2, 10, 0).is_ok());
        assert!(kmeans_fit(&InMemory { data: &data[..2], dim: 2 }, 2, 10, 0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_unit(&mut rng, 300, 5);
        let a = kmeans_fit(&InMemory { data: &data, dim: 5 }, 6, 30, 11).unwrap();
        let b = kmeans_fit(&InMemory { data: &data, dim: 5 }, 6, 30, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assign_matches_brute_force_and_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let centers: Vec<Vec<f64>> = random_unit(&mut rng, 7, 4).chunks(4).map(<[f64]>::to_vec).collect();
        let model = ClusterModel::new(centers.clone()).unwrap();
        let xs = random_unit(&mut rng, 500, 4);
        let table = assign(&model, &xs, 4).unwrap();
        for (i, x) in xs.chunks(4).enumerate() {
            assert_eq!(table.labels[i], brute_nearest(&centers, x));
        }
        let t = assign(&model, &centers[3], 4).unwrap();
        assert_eq!((t.labels[0], t.row(0)[3]), (3, 0.0));
        assert!(assign(&model, &[1.0, 0.0, 0.0], 3).is_err());

        let tie = ClusterModel::new(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(assign(&tie, &[1.0, 0.0, 0.0], 3).unwrap().labels, vec![0]);
    }

    #[test]
    fn argmin_distance_equals_argmax_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let centers: Vec<Vec<f64>> = random_unit(&mut rng, 9, 8).chunks(8).map(<[f64]>::to_vec).collect();
        let model = ClusterModel::new(centers.clone()).unwrap();
        let xs = random_unit(&mut rng, 10_000, 8);
        let table = assign(&model, &xs, 8).unwrap();
        for (i, x) in xs.chunks(8).enumerate() {
            let cos: Vec<f64> = centers.iter().map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let best = (0..9).fold(0, |b, k| if cos[k] > cos[b] { k } else { b });
            assert_eq!(table.labels[i], best);
        }
    }

    #[test]
    fn cache_streaming_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // f32-representable values so both sources see identical rows
        let data: Vec<f64> = random_unit(&mut rng, 530, 6).iter().map(|&v| v as f32 as f64).collect();
        let mut w = FeatureCacheWriter::create(&dir.path().join("c"), 6, 100).unwrap();
        for (i, chunk) in data.chunks(6 * 53).enumerate() {
            w.append(&format!("img{i}"), chunk).unwrap();
        }
        let cache = w.finish().unwrap();
        assert!(cache.index.shards.len() > 1);
        assert_eq!(cache.len(), 530);
        assert_eq!(cache.get("img3").unwrap(), data[3 * 6 * 53..4 * 6 * 53]);
        assert_eq!(cache.row(417).unwrap(), data[417 * 6..418 * 6]);
        let a = kmeans_fit(&cache, 5, 40, 1).unwrap();
        let b = kmeans_fit(&InMemory { data: &data, dim: 6 }, 5, 40, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_shard_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = FeatureCacheWriter::create(dir.path(), 2, 10).unwrap();
        w.append("a", &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let cache = w.finish().unwrap();
        let shard = dir.path().join(&cache.index.shards[0].file);
        let mut bytes = fs::read(&shard).unwrap();
        bytes[0] ^= 1;
        fs::write(&shard, &bytes).unwrap();
        assert!(matches!(cache.get("a"), Err(Error::Corrupt { .. })));
        fs::write(&shard, &bytes[..4]).unwrap();
        assert!(matches!(cache.visit(&mut |_, _| {}), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn cluster_model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ClusterModel::new(vec![vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(ClusterModel::load(&p).unwrap(), m);
        assert!(matches!(ClusterModel::load(&dir.path().join("x")), Err(Error::MissingArtifact { .. })));
    }

    proptest! {
        #[test]
        fn labels_are_argmin_of_distances(seed in 0u64..1000, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers: Vec<Vec<f64>> = random_unit(&mut rng, k, 3).chunks(3).map(<[f64]>::to_vec).collect();
            let model = ClusterModel::new(centers).unwrap();
            let xs = random_unit(&mut rng, 20, 3);
            let t = assign(&model, &xs, 3).unwrap();
            for i in 0..20 {
                let row = t.row(i);
                let first_min = (0..k).fold(0, |b, j| if row[j] < row[b] { j } else { b });
                prop_assert_eq!(t.labels[i], first_min);
            }
        }
    }
}
