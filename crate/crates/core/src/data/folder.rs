//! Dataset folders: `<root>/<split>/images/*.{png,jpg}`, `<root>/<split>/labels/*.png`
//! and an optional `<root>/classes.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Image, ImageSample, LabelMap, IGNORE_LABEL};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub kind: ClassKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub classes: Vec<ClassInfo>,
}

impl DatasetMeta {
    pub const FILE: &'static str = "classes.json";

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn indices_of(&self, kind: ClassKind) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i].kind == kind).collect()
    }

    pub fn load(root: &Path) -> Result<Option<DatasetMeta>> {
        let path = root.join(Self::FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(Self::FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").at(&path)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub samples: Vec<ImageSample>,
    /// `(id, reason)` for samples that failed validation.
    pub rejected: Vec<(String, String)>,
    pub meta: Option<DatasetMeta>,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn rgb_to_image(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::filled(3, h, w, 0.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.plane_mut(c)[y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    img
}

pub(crate) fn image_to_rgb(img: &Image) -> RgbImage {
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let q = |c| (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

fn load_sample(
    id: &str,
    image_path: &Path,
    label_path: &Path,
    n_classes: Option<usize>,
    resize: Option<usize>,
) -> Result<ImageSample> {
    let reject = |reason: String| Error::Sample { id: id.to_string(), reason };
    let img = image::open(image_path).map_err(|e| reject(e.to_string()))?;
    let image = rgb_to_image(&img.to_rgb8());
    let gt = if label_path.exists() {
        let lab = match image::open(label_path).map_err(|e| reject(e.to_string()))? {
            DynamicImage::ImageLuma8(g) => g,
            other => return Err(reject(format!("label is {:?}, expected 8-bit gray", other.color()))),
        };
        let map = LabelMap::new(lab.height() as usize, lab.width() as usize, lab.into_raw())?;
        if let Some(c) = n_classes {
            if let Some(bad) = map.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= c) {
                return Err(reject(format!("label value {bad} with {c} classes")));
            }
        }
        Some(map)
    } else {
        None
    };
    let sample = ImageSample::new(id, image, gt)?;
    match resize {
        Some(s) => sample.resize_center_crop(s),
        None => Ok(sample),
    }
}

/// Load `<root>/<split>`, sorted by id. Invalid samples are skipped and
/// reported in [`LoadedDataset::rejected`].
pub fn load_dataset(root: &Path, split: &str, resize: Option<usize>) -> Result<LoadedDataset> {
    let dir = root.join(split);
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Err(Error::MissingArtifact { path: images_dir, producer: "synth-data".into() });
    }
    let meta = DatasetMeta::load(root)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&images_dir)
        .at(&images_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        log::warn!("no images in {}", images_dir.display());
    }
    let mut samples: Vec<ImageSample> = Vec::with_capacity(files.len());
    let mut rejected = Vec::new();
    for path in files {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let label_path = dir.join("labels").join(format!("{id}.png"));
        match load_sample(&id, &path, &label_path, meta.as_ref().map(DatasetMeta::n_classes), resize) {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                rejected.push((id, e.to_string()));
            }
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    samples.dedup_by(|a, b| {
        let dup = a.id == b.id;
        if dup {
            log::warn!("duplicate id {}", a.id);
        }
        dup
    });
    Ok(LoadedDataset { samples, rejected, meta })
}

/// Write samples as 8-bit PNGs under `<root>/<split>` plus `classes.json`.
pub fn save_dataset(root: &Path, split: &str, samples: &[ImageSample], meta: &DatasetMeta) -> Result<()> {
    let images_dir = root.join(split).join("images");
    let labels_dir = root.join(split).join("labels");
    fs::create_dir_all(&images_dir).at(&images_dir)?;
    fs::create_dir_all(&labels_dir).at(&labels_dir)?;
    for s in samples {
        image_to_rgb(&s.image).save(images_dir.join(format!("{}.png", s.id)))?;
        if let Some(gt) = &s.gt {
            GrayImage::from_raw(gt.width as u32, gt.height as u32, gt.data.clone())
                .expect("label buffer matches size")
                .save(labels_dir.join(format!("{}.png", s.id)))?;
        }
    }
    meta.save(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            classes: vec![
                ClassInfo { name: "a".into(), kind: ClassKind::Stuff },
                ClassInfo { name: "b".into(), kind: ClassKind::Thing },
            ],
        }
    }

    fn sample(id: &str, h: usize, w: usize) -> ImageSample {
        let data = (0..3 * h * w).map(|i| (i % 256) as f64 / 255.0).collect();
        let gt = LabelMap::new(h, w, (0..h * w).map(|i| (i % 2) as u8).collect()).unwrap();
        ImageSample::new(id, Image::new(3, h, w, data).unwrap(), Some(gt)).unwrap()
    }

    #[test]
    fn roundtrip_is_exact_for_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = ["d", "a", "c", "b"].iter().map(|id| sample(id, 40, 40)).collect();
        save_dataset(dir.path(), "train", &samples, &meta()).unwrap();
        let loaded = load_dataset(dir.path(), "train", None).unwrap();
        let ids: Vec<_> = loaded.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
        assert_eq!(loaded.samples[0].image, samples[1].image);
        assert_eq!(loaded.samples[0].gt, samples[1].gt);
        assert_eq!(loaded.meta, Some(meta()));

        let resized = load_dataset(dir.path(), "train", Some(32)).unwrap();
        assert!(resized.samples.iter().all(|s| (s.height(), s.width()) == (32, 32)));
    }

    #[test]
    fn missing_and_empty_folders() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), "train", None),
            Err(Error::MissingArtifact { .. })
        ));
        fs::create_dir_all(dir.path().join("train/images")).unwrap();
        let loaded = load_dataset(dir.path(), "train", Some(64)).unwrap();
        assert!(loaded.samples.is_empty());
    }

    #[test]
    fn mismatched_label_is_rejected_with_id() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), "val", &[sample("good", 8, 8), sample("bad", 8, 8)], &meta()).unwrap();
        GrayImage::new(4, 4).save(dir.path().join("val/labels/bad.png")).unwrap();
        let loaded = load_dataset(dir.path(), "val", None).unwrap();
        assert_eq!(loaded.samples.len(), 1);
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].0, "bad");
        assert!(loaded.rejected[0].1.contains("bad"));
    }

    #[test]
    fn out_of_range_label_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), "val", &[sample("x", 4, 4)], &meta()).unwrap();
        GrayImage::from_raw(4, 4, vec![7; 16]).unwrap().save(dir.path().join("val/labels/x.png")).unwrap();
        let loaded = load_dataset(dir.path(), "val", None).unwrap();
        assert!(loaded.samples.is_empty());
    }
}
