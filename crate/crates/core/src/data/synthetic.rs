//! Procedural shapes-on-backgrounds dataset with exact labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassInfo, ClassKind, DatasetMeta, Image, ImageSample, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Template {
    Field,
    Sky,
    Disk,
    Square,
    Triangle,
}

impl Template {
    fn name(self) -> &'static str {
        match self {
            Template::Field => "field",
            Template::Sky => "sky",
            Template::Disk => "disk",
            Template::Square => "square",
            Template::Triangle => "triangle",
        }
    }

    fn kind(self) -> ClassKind {
        match self {
            Template::Field | Template::Sky => ClassKind::Stuff,
            _ => ClassKind::Thing,
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Template::Field => [0.30, 0.55, 0.22],
            Template::Sky => [0.50, 0.70, 0.92],
            Template::Disk => [0.85, 0.22, 0.20],
            Template::Square => [0.95, 0.80, 0.25],
            Template::Triangle => [0.45, 0.25, 0.70],
        }
    }

    /// Texture amplitude and spatial frequency (cycles per image).
    fn texture(self) -> (f64, f64) {
        match self {
            Template::Field => (0.06, 9.0),
            Template::Sky => (0.03, 2.0),
            _ => (0.02, 5.0),
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Template::Disk => dx * dx + dy * dy <= r * r,
            Template::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            // apex up at dy = -1.2r, base at dy = r
            Template::Triangle => dy <= r && dy >= -1.2 * r && dx.abs() <= 0.6 * (dy + 1.2 * r),
            _ => false,
        }
    }
}

const TEMPLATES: [Template; 5] =
    [Template::Field, Template::Sky, Template::Disk, Template::Square, Template::Triangle];

pub const MAX_SYNTHETIC_CLASSES: usize = TEMPLATES.len();

const HORIZON_PROB: f64 = 0.6;
const RADIUS: (f64, f64) = (0.15, 0.28);
const COLOR_JITTER: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub samples: Vec<ImageSample>,
    pub meta: DatasetMeta,
}

fn class_templates(n_classes: usize) -> Vec<Template> {
    if n_classes == 2 {
        vec![Template::Field, Template::Disk]
    } else {
        TEMPLATES[..n_classes].to_vec()
    }
}

fn render(size: usize, classes: &[Template], rng: &mut ChaCha8Rng) -> (Image, LabelMap) {
    let backgrounds: Vec<usize> = (0..classes.len()).filter(|&i| classes[i].kind() == ClassKind::Stuff).collect();
    let shapes: Vec<usize> = (0..classes.len()).filter(|&i| classes[i].kind() == ClassKind::Thing).collect();
    let s = size as f64;

    let split = backgrounds.len() >= 2 && rng.random_bool(HORIZON_PROB);
    let horizon = rng.random_range(0.3..0.7) * s;
    let single = backgrounds[rng.random_range(0..backgrounds.len())];
    let (upper, lower) = if split { (backgrounds[1], backgrounds[0]) } else { (single, single) };

    let n_shapes = rng.random_range(1..=2usize);
    let mut placed = Vec::with_capacity(n_shapes);
    let first = rng.random_range(0..shapes.len());
    for k in 0..n_shapes {
        let class = if k == 0 || shapes.len() == 1 {
            shapes[first]
        } else {
            shapes[(first + rng.random_range(1..shapes.len())) % shapes.len()]
        };
        let r = rng.random_range(RADIUS.0..=RADIUS.1) * s;
        let cx = rng.random_range(0.6 * r..=s - 0.6 * r);
        let cy = rng.random_range(0.6 * r..=s - 0.6 * r);
        placed.push((class, cx, cy, r));
    }

    let mut palette = Vec::with_capacity(classes.len());
    for t in classes {
        let base = t.color();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let jitter: [f64; 3] = std::array::from_fn(|c| base[c] + rng.random_range(-COLOR_JITTER..=COLOR_JITTER));
        palette.push((jitter, phase));
    }

    let mut img = Image::filled(3, size, size, 0.0);
    let mut labels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut class = if py < horizon { upper } else { lower };
            // later shapes occlude earlier ones
            for &(c, cx, cy, r) in &placed {
                if classes[c].contains(px - cx, py - cy, r) {
                    class = c;
                }
            }
            labels[y * size + x] = class as u8;
            let (amp, freq) = classes[class].texture();
            let (color, phase) = palette[class];
            let tex = amp * (std::f64::consts::TAU * freq * (px + 0.5 * py) / s + phase).sin();
            for (c, base) in color.iter().enumerate() {
                let v = base + tex + rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE);
                // quantized so PNG storage is lossless
                img.plane_mut(c)[y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    (img, LabelMap { height: size, width: size, data: labels })
}

/// `n` images of `size × size` with `n_classes` classes. The same arguments
/// always produce bit-identical data.
pub fn gen_synthetic_dataset(n: usize, size: usize, n_classes: usize, seed: u64) -> Result<SyntheticDataset> {
    if n_classes < 2 || n_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "n_classes must be in 2..={MAX_SYNTHETIC_CLASSES}, got {n_classes}"
        )));
    }
    if size < 32 {
        return Err(Error::InvalidArgument(format!("size must be at least 32, got {size}")));
    }
    let classes = class_templates(n_classes);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (image, gt) = render(size, &classes, &mut rng);
        samples.push(ImageSample::new(format!("syn_{i:05}"), image, Some(gt))?);
    }
    let meta = DatasetMeta {
        classes: classes.iter().map(|t| ClassInfo { name: t.name().into(), kind: t.kind() }).collect(),
    };
    Ok(SyntheticDataset { samples, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contract_and_determinism() {
        let a = gen_synthetic_dataset(200, 64, 4, 0).unwrap();
        assert_eq!(a.samples.len(), 200);
        assert!(a.samples.iter().all(|s| s.gt.as_ref().unwrap().data.iter().all(|&v| v < 4)));
        let b = gen_synthetic_dataset(200, 64, 4, 0).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.gt, y.gt);
        }
        let c = gen_synthetic_dataset(3, 64, 4, 1).unwrap();
        assert_ne!(a.samples[0].image.data, c.samples[0].image.data);
    }

    #[test]
    fn every_class_has_at_least_five_percent_of_pixels() {
        for k in 2..=MAX_SYNTHETIC_CLASSES {
            let ds = gen_synthetic_dataset(200, 64, k, 3).unwrap();
            let mut hist = vec![0usize; k];
            let mut total = 0;
            for s in &ds.samples {
                for &v in &s.gt.as_ref().unwrap().data {
                    hist[v as usize] += 1;
                    total += 1;
                }
            }
            for (c, &h) in hist.iter().enumerate() {
                let frac = h as f64 / total as f64;
                assert!(frac >= 0.05, "k={k} class {c}: {frac}");
            }
        }
    }

    #[test]
    fn things_and_stuff_partition() {
        let ds = gen_synthetic_dataset(1, 32, 5, 0).unwrap();
        assert_eq!(ds.meta.indices_of(ClassKind::Stuff), vec![0, 1]);
        assert_eq!(ds.meta.indices_of(ClassKind::Thing), vec![2, 3, 4]);
        let two = gen_synthetic_dataset(1, 32, 2, 0).unwrap();
        let names: Vec<_> = two.meta.classes.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["field", "disk"]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_synthetic_dataset(1, 64, 6, 0).is_err());
        assert!(gen_synthetic_dataset(1, 64, 1, 0).is_err());
        assert!(gen_synthetic_dataset(1, 16, 3, 0).is_err());
    }
}
