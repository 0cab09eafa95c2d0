//! Photometric and geometric transforms for the two-branch views.
//!
//! Branch 1 sees `photo1(x)` and has the geometric transform applied to its
//! feature map; branch 2 sees `geo(photo2(x))`. Both branches consume the same
//! [`GeometricSpec`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::{ResamplePlan, Tensor};

pub const JITTER_PROB: f64 = 0.8;
pub const GRAYSCALE_PROB: f64 = 0.2;
pub const BLUR_PROB: f64 = 0.5;
pub const BRIGHTNESS: f64 = 0.3;
pub const CONTRAST: f64 = 0.3;
pub const SATURATION: f64 = 0.3;
pub const HUE: f64 = 0.1;
pub const BLUR_SIGMA: (f64, f64) = (0.1, 2.0);
pub const CROP_AREA: (f64, f64) = (0.5, 1.0);
pub const HFLIP_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricSpec {
    pub apply_jitter: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub apply_grayscale: bool,
    pub apply_blur: bool,
    pub blur_sigma: f64,
}

impl PhotometricSpec {
    pub fn identity() -> Self {
        PhotometricSpec {
            apply_jitter: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            apply_grayscale: false,
            apply_blur: false,
            blur_sigma: BLUR_SIGMA.0,
        }
    }
}

/// Every field is drawn on every call so the rng advances by a fixed amount.
pub fn sample_photometric(rng: &mut impl Rng) -> PhotometricSpec {
    PhotometricSpec {
        apply_jitter: rng.random_bool(JITTER_PROB),
        brightness: rng.random_range(1.0 - BRIGHTNESS..=1.0 + BRIGHTNESS),
        contrast: rng.random_range(1.0 - CONTRAST..=1.0 + CONTRAST),
        saturation: rng.random_range(1.0 - SATURATION..=1.0 + SATURATION),
        hue: rng.random_range(-HUE..=HUE),
        apply_grayscale: rng.random_bool(GRAYSCALE_PROB),
        apply_blur: rng.random_bool(BLUR_PROB),
        blur_sigma: rng.random_range(BLUR_SIGMA.0..=BLUR_SIGMA.1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometricSpec {
    /// Crop in source-pixel units.
    pub crop_box: CropBox,
    pub hflip: bool,
    /// Output size in the image domain, `(height, width)`.
    pub out_size: (usize, usize),
}

impl GeometricSpec {
    pub fn identity(h: usize, w: usize) -> Self {
        GeometricSpec {
            crop_box: CropBox { top: 0, left: 0, height: h, width: w },
            hflip: false,
            out_size: (h, w),
        }
    }

    /// Resampling plan for an input grid of `in_h × in_w` in `domain`.
    pub fn plan(&self, in_h: usize, in_w: usize, domain: Domain) -> Result<ResamplePlan> {
        let b = self.crop_box;
        let (top, left, h, w, oh, ow) = match domain {
            Domain::Image => (b.top, b.left, b.height, b.width, self.out_size.0, self.out_size.1),
            Domain::FeatureMap { stride } => {
                let s = stride as f64;
                let round = |v: usize| (v as f64 / s).round() as usize;
                let (h, w) = (round(b.height).min(in_h), round(b.width).min(in_w));
                if h < 1 || w < 1 {
                    return Err(Error::InvalidArgument(format!(
                        "crop {}x{} vanishes at feature stride {stride}",
                        b.height, b.width
                    )));
                }
                let top = round(b.top).min(in_h - h);
                let left = round(b.left).min(in_w - w);
                (top, left, h, w, self.out_size.0.div_ceil(stride), self.out_size.1.div_ceil(stride))
            }
        };
        if top + h > in_h || left + w > in_w || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop ({top},{left},{h},{w}) outside {in_h}x{in_w}"
            )));
        }
        Ok(ResamplePlan::bilinear_box(
            in_h, in_w, top as f64, left as f64, h as f64, w as f64, oh, ow, self.hflip,
        ))
    }
}

/// Where a geometric transform is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Image,
    /// A feature grid produced at `stride` pixels per cell.
    FeatureMap { stride: usize },
}

/// Random crop with area fraction in `[0.5, 1]` and aspect ratio in
/// `[3/4, 4/3]`, random horizontal flip. Box coordinates and sizes are
/// multiples of `align` when possible.
pub fn sample_geometric(
    rng: &mut impl Rng,
    src: (usize, usize),
    out_size: (usize, usize),
    align: usize,
) -> GeometricSpec {
    let (sh, sw) = src;
    let align = align.max(1);
    let area = (sh * sw) as f64;
    let snap = |v: f64, max: usize| -> usize {
        let a = ((v / align as f64).round() as usize * align).max(align.min(max));
        a.min(max)
    };
    // fixed draw count keeps the rng stream independent of acceptance
    let mut chosen = None;
    for _ in 0..10 {
        let frac = rng.random_range(CROP_AREA.0..=CROP_AREA.1);
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let u_top: f64 = rng.random();
        let u_left: f64 = rng.random();
        if chosen.is_some() {
            continue;
        }
        let w = snap((area * frac * ratio).sqrt(), sw);
        let h = snap((area * frac / ratio).sqrt(), sh);
        let got = (h * w) as f64 / area;
        if h <= sh && w <= sw && (CROP_AREA.0..=CROP_AREA.1).contains(&got) {
            let top = ((u_top * ((sh - h) / align + 1) as f64) as usize).min((sh - h) / align) * align;
            let left = ((u_left * ((sw - w) / align + 1) as f64) as usize).min((sw - w) / align) * align;
            chosen = Some(CropBox { top, left, height: h, width: w });
        }
    }
    let hflip = rng.random_bool(HFLIP_PROB);
    GeometricSpec {
        crop_box: chosen.unwrap_or(CropBox { top: 0, left: 0, height: sh, width: sw }),
        hflip,
        out_size,
    }
}

/// Two independent photometric specs and one shared geometric spec.
pub fn sample_transform_specs(
    rng: &mut impl Rng,
    src: (usize, usize),
    out_size: (usize, usize),
    align: usize,
) -> (PhotometricSpec, PhotometricSpec, GeometricSpec) {
    let p1 = sample_photometric(rng);
    let p2 = sample_photometric(rng);
    let g = sample_geometric(rng, src, out_size, align);
    (p1, p2, g)
}

fn clamp01(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn gray_plane(img: &Image) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len()).map(|i| luma(r[i], g[i], b[i])).collect()
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with radius `ceil(3σ)` and mirror padding.
/// Output is not clamped.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    let mut tmp = vec![0.0; h * w];
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[y * w + reflect(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

pub fn apply_photometric(img: &Image, spec: &PhotometricSpec) -> Image {
    let mut out = img.clone();
    if img.channels != 3 {
        return out;
    }
    let hw = img.height * img.width;
    if spec.apply_jitter {
        out.data.iter_mut().for_each(|v| *v *= spec.brightness);
        clamp01(&mut out);

        let mean = gray_plane(&out).iter().sum::<f64>() / hw as f64;
        out.data.iter_mut().for_each(|v| *v = (*v - mean) * spec.contrast + mean);
        clamp01(&mut out);

        let gray = gray_plane(&out);
        for c in 0..3 {
            for (v, g) in out.plane_mut(c).iter_mut().zip(&gray) {
                *v = g + (*v - g) * spec.saturation;
            }
        }
        clamp01(&mut out);

        if spec.hue != 0.0 {
            for i in 0..hw {
                let (h, s, v) = rgb_to_hsv(out.data[i], out.data[hw + i], out.data[2 * hw + i]);
                let (r, g, b) = hsv_to_rgb(h + spec.hue, s, v);
                out.data[i] = r;
                out.data[hw + i] = g;
                out.data[2 * hw + i] = b;
            }
            clamp01(&mut out);
        }
    }
    if spec.apply_grayscale {
        let gray = gray_plane(&out);
        for c in 0..3 {
            out.plane_mut(c).copy_from_slice(&gray);
        }
    }
    if spec.apply_blur {
        out = gaussian_blur(&out, spec.blur_sigma);
        clamp01(&mut out);
    }
    out
}

pub fn apply_geometric(img: &Image, spec: &GeometricSpec, domain: Domain) -> Result<Image> {
    img.resample(&spec.plan(img.height, img.width, domain)?)
}

/// Differentiable geometric transform of an `[N, C, H, W]` tensor.
pub fn apply_geometric_tensor(t: &Tensor, spec: &GeometricSpec, domain: Domain) -> Result<Tensor> {
    let [_, _, h, w] = t.dims4()?;
    t.resample(&std::rc::Rc::new(spec.plan(h, w, domain)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchViews {
    /// Photometric only; the geometric transform is applied to its features.
    pub view1_image: Image,
    /// Photometric, then geometric.
    pub view2_image: Image,
    pub shared_geo: GeometricSpec,
    pub photo1: PhotometricSpec,
    pub photo2: PhotometricSpec,
}

impl BranchViews {
    /// Rebuild views from recorded specs.
    pub fn replay(
        sample: &ImageSample,
        photo1: PhotometricSpec,
        photo2: PhotometricSpec,
        shared_geo: GeometricSpec,
    ) -> Result<BranchViews> {
        let view1_image = apply_photometric(&sample.image, &photo1);
        let view2_image =
            apply_geometric(&apply_photometric(&sample.image, &photo2), &shared_geo, Domain::Image)?;
        Ok(BranchViews { view1_image, view2_image, shared_geo, photo1, photo2 })
    }
}

pub fn make_branch_views(
    sample: &ImageSample,
    rng: &mut impl Rng,
    out_size: (usize, usize),
    align: usize,
) -> Result<BranchViews> {
    let (p1, p2, g) =
        sample_transform_specs(rng, (sample.height(), sample.width()), out_size, align);
    BranchViews::replay(sample, p1, p2, g)
}
