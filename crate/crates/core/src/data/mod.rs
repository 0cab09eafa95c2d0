//! Images, label maps, dataset folders and augmentations.

mod augment;
mod folder;
mod synthetic;

pub use augment::{
    apply_geometric, apply_geometric_tensor, apply_photometric, gaussian_blur, make_branch_views,
    sample_geometric, sample_photometric, sample_transform_specs, BranchViews, CropBox, Domain,
    GeometricSpec, PhotometricSpec,
};
pub(crate) use folder::image_to_rgb;
pub use folder::{load_dataset, save_dataset, ClassInfo, ClassKind, DatasetMeta, LoadedDataset};
pub use synthetic::{gen_synthetic_dataset, SyntheticDataset, MAX_SYNTHETIC_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::{ResamplePlan, Tensor};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Planar (channel-major) image or feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Image { channels, height, width, data: vec![v; channels * height * width] }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Apply a spatial plan to every channel.
    pub fn resample(&self, plan: &ResamplePlan) -> Result<Image> {
        if (plan.in_h, plan.in_w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "plan for {}x{}, image {}x{}",
                plan.in_h, plan.in_w, self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * plan.out_h * plan.out_w);
        for c in 0..self.channels {
            data.extend(plan.apply_plane(self.plane(c)));
        }
        Image::new(self.channels, plan.out_h, plan.out_w, data)
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        self.resample(&ResamplePlan::resize(self.height, self.width, out_h, out_w))
            .expect("plan matches image")
    }

    /// Integer crop `(top, left, h, w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop ({top},{left},{h},{w}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Average over `k×k` blocks (partial border blocks average their valid cells).
    pub fn avg_pool(&self, k: usize) -> Image {
        let t = self.to_tensor().avg_pool(k).expect("4-d");
        Image::from_tensor(&t, 0).expect("single image")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, self.channels, self.height, self.width])
    }

    /// Batch element `n` of an `[N, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let [nb, c, h, w] = t.dims4()?;
        if n >= nb {
            return Err(Error::Shape(format!("batch index {n} of {nb}")));
        }
        let sz = c * h * w;
        Image::new(c, h, w, t.data()[n * sz..(n + 1) * sz].to_vec())
    }

    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            if (im.channels, im.height, im.width) != (c, h, w) {
                return Err(Error::Shape("batch images differ in size".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(data, &[images.len(), c, h, w]))
    }
}

/// Per-pixel class indices, [`IGNORE_LABEL`] for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} labels for {height}x{width}", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    /// Nearest-neighbour resize (pixel-center sampling).
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> LabelMap {
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / out_h as f64) as usize).min(self.height - 1);
            for x in 0..out_w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / out_w as f64) as usize).min(self.width - 1);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        LabelMap { height: out_h, width: out_w, data }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<LabelMap> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument("label crop outside map".into()));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Ok(LabelMap { height: h, width: w, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub gt: Option<LabelMap>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Image, gt: Option<LabelMap>) -> Result<Self> {
        let id = id.into();
        if image.channels != 3 {
            return Err(Error::Sample { id, reason: format!("{} channels, expected 3", image.channels) });
        }
        if let Some(gt) = &gt {
            if (gt.height, gt.width) != (image.height, image.width) {
                return Err(Error::Sample {
                    id,
                    reason: format!(
                        "label {}x{} vs image {}x{}",
                        gt.height, gt.width, image.height, image.width
                    ),
                });
            }
        }
        if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Sample { id, reason: "pixel values outside [0,1]".into() });
        }
        Ok(ImageSample { id, image, gt })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Resize the shorter side to `size`, then center-crop `size × size`.
    pub fn resize_center_crop(&self, size: usize) -> Result<ImageSample> {
        let (h, w) = (self.height(), self.width());
        let scale = size as f64 / h.min(w) as f64;
        let rh = ((h as f64 * scale).round() as usize).max(size);
        let rw = ((w as f64 * scale).round() as usize).max(size);
        let (top, left) = ((rh - size) / 2, (rw - size) / 2);
        let image = self.image.resize_bilinear(rh, rw).crop(top, left, size, size)?;
        let gt = match &self.gt {
            Some(g) => Some(g.resize_nearest(rh, rw).crop(top, left, size, size)?),
            None => None,
        };
        Ok(ImageSample { id: self.id.clone(), image, gt })
    }
}
