//! Datasets, augmentation and the synthetic multi-domain generator.

pub mod augment;
pub mod dataset;
pub mod synthetic;

pub use augment::{augment, AugmentConfig};
pub use dataset::{
    hybrid_view, load_dataset, parse_market_name, ImageLabel, ImageRecord, Layout, LoadOptions,
    ReidDataset, Split,
};
pub use dataset::split_by_domain;
pub use synthetic::{generate_synthetic, SyntheticBundle, SyntheticConfig};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-channel constants mapping 8-bit RGB to model input:
/// `(v / 255 − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PixelNorm {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Stack images into a normalized `[N, 3, H, W]` tensor.
pub fn images_to_tensor(
    images: &[&RgbImage],
    norm: &PixelNorm,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot build a tensor from zero images".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dimensions() != first.dimensions() {
            return Err(Error::Data(format!(
                "mixed image sizes in one batch: {:?} vs {:?}",
                img.dimensions(),
                first.dimensions()
            )));
        }
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(img.pixels().map(|p| (p.0[c] as f32 / 255.0 - m) / s));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}
