use super::{normalize, prepare_image, AnnotatedImage, CropSample, DatasetManifest};
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image already resized and tiled, ready to be augmented per step.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub id: String,
    pub total: f64,
    pub crops: Vec<CropSample>,
}

/// Preprocessed training images, held in memory in manifest order.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub images: Vec<PreparedImage>,
}

impl TrainSet {
    pub fn from_images(images: &[AnnotatedImage], run: &RunConfig) -> Result<Self> {
        let images = images
            .iter()
            .map(|img| {
                Ok(PreparedImage {
                    id: img.id.clone(),
                    total: img.total_count as f64,
                    crops: prepare_image(img, run)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { images })
    }

    pub fn from_manifest(manifest: &DatasetManifest, run: &RunConfig) -> Result<Self> {
        let images: Vec<AnnotatedImage> = (0..manifest.len())
            .map(|i| manifest.load_image(i))
            .collect::<Result<_>>()?;
        Self::from_images(&images, run)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stacks crops into a normalized `[N, 3, S, S]` batch.
pub fn batch_tensor(crops: &[CropSample], cfg: &DataConfig) -> Result<Tensor> {
    let first = crops
        .first()
        .ok_or_else(|| Error::EmptyDataset("no crops to batch".into()))?;
    let s = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(crops.len() * first.pixels.numel());
    for c in crops {
        if c.pixels.shape() != s.as_slice() {
            return Err(Error::shape(
                "batch",
                format!("crop {:?} differs from {:?}", c.pixels.shape(), s),
            ));
        }
        data.extend_from_slice(normalize(&c.pixels, cfg).data());
    }
    let mut shape = vec![crops.len()];
    shape.extend(s);
    Tensor::new(shape, data)
}
