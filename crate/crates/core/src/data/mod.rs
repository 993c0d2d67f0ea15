//! Images, preprocessing and datasets.

mod dataset;
mod manifest;
mod synth;

use std::path::Path;

use rand::Rng;

use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{batch_tensor, PreparedImage, TrainSet};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use synth::{gen_synthetic_dataset, SynthOptions};

/// An RGB image in `[0, 1]`, `[3, H, W]`, with its count label and optional
/// head positions in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: Tensor,
    pub total_count: u64,
    pub points: Option<Vec<(f64, f64)>>,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, pixels: Tensor, total_count: u64, points: Option<Vec<(f64, f64)>>) -> Result<Self> {
        let img = Self {
            id: id.into(),
            pixels,
            total_count,
            points,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("image", format!("pixels must be [3, H, W], got {s:?}")));
        }
        if let Some(points) = &self.points {
            if points.len() as u64 != self.total_count {
                return Err(Error::InvalidArgument(format!(
                    "image {}: {} points for a count of {}",
                    self.id,
                    points.len(),
                    self.total_count
                )));
            }
            let (w, h) = (self.width() as f64, self.height() as f64);
            if let Some(p) = points.iter().find(|(x, y)| !(0.0..w).contains(x) || !(0.0..h).contains(y)) {
                return Err(Error::InvalidArgument(format!(
                    "image {}: point ({}, {}) outside {w}x{h}",
                    self.id, p.0, p.1
                )));
            }
        }
        Ok(())
    }
}

/// One tile of a resized image with its share of the count.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSample {
    pub pixels: Tensor,
    pub count: f64,
    pub source_image_id: String,
    pub crop_index: usize,
}

/// Reads an 8-bit raster into `[3, H, W]` values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Bilinear resampling with half-pixel centers; points are scaled by the
/// per-axis size ratio and the count is untouched.
pub fn resize_image(image: &AnnotatedImage, width: usize, height: usize) -> Result<AnnotatedImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    let (src_w, src_h) = (image.width(), image.height());
    if (src_w, src_h) == (width, height) {
        return Ok(image.clone());
    }
    let sx = src_w as f64 / width as f64;
    let sy = src_h as f64 / height as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, sx, src_w)).collect();
    let src = image.pixels.data();
    let mut out = vec![0.0; 3 * width * height];
    for c in 0..3 {
        let plane = &src[c * src_w * src_h..(c + 1) * src_w * src_h];
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, src_h);
            let (r0, r1) = (&plane[y0 * src_w..][..src_w], &plane[y1 * src_w..][..src_w]);
            let dst = &mut out[(c * height + y) * width..][..width];
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
                dst[x] = top + fy * (bottom - top);
            }
        }
    }
    let rx = width as f64 / src_w as f64;
    let ry = height as f64 / src_h as f64;
    let points = image.points.as_ref().map(|pts| {
        pts.iter()
            .map(|&(x, y)| ((x * rx).min(width as f64 - 1e-9), (y * ry).min(height as f64 - 1e-9)))
            .collect()
    });
    AnnotatedImage::new(
        image.id.clone(),
        Tensor::new(vec![3, height, width], out)?,
        image.total_count,
        points,
    )
}

/// Splits an image into a row-major grid of `side × side` crops.
///
/// Each point belongs to the crop whose half-open box `[x0, x0+side) ×
/// [y0, y0+side)` contains it. Without points the total is shared equally.
pub fn tile_image(image: &AnnotatedImage, side: usize) -> Result<Vec<CropSample>> {
    let (w, h) = (image.width(), image.height());
    if side == 0 || w % side != 0 || h % side != 0 {
        return Err(Error::shape(
            "tile_image",
            format!("{w}x{h} image does not tile into {side}x{side} crops"),
        ));
    }
    let (cols, rows) = (w / side, h / side);
    let n = cols * rows;
    let counts: Vec<f64> = match &image.points {
        Some(points) => {
            let mut c = vec![0u64; n];
            for &(x, y) in points {
                let col = ((x / side as f64).floor() as usize).min(cols - 1);
                let row = ((y / side as f64).floor() as usize).min(rows - 1);
                c[row * cols + col] += 1;
            }
            c.into_iter().map(|v| v as f64).collect()
        }
        None => vec![image.total_count as f64 / n as f64; n],
    };
    let src = image.pixels.data();
    let mut crops = Vec::with_capacity(n);
    for row in 0..rows {
        for col in 0..cols {
            let mut data = Vec::with_capacity(3 * side * side);
            for c in 0..3 {
                for y in row * side..(row + 1) * side {
                    let start = (c * h + y) * w + col * side;
                    data.extend_from_slice(&src[start..start + side]);
                }
            }
            let index = row * cols + col;
            crops.push(CropSample {
                pixels: Tensor::new(vec![3, side, side], data)?,
                count: counts[index],
                source_image_id: image.id.clone(),
                crop_index: index,
            });
        }
    }
    Ok(crops)
}

/// Resizes to the configured size and tiles into model-sized crops.
pub fn prepare_image(image: &AnnotatedImage, run: &RunConfig) -> Result<Vec<CropSample>> {
    let resized = resize_image(image, run.data.resize_width, run.data.resize_height)?;
    tile_image(&resized, run.model.input_size)
}

pub fn flip_horizontal(pixels: &Tensor) -> Tensor {
    let s = pixels.shape();
    let w = s[s.len() - 1];
    let mut data = pixels.data().to_vec();
    data.chunks_exact_mut(w).for_each(<[f64]>::reverse);
    Tensor::from_parts(s.to_vec(), data)
}

/// ITU-R 601 luma replicated into all three channels.
pub fn grayscale(pixels: &Tensor) -> Tensor {
    let s = pixels.shape();
    let plane = s[1] * s[2];
    let d = pixels.data();
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        let l = 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
        out[i] = l;
        out[plane + i] = l;
        out[2 * plane + i] = l;
    }
    Tensor::from_parts(s.to_vec(), out)
}

/// Random horizontal flip and grayscale; the count is carried over untouched.
pub fn augment<R: Rng + ?Sized>(crop: &CropSample, cfg: &DataConfig, rng: &mut R) -> CropSample {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let gray = rng.random::<f64>() < cfg.gray_prob;
    let mut pixels = crop.pixels.clone();
    if flip {
        pixels = flip_horizontal(&pixels);
    }
    if gray {
        pixels = grayscale(&pixels);
    }
    CropSample {
        pixels,
        ..crop.clone()
    }
}

/// Per-channel standardization with the configured mean and std.
pub fn normalize(pixels: &Tensor, cfg: &DataConfig) -> Tensor {
    let plane = pixels.numel() / 3;
    let mut data = pixels.data().to_vec();
    for (c, chunk) in data.chunks_exact_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v = (*v - cfg.mean[c]) / cfg.std[c]);
    }
    Tensor::from_parts(pixels.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize, points: Vec<(f64, f64)>, rng: &mut ChaCha8Rng) -> AnnotatedImage {
        let n = points.len() as u64;
        AnnotatedImage::new("img", Tensor::uniform(&[3, h, w], 0.0, 1.0, rng), n, Some(points)).unwrap()
    }

    #[test]
    fn validation() {
        let px = Tensor::zeros(&[3, 4, 4]);
        assert!(AnnotatedImage::new("a", px.clone(), 2, Some(vec![(0.0, 0.0)])).is_err());
        assert!(AnnotatedImage::new("a", px.clone(), 1, Some(vec![(4.0, 0.0)])).is_err());
        assert!(AnnotatedImage::new("a", px.clone(), 1, Some(vec![(3.9, 3.9)])).is_ok());
        assert!(AnnotatedImage::new("a", px, 5, None).is_ok());
    }

    #[test]
    fn resize_identity_constant_and_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = image(24, 16, vec![(3.0, 4.0)], &mut rng);
        assert_eq!(resize_image(&img, 24, 16).unwrap(), img);

        let flat = AnnotatedImage::new("c", Tensor::full(&[3, 37, 53], 0.3), 0, None).unwrap();
        let r = resize_image(&flat, 24, 16).unwrap();
        assert!(r.pixels.data().iter().all(|v| (v - 0.3).abs() < 1e-15));

        let big = AnnotatedImage::new("b", Tensor::zeros(&[3, 32, 48]), 1, Some(vec![(24.0, 16.0)])).unwrap();
        let r = resize_image(&big, 12, 8).unwrap();
        assert_eq!(r.points.unwrap(), vec![(6.0, 4.0)]);
        assert_eq!(r.total_count, 1);
    }

    #[test]
    fn full_size_point_scaling() {
        let big = AnnotatedImage::new(
            "b",
            Tensor::zeros(&[3, 1536, 2304]),
            1,
            Some(vec![(2304.0 * 0.5, 1536.0 * 0.5)]),
        )
        .unwrap();
        let r = resize_image(&big, 1152, 768).unwrap();
        assert_eq!(r.points.unwrap(), vec![(576.0, 384.0)]);
    }

    #[test]
    fn bilinear_interpolates_a_ramp() {
        // A horizontal ramp upsampled 2x keeps interior values on the line.
        let w = 4;
        let data: Vec<f64> = (0..3).flat_map(|_| (0..2).flat_map(|_| (0..w).map(|x| x as f64))).collect();
        let img = AnnotatedImage::new("r", Tensor::new(vec![3, 2, w], data).unwrap(), 0, None).unwrap();
        let r = resize_image(&img, 8, 4).unwrap();
        let row = &r.pixels.data()[..8];
        assert_eq!(row, &[0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }

    #[test]
    fn tiling_grid_and_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = vec![(0.0, 0.0), (7.999, 7.999), (8.0, 0.0), (23.5, 15.5), (8.0, 8.0)];
        let img = image(24, 16, pts, &mut rng);
        let crops = tile_image(&img, 8).unwrap();
        assert_eq!(crops.len(), 6);
        let counts: Vec<f64> = crops.iter().map(|c| c.count).collect();
        assert_eq!(counts, [2.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(crops[4].crop_index, 4);
        // Crop 4 is row 1, column 1.
        let px = img.pixels.data();
        assert_eq!(crops[4].pixels.data()[0], px[8 * 24 + 8]);
        assert!(tile_image(&img, 7).is_err());
    }

    #[test]
    fn count_only_images_share_equally() {
        let img = AnnotatedImage::new("w", Tensor::zeros(&[3, 16, 24]), 9, None).unwrap();
        let crops = tile_image(&img, 8).unwrap();
        assert!(crops.iter().all(|c| c.count == 1.5));
    }

    #[test]
    fn augmentations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let px = Tensor::uniform(&[3, 5, 6], 0.0, 1.0, &mut rng);
        assert_eq!(flip_horizontal(&flip_horizontal(&px)), px);
        assert_ne!(flip_horizontal(&px), px);
        let gray = grayscale(&px);
        let again = grayscale(&gray);
        assert!(gray.max_abs_diff(&again) < 1e-15);

        let crop = CropSample {
            pixels: px,
            count: 3.25,
            source_image_id: "x".into(),
            crop_index: 2,
        };
        let cfg = DataConfig {
            flip_prob: 0.5,
            gray_prob: 0.5,
            ..DataConfig::default()
        };
        for _ in 0..20 {
            let out = augment(&crop, &cfg, &mut rng);
            assert_eq!(out.count.to_bits(), crop.count.to_bits());
            assert_eq!(out.crop_index, 2);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn tiling_conserves_points(
                seed in 0u64..10_000,
                points in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..200),
                w in 24usize..80,
                h in 16usize..60,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x * w as f64, y * h as f64)).collect();
                let img = image(w, h, pts, &mut rng);
                let resized = resize_image(&img, 24, 16).unwrap();
                let crops = tile_image(&resized, 8).unwrap();
                prop_assert_eq!(crops.len(), 6);
                let total: f64 = crops.iter().map(|c| c.count).sum();
                prop_assert_eq!(total, points.len() as f64);
            }

            #[test]
            fn augmentation_keeps_label_and_range(seed in 0u64..10_000, count in 0.0f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let crop = CropSample {
                    pixels: Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng),
                    count,
                    source_image_id: "p".into(),
                    crop_index: 0,
                };
                let cfg = DataConfig { flip_prob: 0.5, gray_prob: 0.5, ..DataConfig::default() };
                let out = augment(&crop, &cfg, &mut rng);
                prop_assert_eq!(out.count.to_bits(), count.to_bits());
                prop_assert!(out.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let mut again = ChaCha8Rng::seed_from_u64(seed);
                let _ = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut again);
                prop_assert_eq!(augment(&crop, &cfg, &mut again).pixels, out.pixels);
            }
        }
    }
}
