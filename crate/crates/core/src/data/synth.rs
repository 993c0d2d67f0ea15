//! Synthetic count-labelled scenes: a textured background with one soft
//! blob marker per recorded point.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{load_manifest, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub width: u32,
    pub height: u32,
    /// Gaussian radius of a marker, in pixels.
    pub marker_radius: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            width: 384,
            height: 256,
            marker_radius: 6.0,
        }
    }
}

/// Writes `n_images` scenes with counts drawn uniformly from `count_range`
/// under `out_dir`, then loads the resulting manifest.
pub fn gen_synthetic_dataset(
    out_dir: &Path,
    n_images: usize,
    count_range: (u64, u64),
    seed: u64,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    let (lo, hi) = count_range;
    if lo > hi {
        return Err(Error::InvalidArgument(format!("count range {lo}..={hi} is empty")));
    }
    if opts.width == 0 || opts.height == 0 || !(opts.marker_radius > 0.0) {
        return Err(Error::InvalidArgument("synthetic image size and marker radius must be positive".into()));
    }
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(&out_dir.join("images"))?;
    mk(&out_dir.join("points"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    for i in 0..n_images {
        let count = rng.random_range(lo..=hi);
        let (img, points) = render_scene(count, opts, &mut rng);
        let image_rel = format!("images/img_{i:04}.png");
        let points_rel = format!("points/img_{i:04}.txt");
        let image_path = out_dir.join(&image_rel);
        img.save(&image_path).map_err(|e| Error::Image {
            path: image_path.clone(),
            msg: e.to_string(),
        })?;
        let body: String = points.iter().map(|(x, y)| format!("{x} {y}\n")).collect();
        let points_path = out_dir.join(&points_rel);
        fs::write(&points_path, body).map_err(|e| Error::io(&points_path, e))?;
        manifest.push_str(&format!("{image_rel}\t{count}\t{points_rel}\n"));
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    load_manifest(out_dir)
}

fn render_scene<R: Rng>(count: u64, opts: &SynthOptions, rng: &mut R) -> (RgbImage, Vec<(f64, f64)>) {
    let (w, h) = (opts.width as usize, opts.height as usize);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.4));
    let (fx, fy) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut px = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64;
            let v = y as f64 / h as f64;
            let wave = 0.06 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            for c in 0..3 {
                px[y * w + x][c] = base[c] + wave + rng.random_range(-0.03..0.03);
            }
        }
    }
    let points: Vec<(f64, f64)> = (0..count)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let color = [0.95, 0.85, 0.7];
    let r = opts.marker_radius;
    let reach = (3.0 * r).ceil() as isize;
    for &(cx, cy) in &points {
        let (ix, iy) = (cx as isize, cy as isize);
        for y in (iy - reach).max(0)..(iy + reach + 1).min(h as isize) {
            for x in (ix - reach).max(0)..(ix + reach + 1).min(w as isize) {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let a = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                let p = &mut px[y as usize * w + x as usize];
                for c in 0..3 {
                    p[c] += a * (color[c] - p[c]);
                }
            }
        }
    }
    let mut img = RgbImage::new(opts.width, opts.height);
    for (i, p) in px.iter().enumerate() {
        let q = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(q));
    }
    (img, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "images", "points"] {
            let dir = root.join(sub);
            let mut names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names.into_iter().filter(|p| p.is_file()) {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn deterministic_and_self_consistent() {
        let opts = SynthOptions {
            width: 48,
            height: 32,
            marker_radius: 1.5,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = gen_synthetic_dataset(a.path(), 4, (5, 50), 7, &opts).unwrap();
        gen_synthetic_dataset(b.path(), 4, (5, 50), 7, &opts).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
        assert_eq!(ma.len(), 4);
        assert_eq!(ma.count_only, 0);
        for i in 0..ma.len() {
            let img = ma.load_image(i).unwrap();
            assert_eq!(img.points.as_ref().unwrap().len() as u64, ma.entries[i].count);
            assert!((5..=50).contains(&img.total_count));
            assert_eq!((img.width(), img.height()), (48, 32));
        }
    }

    #[test]
    fn zero_counts_and_empty_sets() {
        let opts = SynthOptions {
            width: 16,
            height: 16,
            marker_radius: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let m = gen_synthetic_dataset(dir.path(), 3, (0, 0), 1, &opts).unwrap();
        assert!(m.entries.iter().all(|e| e.count == 0));
        assert!(m.load_image(0).unwrap().points.unwrap().is_empty());
        let empty = tempfile::tempdir().unwrap();
        let m = gen_synthetic_dataset(empty.path(), 0, (1, 2), 1, &opts).unwrap();
        assert!(m.is_empty());
        assert!(gen_synthetic_dataset(empty.path(), 1, (3, 2), 1, &opts).is_err());
    }
}
