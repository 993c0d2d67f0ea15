//! The dataset index file.
//!
//! `root/manifest` holds one entry per line:
//!
//! ```text
//! <relative image path>\t<count>[\t<relative points path>]
//! ```
//!
//! Blank lines are ignored. Lines starting with `#` are comments, except
//! `#split=<train|test>` and `#preset=<name>`, which set dataset metadata.
//! A points file holds one `x y` pair per line in original-image pixels.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{read_image, AnnotatedImage};
use crate::error::{Error, Result};
use crate::loss::preset_beta;

pub const MANIFEST_FILE: &str = "manifest";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub count: u64,
    pub points: Option<PathBuf>,
}

impl ManifestEntry {
    /// Identifier used in reports: the image path relative to the root.
    pub fn id(&self) -> String {
        self.image.to_string_lossy().into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    pub preset: Option<String>,
    /// Entries without a points file; their crops share the total equally.
    pub count_only: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dataset identifier: the root directory's final component.
    pub fn dataset_id(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.root.to_string_lossy().into_owned())
    }

    /// A manifest over the selected entries, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let entries: Vec<_> = indices.iter().map(|&i| self.entries[i].clone()).collect();
        Self {
            count_only: entries.iter().filter(|e| e.points.is_none()).count(),
            entries,
            ..self.clone()
        }
    }

    pub fn load_image(&self, index: usize) -> Result<AnnotatedImage> {
        let entry = &self.entries[index];
        let pixels = read_image(&self.root.join(&entry.image))?;
        let points = match &entry.points {
            Some(p) => Some(read_points(&self.root.join(p))?),
            None => None,
        };
        AnnotatedImage::new(entry.id(), pixels, entry.count, points)
    }

    /// Serializes the entries in the on-disk format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.image.to_string_lossy());
            out.push('\t');
            out.push_str(&e.count.to_string());
            if let Some(p) = &e.points {
                out.push('\t');
                out.push_str(&p.to_string_lossy());
            }
            out.push('\n');
        }
        out
    }
}

pub fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `x y`, got `{line}`"),
        };
        let mut it = line.split_whitespace();
        let x: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let y: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if it.next().is_some() {
            return Err(bad());
        }
        points.push((x, y));
    }
    Ok(points)
}

/// Reads and validates `root/manifest`; every referenced file must exist.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries: Vec::new(),
        split: Split::Train,
        preset: None,
        count_only: 0,
    };
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |msg: String| Error::Manifest {
            path: path.clone(),
            line: lineno,
            msg,
        };
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            match comment.trim().split_once('=') {
                Some(("split", "train")) => manifest.split = Split::Train,
                Some(("split", "test")) => manifest.split = Split::Test,
                Some(("split", other)) => return Err(err(format!("unknown split `{other}`"))),
                Some(("preset", name)) => {
                    if preset_beta(name).is_none() {
                        return Err(err(format!("unknown preset `{name}`")));
                    }
                    manifest.preset = Some(name.to_string());
                }
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(err(format!(
                "expected 2 or 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let count_text = fields[1].trim();
        if count_text.starts_with('-') {
            return Err(err(format!("negative count `{count_text}`")));
        }
        let count: u64 = count_text
            .parse()
            .map_err(|_| err(format!("count `{count_text}` is not a nonnegative integer")))?;
        let image = PathBuf::from(fields[0]);
        if !root.join(&image).is_file() {
            return Err(err(format!("image `{}` does not exist", image.display())));
        }
        let points = match fields.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()) {
            Some(p) => {
                let p = PathBuf::from(p);
                if !root.join(&p).is_file() {
                    return Err(err(format!("points file `{}` does not exist", p.display())));
                }
                Some(p)
            }
            None => None,
        };
        if points.is_none() {
            manifest.count_only += 1;
        }
        manifest.entries.push(ManifestEntry { image, count, points });
    }
    if manifest.count_only > 0 {
        warn!(
            "{}: {} of {} entries have no points; their crop counts are total/crops",
            path.display(),
            manifest.count_only,
            manifest.entries.len()
        );
    }
    Ok(manifest)
}
