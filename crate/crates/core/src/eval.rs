//! Count metrics and evaluation protocols.
//!
//! `mae` is the mean absolute error and `mse` the root of the mean squared
//! error over per-image counts; the latter keeps the conventional name used
//! by crowd-counting benchmarks even though it is an RMS quantity.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{batch_tensor, prepare_image, AnnotatedImage, CropSample, DatasetManifest, TrainSet};
use crate::error::{Error, Result};
use crate::model::CrowdFormer;

fn check_pairs(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::EmptyDataset("no predictions to score".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "metric",
            format!("{} predictions for {} ground truths", pred.len(), truth.len()),
        ));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth)?;
    let total: f64 = pred.iter().zip(truth).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / pred.len() as f64)
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth)?;
    let total: f64 = pred.iter().zip(truth).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((total / pred.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImagePrediction {
    pub id: String,
    /// Reported count, clamped at zero.
    pub predicted: f64,
    pub ground_truth: f64,
    /// Sum of the raw crop regressions before clamping.
    pub raw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    pub per_image: Vec<ImagePrediction>,
}

impl EvalReport {
    pub fn from_predictions(dataset: &str, model: &str, per_image: Vec<ImagePrediction>) -> Result<Self> {
        let p: Vec<f64> = per_image.iter().map(|r| r.predicted).collect();
        let g: Vec<f64> = per_image.iter().map(|r| r.ground_truth).collect();
        Ok(Self {
            dataset: dataset.to_string(),
            model: model.to_string(),
            n: per_image.len(),
            mae: mae(&p, &g)?,
            mse: mse(&p, &g)?,
            per_image,
        })
    }

    /// One JSON record per image followed by a summary record.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.per_image {
            let line = serde_json::json!({
                "record": "image",
                "id": r.id,
                "predicted": r.predicted,
                "ground_truth": r.ground_truth,
                "raw": r.raw,
            });
            writeln!(out, "{line}")?;
        }
        let summary = serde_json::json!({
            "record": "summary",
            "dataset": self.dataset,
            "model": self.model,
            "n": self.n,
            "mae": self.mae,
            "mse": self.mse,
        });
        writeln!(out, "{summary}")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Sums raw crop predictions; returns `(clamped, raw)`.
pub fn predict_crops(model: &CrowdFormer, crops: &[CropSample], run: &RunConfig) -> Result<(f64, f64)> {
    let x = batch_tensor(crops, &run.data)?;
    let raw: f64 = model.predict_crops(&x)?.iter().sum();
    Ok((raw.max(0.0), raw))
}

/// Resize, tile, predict every crop and sum.
pub fn predict_image(model: &CrowdFormer, image: &AnnotatedImage, run: &RunConfig) -> Result<(f64, f64)> {
    predict_crops(model, &prepare_image(image, run)?, run)
}

pub fn evaluate(model: &CrowdFormer, manifest: &DatasetManifest, run: &RunConfig, model_id: &str) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no test images", manifest.root.display())));
    }
    let per_image = (0..manifest.len())
        .map(|i| {
            let image = manifest.load_image(i)?;
            let (predicted, raw) = predict_image(model, &image, run)?;
            Ok(ImagePrediction {
                id: image.id,
                predicted,
                ground_truth: image.total_count as f64,
                raw,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(&manifest.dataset_id(), model_id, per_image)
}

/// Evaluates on already prepared images (e.g. the training set).
pub fn evaluate_prepared(model: &CrowdFormer, data: &TrainSet, run: &RunConfig, dataset: &str, model_id: &str) -> Result<EvalReport> {
    let per_image = data
        .images
        .iter()
        .map(|img| {
            let (predicted, raw) = predict_crops(model, &img.crops, run)?;
            Ok(ImagePrediction {
                id: img.id.clone(),
                predicted,
                ground_truth: img.total,
                raw,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(dataset, model_id, per_image)
}

/// Contiguous partition of `0..n` into `k` folds; the first `n % k` folds
/// get one extra element.
pub fn kfold_partition(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} images cannot fill {k} folds")));
    }
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push((start..start + len).collect());
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KFoldReport {
    pub folds: Vec<EvalReport>,
    /// Metrics over all held-out predictions together.
    pub pooled: EvalReport,
    pub mean_fold_mae: f64,
    pub mean_fold_mse: f64,
}

/// For each fold, `procedure(train_indices, test_indices)` trains on the
/// rest and reports on the fold.
///
/// With `shuffle_seed` the manifest order is permuted before partitioning.
pub fn kfold_eval<F>(n: usize, k: usize, shuffle_seed: Option<u64>, mut procedure: F) -> Result<KFoldReport>
where
    F: FnMut(&[usize], &[usize]) -> Result<EvalReport>,
{
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    }
    let folds = kfold_partition(n, k)?;
    let mut reports = Vec::with_capacity(k);
    for fold in &folds {
        let test: Vec<usize> = fold.iter().map(|&i| order[i]).collect();
        let train: Vec<usize> = order.iter().copied().filter(|i| !test.contains(i)).collect();
        reports.push(procedure(&train, &test)?);
    }
    let pooled_rows: Vec<ImagePrediction> = reports.iter().flat_map(|r| r.per_image.clone()).collect();
    let first = &reports[0];
    let pooled = EvalReport::from_predictions(&first.dataset, &first.model, pooled_rows)?;
    let mean_fold_mae = reports.iter().map(|r| r.mae).sum::<f64>() / k as f64;
    let mean_fold_mse = reports.iter().map(|r| r.mse).sum::<f64>() / k as f64;
    Ok(KFoldReport {
        folds: reports,
        pooled,
        mean_fold_mae,
        mean_fold_mse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossDatasetCell {
    pub source: String,
    pub target: String,
    pub report: std::result::Result<EvalReport, String>,
}

/// Anything that can be scored against a test split without updating it.
pub trait CountModel {
    fn source(&self) -> &str;
    fn evaluate(&self, manifest: &DatasetManifest) -> Result<EvalReport>;
}

pub struct TrainedModel<'a> {
    pub source: String,
    pub model: &'a CrowdFormer,
    pub run: &'a RunConfig,
}

impl CountModel for TrainedModel<'_> {
    fn source(&self) -> &str {
        &self.source
    }

    fn evaluate(&self, manifest: &DatasetManifest) -> Result<EvalReport> {
        evaluate(self.model, manifest, self.run, &self.source)
    }
}

/// Scores every model on every target. A target is either a loaded test
/// split or the error that prevented loading it; failures are recorded in
/// their cells and do not stop the matrix.
pub fn cross_dataset_eval<M: CountModel>(
    models: &[M],
    targets: &[(String, std::result::Result<DatasetManifest, String>)],
    include_diagonal: bool,
) -> Vec<CrossDatasetCell> {
    let mut cells = Vec::new();
    for m in models {
        for (target, manifest) in targets {
            if !include_diagonal && m.source() == target {
                continue;
            }
            let report = match manifest {
                Ok(man) => m.evaluate(man).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            cells.push(CrossDatasetCell {
                source: m.source().to_string(),
                target: target.clone(),
                report,
            });
        }
    }
    cells
}

/// Tab-separated matrix: one row per (source, target) cell.
pub fn cross_matrix_tsv(cells: &[CrossDatasetCell]) -> String {
    let mut out = String::from("source\ttarget\tn\tmae\tmse\terror\n");
    for c in cells {
        match &c.report {
            Ok(r) => out.push_str(&format!("{}\t{}\t{}\t{}\t{}\t\n", c.source, c.target, r.n, r.mae, r.mse)),
            Err(e) => out.push_str(&format!(
                "{}\t{}\t\t\t\t{}\n",
                c.source,
                c.target,
                e.replace(['\t', '\n'], " ")
            )),
        }
    }
    out
}
