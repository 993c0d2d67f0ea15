//! Subcommand implementations behind the `crowdformer` binary.
//!
//! Each `cmd_*` function is a complete command: it reads its inputs, writes
//! its outputs and returns a summary. `main.rs` only parses flags.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;

use crowdformer::checkpoint::Checkpoint;
use crowdformer::data::{gen_synthetic_dataset, load_manifest, read_image, AnnotatedImage, DatasetManifest, SynthOptions, TrainSet};
use crowdformer::eval::{cross_dataset_eval, cross_matrix_tsv, evaluate, predict_image, CrossDatasetCell, EvalReport, TrainedModel};
use crowdformer::gradcheck::{model_suite, op_suite, GradCheckReport};
use crowdformer::optim::TrainState;
use crowdformer::train::{train, EpochSummary};
use crowdformer::{CrowdFormer, RunConfig};

/// File names inside a training output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";

/// Loads a config and applies command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, preset: Option<&str>) -> Result<RunConfig> {
    let mut run = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = seed {
        run.optim.seed = seed;
    }
    if let Some(p) = preset {
        run.apply_preset(p)?;
    }
    run.validate()?;
    Ok(run)
}

fn load_checkpoint(path: &Path, expected: Option<&RunConfig>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if let Some(run) = expected {
        ensure!(
            ck.fingerprint() == run.fingerprint(),
            "checkpoint {} was written for config fingerprint {}, but the given config has {}",
            path.display(),
            ck.fingerprint(),
            run.fingerprint()
        );
    }
    Ok(ck)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
    /// Replaces `optim.epochs` as the total epoch budget.
    pub epochs: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub epochs: Vec<EpochSummary>,
}

/// Trains until the total epoch budget is met, resuming if asked.
///
/// The loss log gets one JSON line per epoch and is appended to on resume.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut run = load_config(&args.config, args.seed, args.preset.as_deref())?;
    if let Some(e) = args.epochs {
        run.optim.epochs = e;
    }
    let manifest = load_manifest(&args.data)?;
    info!(
        "training on {} ({} images, {} count-only)",
        manifest.dataset_id(),
        manifest.len(),
        manifest.count_only
    );
    let data = TrainSet::from_manifest(&manifest, &run)?;
    ensure!(!data.is_empty(), "training split {} is empty", args.data.display());

    let (mut model, mut state) = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&run)).context("cannot resume")?;
            (ck.model, ck.state)
        }
        None => {
            let model = CrowdFormer::new(&run.model, run.optim.seed)?;
            let state = TrainState::new(&model.params, run.optim.seed);
            (model, state)
        }
    };
    let steps_per_epoch = data.len().div_ceil(run.optim.batch_size) as u64;
    let done = (state.step / steps_per_epoch) as usize;
    let remaining = run.optim.epochs.saturating_sub(done);

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let loss_log = args.out.join(LOSS_LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&loss_log)
        .with_context(|| format!("opening {}", loss_log.display()))?;
    let mut write_err = None;
    let epochs = train(&mut model, &data, &run, &mut state, done, remaining, |s| {
        info!("epoch {} loss {:.6}", s.epoch, s.mean_loss);
        let line = serde_json::to_string(s).expect("summary serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing loss log");
    }

    let checkpoint = args.out.join(CHECKPOINT_FILE);
    Checkpoint::new(run, manifest.dataset_id(), model, state)?.save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_log,
        epochs,
    })
}

/// Evaluates a checkpoint on a test split and writes the JSON-lines report.
///
/// With `config`, the checkpoint must carry the same fingerprint.
pub fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, config: Option<&RunConfig>) -> Result<EvalReport> {
    let ck = load_checkpoint(ckpt, config)?;
    let manifest = load_manifest(data)?;
    ensure!(!manifest.is_empty(), "test split {} has no images", data.display());
    let report = evaluate(&ck.model, &manifest, &ck.run, &ck.source)?;
    report.save(out)?;
    Ok(report)
}

/// Evaluates every checkpoint on every dataset and writes the TSV matrix to
/// `out`, plus a JSON line per cell next to it.
///
/// A dataset that fails to load is recorded in its cells; a checkpoint that
/// fails to load aborts the run.
pub fn cmd_cross_eval(ckpts: &[PathBuf], datasets: &[PathBuf], out: &Path, include_diagonal: bool) -> Result<Vec<CrossDatasetCell>> {
    ensure!(!ckpts.is_empty() && !datasets.is_empty(), "need at least one checkpoint and one dataset");
    let loaded = ckpts
        .iter()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<TrainedModel> = loaded
        .iter()
        .map(|ck| TrainedModel {
            source: ck.source.clone(),
            model: &ck.model,
            run: &ck.run,
        })
        .collect();
    let targets: Vec<(String, std::result::Result<DatasetManifest, String>)> = datasets
        .iter()
        .map(|d| {
            let id = d
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string());
            let manifest = load_manifest(d).map_err(|e| e.to_string());
            (id, manifest)
        })
        .collect();
    let cells = cross_dataset_eval(&models, &targets, include_diagonal);
    fs::write(out, cross_matrix_tsv(&cells)).with_context(|| format!("writing {}", out.display()))?;
    let mut lines = String::new();
    for c in &cells {
        lines.push_str(&serde_json::to_string(c)?);
        lines.push('\n');
    }
    let json_path = out.with_extension("jsonl");
    fs::write(&json_path, lines).with_context(|| format!("writing {}", json_path.display()))?;
    Ok(cells)
}

/// Predicted count for one image file.
pub fn cmd_predict(ckpt: &Path, image: &Path) -> Result<f64> {
    let ck = Checkpoint::load(ckpt)?;
    let pixels = read_image(image)?;
    let img = AnnotatedImage::new(image.display().to_string(), pixels, 0, None)?;
    let (count, _) = predict_image(&ck.model, &img, &ck.run)?;
    Ok(count)
}

/// Runs the op suite and the end-to-end model check; fails if any fails.
pub fn cmd_gradcheck(run: &RunConfig, seed: u64, trials: usize, out: Option<&Path>) -> Result<Vec<GradCheckReport>> {
    let mut reports = op_suite(seed, trials)?;
    reports.push(model_suite(run, seed, trials)?);
    if let Some(path) = out {
        let mut text = String::new();
        for r in &reports {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(reports)
}

pub fn cmd_gen_synth(out: &Path, n: usize, min_count: u64, max_count: u64, seed: u64) -> Result<DatasetManifest> {
    Ok(gen_synthetic_dataset(out, n, (min_count, max_count), seed, &SynthOptions::default())?)
}
