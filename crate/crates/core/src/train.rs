//! The training loop: one optimizer step per batch of images.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{LossGranularity, RunConfig};
use crate::data::{augment, batch_tensor, CropSample, TrainSet};
use crate::error::{Error, Result};
use crate::model::CrowdFormer;
use crate::optim::{adamw_step, TrainState};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Smooth-L1 training loss for a batch of `images` whole images whose crops
/// are stacked in `crops`, at the configured granularity.
pub fn batch_loss(
    model: &CrowdFormer,
    tape: &mut Tape,
    store: &ParamStore,
    crops: &Tensor,
    crop_counts: &[f64],
    images: usize,
    run: &RunConfig,
) -> Result<Var> {
    let pred = model.forward_with(tape, store, &Var::constant(crops.clone()))?;
    match run.loss.granularity {
        LossGranularity::Crop => {
            let target = Tensor::new(vec![crop_counts.len()], crop_counts.to_vec())?;
            tape.smooth_l1(&pred, &target, run.loss.beta)
        }
        LossGranularity::Image => {
            let per_image = crop_counts.len() / images;
            let grouped = tape.reshape(&pred, &[images, per_image])?;
            let ones = Var::constant(Tensor::ones(&[1, per_image]));
            let totals = tape.linear(&grouped, &ones, None)?;
            let totals = tape.reshape(&totals, &[images])?;
            let target: Vec<f64> = crop_counts.chunks_exact(per_image).map(|c| c.iter().sum()).collect();
            tape.smooth_l1(&totals, &Tensor::new(vec![images], target)?, run.loss.beta)
        }
    }
}

/// Runs one epoch over `data` in a freshly shuffled order.
pub fn train_epoch(
    model: &mut CrowdFormer,
    data: &TrainSet,
    run: &RunConfig,
    state: &mut TrainState,
    epoch: usize,
) -> Result<EpochSummary> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set has no images".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(run.optim.batch_size) {
        let crops: Vec<CropSample> = batch
            .iter()
            .flat_map(|&i| &data.images[i].crops)
            .map(|c| augment(c, &run.data, &mut state.rng))
            .collect();
        let counts: Vec<f64> = crops.iter().map(|c| c.count).collect();
        let x = batch_tensor(&crops, &run.data)?;

        model.params.zero_grad();
        let mut tape = Tape::new();
        let loss = batch_loss(model, &mut tape, &model.params, &x, &counts, batch.len(), run)?;
        let grads = tape.backward(&loss)?;
        drop(tape);
        grads.accumulate_into(&mut model.params)?;
        drop(grads);
        adamw_step(&mut model.params, state, &run.optim)?;

        total += loss.value().item();
        steps += 1;
    }
    Ok(EpochSummary {
        epoch,
        mean_loss: total / steps as f64,
        steps,
    })
}

/// Runs `epochs` epochs, numbering them after those already in `state`.
pub fn train<F>(
    model: &mut CrowdFormer,
    data: &TrainSet,
    run: &RunConfig,
    state: &mut TrainState,
    first_epoch: usize,
    epochs: usize,
    mut on_epoch: F,
) -> Result<Vec<EpochSummary>>
where
    F: FnMut(&EpochSummary),
{
    (first_epoch..first_epoch + epochs)
        .map(|e| {
            let s = train_epoch(model, data, run, state, e)?;
            on_epoch(&s);
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnnotatedImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_set(run: &RunConfig, n: usize) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let images: Vec<AnnotatedImage> = (0..n)
            .map(|i| {
                let px = Tensor::uniform(&[3, 128, 192], 0.0, 1.0, &mut rng);
                AnnotatedImage::new(format!("i{i}"), px, 6 * (i as u64 + 1), None).unwrap()
            })
            .collect();
        TrainSet::from_images(&images, run).unwrap()
    }

    fn curve(run: &RunConfig, data: &TrainSet, epochs: usize) -> Vec<f64> {
        let mut model = CrowdFormer::new(&run.model, 1).unwrap();
        let mut state = TrainState::new(&model.params, 1);
        train(&mut model, data, run, &mut state, 0, epochs, |_| {})
            .unwrap()
            .iter()
            .map(|s| s.mean_loss)
            .collect()
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let run = RunConfig::tiny();
        let mut model = CrowdFormer::new(&run.model, 0).unwrap();
        let mut state = TrainState::new(&model.params, 0);
        let err = train_epoch(&mut model, &TrainSet::default(), &run, &mut state, 0);
        assert!(matches!(err, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn frozen_model_keeps_its_loss() {
        let mut run = RunConfig::tiny();
        run.data.flip_prob = 0.0;
        run.data.gray_prob = 0.0;
        let data = small_set(&run, 2);
        let mut model = CrowdFormer::new(&run.model, 2).unwrap();
        model.params.set_trainable(false);
        let mut state = TrainState::new(&model.params, 2);
        let before = model.params.clone();
        let losses: Vec<f64> = (0..3)
            .map(|e| train_epoch(&mut model, &data, &run, &mut state, e).unwrap().mean_loss)
            .collect();
        assert!(losses.iter().all(|l| l.to_bits() == losses[0].to_bits()));
        assert!(model.params.iter().zip(before.iter()).all(|((_, a), (_, b))| a == b));
    }

    #[test]
    fn same_seed_same_curve() {
        let run = RunConfig::tiny();
        let data = small_set(&run, 2);
        let a = curve(&run, &data, 2);
        let b = curve(&run, &data, 2);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn batches_and_granularity() {
        let mut run = RunConfig::tiny();
        run.optim.batch_size = 2;
        let data = small_set(&run, 3);
        let mut model = CrowdFormer::new(&run.model, 3).unwrap();
        let mut state = TrainState::new(&model.params, 3);
        let s = train_epoch(&mut model, &data, &run, &mut state, 0).unwrap();
        assert_eq!(s.steps, 2);
        assert_eq!(state.step, 2);
        run.loss.granularity = LossGranularity::Image;
        let s = train_epoch(&mut model, &data, &run, &mut state, 1).unwrap();
        assert!(s.mean_loss.is_finite());
    }

    #[test]
    fn image_loss_compares_crop_sum_with_total() {
        let run = RunConfig {
            loss: crate::config::LossConfig {
                granularity: LossGranularity::Image,
                ..RunConfig::tiny().loss
            },
            ..RunConfig::tiny()
        };
        let model = CrowdFormer::new(&run.model, 4).unwrap();
        let x = Tensor::uniform(&[6, 3, 64, 64], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let raw: f64 = model.predict_crops(&x).unwrap().iter().sum();
        let counts = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut tape = Tape::new();
        let loss = batch_loss(&model, &mut tape, &model.params, &x, &counts, 1, &run).unwrap();
        let expect = crate::loss::smooth_l1(raw - 21.0, run.loss.beta);
        assert!((loss.value().item() - expect).abs() < 1e-9);
    }
}
