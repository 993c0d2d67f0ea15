//! Smooth-L1 count loss.

use crate::error::{Error, Result};

/// Per-residual smooth-L1: quadratic within `beta` of zero, linear beyond.
pub fn smooth_l1(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a <= beta {
        0.5 * diff * diff / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(diff: f64, beta: f64) -> f64 {
    if diff.abs() <= beta {
        diff / beta
    } else {
        diff.signum()
    }
}

/// Mean smooth-L1 between predicted and ground-truth counts.
pub fn smooth_l1_loss(pred: &[f64], truth: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smooth_l1 beta must be positive, got {beta}"
        )));
    }
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(
            "smooth_l1",
            format!("{} predictions for {} targets", pred.len(), truth.len()),
        ));
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(x, y)| smooth_l1(x - y, beta))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Loss β for the named dataset presets.
pub fn preset_beta(name: &str) -> Option<f64> {
    match name {
        "sha" | "qnrf" => Some(1.0),
        "shb" => Some(7.0),
        "ucf50" => Some(15.0),
        _ => None,
    }
}
