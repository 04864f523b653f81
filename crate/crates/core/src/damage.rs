//! The collateral-damage indicator: a prior sample the base model handled
//! correctly that the fine-tuned model now gets wrong.
//!
//! Two forms: classification (prediction flips off the label) and
//! loss-threshold (loss crosses tau from below). The prior side always reads
//! from the prediction cache; only the current side needs a live signal, and
//! that signal is the one the training loop already produced.

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{PredictionCache, SampleSignal};

/// Which damage definition a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DamageMode {
    Classification,
    LossThreshold,
}

#[derive(Debug, Clone, Copy)]
pub struct DamageConfig {
    pub mode: DamageMode,
    /// Loss threshold; only meaningful in loss-threshold mode.
    pub tau: f64,
    /// Percentile of cached prior losses that defines tau.
    pub tau_percentile: f64,
}

impl DamageConfig {
    pub fn classification() -> Self {
        Self {
            mode: DamageMode::Classification,
            tau: f64::NAN,
            tau_percentile: 90.0,
        }
    }

    pub fn loss_threshold(tau: f64, percentile: f64) -> Self {
        Self {
            mode: DamageMode::LossThreshold,
            tau,
            tau_percentile: percentile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DamageMode::LossThreshold && !self.tau.is_finite() {
            return Err(Error::NonFinite("damage threshold tau"));
        }
        if !(self.tau_percentile > 0.0 && self.tau_percentile < 100.0) {
            return Err(Error::InvalidConfig(format!(
                "tau percentile must be in (0, 100), got {}",
                self.tau_percentile
            )));
        }
        Ok(())
    }
}

/// Classification damage: correct before, wrong now.
pub fn cd_classification(prior_pred: usize, current_pred: usize, label: usize) -> bool {
    prior_pred == label && current_pred != label
}

/// Threshold damage: loss below tau before, above tau now. Ties with tau on
/// either side do not count.
pub fn cd_threshold(prior_loss: f64, current_loss: f64, tau: f64) -> bool {
    prior_loss < tau && current_loss > tau
}

/// Nearest-rank percentile of the cached prior losses.
pub fn compute_tau(cache: &PredictionCache, percentile: f64) -> Result<f64> {
    if cache.is_empty() {
        return Err(Error::Empty("prediction cache"));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile must be in (0, 100], got {percentile}"
        )));
    }
    let losses = cache.sorted_losses();
    let n = losses.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    Ok(losses[rank.clamp(1, n) - 1])
}

/// Dispatch to the configured damage definition for one sample, reading the
/// prior side from the cache and the current side from a training signal.
pub fn cd_flag(
    sample: &Sample,
    cache: &PredictionCache,
    current: &SampleSignal,
    config: &DamageConfig,
) -> Result<bool> {
    let entry = cache.require(sample.id)?;
    Ok(match config.mode {
        DamageMode::Classification => {
            cd_classification(entry.predicted, current.predicted, sample.label)
        }
        DamageMode::LossThreshold => cd_threshold(entry.loss, current.loss, config.tau),
    })
}
