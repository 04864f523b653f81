//! Compute accounting in abstract forward-pass units.
//!
//! One unit is one forward pass on one sample; a backward pass costs two
//! units, so training one sample (forward + backward) costs three. Only the
//! ratios matter for comparing strategies. A run's total budget c splits into
//! a rehearsal share c_p = beta * c (itself split between sampling and
//! training) and a fine-tuning share c_f; every strategy at the same
//! (c, beta) must consume the same total, which is what makes the comparison
//! budget-matched. Evaluation passes are instrumentation and are metered
//! outside the budget.

use crate::error::{Error, Result};
use crate::sampler::{SamplerConfig, Strategy};

pub const FORWARD_UNIT: f64 = 1.0;
pub const BACKWARD_UNIT: f64 = 2.0;
pub const TRAIN_SAMPLE_UNIT: f64 = FORWARD_UNIT + BACKWARD_UNIT;

/// (forward, backward, train_sample) unit costs.
pub fn unit_costs() -> (f64, f64, f64) {
    (FORWARD_UNIT, BACKWARD_UNIT, TRAIN_SAMPLE_UNIT)
}

/// Split a total budget into (rehearsal, fine-tune) shares. The fine-tune
/// share is computed as the remainder so the two always sum to c exactly.
pub fn split(c: f64, beta: f64) -> Result<(f64, f64)> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be in (0, 1), got {beta}"
        )));
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidConfig(format!("budget must be >= 0, got {c}")));
    }
    let c_p = beta * c;
    Ok((c_p, c - c_p))
}

/// How many rehearsal samples a strategy can afford to train from a rehearsal
/// budget: free-sampling strategies spend everything on training, while
/// online filtered strategies first pay one forward unit per scored candidate
/// (ceil(m / filter_ratio) candidates to keep m).
pub fn effective_rehearsal_count(c_p: f64, config: &SamplerConfig) -> usize {
    if c_p < TRAIN_SAMPLE_UNIT {
        return 0;
    }
    match config.strategy {
        Strategy::Uniform | Strategy::MixCd => (c_p / TRAIN_SAMPLE_UNIT) as usize,
        Strategy::Uncertainty | Strategy::MirPp => {
            let r = config.filter_ratio;
            let cost = |m: usize| -> f64 {
                (m as f64 / r).ceil() * FORWARD_UNIT + m as f64 * TRAIN_SAMPLE_UNIT
            };
            let mut m = (c_p / (TRAIN_SAMPLE_UNIT + FORWARD_UNIT / r)) as usize;
            while cost(m + 1) <= c_p {
                m += 1;
            }
            while m > 0 && cost(m) > c_p {
                m -= 1;
            }
            m
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetCategory {
    Sampling,
    RehearsalTraining,
    FinetuneTraining,
}

impl BudgetCategory {
    pub fn name(&self) -> &'static str {
        match self {
            BudgetCategory::Sampling => "sampling",
            BudgetCategory::RehearsalTraining => "rehearsal_training",
            BudgetCategory::FinetuneTraining => "finetune_training",
        }
    }
}

/// Per-category allocation and consumption for one run. Consumption may
/// exceed an allocation by at most one train-sample unit before charging
/// errors out.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    pub total: f64,
    pub beta: f64,
    pub rehearsal_allocated: f64,
    pub finetune_allocated: f64,
    pub sampling_allocated: f64,
    pub rehearsal_training_allocated: f64,
    pub sampling_consumed: f64,
    pub rehearsal_training_consumed: f64,
    pub finetune_training_consumed: f64,
}

impl BudgetLedger {
    /// Plan a ledger: split c via beta, then carve the planned sampling spend
    /// out of the rehearsal share.
    pub fn plan(c: f64, beta: f64, planned_sampling: f64) -> Result<Self> {
        let (c_p, c_f) = split(c, beta)?;
        if planned_sampling < 0.0 || planned_sampling > c_p {
            return Err(Error::InvalidConfig(format!(
                "planned sampling spend {planned_sampling} exceeds rehearsal budget {c_p}"
            )));
        }
        Ok(Self {
            total: c,
            beta,
            rehearsal_allocated: c_p,
            finetune_allocated: c_f,
            sampling_allocated: planned_sampling,
            rehearsal_training_allocated: c_p - planned_sampling,
            sampling_consumed: 0.0,
            rehearsal_training_consumed: 0.0,
            finetune_training_consumed: 0.0,
        })
    }

    fn slot(&mut self, category: BudgetCategory) -> (&mut f64, f64) {
        match category {
            BudgetCategory::Sampling => (&mut self.sampling_consumed, self.sampling_allocated),
            BudgetCategory::RehearsalTraining => (
                &mut self.rehearsal_training_consumed,
                self.rehearsal_training_allocated,
            ),
            BudgetCategory::FinetuneTraining => {
                (&mut self.finetune_training_consumed, self.finetune_allocated)
            }
        }
    }

    /// Consume units from a category. Errs when the category would run more
    /// than one train-sample unit past its allocation.
    pub fn charge(&mut self, category: BudgetCategory, units: f64) -> Result<()> {
        if !(units >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "charge must be non-negative, got {units}"
            )));
        }
        let (consumed, allocated) = self.slot(category);
        let after = *consumed + units;
        if after > allocated + TRAIN_SAMPLE_UNIT + 1e-9 {
            return Err(Error::Overdraft {
                category: category.name(),
                consumed: after,
                allocated,
            });
        }
        *consumed = after;
        Ok(())
    }

    pub fn consumed_total(&self) -> f64 {
        self.sampling_consumed + self.rehearsal_training_consumed + self.finetune_training_consumed
    }
}

/// Instrumented counter of actual model passes by purpose. Training and
/// sampling passes are budgeted; evaluation passes are instrumentation only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub train_forward: u64,
    pub train_backward: u64,
    pub sampling_forward: u64,
    pub eval_forward: u64,
}

impl FlopTally {
    /// Units consumed by budgeted activity (training + sampling).
    pub fn budgeted_units(&self) -> f64 {
        self.train_forward as f64 * FORWARD_UNIT
            + self.train_backward as f64 * BACKWARD_UNIT
            + self.sampling_forward as f64 * FORWARD_UNIT
    }

    /// Every forward pass the model performed outside evaluation.
    pub fn non_eval_forward_passes(&self) -> u64 {
        self.train_forward + self.sampling_forward
    }
}
