//! Budget-matched rehearsal strategies.
//!
//! Uniform and mix-cd never touch the model while sampling, so their sampling
//! cost is zero. The online baselines (uncertainty, mir++) score uniformly
//! drawn candidates with one forward pass apiece and keep the top slice,
//! paying for the scoring out of the rehearsal budget.
//!
//! mix-cd is realized as accept/reject: drawing uniformly from the pool makes
//! a bin arrive with probability P(b), and accepting with probability
//! alpha_hat(b) leaves the selection weight proportional to
//! alpha_hat(b) * P(b) without materializing per-sample weights.

use rand::rngs::StdRng;
use rand::Rng;

use crate::budget::FORWARD_UNIT;
use crate::dataset::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::model::{ModelState, PredictionCache};
use crate::partition::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    Uniform,
    MixCd,
    Uncertainty,
    MirPp,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::MixCd => "mixcd",
            Strategy::Uncertainty => "uncertainty",
            Strategy::MirPp => "mirpp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "mixcd" => Ok(Strategy::MixCd),
            "uncertainty" => Ok(Strategy::Uncertainty),
            "mirpp" => Ok(Strategy::MirPp),
            other => Err(Error::Parse(format!("unknown strategy '{other}'"))),
        }
    }

    /// Online strategies pay per-candidate scoring costs.
    pub fn is_online_filtered(&self) -> bool {
        matches!(self, Strategy::Uncertainty | Strategy::MirPp)
    }

    pub fn all() -> [Strategy; 4] {
        [
            Strategy::Uniform,
            Strategy::MixCd,
            Strategy::Uncertainty,
            Strategy::MirPp,
        ]
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Fraction of scored candidates an online strategy keeps.
    pub filter_ratio: f64,
    /// mix-cd gives up on accept/reject after max_draw_factor * m draws and
    /// fills the remainder uniformly (keeps the loop live when every ratio
    /// estimate is near zero).
    pub max_draw_factor: usize,
}

impl SamplerConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            filter_ratio: 0.5,
            max_draw_factor: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.filter_ratio > 0.0 && self.filter_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "filter_ratio must be in (0, 1], got {}",
                self.filter_ratio
            )));
        }
        if self.max_draw_factor == 0 {
            return Err(Error::InvalidConfig("max_draw_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// One iteration's rehearsal selection: indices into the pool, plus the
/// bookkeeping the diagnostics want.
#[derive(Debug, Clone)]
pub struct RehearsalBatch {
    pub indices: Vec<usize>,
    pub draws_attempted: usize,
    pub sampling_flops_units: f64,
    pub fallback: bool,
}

/// m i.i.d. uniform draws with replacement. Zero sampling cost.
pub fn sample_uniform(pool: &TaskDataset, m: usize, rng: &mut StdRng) -> Result<RehearsalBatch> {
    if m > 0 && pool.is_empty() {
        return Err(Error::Empty("rehearsal pool"));
    }
    let indices: Vec<usize> = (0..m).map(|_| rng.gen_range(0..pool.len())).collect();
    Ok(RehearsalBatch {
        indices,
        draws_attempted: m,
        sampling_flops_units: 0.0,
        fallback: false,
    })
}

/// Accept/reject selection weighted by the per-bin damage-ratio estimates:
/// draw uniformly, look up the sample's bin, accept with probability
/// alphas[bin]. Performs zero model passes. Falls back to uniform fill when
/// the draw budget runs out.
pub fn sample_mixcd(
    pool: &TaskDataset,
    partition: &Partition,
    alphas: &[f64],
    m: usize,
    rng: &mut StdRng,
    config: &SamplerConfig,
) -> Result<RehearsalBatch> {
    config.validate()?;
    if m == 0 {
        return Ok(RehearsalBatch {
            indices: Vec::new(),
            draws_attempted: 0,
            sampling_flops_units: 0.0,
            fallback: false,
        });
    }
    if pool.is_empty() {
        return Err(Error::Empty("rehearsal pool"));
    }
    for a in alphas {
        if !(0.0..=1.0).contains(a) {
            return Err(Error::InvalidConfig(format!(
                "acceptance probability must be in [0, 1], got {a}"
            )));
        }
    }
    let max_draws = config.max_draw_factor.saturating_mul(m);
    let mut indices = Vec::with_capacity(m);
    let mut draws = 0usize;
    while indices.len() < m && draws < max_draws {
        let idx = rng.gen_range(0..pool.len());
        draws += 1;
        let bin = partition.require_bin(pool.samples[idx].id)?;
        let alpha = *alphas.get(bin).ok_or(Error::BinOutOfRange {
            bin,
            bins: alphas.len(),
        })?;
        if rng.gen_range(0.0..1.0) < alpha {
            indices.push(idx);
        }
    }
    let fallback = indices.len() < m;
    while indices.len() < m {
        indices.push(rng.gen_range(0..pool.len()));
        draws += 1;
    }
    Ok(RehearsalBatch {
        indices,
        draws_attempted: draws,
        sampling_flops_units: 0.0,
        fallback,
    })
}

/// Prediction entropy of the current model on one sample. Costs one forward
/// unit, which the caller meters.
pub fn priority_uncertainty(model: &ModelState, sample: &Sample) -> Result<f64> {
    let probs = model.forward(&sample.features)?;
    Ok(probs
        .iter()
        .map(|p| if *p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Loss under the current model minus the cached base-model loss. Costs one
/// forward unit (only the current side is evaluated).
pub fn priority_mirpp(model: &ModelState, cache: &PredictionCache, sample: &Sample) -> Result<f64> {
    let current = model.loss(sample)?;
    Ok(current - cache.require(sample.id)?.loss)
}

/// Online filtered selection: draw ceil(m / filter_ratio) uniform candidates,
/// score each (the score closure is charged one forward unit per call by the
/// caller), keep the top m by score with ties broken by ascending sample id.
pub fn sample_online_filtered(
    pool: &TaskDataset,
    m: usize,
    filter_ratio: f64,
    rng: &mut StdRng,
    mut score: impl FnMut(&Sample) -> Result<f64>,
) -> Result<RehearsalBatch> {
    if !(filter_ratio > 0.0 && filter_ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "filter_ratio must be in (0, 1], got {filter_ratio}"
        )));
    }
    if m == 0 {
        return Ok(RehearsalBatch {
            indices: Vec::new(),
            draws_attempted: 0,
            sampling_flops_units: 0.0,
            fallback: false,
        });
    }
    if pool.is_empty() {
        return Err(Error::Empty("rehearsal pool"));
    }
    let candidates = (m as f64 / filter_ratio).ceil() as usize;
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(candidates);
    for _ in 0..candidates {
        let idx = rng.gen_range(0..pool.len());
        let s = &pool.samples[idx];
        scored.push((score(s)?, s.id, idx));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)));
    let indices: Vec<usize> = scored[..m].iter().map(|(_, _, idx)| *idx).collect();
    Ok(RehearsalBatch {
        indices,
        draws_attempted: candidates,
        sampling_flops_units: candidates as f64 * FORWARD_UNIT,
        fallback: false,
    })
}
