//! The end-to-end fine-tuning loop with rehearsal, and sweeps over it.
//!
//! One run: generate the two tasks, fit the base model on the prior pool,
//! cache its predictions, then fine-tune for N iterations. Each iteration
//! draws a fine-tune batch and a rehearsal batch (by the configured
//! strategy), trains one shuffled pass over their union in fixed-size
//! minibatches, and updates the per-bin damage counts from the rehearsal
//! samples' training forward passes. Rehearsal for the first iteration is
//! drawn uniformly; afterwards mix-cd samples by the current ratio
//! estimates. Everything is metered: training and sampling consume budget,
//! evaluation is counted separately as instrumentation.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::budget::{
    effective_rehearsal_count, split, BudgetCategory, BudgetLedger, FlopTally, FORWARD_UNIT,
    TRAIN_SAMPLE_UNIT,
};
use crate::damage::{cd_flag, compute_tau, DamageConfig, DamageMode};
use crate::dataset::{generate_two_task, split_holdout, GenConfig, Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::estimator::{unbiased_estimate, CdEstimator};
use crate::model::{build_prediction_cache, Arch, Hyper, ModelState, PredictionCache, SampleSignal};
use crate::partition::{
    by_kmeans, by_loss_quantile, by_meta_label, by_random, effectiveness_kl, product, BinInput,
    Partition, KL_EFFECTIVE_THRESHOLD,
};
use crate::sampler::{
    priority_mirpp, priority_uncertainty, sample_mixcd, sample_online_filtered, sample_uniform,
    RehearsalBatch, SamplerConfig, Strategy,
};

/// Classifier shape and training hyperparameters for a run.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    /// 0 disables the hidden layer.
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs of prior-task training that produce the base model.
    pub base_epochs: usize,
    /// Seed for base-model initialization and base-training shuffles; shared
    /// across a sweep so every cell starts from the same base checkpoint.
    pub base_seed: u64,
    pub minibatch: usize,
}

/// How the prior pool is binned for ratio estimation and weighted sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionSpec {
    MetaLabel,
    LossQuantile(usize),
    KMeans { k: usize, max_iters: usize },
    Random(usize),
    Product(Box<PartitionSpec>, Box<PartitionSpec>),
}

impl PartitionSpec {
    pub fn build(
        &self,
        pool: &TaskDataset,
        cache: &PredictionCache,
        seed: u64,
    ) -> Result<Partition> {
        match self {
            PartitionSpec::MetaLabel => by_meta_label(pool),
            PartitionSpec::LossQuantile(k) => by_loss_quantile(cache, *k),
            PartitionSpec::KMeans { k, max_iters } => by_kmeans(cache, *k, seed, *max_iters),
            PartitionSpec::Random(k) => by_random(pool, *k, seed),
            PartitionSpec::Product(a, b) => {
                let pa = a.build(pool, cache, seed)?;
                let pb = b.build(pool, cache, seed.wrapping_add(1))?;
                product(&pa, &pb)
            }
        }
    }

    /// Spec-file syntax: `meta_label`, `loss_quantile:K`, `kmeans:K`,
    /// `random:K`, `product:A+B`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("product:") {
            let (a, b) = rest
                .split_once('+')
                .ok_or_else(|| Error::Parse(format!("product spec needs two factors: {s}")))?;
            return Ok(PartitionSpec::Product(
                Box::new(PartitionSpec::parse(a)?),
                Box::new(PartitionSpec::parse(b)?),
            ));
        }
        if s == "meta_label" {
            return Ok(PartitionSpec::MetaLabel);
        }
        if let Some(k) = s.strip_prefix("loss_quantile:") {
            let k = k
                .parse()
                .map_err(|_| Error::Parse(format!("bad loss_quantile bin count in '{s}'")))?;
            return Ok(PartitionSpec::LossQuantile(k));
        }
        if let Some(k) = s.strip_prefix("kmeans:") {
            let k = k
                .parse()
                .map_err(|_| Error::Parse(format!("bad kmeans bin count in '{s}'")))?;
            return Ok(PartitionSpec::KMeans { k, max_iters: 100 });
        }
        if let Some(k) = s.strip_prefix("random:") {
            let k = k
                .parse()
                .map_err(|_| Error::Parse(format!("bad random bin count in '{s}'")))?;
            return Ok(PartitionSpec::Random(k));
        }
        Err(Error::Parse(format!("unknown partition spec '{s}'")))
    }
}

impl std::fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionSpec::MetaLabel => write!(f, "meta_label"),
            PartitionSpec::LossQuantile(k) => write!(f, "loss_quantile:{k}"),
            PartitionSpec::KMeans { k, .. } => write!(f, "kmeans:{k}"),
            PartitionSpec::Random(k) => write!(f, "random:{k}"),
            PartitionSpec::Product(a, b) => write!(f, "product:{a}+{b}"),
        }
    }
}

/// Where the sampling-time ratio estimates come from: free running counts, or
/// per-iteration inference over a held-out prior slice (paid from the
/// sampling budget).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorMode {
    Biased,
    Unbiased { holdout_fraction: f64 },
}

/// Full description of one run. A run is a pure function of this value.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub data_seed: u64,
    pub model: ModelConfig,
    /// N: fine-tuning iterations.
    pub iterations: usize,
    /// n: samples trained per iteration (sets the total budget c = 3 n N).
    pub samples_per_iteration: usize,
    /// Share of the budget spent on rehearsal.
    pub beta: f64,
    pub sampler: SamplerConfig,
    pub partition: PartitionSpec,
    pub damage_mode: DamageMode,
    pub tau_percentile: f64,
    pub estimator_mode: EstimatorMode,
    /// Held-out fraction of each task used for accuracy evaluation.
    pub eval_fraction: f64,
    /// Run-level randomness: sampling, minibatch shuffles, queue order.
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.sampler.validate()?;
        if !(0.01..=0.9).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must be in [0.01, 0.9], got {}",
                self.beta
            )));
        }
        if self.iterations == 0 || self.samples_per_iteration == 0 {
            return Err(Error::InvalidConfig(
                "iterations and samples_per_iteration must be >= 1".into(),
            ));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eval_fraction must be in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if !(self.tau_percentile > 0.0 && self.tau_percentile < 100.0) {
            return Err(Error::InvalidConfig(format!(
                "tau_percentile must be in (0, 100), got {}",
                self.tau_percentile
            )));
        }
        if self.model.minibatch == 0 {
            return Err(Error::InvalidConfig("minibatch must be >= 1".into()));
        }
        if self.model.base_epochs == 0 {
            return Err(Error::InvalidConfig("base_epochs must be >= 1".into()));
        }
        if let EstimatorMode::Unbiased { holdout_fraction } = self.estimator_mode {
            if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "unbiased holdout fraction must be in (0, 1), got {holdout_fraction}"
                )));
            }
            if self.sampler.strategy != Strategy::MixCd {
                return Err(Error::InvalidConfig(
                    "the unbiased estimator mode only applies to the mixcd strategy".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Pre-iteration compute plan: how many samples each side trains per
/// iteration, and the sampling spend carved out of the rehearsal share.
#[derive(Debug, Clone)]
pub struct BudgetPlan {
    pub total: f64,
    pub rehearsal_per_iter: Vec<usize>,
    pub finetune_per_iter: Vec<usize>,
    pub rehearsal_total: usize,
    pub finetune_total: usize,
    pub planned_sampling: f64,
}

fn distribute(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

fn plan_budget(config: &RunConfig, alpha_holdout_len: usize) -> Result<BudgetPlan> {
    let n_iters = config.iterations;
    let c = TRAIN_SAMPLE_UNIT * (config.samples_per_iteration * n_iters) as f64;
    let (c_p, c_f) = split(c, config.beta)?;
    let finetune_total = (c_f / TRAIN_SAMPLE_UNIT) as usize;
    let (rehearsal_total, planned_sampling) = match config.sampler.strategy {
        Strategy::Uniform | Strategy::MixCd => match config.estimator_mode {
            EstimatorMode::Biased => ((c_p / TRAIN_SAMPLE_UNIT) as usize, 0.0),
            EstimatorMode::Unbiased { .. } => {
                let holdout_cost = n_iters as f64 * alpha_holdout_len as f64 * FORWARD_UNIT;
                if holdout_cost >= c_p {
                    return Err(Error::InvalidConfig(format!(
                        "unbiased holdout inference ({holdout_cost} units) exhausts the \
                         rehearsal budget ({c_p} units); lower the holdout fraction or raise beta"
                    )));
                }
                (
                    ((c_p - holdout_cost) / TRAIN_SAMPLE_UNIT) as usize,
                    holdout_cost,
                )
            }
        },
        Strategy::Uncertainty | Strategy::MirPp => {
            let r = config.sampler.filter_ratio;
            let mut m_total = effective_rehearsal_count(c_p, &config.sampler);
            // per-iteration scoring rounds up, so shave m until the summed
            // schedule actually fits
            loop {
                let scoring: f64 = distribute(m_total, n_iters)
                    .iter()
                    .map(|m| (*m as f64 / r).ceil() * FORWARD_UNIT)
                    .sum();
                if scoring + m_total as f64 * TRAIN_SAMPLE_UNIT <= c_p || m_total == 0 {
                    break (m_total, scoring);
                }
                m_total -= 1;
            }
        }
    };
    Ok(BudgetPlan {
        total: c,
        rehearsal_per_iter: distribute(rehearsal_total, n_iters),
        finetune_per_iter: distribute(finetune_total, n_iters),
        rehearsal_total,
        finetune_total,
        planned_sampling,
    })
}

/// Everything a run needs, materialized ahead of the training loop.
pub struct PreparedRun {
    pub config: RunConfig,
    pub prior_pool: TaskDataset,
    pub prior_eval: TaskDataset,
    pub rehearsal_pool: TaskDataset,
    pub alpha_holdout: Option<TaskDataset>,
    pub ft_pool: TaskDataset,
    pub ft_eval: TaskDataset,
    pub base: ModelState,
    pub cache: PredictionCache,
    pub partition: Partition,
    pub damage: DamageConfig,
    pub plan: BudgetPlan,
}

fn subseed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate data, train the base model, cache its predictions, build the
/// partition, and lay out the budget.
pub fn prepare(config: &RunConfig) -> Result<PreparedRun> {
    config.validate()?;
    let (prior, finetune) = generate_two_task(&config.gen, config.data_seed)?;
    // splits keyed to the data seed: every cell of a sweep sees the same
    // pools and evaluation sets
    let (prior_pool, prior_eval) =
        split_holdout(&prior, config.eval_fraction, subseed(config.data_seed, 1))?;
    let (ft_pool, ft_eval) =
        split_holdout(&finetune, config.eval_fraction, subseed(config.data_seed, 2))?;

    let arch = Arch {
        input: config.gen.feature_dim,
        hidden: config.model.hidden_units,
        classes: config.gen.num_classes,
    };
    let hyper = Hyper {
        learning_rate: config.model.learning_rate,
        weight_decay: config.model.weight_decay,
    };
    let mut base = ModelState::new(arch, hyper, config.model.base_seed)?;
    let mut base_rng = StdRng::seed_from_u64(subseed(config.model.base_seed, 3));
    base.train_epochs(
        &prior_pool,
        config.model.base_epochs,
        config.model.minibatch,
        &mut base_rng,
    )?;
    let cache = build_prediction_cache(&base, &prior_pool)?;

    let (rehearsal_pool, alpha_holdout) = match config.estimator_mode {
        EstimatorMode::Biased => (prior_pool.clone(), None),
        EstimatorMode::Unbiased { holdout_fraction } => {
            let (rest, holdout) =
                split_holdout(&prior_pool, holdout_fraction, subseed(config.data_seed, 4))?;
            (rest, Some(holdout))
        }
    };
    let partition = config
        .partition
        .build(&prior_pool, &cache, subseed(config.data_seed, 5))?;

    let tau = if config.damage_mode == DamageMode::LossThreshold {
        compute_tau(&cache, config.tau_percentile)?
    } else {
        f64::NAN
    };
    let damage = DamageConfig {
        mode: config.damage_mode,
        tau,
        tau_percentile: config.tau_percentile,
    };
    damage.validate()?;

    let plan = plan_budget(config, alpha_holdout.as_ref().map_or(0, |h| h.len()))?;
    Ok(PreparedRun {
        config: config.clone(),
        prior_pool,
        prior_eval,
        rehearsal_pool,
        alpha_holdout,
        ft_pool,
        ft_eval,
        base,
        cache,
        partition,
        damage,
        plan,
    })
}

/// Whether a trained sample came from the fine-tune stream or the rehearsal
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Finetune,
    Rehearsal,
}

/// One trained sample as the observer sees it.
pub struct MixedItem<'a> {
    pub source: SampleSource,
    pub sample: &'a Sample,
}

/// Hook into the training loop, called once per minibatch with the model
/// state as it was when the minibatch's forward passes ran (before its own
/// update was applied).
pub trait TrainObserver {
    fn on_minibatch(
        &mut self,
        _model: &ModelState,
        _items: &[MixedItem<'_>],
        _signals: &[SampleSignal],
    ) {
    }
}

/// Observer that does nothing.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// One rehearsed sample's damage verdict, in training order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RehearsalEvent {
    pub iteration: usize,
    pub sample_id: usize,
    pub bin: usize,
    pub damaged: bool,
}

/// Effectiveness verdict for one candidate partition, computed from the
/// first iteration's rehearsal signals at no extra inference cost.
#[derive(Debug, Clone)]
pub struct KlRow {
    pub partition: String,
    pub kl: f64,
    pub effective: bool,
}

/// Everything recorded about one iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub prior_accuracy: f64,
    pub finetune_accuracy: f64,
    pub rehearsed: usize,
    pub damaged: usize,
    /// damaged / rehearsed for this iteration (0 when nothing rehearsed).
    pub cd_proportion: f64,
    pub draws_attempted: usize,
    pub fallback: bool,
    pub sampling_units: f64,
    pub rehearsal_train_units: f64,
    pub finetune_train_units: f64,
    /// (bin, n_k, u_k, alpha_hat) after this iteration's update.
    pub estimator: Vec<(usize, u64, u64, f64)>,
    /// Fine-tuned model's accuracy on the prior eval set, per bin (NaN for
    /// bins with no eval samples).
    pub per_bin_accuracy: Vec<f64>,
}

/// Complete record of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
    pub total_budget: f64,
    pub bin_count: usize,
    pub base_prior_accuracy: f64,
    pub base_finetune_accuracy: f64,
    pub base_per_bin_accuracy: Vec<f64>,
    pub eval_bin_counts: Vec<usize>,
    pub iterations: Vec<IterationRecord>,
    pub final_prior_accuracy: f64,
    pub final_finetune_accuracy: f64,
    /// Total damaged / total rehearsed over the whole run.
    pub cd_proportion: f64,
    pub ledger: BudgetLedger,
    pub tally: FlopTally,
    pub kl_first_iteration: Vec<KlRow>,
    pub rehearsal_log: Vec<RehearsalEvent>,
    pub rehearsal_total: usize,
    pub finetune_total: usize,
    /// Final ratio vector from the holdout estimator (unbiased mode only).
    pub unbiased_final_alpha: Option<Vec<f64>>,
    /// Loss threshold in effect (NaN in classification mode).
    pub tau: f64,
    /// The fine-tuned model after the last iteration.
    pub final_model: ModelState,
}

/// Per-bin damage ratios tallied from (bin, damaged) observations; bins with
/// no observations read as the 0.5 prior.
pub fn alphas_from_events(events: &[(usize, bool)], bins: usize) -> Vec<f64> {
    let mut n = vec![0u64; bins];
    let mut u = vec![0u64; bins];
    for (bin, damaged) in events {
        n[*bin] += 1;
        if *damaged {
            u[*bin] += 1;
        }
    }
    (0..bins)
        .map(|k| {
            if n[k] == 0 {
                0.5
            } else {
                u[k] as f64 / n[k] as f64
            }
        })
        .collect()
}

fn candidate_kl_rows(prepared: &PreparedRun, first_iter: &[RehearsalEvent]) -> Result<Vec<KlRow>> {
    let mut rows = Vec::new();
    let mut candidates: Vec<(String, Partition)> = vec![(
        prepared.config.partition.to_string(),
        prepared.partition.clone(),
    )];
    let pool = &prepared.prior_pool;
    if prepared.config.partition != PartitionSpec::LossQuantile(5) && pool.len() >= 5 {
        candidates.push((
            "loss_quantile:5".into(),
            by_loss_quantile(&prepared.cache, 5)?,
        ));
    }
    if prepared.config.partition != PartitionSpec::MetaLabel {
        candidates.push(("meta_label".into(), by_meta_label(pool)?));
    }
    candidates.push((
        "random:5".into(),
        by_random(pool, 5.min(pool.len()), subseed(prepared.config.data_seed, 6))?,
    ));
    for (name, partition) in candidates {
        let events: Vec<(usize, bool)> = first_iter
            .iter()
            .map(|e| Ok((partition.require_bin(e.sample_id)?, e.damaged)))
            .collect::<Result<_>>()?;
        let alphas = alphas_from_events(&events, partition.bins);
        let (kl, effective) = effectiveness_kl(&alphas, KL_EFFECTIVE_THRESHOLD)?;
        rows.push(KlRow {
            partition: name,
            kl,
            effective,
        });
    }
    Ok(rows)
}

/// Base-model view of the prior eval set: predictions plus each sample's bin
/// under the partition's rule. One instrumentation forward pass per sample.
struct EvalSetup {
    base_preds: Vec<usize>,
    bins: Vec<Option<usize>>,
}

fn eval_setup(prepared: &PreparedRun, tally: &mut FlopTally) -> Result<EvalSetup> {
    let mut base_preds = Vec::with_capacity(prepared.prior_eval.len());
    let mut bins = Vec::with_capacity(prepared.prior_eval.len());
    for s in &prepared.prior_eval.samples {
        let signal = prepared.base.signal(s)?;
        let embedding = prepared.base.embedding(&s.features)?;
        tally.eval_forward += 1;
        base_preds.push(signal.predicted);
        bins.push(prepared.partition.classify(&BinInput {
            id: s.id,
            meta_label: s.meta_label,
            loss: signal.loss,
            embedding: &embedding,
        }));
    }
    Ok(EvalSetup { base_preds, bins })
}

fn per_bin_accuracy(
    preds: &[usize],
    eval: &TaskDataset,
    bins: &[Option<usize>],
    bin_count: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut correct = vec![0usize; bin_count];
    let mut count = vec![0usize; bin_count];
    for ((pred, sample), bin) in preds.iter().zip(&eval.samples).zip(bins) {
        if let Some(b) = bin {
            count[*b] += 1;
            if *pred == sample.label {
                correct[*b] += 1;
            }
        }
    }
    let acc = (0..bin_count)
        .map(|k| {
            if count[k] == 0 {
                f64::NAN
            } else {
                correct[k] as f64 / count[k] as f64
            }
        })
        .collect();
    (acc, count)
}

fn eval_predictions(
    model: &ModelState,
    data: &TaskDataset,
    tally: &mut FlopTally,
) -> Result<(f64, Vec<usize>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for s in &data.samples {
        let signal = model.signal(s)?;
        tally.eval_forward += 1;
        if signal.predicted == s.label {
            correct += 1;
        }
        preds.push(signal.predicted);
    }
    Ok((correct as f64 / data.len() as f64, preds))
}

/// Run the fine-tuning loop over a prepared run, reporting every minibatch to
/// the observer.
pub fn execute(prepared: &PreparedRun, observer: &mut impl TrainObserver) -> Result<RunResult> {
    let config = &prepared.config;
    let lr = config.model.learning_rate;
    let wd = config.model.weight_decay;
    let n_iters = config.iterations;

    let mut tally = FlopTally::default();
    let mut ledger =
        BudgetLedger::plan(prepared.plan.total, config.beta, prepared.plan.planned_sampling)?;

    let setup = eval_setup(prepared, &mut tally)?;
    let (base_per_bin, eval_bin_counts) = per_bin_accuracy(
        &setup.base_preds,
        &prepared.prior_eval,
        &setup.bins,
        prepared.partition.bins,
    );
    let base_prior_accuracy = setup
        .base_preds
        .iter()
        .zip(&prepared.prior_eval.samples)
        .filter(|(p, s)| **p == s.label)
        .count() as f64
        / prepared.prior_eval.len() as f64;
    let (base_finetune_accuracy, _) =
        eval_predictions(&prepared.base, &prepared.ft_eval, &mut tally)?;

    let mut model = prepared.base.clone();
    let mut est = CdEstimator::init(prepared.partition.bins)?;
    let mut sampling_alphas = est.alphas();
    let mut run_rng = StdRng::seed_from_u64(config.seed);

    // fine-tune stream: cycle through a reshuffled queue
    let mut ft_queue: Vec<usize> = (0..prepared.ft_pool.len()).collect();
    let mut ft_pos = prepared.ft_pool.len(); // forces an initial shuffle
    fn next_ft(rng: &mut StdRng, queue: &mut [usize], pos: &mut usize) -> usize {
        if *pos >= queue.len() {
            for i in (1..queue.len()).rev() {
                let j = rng.gen_range(0..=i);
                queue.swap(i, j);
            }
            *pos = 0;
        }
        let idx = queue[*pos];
        *pos += 1;
        idx
    }

    let mut records: Vec<IterationRecord> = Vec::with_capacity(n_iters);
    let mut rehearsal_log: Vec<RehearsalEvent> = Vec::new();
    let mut kl_rows: Vec<KlRow> = Vec::new();
    let mut unbiased_final_alpha: Option<Vec<f64>> = None;
    let mut total_rehearsed = 0usize;
    let mut total_damaged = 0usize;

    for iteration in 0..n_iters {
        let m_i = prepared.plan.rehearsal_per_iter[iteration];
        let f_i = prepared.plan.finetune_per_iter[iteration];

        let df: Vec<usize> = (0..f_i)
            .map(|_| next_ft(&mut run_rng, &mut ft_queue, &mut ft_pos))
            .collect();

        let batch: RehearsalBatch = match config.sampler.strategy {
            Strategy::Uniform => sample_uniform(&prepared.rehearsal_pool, m_i, &mut run_rng)?,
            Strategy::MixCd => {
                if iteration == 0 {
                    // bootstrap: the estimator has no observations yet
                    sample_uniform(&prepared.rehearsal_pool, m_i, &mut run_rng)?
                } else {
                    sample_mixcd(
                        &prepared.rehearsal_pool,
                        &prepared.partition,
                        &sampling_alphas,
                        m_i,
                        &mut run_rng,
                        &config.sampler,
                    )?
                }
            }
            Strategy::Uncertainty => {
                let tally = &mut tally;
                let model_ref = &model;
                sample_online_filtered(
                    &prepared.rehearsal_pool,
                    m_i,
                    config.sampler.filter_ratio,
                    &mut run_rng,
                    |s| {
                        tally.sampling_forward += 1;
                        priority_uncertainty(model_ref, s)
                    },
                )?
            }
            Strategy::MirPp => {
                let tally = &mut tally;
                let model_ref = &model;
                let cache = &prepared.cache;
                sample_online_filtered(
                    &prepared.rehearsal_pool,
                    m_i,
                    config.sampler.filter_ratio,
                    &mut run_rng,
                    |s| {
                        tally.sampling_forward += 1;
                        priority_mirpp(model_ref, cache, s)
                    },
                )?
            }
        };
        ledger.charge(BudgetCategory::Sampling, batch.sampling_flops_units)?;

        // single shuffled pass over the union in fixed-size minibatches
        let mut mixed: Vec<(SampleSource, usize)> = df
            .iter()
            .map(|&i| (SampleSource::Finetune, i))
            .chain(batch.indices.iter().map(|&i| (SampleSource::Rehearsal, i)))
            .collect();
        for i in (1..mixed.len()).rev() {
            let j = run_rng.gen_range(0..=i);
            mixed.swap(i, j);
        }

        let mut iter_events: Vec<RehearsalEvent> = Vec::with_capacity(batch.indices.len());
        for chunk in mixed.chunks(config.model.minibatch) {
            let items: Vec<MixedItem<'_>> = chunk
                .iter()
                .map(|(source, idx)| MixedItem {
                    source: *source,
                    sample: match source {
                        SampleSource::Finetune => &prepared.ft_pool.samples[*idx],
                        SampleSource::Rehearsal => &prepared.rehearsal_pool.samples[*idx],
                    },
                })
                .collect();
            let refs: Vec<&Sample> = items.iter().map(|item| item.sample).collect();
            let (grads, signals) = model.grad_with_signals(&refs)?;
            tally.train_forward += refs.len() as u64;
            tally.train_backward += refs.len() as u64;
            observer.on_minibatch(&model, &items, &signals);
            for (item, signal) in items.iter().zip(&signals) {
                if item.source == SampleSource::Rehearsal {
                    let damaged = cd_flag(item.sample, &prepared.cache, signal, &prepared.damage)?;
                    iter_events.push(RehearsalEvent {
                        iteration,
                        sample_id: item.sample.id,
                        bin: prepared.partition.require_bin(item.sample.id)?,
                        damaged,
                    });
                }
            }
            model.sgd_step(&grads, lr, wd)?;
        }
        ledger.charge(
            BudgetCategory::RehearsalTraining,
            batch.indices.len() as f64 * TRAIN_SAMPLE_UNIT,
        )?;
        ledger.charge(
            BudgetCategory::FinetuneTraining,
            df.len() as f64 * TRAIN_SAMPLE_UNIT,
        )?;

        // running counts update from the training signals (free)
        let updates: Vec<(usize, bool)> = iter_events.iter().map(|e| (e.bin, e.damaged)).collect();
        est.update(&updates)?;

        // the unbiased variant re-estimates from the holdout after training,
        // paying for the inference
        let mut holdout_units = 0.0;
        match (&config.estimator_mode, &prepared.alpha_holdout) {
            (EstimatorMode::Unbiased { .. }, Some(holdout)) => {
                let ue = unbiased_estimate(
                    &model,
                    &prepared.cache,
                    holdout,
                    &prepared.partition,
                    &prepared.damage,
                )?;
                tally.sampling_forward += holdout.len() as u64;
                ledger.charge(BudgetCategory::Sampling, ue.flop_units)?;
                holdout_units = ue.flop_units;
                sampling_alphas = ue.alpha.clone();
                unbiased_final_alpha = Some(ue.alpha);
            }
            _ => {
                sampling_alphas = est.alphas();
            }
        }

        if iteration == 0 {
            kl_rows = candidate_kl_rows(prepared, &iter_events)?;
        }

        let damaged = iter_events.iter().filter(|e| e.damaged).count();
        total_rehearsed += iter_events.len();
        total_damaged += damaged;

        let (prior_accuracy, prior_preds) =
            eval_predictions(&model, &prepared.prior_eval, &mut tally)?;
        let (finetune_accuracy, _) = eval_predictions(&model, &prepared.ft_eval, &mut tally)?;
        let (bin_acc, _) = per_bin_accuracy(
            &prior_preds,
            &prepared.prior_eval,
            &setup.bins,
            prepared.partition.bins,
        );

        records.push(IterationRecord {
            iteration,
            prior_accuracy,
            finetune_accuracy,
            rehearsed: iter_events.len(),
            damaged,
            cd_proportion: if iter_events.is_empty() {
                0.0
            } else {
                damaged as f64 / iter_events.len() as f64
            },
            draws_attempted: batch.draws_attempted,
            fallback: batch.fallback,
            sampling_units: batch.sampling_flops_units + holdout_units,
            rehearsal_train_units: batch.indices.len() as f64 * TRAIN_SAMPLE_UNIT,
            finetune_train_units: df.len() as f64 * TRAIN_SAMPLE_UNIT,
            estimator: est.snapshot(),
            per_bin_accuracy: bin_acc,
        });
        rehearsal_log.extend(iter_events);
    }

    let last = records.last().expect("at least one iteration");
    Ok(RunResult {
        strategy: config.sampler.strategy,
        beta: config.beta,
        seed: config.seed,
        total_budget: prepared.plan.total,
        bin_count: prepared.partition.bins,
        base_prior_accuracy,
        base_finetune_accuracy,
        base_per_bin_accuracy: base_per_bin,
        eval_bin_counts,
        final_prior_accuracy: last.prior_accuracy,
        final_finetune_accuracy: last.finetune_accuracy,
        cd_proportion: if total_rehearsed == 0 {
            0.0
        } else {
            total_damaged as f64 / total_rehearsed as f64
        },
        iterations: records,
        ledger,
        tally,
        kl_first_iteration: kl_rows,
        rehearsal_log,
        rehearsal_total: prepared.plan.rehearsal_total,
        finetune_total: prepared.plan.finetune_total,
        unbiased_final_alpha,
        tau: prepared.damage.tau,
        final_model: model,
    })
}

/// Prepare and execute in one step.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    let prepared = prepare(config)?;
    execute(&prepared, &mut NoopObserver)
}

/// One cell of a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
}

impl SweepCell {
    pub fn label(&self) -> String {
        format!("{}_beta{}_seed{}", self.strategy, self.beta, self.seed)
    }
}

/// Cross product of (strategy, beta, seed) runs at identical total budget.
/// Cells run independently (optionally across threads); results come back in
/// grid order regardless of scheduling.
pub fn sweep(
    base: &RunConfig,
    strategies: &[Strategy],
    betas: &[f64],
    seeds: &[u64],
    parallel: usize,
) -> Vec<(SweepCell, Result<RunResult>)> {
    let mut cells = Vec::new();
    for strategy in strategies {
        for beta in betas {
            for seed in seeds {
                cells.push(SweepCell {
                    strategy: *strategy,
                    beta: *beta,
                    seed: *seed,
                });
            }
        }
    }
    let configs: Vec<RunConfig> = cells
        .iter()
        .map(|cell| {
            let mut cfg = base.clone();
            cfg.sampler.strategy = cell.strategy;
            cfg.beta = cell.beta;
            cfg.seed = cell.seed;
            cfg
        })
        .collect();

    let workers = parallel.max(1).min(cells.len().max(1));
    if workers <= 1 {
        return cells.into_iter().zip(configs.iter().map(run)).collect();
    }

    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<RunResult>>>> =
        (0..configs.len()).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let outcome = run(&configs[i]);
                *results[i].lock().expect("poisoned result slot") = Some(outcome);
            });
        }
    });
    cells
        .into_iter()
        .zip(results.into_iter().map(|slot| {
            slot.into_inner()
                .expect("poisoned result slot")
                .expect("every slot filled")
        }))
        .collect()
}
