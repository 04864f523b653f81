//! The canonical forgetting-biased benchmark.
//!
//! Two attacker components sit almost on top of prior component 0 with a
//! conflicting label, so fine-tuning reliably destroys meta-bin 0 while the
//! other bins stay healthy. Well-separated components keep the damage
//! concentrated, which is what makes the weighted-rehearsal comparison sharp.

use crate::damage::DamageMode;
use crate::dataset::GenConfig;
use crate::harness::{EstimatorMode, ModelConfig, PartitionSpec, RunConfig};
use crate::sampler::{SamplerConfig, Strategy};

pub fn forgetting_biased_gen() -> GenConfig {
    GenConfig {
        feature_dim: 8,
        num_classes: 3,
        prior_clusters: 6,
        finetune_clusters: 3,
        prior_size: 3000,
        finetune_size: 2500,
        cluster_spread: 0.5,
        center_radius: 4.0,
        overlap: 0.9,
        forgetting_pressure: 0.67,
    }
}

pub fn forgetting_biased_config() -> RunConfig {
    RunConfig {
        gen: forgetting_biased_gen(),
        data_seed: 11,
        model: ModelConfig {
            hidden_units: 0,
            learning_rate: 0.1,
            weight_decay: 0.0,
            base_epochs: 15,
            base_seed: 23,
            minibatch: 32,
        },
        iterations: 10,
        samples_per_iteration: 300,
        beta: 0.3,
        sampler: SamplerConfig::new(Strategy::MixCd),
        partition: PartitionSpec::MetaLabel,
        damage_mode: DamageMode::Classification,
        tau_percentile: 90.0,
        estimator_mode: EstimatorMode::Biased,
        eval_fraction: 0.2,
        seed: 1,
    }
}
