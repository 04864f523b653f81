//! Streaming per-bin damage-ratio estimation.
//!
//! The estimator keeps running counts of how many rehearsed samples landed in
//! each bin (n_k) and how many of those were collateral damage (u_k). The
//! ratio u_k / n_k estimates the probability that a sample from bin k is
//! damaged; bins with no observations yet read as the 0.5 prior. The counts
//! come entirely from forward passes the training loop performs anyway, so
//! updating is free. The holdout-based variant pays for its own inference and
//! is unbiased in exchange.

use crate::damage::{cd_flag, DamageConfig};
use crate::dataset::TaskDataset;
use crate::error::{Error, Result};
use crate::model::{ModelState, PredictionCache};
use crate::partition::Partition;

/// Running (n_k, u_k) counts and the derived ratio estimates.
#[derive(Debug, Clone)]
pub struct CdEstimator {
    bins: usize,
    n: Vec<u64>,
    u: Vec<u64>,
    alpha_init: f64,
}

impl CdEstimator {
    /// Fresh estimator: zero counts, every ratio reads as 0.5.
    pub fn init(bins: usize) -> Result<Self> {
        if bins < 1 {
            return Err(Error::InvalidConfig("estimator needs at least one bin".into()));
        }
        Ok(Self {
            bins,
            n: vec![0; bins],
            u: vec![0; bins],
            alpha_init: 0.5,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Accumulate one iteration's rehearsed (bin, damaged) observations.
    pub fn update(&mut self, rehearsed: &[(usize, bool)]) -> Result<()> {
        for (bin, _) in rehearsed {
            if *bin >= self.bins {
                return Err(Error::BinOutOfRange {
                    bin: *bin,
                    bins: self.bins,
                });
            }
        }
        for (bin, damaged) in rehearsed {
            self.n[*bin] += 1;
            if *damaged {
                self.u[*bin] += 1;
            }
        }
        Ok(())
    }

    /// u_k / n_k, or the 0.5 prior while bin k has no observations.
    pub fn alpha_hat(&self, bin: usize) -> Result<f64> {
        if bin >= self.bins {
            return Err(Error::BinOutOfRange {
                bin,
                bins: self.bins,
            });
        }
        Ok(if self.n[bin] == 0 {
            self.alpha_init
        } else {
            self.u[bin] as f64 / self.n[bin] as f64
        })
    }

    /// All per-bin estimates.
    pub fn alphas(&self) -> Vec<f64> {
        (0..self.bins)
            .map(|k| self.alpha_hat(k).expect("bin in range"))
            .collect()
    }

    /// Overall damaged fraction across all observations (0 when empty).
    pub fn total_ratio(&self) -> f64 {
        let n: u64 = self.n.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.u.iter().sum::<u64>() as f64 / n as f64
        }
    }

    pub fn counts(&self) -> (&[u64], &[u64]) {
        (&self.n, &self.u)
    }

    /// (bin, n_k, u_k, alpha_hat) rows for diagnostics output.
    pub fn snapshot(&self) -> Vec<(usize, u64, u64, f64)> {
        (0..self.bins)
            .map(|k| (k, self.n[k], self.u[k], self.alpha_hat(k).expect("bin in range")))
            .collect()
    }
}

/// Result of the holdout-based estimate: per-bin ratios, which bins had no
/// holdout coverage (and fell back to 0.5), and the forward-pass units spent.
#[derive(Debug, Clone)]
pub struct UnbiasedEstimate {
    pub alpha: Vec<f64>,
    pub fallback_bins: Vec<usize>,
    pub flop_units: f64,
}

/// Estimate per-bin damage ratios by running the current model over a held
/// out prior subset. Costs one forward-pass unit per holdout sample; the
/// caller charges that to the sampling budget.
pub fn unbiased_estimate(
    current: &ModelState,
    cache: &PredictionCache,
    holdout: &TaskDataset,
    partition: &Partition,
    config: &DamageConfig,
) -> Result<UnbiasedEstimate> {
    let bins = partition.bins;
    let mut n = vec![0u64; bins];
    let mut u = vec![0u64; bins];
    for sample in &holdout.samples {
        let bin = partition.require_bin(sample.id)?;
        let signal = current.signal(sample)?;
        let damaged = cd_flag(sample, cache, &signal, config)?;
        n[bin] += 1;
        if damaged {
            u[bin] += 1;
        }
    }
    let mut alpha = Vec::with_capacity(bins);
    let mut fallback_bins = Vec::new();
    for k in 0..bins {
        if n[k] == 0 {
            alpha.push(0.5);
            fallback_bins.push(k);
        } else {
            alpha.push(u[k] as f64 / n[k] as f64);
        }
    }
    Ok(UnbiasedEstimate {
        alpha,
        fallback_bins,
        flop_units: holdout.len() as f64 * crate::budget::FORWARD_UNIT,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::damage::{cd_classification, DamageConfig};
    use crate::dataset::{generate_two_task, split_holdout, GenConfig};
    use crate::model::{argmax, build_prediction_cache, Arch, Hyper, ModelState};
    use crate::partition::by_meta_label;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn init_reads_half_everywhere() {
        let est = CdEstimator::init(3).unwrap();
        for k in 0..3 {
            assert_eq!(est.alpha_hat(k).unwrap(), 0.5);
        }
        let (n, u) = est.counts();
        assert!(n.iter().all(|v| *v == 0));
        assert!(u.iter().all(|v| *v == 0));
    }

    #[test]
    fn single_bin_estimator_is_valid() {
        let est = CdEstimator::init(1).unwrap();
        assert_eq!(est.alpha_hat(0).unwrap(), 0.5);
        assert!(CdEstimator::init(0).is_err());
    }

    #[test]
    fn update_counts_directly() {
        let mut est = CdEstimator::init(3).unwrap();
        est.update(&[(0, true), (0, false), (1, true)]).unwrap();
        let (n, u) = est.counts();
        assert_eq!(n, &[2, 1, 0]);
        assert_eq!(u, &[1, 1, 0]);
        assert_eq!(est.alpha_hat(0).unwrap(), 0.5);
        assert_eq!(est.alpha_hat(1).unwrap(), 1.0);
        assert_eq!(est.alpha_hat(2).unwrap(), 0.5); // still the prior
    }

    #[test]
    fn empty_update_is_identity() {
        let mut est = CdEstimator::init(2).unwrap();
        est.update(&[(0, true)]).unwrap();
        let before = est.snapshot();
        est.update(&[]).unwrap();
        assert_eq!(before, est.snapshot());
    }

    #[test]
    fn out_of_range_bin_rejected_without_partial_update() {
        let mut est = CdEstimator::init(2).unwrap();
        assert!(est.update(&[(0, true), (5, false)]).is_err());
        let (n, _) = est.counts();
        assert_eq!(n, &[0, 0]);
    }

    #[test]
    fn alpha_hat_out_of_range_rejected() {
        let est = CdEstimator::init(2).unwrap();
        assert!(est.alpha_hat(2).is_err());
    }

    #[test]
    fn ratio_examples() {
        let mut est = CdEstimator::init(1).unwrap();
        est.update(&[(0, true), (0, false), (0, false), (0, false)])
            .unwrap();
        assert_eq!(est.alpha_hat(0).unwrap(), 0.25);
        let mut est = CdEstimator::init(1).unwrap();
        est.update(&[(0, true); 4]).unwrap();
        assert_eq!(est.alpha_hat(0).unwrap(), 1.0);
    }

    #[test]
    fn converges_on_iid_stream() {
        // i.i.d. simulation oracle: flags drawn per-bin with known rates
        let rates = [0.8, 0.1, 0.4];
        let mut est = CdEstimator::init(3).unwrap();
        let mut rng = StdRng::seed_from_u64(77);
        let mut stream = Vec::with_capacity(5000);
        for _ in 0..5000 {
            let bin = rng.gen_range(0..3);
            let damaged = rng.gen_range(0.0..1.0) < rates[bin];
            stream.push((bin, damaged));
        }
        est.update(&stream).unwrap();
        for (k, rate) in rates.iter().enumerate() {
            let a = est.alpha_hat(k).unwrap();
            assert!((a - rate).abs() < 0.05, "bin {k}: {a} vs {rate}");
        }
    }

    #[test]
    fn order_invariance_of_updates() {
        let mut rng = StdRng::seed_from_u64(5);
        let stream: Vec<(usize, bool)> = (0..500)
            .map(|_| (rng.gen_range(0..4), rng.gen_bool(0.3)))
            .collect();
        let mut forward = CdEstimator::init(4).unwrap();
        forward.update(&stream).unwrap();
        let mut reversed = CdEstimator::init(4).unwrap();
        let mut rev = stream.clone();
        rev.reverse();
        // also split into odd chunk sizes to vary the batching
        for chunk in rev.chunks(7) {
            reversed.update(chunk).unwrap();
        }
        assert_eq!(forward.snapshot(), reversed.snapshot());
    }

    fn toy_setup() -> (ModelState, ModelState, PredictionCache, TaskDataset, Partition) {
        let cfg = GenConfig {
            feature_dim: 6,
            num_classes: 3,
            prior_clusters: 6,
            finetune_clusters: 3,
            prior_size: 900,
            finetune_size: 600,
            cluster_spread: 0.4,
            center_radius: 3.0,
            overlap: 1.0,
            forgetting_pressure: 1.0,
        };
        let (prior, finetune) = generate_two_task(&cfg, 55).unwrap();
        let hyper = Hyper {
            learning_rate: 0.1,
            weight_decay: 0.0,
        };
        let arch = Arch {
            input: 6,
            hidden: 0,
            classes: 3,
        };
        let mut base = ModelState::new(arch, hyper, 3).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        base.train_epochs(&prior, 12, 32, &mut rng).unwrap();
        let cache = build_prediction_cache(&base, &prior).unwrap();
        let partition = by_meta_label(&prior).unwrap();
        let (_, holdout) = split_holdout(&prior, 0.2, 9).unwrap();
        let mut tuned = base.clone();
        tuned.train_epochs(&finetune, 3, 32, &mut rng).unwrap();
        (base, tuned, cache, holdout, partition)
    }

    #[test]
    fn unbiased_estimate_is_zero_when_model_unchanged() {
        let (base, _, cache, holdout, partition) = toy_setup();
        let est = unbiased_estimate(
            &base,
            &cache,
            &holdout,
            &partition,
            &DamageConfig::classification(),
        )
        .unwrap();
        for (k, a) in est.alpha.iter().enumerate() {
            if est.fallback_bins.contains(&k) {
                assert_eq!(*a, 0.5);
            } else {
                assert_eq!(*a, 0.0, "bin {k} should show no damage");
            }
        }
        assert_eq!(est.flop_units, holdout.len() as f64);
    }

    #[test]
    fn unbiased_estimate_matches_double_inference_oracle() {
        let (base, tuned, cache, holdout, partition) = toy_setup();
        let cfg = DamageConfig::classification();
        let est = unbiased_estimate(&tuned, &cache, &holdout, &partition, &cfg).unwrap();

        // Oracle: evaluate both models directly on every holdout sample and
        // apply the definition.
        let mut n = vec![0u64; partition.bins];
        let mut u = vec![0u64; partition.bins];
        for s in &holdout.samples {
            let prior_pred = argmax(&base.forward(&s.features).unwrap());
            let current_pred = argmax(&tuned.forward(&s.features).unwrap());
            let bin = partition.bin_of(s.id).unwrap();
            n[bin] += 1;
            if cd_classification(prior_pred, current_pred, s.label) {
                u[bin] += 1;
            }
        }
        for k in 0..partition.bins {
            let expect = if n[k] == 0 {
                0.5
            } else {
                u[k] as f64 / n[k] as f64
            };
            assert_eq!(est.alpha[k], expect, "bin {k}");
        }
    }
}
