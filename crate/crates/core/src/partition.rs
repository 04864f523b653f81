//! Bin functions over the prior data.
//!
//! A partition assigns every prior sample to one of K bins and remembers the
//! empirical bin masses. Damage-ratio estimation is conditioned on these bins,
//! so a partition is only useful if damage concentrates unevenly across them;
//! [`effectiveness_kl`] measures exactly that. Partitions can be combined as
//! set products, and joint per-cell damage ratios can be reconstructed from
//! the marginal ones by factoring.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::dataset::TaskDataset;
use crate::error::{Error, Result};
use crate::model::PredictionCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    LossQuantile,
    MetaLabel,
    Product,
    KMeans,
    Random,
}

/// What a bin rule needs to know about a sample in order to place it.
/// `loss` and `embedding` are the base model's cached view of the sample.
#[derive(Debug, Clone, Copy)]
pub struct BinInput<'a> {
    pub id: usize,
    pub meta_label: usize,
    pub loss: f64,
    pub embedding: &'a [f64],
}

/// The reusable part of a partition: enough to bin a sample that was not in
/// the set the partition was built on (holdout evaluation data, say).
#[derive(Debug, Clone)]
enum BinRule {
    /// meta value -> bin
    MetaLabel(BTreeMap<usize, usize>),
    /// upper loss edge per bin (last bin open-ended)
    LossEdges(Vec<f64>),
    /// nearest centroid wins, ties to the lowest index
    Centroids(Vec<Vec<f64>>),
    /// membership is the recorded assignment only
    Opaque,
    /// sub-rules plus the occupied-cell flattening
    Product {
        left: Box<BinRule>,
        right: Box<BinRule>,
        cells: BTreeMap<(usize, usize), usize>,
    },
}

impl BinRule {
    fn classify(&self, input: &BinInput<'_>) -> Option<usize> {
        match self {
            BinRule::MetaLabel(map) => map.get(&input.meta_label).copied(),
            BinRule::LossEdges(edges) => {
                for (k, edge) in edges.iter().enumerate() {
                    if input.loss <= *edge {
                        return Some(k);
                    }
                }
                Some(edges.len())
            }
            BinRule::Centroids(centroids) => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (k, c) in centroids.iter().enumerate() {
                    let d: f64 = c
                        .iter()
                        .zip(input.embedding)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                Some(best)
            }
            BinRule::Opaque => None,
            BinRule::Product { left, right, cells } => {
                let a = left.classify(input)?;
                let b = right.classify(input)?;
                cells.get(&(a, b)).copied()
            }
        }
    }
}

/// A binning of the prior data: assignment, bin count, empirical masses.
#[derive(Debug, Clone)]
pub struct Partition {
    pub kind: PartitionKind,
    pub bins: usize,
    assignment: BTreeMap<usize, usize>,
    pub bin_mass: Vec<f64>,
    rule: BinRule,
}

impl Partition {
    pub fn bin_of(&self, id: usize) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn require_bin(&self, id: usize) -> Result<usize> {
        self.bin_of(id).ok_or(Error::MissingEntry {
            id,
            what: "partition assignment",
        })
    }

    /// Bin a sample by rule rather than by recorded membership; works for
    /// samples outside the construction set where the rule allows it.
    pub fn classify(&self, input: &BinInput<'_>) -> Option<usize> {
        self.rule.classify(input)
    }

    /// (id, bin) pairs in ascending id order.
    pub fn assignments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment.iter().map(|(id, bin)| (*id, *bin))
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Export as CSV rows `id,bin`.
    pub fn export_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "id,bin")?;
        for (id, bin) in self.assignments() {
            writeln!(file, "{id},{bin}")?;
        }
        Ok(())
    }

    fn from_counts(
        kind: PartitionKind,
        assignment: BTreeMap<usize, usize>,
        bins: usize,
        rule: BinRule,
    ) -> Self {
        let total = assignment.len() as f64;
        let mut counts = vec![0usize; bins];
        for bin in assignment.values() {
            counts[*bin] += 1;
        }
        let bin_mass = counts.iter().map(|c| *c as f64 / total).collect();
        Self {
            kind,
            bins,
            assignment,
            bin_mass,
            rule,
        }
    }
}

/// Contiguous loss-quantile bins of (as near as possible) equal size over the
/// cached prior losses; ties broken by ascending sample id.
pub fn by_loss_quantile(cache: &PredictionCache, k: usize) -> Result<Partition> {
    if cache.is_empty() {
        return Err(Error::Empty("prediction cache"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("bin count must be >= 1".into()));
    }
    let n = cache.len();
    if k > n {
        return Err(Error::InvalidConfig(format!(
            "cannot cut {n} samples into {k} loss quantiles"
        )));
    }
    let mut order: Vec<(f64, usize)> = cache.iter().map(|(id, e)| (e.loss, *id)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite losses").then(a.1.cmp(&b.1)));

    let base = n / k;
    let extra = n % k;
    let mut assignment = BTreeMap::new();
    let mut edges = Vec::with_capacity(k - 1);
    let mut idx = 0usize;
    for bin in 0..k {
        let size = base + usize::from(bin < extra);
        for _ in 0..size {
            assignment.insert(order[idx].1, bin);
            idx += 1;
        }
        if bin + 1 < k {
            edges.push(order[idx - 1].0);
        }
    }
    Ok(Partition::from_counts(
        PartitionKind::LossQuantile,
        assignment,
        k,
        BinRule::LossEdges(edges),
    ))
}

/// One bin per distinct meta-label, in ascending meta-label order.
pub fn by_meta_label(dataset: &TaskDataset) -> Result<Partition> {
    let distinct: BTreeSet<usize> = dataset.samples.iter().map(|s| s.meta_label).collect();
    let index: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let assignment: BTreeMap<usize, usize> = dataset
        .samples
        .iter()
        .map(|s| (s.id, index[&s.meta_label]))
        .collect();
    Ok(Partition::from_counts(
        PartitionKind::MetaLabel,
        assignment,
        index.len(),
        BinRule::MetaLabel(index),
    ))
}

/// Uniformly random assignment into `k` bins; a null partition carrying no
/// damage signal, useful as a control for the effectiveness test.
pub fn by_random(dataset: &TaskDataset, k: usize, seed: u64) -> Result<Partition> {
    if k == 0 || k > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "random partition needs 1 <= k <= {}, got {k}",
            dataset.len()
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    // round-robin over a shuffled order so every bin is non-empty
    let mut ids = dataset.ids();
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let assignment: BTreeMap<usize, usize> = ids
        .iter()
        .enumerate()
        .map(|(pos, id)| (*id, pos % k))
        .collect();
    Ok(Partition::from_counts(
        PartitionKind::Random,
        assignment,
        k,
        BinRule::Opaque,
    ))
}

/// Set product of two partitions over the same samples; empty cells are
/// dropped and the occupied ones flattened in (left bin, right bin) order.
pub fn product(a: &Partition, b: &Partition) -> Result<Partition> {
    let ids_a: BTreeSet<usize> = a.assignment.keys().copied().collect();
    let ids_b: BTreeSet<usize> = b.assignment.keys().copied().collect();
    if ids_a != ids_b {
        return Err(Error::InvalidConfig(
            "product requires partitions over the same sample set".into(),
        ));
    }
    let mut occupied: BTreeSet<(usize, usize)> = BTreeSet::new();
    for id in &ids_a {
        occupied.insert((a.assignment[id], b.assignment[id]));
    }
    let cells: BTreeMap<(usize, usize), usize> = occupied
        .iter()
        .enumerate()
        .map(|(flat, cell)| (*cell, flat))
        .collect();
    let assignment: BTreeMap<usize, usize> = ids_a
        .iter()
        .map(|id| (*id, cells[&(a.assignment[id], b.assignment[id])]))
        .collect();
    let bins = cells.len();
    Ok(Partition::from_counts(
        PartitionKind::Product,
        assignment,
        bins,
        BinRule::Product {
            left: Box::new(a.rule.clone()),
            right: Box::new(b.rule.clone()),
            cells,
        },
    ))
}

/// Lloyd's algorithm over the cached embeddings with seeded k-means++
/// initialization. Deterministic per seed; empty clusters are dropped at the
/// end (reducing K).
pub fn by_kmeans(cache: &PredictionCache, k: usize, seed: u64, max_iters: usize) -> Result<Partition> {
    if cache.is_empty() {
        return Err(Error::Empty("prediction cache"));
    }
    if k < 1 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let ids: Vec<usize> = cache.iter().map(|(id, _)| *id).collect();
    let points: Vec<&[f64]> = cache.iter().map(|(_, e)| e.embedding.as_slice()).collect();
    let n = points.len();

    let mut distinct: Vec<&[f64]> = points.clone();
    distinct.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| !o.is_eq())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds the {} distinct embedding points",
            distinct.len()
        )));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].to_vec());
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = min_d.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centroid; any point works
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, d) in min_d.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        let c = points[next].to_vec();
        for (d, p) in min_d.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    // Lloyd iterations
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c_idx, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = c_idx;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(*p) {
                *s += v;
            }
        }
        for (c_idx, c) in centroids.iter_mut().enumerate() {
            if counts[c_idx] > 0 {
                for (cv, sv) in c.iter_mut().zip(&sums[c_idx]) {
                    *cv = sv / counts[c_idx] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // final assignment against the final centroids
    for (i, p) in points.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c_idx, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best_d = d;
                best = c_idx;
            }
        }
        labels[i] = best;
    }

    // drop empty clusters and remap
    let mut counts = vec![0usize; k];
    for l in &labels {
        counts[*l] += 1;
    }
    let kept: Vec<usize> = (0..k).filter(|c| counts[*c] > 0).collect();
    let remap: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(new, old)| (*old, new)).collect();
    let kept_centroids: Vec<Vec<f64>> = kept.iter().map(|c| centroids[*c].clone()).collect();
    let assignment: BTreeMap<usize, usize> = ids
        .iter()
        .zip(&labels)
        .map(|(id, l)| (*id, remap[l]))
        .collect();

    Ok(Partition::from_counts(
        PartitionKind::KMeans,
        assignment,
        kept.len(),
        BinRule::Centroids(kept_centroids),
    ))
}

/// KL divergence of the normalized damage-ratio vector from uniform, and
/// whether it clears the effectiveness threshold. All-zero ratios give
/// (0, false): a partition with no observed damage carries no signal.
pub fn effectiveness_kl(alpha: &[f64], threshold: f64) -> Result<(f64, bool)> {
    if alpha.is_empty() {
        return Err(Error::Empty("alpha vector"));
    }
    for a in alpha {
        if !(0.0..=1.0).contains(a) {
            return Err(Error::InvalidConfig(format!(
                "alpha entries must be in [0, 1], got {a}"
            )));
        }
    }
    let sum: f64 = alpha.iter().sum();
    if sum == 0.0 {
        return Ok((0.0, false));
    }
    let k = alpha.len() as f64;
    let kl: f64 = alpha
        .iter()
        .map(|a| {
            let p = a / sum;
            if p > 0.0 {
                p * (k * p).ln()
            } else {
                0.0
            }
        })
        .sum();
    Ok((kl, kl > threshold))
}

/// Default effectiveness threshold for [`effectiveness_kl`].
pub const KL_EFFECTIVE_THRESHOLD: f64 = 0.01;

fn overall_cd(alpha_a: &[f64], mass_a: &[f64], alpha_b: &[f64], mass_b: &[f64]) -> f64 {
    let a: f64 = alpha_a.iter().zip(mass_a).map(|(x, m)| x * m).sum();
    let b: f64 = alpha_b.iter().zip(mass_b).map(|(x, m)| x * m).sum();
    0.5 * (a + b)
}

/// Joint damage ratios from two marginal vectors under the independence
/// assumption: cell (i, j) proportional to alpha_a[i] * alpha_b[j], scaled so
/// the implied total damage mass (under the product of the bin masses) equals
/// the observed overall ratio.
pub fn factored_alpha_independent(
    alpha_a: &[f64],
    alpha_b: &[f64],
    mass_a: &[f64],
    mass_b: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if alpha_a.len() != mass_a.len() || alpha_b.len() != mass_b.len() {
        return Err(Error::InvalidConfig(
            "alpha and mass vectors must have matching lengths".into(),
        ));
    }
    let overall = overall_cd(alpha_a, mass_a, alpha_b, mass_b);
    let mut joint = vec![vec![0.0; alpha_b.len()]; alpha_a.len()];
    if overall == 0.0 {
        return Ok(joint);
    }
    let mut implied = 0.0;
    for (i, ai) in alpha_a.iter().enumerate() {
        for (j, bj) in alpha_b.iter().enumerate() {
            joint[i][j] = ai * bj;
            implied += joint[i][j] * mass_a[i] * mass_b[j];
        }
    }
    if implied == 0.0 {
        return Ok(vec![vec![0.0; alpha_b.len()]; alpha_a.len()]);
    }
    let scale = overall / implied;
    for row in &mut joint {
        for v in row {
            *v *= scale;
        }
    }
    Ok(joint)
}

/// Joint damage ratios with the conditional-dependency correction: cell
/// (i, j) proportional to (P(a_i) P(b_j) / P(a_i, b_j)) * alpha_a[i] *
/// alpha_b[j], scaled so the implied damage mass under the joint bin masses
/// equals the observed overall ratio. Cells with zero joint mass are treated
/// as unoccupied and get ratio 0.
pub fn factored_alpha_conditional(
    alpha_a: &[f64],
    alpha_b: &[f64],
    mass_a: &[f64],
    mass_b: &[f64],
    mass_joint: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if alpha_a.len() != mass_a.len() || alpha_b.len() != mass_b.len() {
        return Err(Error::InvalidConfig(
            "alpha and mass vectors must have matching lengths".into(),
        ));
    }
    if mass_joint.len() != alpha_a.len()
        || mass_joint.iter().any(|row| row.len() != alpha_b.len())
    {
        return Err(Error::InvalidConfig(
            "joint mass matrix shape must match the two alpha vectors".into(),
        ));
    }
    let overall = overall_cd(alpha_a, mass_a, alpha_b, mass_b);
    let mut joint = vec![vec![0.0; alpha_b.len()]; alpha_a.len()];
    if overall == 0.0 {
        return Ok(joint);
    }
    let mut implied = 0.0;
    for (i, ai) in alpha_a.iter().enumerate() {
        for (j, bj) in alpha_b.iter().enumerate() {
            let mj = mass_joint[i][j];
            if mj > 0.0 {
                joint[i][j] = (mass_a[i] * mass_b[j] / mj) * ai * bj;
                implied += joint[i][j] * mj;
            }
        }
    }
    if implied == 0.0 {
        return Ok(vec![vec![0.0; alpha_b.len()]; alpha_a.len()]);
    }
    let scale = overall / implied;
    for row in &mut joint {
        for v in row {
            *v *= scale;
        }
    }
    Ok(joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Sample, TaskRole};
    use crate::model::{build_prediction_cache, Arch, Hyper, ModelState};

    fn dataset_with_metas(metas: &[usize]) -> TaskDataset {
        let samples: Vec<Sample> = metas
            .iter()
            .enumerate()
            .map(|(i, &m)| Sample {
                id: i,
                features: vec![i as f64, 0.0],
                label: 0,
                meta_label: m,
                embedding: vec![i as f64, 0.0],
            })
            .collect();
        TaskDataset::new(samples, 2, TaskRole::Prior).unwrap()
    }

    /// Cache whose loss for sample i is exactly losses[i] (see damage tests
    /// for the inversion trick).
    fn cache_with_losses(losses: &[f64]) -> PredictionCache {
        let samples: Vec<Sample> = losses
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let x = (l.exp() - 1.0).ln();
                Sample {
                    id: i,
                    features: vec![x],
                    label: 0,
                    meta_label: 0,
                    embedding: vec![x],
                }
            })
            .collect();
        let data = TaskDataset::new(samples, 2, TaskRole::Prior).unwrap();
        let mut model = ModelState::zeroed(
            Arch {
                input: 1,
                hidden: 0,
                classes: 2,
            },
            Hyper {
                learning_rate: 0.1,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        model.w1 = vec![-1.0, 0.0];
        build_prediction_cache(&model, &data).unwrap()
    }

    #[test]
    fn loss_quantiles_split_simple_case() {
        let cache = cache_with_losses(&[0.1, 0.2, 0.3, 0.4]);
        let p = by_loss_quantile(&cache, 2).unwrap();
        assert_eq!(p.bins, 2);
        assert_eq!(p.bin_of(0), Some(0));
        assert_eq!(p.bin_of(1), Some(0));
        assert_eq!(p.bin_of(2), Some(1));
        assert_eq!(p.bin_of(3), Some(1));
    }

    #[test]
    fn single_quantile_bin() {
        let cache = cache_with_losses(&[0.5, 1.5, 2.5]);
        let p = by_loss_quantile(&cache, 1).unwrap();
        assert_eq!(p.bins, 1);
        assert_eq!(p.bin_mass, vec![1.0]);
    }

    #[test]
    fn quantile_bin_sizes_differ_by_at_most_one() {
        let losses: Vec<f64> = (0..1003).map(|i| 0.01 + (i as f64) * 1e-3).collect();
        let cache = cache_with_losses(&losses);
        let p = by_loss_quantile(&cache, 5).unwrap();
        let mut counts = vec![0usize; 5];
        for (_, bin) in p.assignments() {
            counts[bin] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "bin sizes {counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 1003);
    }

    #[test]
    fn quantile_rejects_k_beyond_dataset() {
        let cache = cache_with_losses(&[0.1, 0.2]);
        assert!(by_loss_quantile(&cache, 3).is_err());
    }

    #[test]
    fn meta_label_bins_and_masses() {
        let data = dataset_with_metas(&[7, 7, 3]);
        let p = by_meta_label(&data).unwrap();
        assert_eq!(p.bins, 2);
        // meta 3 sorts first
        assert_eq!(p.bin_of(2), Some(0));
        assert_eq!(p.bin_of(0), Some(1));
        assert!((p.bin_mass[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.bin_mass[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn meta_label_single_value_is_one_bin() {
        let data = dataset_with_metas(&[5, 5, 5]);
        let p = by_meta_label(&data).unwrap();
        assert_eq!(p.bins, 1);
    }

    #[test]
    fn meta_label_mass_matches_exhaustive_count() {
        let metas: Vec<usize> = (0..10_000).map(|i| (i * 7 + 3) % 4).collect();
        let data = dataset_with_metas(&metas);
        let p = by_meta_label(&data).unwrap();
        for m in 0..4 {
            let count = metas.iter().filter(|x| **x == m).count() as f64;
            assert!((p.bin_mass[m] - count / 10_000.0).abs() < 1e-12);
        }
    }

    #[test]
    fn product_of_full_partitions() {
        // metas give 2 bins; parity of id gives loss-like structure via a
        // second meta partition over transformed ids
        let metas_a: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let data_a = dataset_with_metas(&metas_a);
        let a = by_meta_label(&data_a).unwrap();
        let metas_b: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let data_b = dataset_with_metas(&metas_b);
        let b = by_meta_label(&data_b).unwrap();
        let prod = product(&a, &b).unwrap();
        assert_eq!(prod.bins, 6);
        // joint masses equal empirical joint frequencies
        for i in 0..60 {
            let cell_a = a.bin_of(i).unwrap();
            let cell_b = b.bin_of(i).unwrap();
            let flat = prod.bin_of(i).unwrap();
            let count = (0..60)
                .filter(|&j| a.bin_of(j) == Some(cell_a) && b.bin_of(j) == Some(cell_b))
                .count() as f64;
            assert!((prod.bin_mass[flat] - count / 60.0).abs() < 1e-12);
        }
    }

    #[test]
    fn product_with_single_bin_is_isomorphic() {
        let metas: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let a = by_meta_label(&dataset_with_metas(&metas)).unwrap();
        let single = by_meta_label(&dataset_with_metas(&vec![0; 20])).unwrap();
        let prod = product(&a, &single).unwrap();
        assert_eq!(prod.bins, a.bins);
        for i in 0..20 {
            assert_eq!(prod.bin_of(i), a.bin_of(i));
        }
    }

    #[test]
    fn product_requires_same_ids() {
        let a = by_meta_label(&dataset_with_metas(&[0, 1, 0])).unwrap();
        let b = by_meta_label(&dataset_with_metas(&[0, 1])).unwrap();
        assert!(product(&a, &b).is_err());
    }

    #[test]
    fn product_assignment_consistent_with_factors() {
        let metas_a: Vec<usize> = (0..100).map(|i| (i / 10) % 4).collect();
        let metas_b: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let a = by_meta_label(&dataset_with_metas(&metas_a)).unwrap();
        let b = by_meta_label(&dataset_with_metas(&metas_b)).unwrap();
        let prod = product(&a, &b).unwrap();
        // the product bin determines both factor bins
        let mut cell_to_pair: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for i in 0..100 {
            let pair = (a.bin_of(i).unwrap(), b.bin_of(i).unwrap());
            let flat = prod.bin_of(i).unwrap();
            if let Some(prev) = cell_to_pair.insert(flat, pair) {
                assert_eq!(prev, pair);
            }
        }
    }

    fn two_blob_cache(n_per: usize) -> PredictionCache {
        // embeddings fall into two tight, well-separated blobs
        let mut samples = Vec::new();
        for i in 0..n_per {
            let jitter = (i as f64) * 1e-3;
            samples.push(Sample {
                id: i,
                features: vec![10.0 + jitter, 0.0],
                label: 0,
                meta_label: 0,
                embedding: vec![],
            });
            samples.push(Sample {
                id: n_per + i,
                features: vec![-10.0 - jitter, 0.5],
                label: 1,
                meta_label: 1,
                embedding: vec![],
            });
        }
        let mut samples: Vec<Sample> = samples
            .into_iter()
            .map(|mut s| {
                s.embedding = s.features.clone();
                s
            })
            .collect();
        samples.sort_by_key(|s| s.id);
        let data = TaskDataset::new(samples, 2, TaskRole::Prior).unwrap();
        let model = ModelState::zeroed(
            Arch {
                input: 2,
                hidden: 0,
                classes: 2,
            },
            Hyper {
                learning_rate: 0.1,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        build_prediction_cache(&model, &data).unwrap()
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let cache = two_blob_cache(50);
        let p = by_kmeans(&cache, 2, 3, 100).unwrap();
        assert_eq!(p.bins, 2);
        // all of blob 0 lands in one bin, all of blob 1 in the other
        let bin0 = p.bin_of(0).unwrap();
        for id in 0..50 {
            assert_eq!(p.bin_of(id), Some(bin0));
        }
        let bin1 = p.bin_of(50).unwrap();
        assert_ne!(bin0, bin1);
        for id in 50..100 {
            assert_eq!(p.bin_of(id), Some(bin1));
        }
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let cache = two_blob_cache(30);
        let p1 = by_kmeans(&cache, 2, 42, 50).unwrap();
        let p2 = by_kmeans(&cache, 2, 42, 50).unwrap();
        let a1: Vec<_> = p1.assignments().collect();
        let a2: Vec<_> = p2.assignments().collect();
        assert_eq!(a1, a2);
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        // run Lloyd manually through increasing max_iters and watch the
        // within-cluster sum of squares
        let cache = two_blob_cache(40);
        let objective = |p: &Partition| -> f64 {
            // recompute centroids from the assignment, then sum squared dists
            let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            for (id, bin) in p.assignments() {
                let e = cache.get(id).unwrap();
                let entry = sums.entry(bin).or_insert((vec![0.0; e.embedding.len()], 0));
                for (s, v) in entry.0.iter_mut().zip(&e.embedding) {
                    *s += v;
                }
                entry.1 += 1;
            }
            let centroids: BTreeMap<usize, Vec<f64>> = sums
                .into_iter()
                .map(|(bin, (sum, count))| {
                    (bin, sum.iter().map(|v| v / count as f64).collect())
                })
                .collect();
            p.assignments()
                .map(|(id, bin)| {
                    let e = cache.get(id).unwrap();
                    centroids[&bin]
                        .iter()
                        .zip(&e.embedding)
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum::<f64>()
                })
                .sum()
        };
        let mut prev = f64::INFINITY;
        for iters in 1..6 {
            let p = by_kmeans(&cache, 2, 9, iters).unwrap();
            let obj = objective(&p);
            assert!(obj <= prev + 1e-9, "objective rose: {prev} -> {obj}");
            prev = obj;
        }
    }

    #[test]
    fn kmeans_rejects_k_beyond_distinct_points() {
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: i,
                features: vec![1.0, 2.0],
                label: 0,
                meta_label: 0,
                embedding: vec![1.0, 2.0],
            })
            .collect();
        let data = TaskDataset::new(samples, 2, TaskRole::Prior).unwrap();
        let model = ModelState::zeroed(
            Arch {
                input: 2,
                hidden: 0,
                classes: 2,
            },
            Hyper {
                learning_rate: 0.1,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        let cache = build_prediction_cache(&model, &data).unwrap();
        assert!(by_kmeans(&cache, 2, 1, 10).is_err());
    }

    #[test]
    fn kl_of_uniform_ratios_is_zero() {
        let (kl, effective) = effectiveness_kl(&[0.3, 0.3, 0.3], 0.01).unwrap();
        assert!(kl.abs() < 1e-12);
        assert!(!effective);
    }

    #[test]
    fn kl_hand_computed_case() {
        // p = (8/9, 1/9): KL = (8/9) ln(16/9) + (1/9) ln(2/9)
        let (kl, effective) = effectiveness_kl(&[0.8, 0.1], 0.01).unwrap();
        let expected = (8.0 / 9.0) * (16.0f64 / 9.0).ln() + (1.0 / 9.0) * (2.0f64 / 9.0).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.3445).abs() < 1e-3);
        assert!(effective);
    }

    #[test]
    fn kl_all_zero_is_inoffensive() {
        let (kl, effective) = effectiveness_kl(&[0.0, 0.0], 0.01).unwrap();
        assert_eq!(kl, 0.0);
        assert!(!effective);
    }

    #[test]
    fn factored_independent_rows_proportional_to_alpha_a() {
        let alpha_a = [0.6, 0.2, 0.1];
        let alpha_b = [0.25, 0.25];
        let mass_a = [0.5, 0.3, 0.2];
        let mass_b = [0.5, 0.5];
        let joint = factored_alpha_independent(&alpha_a, &alpha_b, &mass_a, &mass_b).unwrap();
        for j in 0..2 {
            let r0 = joint[0][j] / alpha_a[0];
            let r1 = joint[1][j] / alpha_a[1];
            let r2 = joint[2][j] / alpha_a[2];
            assert!((r0 - r1).abs() < 1e-12);
            assert!((r1 - r2).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_independent_degenerate_corner() {
        let joint =
            factored_alpha_independent(&[1.0, 0.0], &[1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!(joint[0][0] > 0.0);
        assert_eq!(joint[0][1], 0.0);
        assert_eq!(joint[1][0], 0.0);
        assert_eq!(joint[1][1], 0.0);
    }

    #[test]
    fn factored_zero_overall_gives_zero_joint() {
        let joint =
            factored_alpha_independent(&[0.0, 0.0], &[0.0], &[0.5, 0.5], &[1.0]).unwrap();
        assert!(joint.iter().flatten().all(|v| *v == 0.0));
    }

    /// Direct joint counting oracle on synthetic triples where the true
    /// conditional damage probability factorizes as u[a] * v[b] and the two
    /// partitions are independent.
    #[test]
    fn factored_independent_matches_direct_joint_oracle() {
        let u = [0.8, 0.3, 0.1];
        let v = [0.9, 0.2];
        let mass_a = [0.3, 0.4, 0.3];
        let mass_b = [0.6, 0.4];
        let mut rng = StdRng::seed_from_u64(1234);
        let n = 400_000usize;
        let mut count = vec![vec![0u64; 2]; 3];
        let mut damaged = vec![vec![0u64; 2]; 3];
        let mut tally_a = vec![0u64; 3];
        let mut tally_b = vec![0u64; 2];
        let mut dmg_a = vec![0u64; 3];
        let mut dmg_b = vec![0u64; 2];
        let pick = |rng: &mut StdRng, mass: &[f64]| -> usize {
            let mut t = rng.gen_range(0.0..1.0);
            for (i, m) in mass.iter().enumerate() {
                if t < *m {
                    return i;
                }
                t -= m;
            }
            mass.len() - 1
        };
        for _ in 0..n {
            let a = pick(&mut rng, &mass_a);
            let b = pick(&mut rng, &mass_b);
            let phi = rng.gen_range(0.0..1.0) < u[a] * v[b];
            count[a][b] += 1;
            tally_a[a] += 1;
            tally_b[b] += 1;
            if phi {
                damaged[a][b] += 1;
                dmg_a[a] += 1;
                dmg_b[b] += 1;
            }
        }
        let direct: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..2)
                    .map(|b| damaged[a][b] as f64 / count[a][b] as f64)
                    .collect()
            })
            .collect();
        let alpha_a: Vec<f64> = (0..3).map(|a| dmg_a[a] as f64 / tally_a[a] as f64).collect();
        let alpha_b: Vec<f64> = (0..2).map(|b| dmg_b[b] as f64 / tally_b[b] as f64).collect();
        let emp_mass_a: Vec<f64> = tally_a.iter().map(|c| *c as f64 / n as f64).collect();
        let emp_mass_b: Vec<f64> = tally_b.iter().map(|c| *c as f64 / n as f64).collect();
        let factored =
            factored_alpha_independent(&alpha_a, &alpha_b, &emp_mass_a, &emp_mass_b).unwrap();
        for a in 0..3 {
            for b in 0..2 {
                assert!(
                    (factored[a][b] - direct[a][b]).abs() < 0.05,
                    "cell ({a},{b}): factored {} vs direct {}",
                    factored[a][b],
                    direct[a][b]
                );
            }
        }
    }

    #[test]
    fn conditional_reduces_to_independent_when_joint_factorizes() {
        let alpha_a = [0.7, 0.2];
        let alpha_b = [0.5, 0.1, 0.3];
        let mass_a = [0.4, 0.6];
        let mass_b = [0.2, 0.5, 0.3];
        let mass_joint: Vec<Vec<f64>> = mass_a
            .iter()
            .map(|ma| mass_b.iter().map(|mb| ma * mb).collect())
            .collect();
        let ind = factored_alpha_independent(&alpha_a, &alpha_b, &mass_a, &mass_b).unwrap();
        let cond = factored_alpha_conditional(&alpha_a, &alpha_b, &mass_a, &mass_b, &mass_joint)
            .unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!(
                    (ind[i][j] - cond[i][j]).abs() < 1e-9,
                    "cell ({i},{j}): {} vs {}",
                    ind[i][j],
                    cond[i][j]
                );
            }
        }
    }

    /// Direct joint counting oracle where the two partitions are dependent
    /// marginally but independent conditioned on the damage event: damage is
    /// drawn first, damaged samples pick (a, b) from a product distribution,
    /// undamaged ones from a correlated joint.
    #[test]
    fn factored_conditional_matches_direct_joint_oracle() {
        let phi_rate = 0.2;
        let a_given_phi = [0.6, 0.3, 0.1];
        let b_given_phi = [0.5, 0.5];
        // undamaged mass concentrates on the "diagonal", correlating A and B
        let joint_given_clean: [[f64; 2]; 3] = [[0.30, 0.05], [0.05, 0.30], [0.05, 0.25]];
        let mut rng = StdRng::seed_from_u64(4321);
        let n = 400_000usize;
        let pick = |rng: &mut StdRng, mass: &[f64]| -> usize {
            let mut t = rng.gen_range(0.0..1.0);
            for (i, m) in mass.iter().enumerate() {
                if t < *m {
                    return i;
                }
                t -= m;
            }
            mass.len() - 1
        };
        let mut count = vec![vec![0u64; 2]; 3];
        let mut damaged = vec![vec![0u64; 2]; 3];
        let (mut tally_a, mut tally_b) = (vec![0u64; 3], vec![0u64; 2]);
        let (mut dmg_a, mut dmg_b) = (vec![0u64; 3], vec![0u64; 2]);
        for _ in 0..n {
            let phi = rng.gen_range(0.0..1.0) < phi_rate;
            let (a, b) = if phi {
                (pick(&mut rng, &a_given_phi), pick(&mut rng, &b_given_phi))
            } else {
                let flat: Vec<f64> = joint_given_clean.iter().flatten().copied().collect();
                let cell = pick(&mut rng, &flat);
                (cell / 2, cell % 2)
            };
            count[a][b] += 1;
            tally_a[a] += 1;
            tally_b[b] += 1;
            if phi {
                damaged[a][b] += 1;
                dmg_a[a] += 1;
                dmg_b[b] += 1;
            }
        }
        let alpha_a: Vec<f64> = (0..3).map(|a| dmg_a[a] as f64 / tally_a[a] as f64).collect();
        let alpha_b: Vec<f64> = (0..2).map(|b| dmg_b[b] as f64 / tally_b[b] as f64).collect();
        let mass_a: Vec<f64> = tally_a.iter().map(|c| *c as f64 / n as f64).collect();
        let mass_b: Vec<f64> = tally_b.iter().map(|c| *c as f64 / n as f64).collect();
        let mass_joint: Vec<Vec<f64>> = (0..3)
            .map(|a| (0..2).map(|b| count[a][b] as f64 / n as f64).collect())
            .collect();
        let factored =
            factored_alpha_conditional(&alpha_a, &alpha_b, &mass_a, &mass_b, &mass_joint).unwrap();
        for a in 0..3 {
            for b in 0..2 {
                let direct = damaged[a][b] as f64 / count[a][b] as f64;
                assert!(
                    (factored[a][b] - direct).abs() < 0.05,
                    "cell ({a},{b}): factored {} vs direct {direct}",
                    factored[a][b]
                );
            }
        }
    }

    #[test]
    fn conditional_with_single_bin_b_returns_alpha_a() {
        let alpha_a = [0.6, 0.2, 0.0];
        let mass_a = [0.3, 0.5, 0.2];
        // overall ratio implied by A must match B's single-bin alpha
        let overall: f64 = alpha_a.iter().zip(&mass_a).map(|(a, m)| a * m).sum();
        let alpha_b = [overall];
        let mass_b = [1.0];
        let mass_joint: Vec<Vec<f64>> = mass_a.iter().map(|m| vec![*m]).collect();
        let cond = factored_alpha_conditional(&alpha_a, &alpha_b, &mass_a, &mass_b, &mass_joint)
            .unwrap();
        for (i, a) in alpha_a.iter().enumerate() {
            assert!(
                (cond[i][0] - a).abs() < 1e-9,
                "bin {i}: {} vs {a}",
                cond[i][0]
            );
        }
    }

    mod props {
        use super::cache_with_losses;
        use crate::partition::{by_loss_quantile, effectiveness_kl};
        use proptest::{prop_assert, prop_assume, proptest};

        proptest! {
            #[test]
            fn bin_masses_sum_to_one(losses in proptest::collection::vec(0.01f64..5.0, 5..200), k in 1usize..5) {
                prop_assume!(k <= losses.len());
                let cache = cache_with_losses(&losses);
                let p = by_loss_quantile(&cache, k).unwrap();
                let sum: f64 = p.bin_mass.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }

            #[test]
            fn kl_is_permutation_invariant(mut alpha in proptest::collection::vec(0.0f64..=1.0, 2..8), swap_a in 0usize..8, swap_b in 0usize..8) {
                let (kl1, _) = effectiveness_kl(&alpha, 0.01).unwrap();
                let a = swap_a % alpha.len();
                let b = swap_b % alpha.len();
                alpha.swap(a, b);
                let (kl2, _) = effectiveness_kl(&alpha, 0.01).unwrap();
                prop_assert!((kl1 - kl2).abs() < 1e-12);
            }

            #[test]
            fn kl_zero_exactly_when_all_equal(value in 0.01f64..=1.0, k in 2usize..6) {
                let alpha = vec![value; k];
                let (kl, effective) = effectiveness_kl(&alpha, 0.01).unwrap();
                prop_assert!(kl.abs() < 1e-12);
                prop_assert!(!effective);
            }
        }
    }
}
