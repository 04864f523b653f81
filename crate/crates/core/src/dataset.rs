//! Synthetic two-task benchmark generation.
//!
//! The prior task is a Gaussian mixture where each component owns one
//! meta-label, so ground-truth structure is known and forgetting can be
//! steered into specific bins. The fine-tune task is a second mixture whose
//! components either sit far from the prior support ("benign") or are placed
//! on top of a targeted prior component with a conflicting class label
//! ("attackers"), which is what makes fine-tuning damage that region.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One labeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
    /// Small auxiliary label (genre analogue); for generated data this is the
    /// index of the mixture component the sample was drawn from.
    pub meta_label: usize,
    /// Representation used for unsupervised partitioning. Defaults to the
    /// feature vector; the model layer may replace it with hidden activations.
    pub embedding: Vec<f64>,
}

/// Which task a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskRole {
    Prior,
    Finetune,
}

/// An immutable, ordered collection of samples for one task.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub role: TaskRole,
}

impl TaskDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, role: TaskRole) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let dim = samples[0].features.len();
        let mut ids = BTreeSet::new();
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if s.label >= num_classes {
                return Err(Error::InvalidConfig(format!(
                    "sample {} has label {} but num_classes is {}",
                    s.id, s.label, num_classes
                )));
            }
            if !s.features.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
            if !ids.insert(s.id) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].features.len()
    }

    /// Ids of all samples, in dataset order.
    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }
}

/// Geometry of the generated two-task benchmark.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Number of prior mixture components. Each owns one meta-label.
    pub prior_clusters: usize,
    pub finetune_clusters: usize,
    pub prior_size: usize,
    pub finetune_size: usize,
    /// Within-component standard deviation.
    pub cluster_spread: f64,
    /// Radius at which prior component centers are placed.
    pub center_radius: f64,
    /// 0 = fine-tune components sit far from the prior support,
    /// 1 = attacker components sit exactly on their target.
    pub overlap: f64,
    /// Fraction of fine-tune components that attack prior component 0
    /// (rounded to a count). The rest are benign far components.
    pub forgetting_pressure: f64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::InvalidConfig("feature_dim must be >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.prior_clusters == 0 || self.finetune_clusters == 0 {
            return Err(Error::InvalidConfig("cluster counts must be positive".into()));
        }
        if self.prior_size == 0 || self.finetune_size == 0 {
            return Err(Error::InvalidConfig("dataset sizes must be positive".into()));
        }
        if !(self.cluster_spread > 0.0) || !(self.center_radius > 0.0) {
            return Err(Error::InvalidConfig(
                "cluster_spread and center_radius must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig("overlap must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.forgetting_pressure) {
            return Err(Error::InvalidConfig(
                "forgetting_pressure must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Place `count` centers on the sphere of the given radius, retrying draws to
/// keep pairwise separation at least `min_sep` (falls back to the best
/// candidate seen if the threshold is unreachable).
fn place_centers(rng: &mut StdRng, count: usize, dim: usize, radius: f64, min_sep: f64) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..200 {
            let cand: Vec<f64> = unit_vector(rng, dim).iter().map(|x| x * radius).collect();
            let sep = centers
                .iter()
                .map(|c| dist(c, &cand))
                .fold(f64::INFINITY, f64::min);
            if sep >= min_sep {
                best = Some((sep, cand));
                break;
            }
            if best.as_ref().is_none_or(|(s, _)| sep > *s) {
                best = Some((sep, cand));
            }
        }
        centers.push(best.expect("at least one candidate").1);
    }
    centers
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn draw_point(rng: &mut StdRng, center: &[f64], spread: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generate the (prior, finetune) dataset pair. Pure function of
/// (config, seed).
pub fn generate_two_task(config: &GenConfig, seed: u64) -> Result<(TaskDataset, TaskDataset)> {
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let d = config.feature_dim;
    let c = config.num_classes;

    // Prior mixture: component m carries meta_label m and class label m % C.
    let prior_centers = place_centers(
        &mut rng,
        config.prior_clusters,
        d,
        config.center_radius,
        1.2 * config.center_radius,
    );
    let mut prior_samples = Vec::with_capacity(config.prior_size);
    for id in 0..config.prior_size {
        let m = rng.gen_range(0..config.prior_clusters);
        let features = draw_point(&mut rng, &prior_centers[m], config.cluster_spread);
        prior_samples.push(Sample {
            id,
            embedding: features.clone(),
            features,
            label: m % c,
            meta_label: m,
        });
    }

    // Fine-tune mixture: the first `attackers` components are pulled onto
    // prior component 0 (by `overlap`) and labeled to conflict with it; the
    // rest live at far positions with their own labels. Far anchors are kept
    // angularly separated from every prior component (and from each other):
    // a far cluster collinear with a prior one is only separable through the
    // bias term, which would leak damage into untargeted regions.
    let attackers = (config.forgetting_pressure * config.finetune_clusters as f64).round() as usize;
    let attackers = attackers.min(config.finetune_clusters);
    let target = &prior_centers[0];
    // Prior component 0 has label 0; attackers take the next class so the
    // contested region carries conflicting supervision.
    let conflict_label = 1 % c;
    let mut taken_dirs: Vec<Vec<f64>> = prior_centers
        .iter()
        .map(|center| {
            let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt();
            center.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut ft_centers = Vec::with_capacity(config.finetune_clusters);
    let mut ft_labels = Vec::with_capacity(config.finetune_clusters);
    for j in 0..config.finetune_clusters {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..200 {
            let cand = unit_vector(&mut rng, d);
            let worst_dot = taken_dirs
                .iter()
                .map(|dir| dir.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            if worst_dot <= 0.5 {
                best = Some((worst_dot, cand));
                break;
            }
            if best.as_ref().is_none_or(|(w, _)| worst_dot < *w) {
                best = Some((worst_dot, cand));
            }
        }
        let far_dir = best.expect("at least one candidate").1;
        taken_dirs.push(far_dir.clone());
        let far: Vec<f64> = far_dir.iter().map(|x| x * 2.2 * config.center_radius).collect();
        if j < attackers {
            let center: Vec<f64> = far
                .iter()
                .zip(target)
                .map(|(f, t)| f + config.overlap * (t - f))
                .collect();
            ft_centers.push(center);
            ft_labels.push(conflict_label);
        } else {
            // benign labels cycle from class 0 so the fine-tune task stays
            // roughly class-balanced (a skewed label prior would damage the
            // prior task even without spatial overlap)
            ft_centers.push(far);
            ft_labels.push((j - attackers) % c);
        }
    }
    let mut ft_samples = Vec::with_capacity(config.finetune_size);
    for id in 0..config.finetune_size {
        let j = rng.gen_range(0..config.finetune_clusters);
        let features = draw_point(&mut rng, &ft_centers[j], config.cluster_spread);
        ft_samples.push(Sample {
            id,
            embedding: features.clone(),
            features,
            label: ft_labels[j],
            meta_label: j,
        });
    }

    let prior = TaskDataset::new(prior_samples, c, TaskRole::Prior)?;
    let finetune = TaskDataset::new(ft_samples, c, TaskRole::Finetune)?;
    Ok((prior, finetune))
}

/// Split a dataset into (rest, holdout) disjointly and exhaustively.
/// The holdout gets `round(fraction * n)` samples, clamped so both sides are
/// non-empty. Both halves come back sorted by id.
pub fn split_holdout(
    dataset: &TaskDataset,
    fraction: f64,
    seed: u64,
) -> Result<(TaskDataset, TaskDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::InvalidConfig("cannot split a dataset of size < 2".into()));
    }
    let holdout_size = ((fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut holdout: Vec<Sample> = order[..holdout_size]
        .iter()
        .map(|&i| dataset.samples[i].clone())
        .collect();
    let mut rest: Vec<Sample> = order[holdout_size..]
        .iter()
        .map(|&i| dataset.samples[i].clone())
        .collect();
    holdout.sort_by_key(|s| s.id);
    rest.sort_by_key(|s| s.id);

    Ok((
        TaskDataset::new(rest, dataset.num_classes, dataset.role)?,
        TaskDataset::new(holdout, dataset.num_classes, dataset.role)?,
    ))
}

/// Write a dataset as CSV with header `id,label,meta_label,f0..f{d-1}`.
pub fn export_csv<P: AsRef<Path>>(dataset: &TaskDataset, path: P) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let d = dataset.feature_dim();
    let mut header = String::from("id,label,meta_label");
    for i in 0..d {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(file, "{header}")?;
    for s in &dataset.samples {
        let feats: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{},{},{},{}", s.id, s.label, s.meta_label, feats.join(","))?;
    }
    Ok(())
}

/// Read a dataset written by [`export_csv`]. `num_classes` is inferred as
/// `max(label) + 1`; embeddings default to the features.
pub fn import_csv<P: AsRef<Path>>(path: P, role: TaskRole) -> Result<TaskDataset> {
    let file = std::fs::File::open(&path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(Error::Empty("csv file"))?
        .map_err(Error::Io)?;
    if !header.starts_with("id,label,meta_label") {
        return Err(Error::Parse(format!("unexpected csv header: {header}")));
    }
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Parse(format!("line {}: too few fields", lineno + 2)));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad id", lineno + 2)))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad label", lineno + 2)))?;
        let meta_label: usize = fields[2]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad meta_label", lineno + 2)))?;
        let features: Vec<f64> = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad feature", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        max_label = max_label.max(label);
        samples.push(Sample {
            id,
            embedding: features.clone(),
            features,
            label,
            meta_label,
        });
    }
    TaskDataset::new(samples, max_label + 1, role)
}
