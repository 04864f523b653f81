//! From-scratch softmax classifier with analytic gradients and SGD.
//!
//! Two architectures: plain softmax regression, or one tanh hidden layer in
//! front of it. Everything is f64 and deterministic; no autodiff.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::dataset::{Sample, TaskDataset};
use crate::error::{Error, Result};

/// Layer sizes. `hidden == 0` means plain softmax regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// Training hyperparameters carried with the model.
#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// The classifier: weights, hyperparameters, architecture.
///
/// Weight matrices are row-major with shape (out, in): `w1` is
/// (hidden, input) when a hidden layer exists, otherwise (classes, input);
/// `w2`/`b2` are empty in the linear case.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub arch: Arch,
    pub hyper: Hyper,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient of the mean cross-entropy over a batch, same shapes as the weights.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dw1: Vec<f64>,
    pub db1: Vec<f64>,
    pub dw2: Vec<f64>,
    pub db2: Vec<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.dw1.iter().all(|v| v.is_finite())
            && self.db1.iter().all(|v| v.is_finite())
            && self.dw2.iter().all(|v| v.is_finite())
            && self.db2.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .dw1
            .iter()
            .chain(&self.db1)
            .chain(&self.dw2)
            .chain(&self.db2)
            .map(|v| v * v)
            .sum();
        sq.sqrt()
    }
}

/// Per-sample training signal: the prediction and loss that the training
/// forward pass produces anyway. This is the "free" inference that damage
/// flags and ratio estimates are computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSignal {
    pub predicted: usize,
    pub loss: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|u| (u - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Stable cross-entropy: -ln p[label] computed as logsumexp(u) - u[label].
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|u| (u - m).exp()).sum::<f64>().ln() + m;
    lse - logits[label]
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ModelState {
    /// Seeded initialization: weights ~ N(0, 1/fan_in), biases zero.
    pub fn new(arch: Arch, hyper: Hyper, seed: u64) -> Result<Self> {
        if arch.input == 0 || arch.classes < 2 {
            return Err(Error::InvalidConfig(
                "arch needs input >= 1 and classes >= 2".into(),
            ));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let scale = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let (w1, b1, w2, b2) = if arch.hidden == 0 {
            (
                init(arch.classes * arch.input, arch.input),
                vec![0.0; arch.classes],
                Vec::new(),
                Vec::new(),
            )
        } else {
            (
                init(arch.hidden * arch.input, arch.input),
                vec![0.0; arch.hidden],
                init(arch.classes * arch.hidden, arch.hidden),
                vec![0.0; arch.classes],
            )
        };
        Ok(Self {
            arch,
            hyper,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn zeroed(arch: Arch, hyper: Hyper) -> Result<Self> {
        let mut m = Self::new(arch, hyper, 0)?;
        m.w1.iter_mut().for_each(|v| *v = 0.0);
        m.w2.iter_mut().for_each(|v| *v = 0.0);
        Ok(m)
    }

    fn logits_and_hidden(&self, features: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        if features.len() != self.arch.input {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input,
                got: features.len(),
            });
        }
        let d = self.arch.input;
        if self.arch.hidden == 0 {
            let mut logits = self.b1.clone();
            for (k, logit) in logits.iter_mut().enumerate() {
                let row = &self.w1[k * d..(k + 1) * d];
                *logit += row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
            }
            Ok((logits, None))
        } else {
            let h = self.arch.hidden;
            let mut act = self.b1.clone();
            for (j, a) in act.iter_mut().enumerate() {
                let row = &self.w1[j * d..(j + 1) * d];
                *a += row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
                *a = a.tanh();
            }
            let mut logits = self.b2.clone();
            for (k, logit) in logits.iter_mut().enumerate() {
                let row = &self.w2[k * h..(k + 1) * h];
                *logit += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
            }
            Ok((logits, Some(act)))
        }
    }

    /// Class probabilities for one input.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (logits, _) = self.logits_and_hidden(features)?;
        Ok(softmax(&logits))
    }

    /// Prediction and loss for one sample from a single forward pass.
    pub fn signal(&self, sample: &Sample) -> Result<SampleSignal> {
        let (logits, _) = self.logits_and_hidden(&sample.features)?;
        if sample.label >= logits.len() {
            return Err(Error::InvalidConfig(format!(
                "label {} out of range for {} classes",
                sample.label,
                logits.len()
            )));
        }
        Ok(SampleSignal {
            predicted: argmax(&logits),
            loss: cross_entropy(&logits, sample.label),
        })
    }

    /// Cross-entropy of one sample under the current weights.
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let (logits, _) = self.logits_and_hidden(&sample.features)?;
        if sample.label >= logits.len() {
            return Err(Error::InvalidConfig(format!(
                "label {} out of range for {} classes",
                sample.label,
                logits.len()
            )));
        }
        Ok(cross_entropy(&logits, sample.label))
    }

    /// Hidden activation (or the raw features for the linear architecture);
    /// this is what k-means partitioning clusters on.
    pub fn embedding(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (_, hidden) = self.logits_and_hidden(features)?;
        Ok(hidden.unwrap_or_else(|| features.to_vec()))
    }

    /// Mean gradient over a batch, plus the per-sample (prediction, loss)
    /// signals the forward passes produce along the way.
    pub fn grad_with_signals(&self, batch: &[&Sample]) -> Result<(Gradients, Vec<SampleSignal>)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        let d = self.arch.input;
        let c = self.arch.classes;
        let h = self.arch.hidden;
        let mut g = Gradients {
            dw1: vec![0.0; self.w1.len()],
            db1: vec![0.0; self.b1.len()],
            dw2: vec![0.0; self.w2.len()],
            db2: vec![0.0; self.b2.len()],
        };
        let mut signals = Vec::with_capacity(batch.len());
        for sample in batch {
            let (logits, hidden_act) = self.logits_and_hidden(&sample.features)?;
            let probs = softmax(&logits);
            signals.push(SampleSignal {
                predicted: argmax(&probs),
                loss: cross_entropy(&logits, sample.label),
            });
            // delta over logits: p - onehot(y)
            let mut delta: Vec<f64> = probs;
            delta[sample.label] -= 1.0;
            match &hidden_act {
                None => {
                    for k in 0..c {
                        g.db1[k] += delta[k];
                        let row = &mut g.dw1[k * d..(k + 1) * d];
                        for (j, x) in sample.features.iter().enumerate() {
                            row[j] += delta[k] * x;
                        }
                    }
                }
                Some(act) => {
                    for k in 0..c {
                        g.db2[k] += delta[k];
                        let row = &mut g.dw2[k * h..(k + 1) * h];
                        for (j, a) in act.iter().enumerate() {
                            row[j] += delta[k] * a;
                        }
                    }
                    for j in 0..h {
                        let mut back = 0.0;
                        for k in 0..c {
                            back += self.w2[k * h + j] * delta[k];
                        }
                        let dpre = back * (1.0 - act[j] * act[j]);
                        g.db1[j] += dpre;
                        let row = &mut g.dw1[j * d..(j + 1) * d];
                        for (i, x) in sample.features.iter().enumerate() {
                            row[i] += dpre * x;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        g.dw1.iter_mut().for_each(|v| *v *= inv);
        g.db1.iter_mut().for_each(|v| *v *= inv);
        g.dw2.iter_mut().for_each(|v| *v *= inv);
        g.db2.iter_mut().for_each(|v| *v *= inv);
        Ok((g, signals))
    }

    /// Mean gradient over a batch.
    pub fn grad(&self, batch: &[&Sample]) -> Result<Gradients> {
        Ok(self.grad_with_signals(batch)?.0)
    }

    /// One SGD step: w <- w - lr * (grad + weight_decay * w).
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let apply = |w: &mut [f64], g: &[f64]| {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * (gi + weight_decay * *wi);
            }
        };
        apply(&mut self.w1, &grads.dw1);
        apply(&mut self.b1, &grads.db1);
        apply(&mut self.w2, &grads.dw2);
        apply(&mut self.b2, &grads.db2);
        Ok(())
    }

    /// Gradient step on one minibatch, returning the per-sample signals
    /// captured before the update.
    pub fn sgd_minibatch(&mut self, batch: &[&Sample], lr: f64, wd: f64) -> Result<Vec<SampleSignal>> {
        let (grads, signals) = self.grad_with_signals(batch)?;
        self.sgd_step(&grads, lr, wd)?;
        Ok(signals)
    }

    /// Minibatch SGD over the dataset for a number of epochs with a seeded
    /// shuffle; used to fit the base model.
    pub fn train_epochs(
        &mut self,
        data: &TaskDataset,
        epochs: usize,
        minibatch: usize,
        rng: &mut StdRng,
    ) -> Result<()> {
        let lr = self.hyper.learning_rate;
        let wd = self.hyper.weight_decay;
        let mb = minibatch.max(1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(mb) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
                self.sgd_minibatch(&batch, lr, wd)?;
            }
        }
        Ok(())
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn accuracy(&self, data: &TaskDataset) -> Result<f64> {
        let mut correct = 0usize;
        for s in &data.samples {
            if argmax(&self.forward(&s.features)?) == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    fn params(&self) -> Vec<(&'static str, &Vec<f64>)> {
        if self.arch.hidden == 0 {
            vec![("w1", &self.w1), ("b1", &self.b1)]
        } else {
            vec![
                ("w1", &self.w1),
                ("b1", &self.b1),
                ("w2", &self.w2),
                ("b2", &self.b2),
            ]
        }
    }

    /// Dump the weights as CSV: an `arch` line, then one line per tensor in
    /// layer order, values row-major.
    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(
            file,
            "arch,{},{},{}",
            self.arch.input, self.arch.hidden, self.arch.classes
        )?;
        for (name, values) in self.params() {
            let joined: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
            writeln!(file, "{name},{}", joined.join(","))?;
        }
        Ok(())
    }

    /// Load weights written by [`save_csv`].
    pub fn load_csv<P: AsRef<Path>>(path: P, hyper: Hyper) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let arch_line = lines.next().ok_or(Error::Empty("checkpoint"))?.map_err(Error::Io)?;
        let parts: Vec<&str> = arch_line.split(',').collect();
        if parts.len() != 4 || parts[0] != "arch" {
            return Err(Error::Parse("bad arch line in checkpoint".into()));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse("bad arch field".into()))
        };
        let arch = Arch {
            input: parse(parts[1])?,
            hidden: parse(parts[2])?,
            classes: parse(parts[3])?,
        };
        let mut model = Self::zeroed(arch, hyper)?;
        for line in lines {
            let line = line.map_err(Error::Io)?;
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse("bad tensor line".into()))?;
            let values: Vec<f64> = rest
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse("bad weight value".into())))
                .collect::<Result<_>>()?;
            let slot = match name {
                "w1" => &mut model.w1,
                "b1" => &mut model.b1,
                "w2" => &mut model.w2,
                "b2" => &mut model.b2,
                other => return Err(Error::Parse(format!("unknown tensor {other}"))),
            };
            if slot.len() != values.len() {
                return Err(Error::Parse(format!(
                    "tensor {name} has {} values, expected {}",
                    values.len(),
                    slot.len()
                )));
            }
            *slot = values;
        }
        Ok(model)
    }
}

/// One cached record of the base model's view of a sample.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub predicted: usize,
    pub loss: f64,
    pub embedding: Vec<f64>,
}

/// Base-model predictions over the whole prior dataset, built once and then
/// read-only. The damage indicator's prior side reads exclusively from here.
#[derive(Debug, Clone)]
pub struct PredictionCache {
    entries: BTreeMap<usize, CacheEntry>,
}

impl PredictionCache {
    pub fn get(&self, id: usize) -> Option<&CacheEntry> {
        self.entries.get(&id)
    }

    pub fn require(&self, id: usize) -> Result<&CacheEntry> {
        self.entries.get(&id).ok_or(Error::MissingEntry {
            id,
            what: "prediction cache",
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &CacheEntry)> {
        self.entries.iter()
    }

    /// All cached losses sorted ascending.
    pub fn sorted_losses(&self) -> Vec<f64> {
        let mut losses: Vec<f64> = self.entries.values().map(|e| e.loss).collect();
        losses.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
        losses
    }
}

/// Evaluate the model once over every sample and freeze the results.
pub fn build_prediction_cache(model: &ModelState, dataset: &TaskDataset) -> Result<PredictionCache> {
    let mut entries = BTreeMap::new();
    for s in &dataset.samples {
        let probs = model.forward(&s.features)?;
        let entry = CacheEntry {
            predicted: argmax(&probs),
            loss: model.loss(s)?,
            embedding: model.embedding(&s.features)?,
        };
        entries.insert(s.id, entry);
    }
    Ok(PredictionCache { entries })
}
