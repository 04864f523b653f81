//! Experiment spec files: flat `key = value` pairs under `[section]`
//! headers, `#` comments, no surprises. Unknown sections or keys are errors,
//! and everything is validated before any compute is spent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rehearsal_core::damage::DamageMode;
use rehearsal_core::dataset::GenConfig;
use rehearsal_core::error::{Error, Result};
use rehearsal_core::harness::{EstimatorMode, ModelConfig, PartitionSpec, RunConfig};
use rehearsal_core::sampler::{SamplerConfig, Strategy};

/// A parsed spec: the run template plus the sweep grid and output options.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub run: RunConfig,
    pub sweep_strategies: Vec<Strategy>,
    pub sweep_betas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub parallel: usize,
}

struct Section {
    name: String,
    entries: BTreeMap<String, (String, bool)>, // value, consumed
}

impl Section {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.get_mut(key).map(|(v, consumed)| {
            *consumed = true;
            v.clone()
        })
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| {
            Error::Parse(format!("[{}] is missing required key '{key}'", self.name))
        })
    }

    fn unconsumed(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, (_, consumed))| !consumed)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if sections.contains_key(&name) {
                return Err(Error::Parse(format!(
                    "line {}: duplicate section [{name}]",
                    lineno + 1
                )));
            }
            sections.insert(
                name.clone(),
                Section {
                    name: name.clone(),
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        let section = current
            .as_ref()
            .ok_or_else(|| Error::Parse(format!("line {}: key before any [section]", lineno + 1)))?;
        let key = key.trim().to_string();
        let entries = &mut sections.get_mut(section).expect("section exists").entries;
        if entries.contains_key(&key) {
            return Err(Error::Parse(format!(
                "line {}: duplicate key '{key}' in [{section}]",
                lineno + 1
            )));
        }
        entries.insert(key, (value.trim().to_string(), false));
    }
    Ok(sections)
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("[{section}] {key}: cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Parse(format!("[{section}] {key}: empty list")));
    }
    items
        .iter()
        .map(|item| {
            item.parse()
                .map_err(|_| Error::Parse(format!("[{section}] {key}: cannot parse '{item}'")))
        })
        .collect()
}

impl ExperimentSpec {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Parse(format!("spec not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let known = ["dataset", "model", "run", "sweep", "output"];
        for name in sections.keys() {
            if !known.contains(&name.as_str()) {
                return Err(Error::Parse(format!("unknown section [{name}]")));
            }
        }

        let mut dataset = sections
            .remove("dataset")
            .ok_or_else(|| Error::Parse("missing [dataset] section".into()))?;
        let gen = GenConfig {
            feature_dim: parse_num("dataset", "feature_dim", &dataset.require("feature_dim")?)?,
            num_classes: parse_num("dataset", "num_classes", &dataset.require("num_classes")?)?,
            prior_clusters: parse_num(
                "dataset",
                "prior_clusters",
                &dataset.require("prior_clusters")?,
            )?,
            finetune_clusters: parse_num(
                "dataset",
                "finetune_clusters",
                &dataset.require("finetune_clusters")?,
            )?,
            prior_size: parse_num("dataset", "prior_size", &dataset.require("prior_size")?)?,
            finetune_size: parse_num(
                "dataset",
                "finetune_size",
                &dataset.require("finetune_size")?,
            )?,
            cluster_spread: parse_num(
                "dataset",
                "cluster_spread",
                &dataset.require("cluster_spread")?,
            )?,
            center_radius: parse_num(
                "dataset",
                "center_radius",
                &dataset.require("center_radius")?,
            )?,
            overlap: parse_num("dataset", "overlap", &dataset.require("overlap")?)?,
            forgetting_pressure: parse_num(
                "dataset",
                "forgetting_pressure",
                &dataset.require("forgetting_pressure")?,
            )?,
        };
        let data_seed = parse_num("dataset", "data_seed", &dataset.require("data_seed")?)?;

        let mut model_sec = sections
            .remove("model")
            .ok_or_else(|| Error::Parse("missing [model] section".into()))?;
        let model = ModelConfig {
            hidden_units: parse_num("model", "hidden_units", &model_sec.require("hidden_units")?)?,
            learning_rate: parse_num(
                "model",
                "learning_rate",
                &model_sec.require("learning_rate")?,
            )?,
            weight_decay: parse_num("model", "weight_decay", &model_sec.require("weight_decay")?)?,
            base_epochs: parse_num("model", "base_epochs", &model_sec.require("base_epochs")?)?,
            base_seed: parse_num("model", "base_seed", &model_sec.require("base_seed")?)?,
            minibatch: parse_num("model", "minibatch", &model_sec.require("minibatch")?)?,
        };

        let mut run_sec = sections
            .remove("run")
            .ok_or_else(|| Error::Parse("missing [run] section".into()))?;
        let strategy = Strategy::parse(&run_sec.require("strategy")?)?;
        let mut sampler = SamplerConfig::new(strategy);
        if let Some(v) = run_sec.take("filter_ratio") {
            sampler.filter_ratio = parse_num("run", "filter_ratio", &v)?;
        }
        if let Some(v) = run_sec.take("max_draw_factor") {
            sampler.max_draw_factor = parse_num("run", "max_draw_factor", &v)?;
        }
        let damage_mode = match run_sec.require("damage_mode")?.as_str() {
            "classification" => DamageMode::Classification,
            "loss_threshold" => DamageMode::LossThreshold,
            other => {
                return Err(Error::Parse(format!(
                    "[run] damage_mode: expected classification or loss_threshold, got '{other}'"
                )))
            }
        };
        let tau_percentile = match run_sec.take("tau_percentile") {
            Some(v) => parse_num("run", "tau_percentile", &v)?,
            None => 90.0,
        };
        let estimator_mode = match run_sec.require("estimator_mode")?.as_str() {
            "biased" => EstimatorMode::Biased,
            "unbiased" => {
                let fraction = run_sec.require("alpha_holdout_fraction")?;
                EstimatorMode::Unbiased {
                    holdout_fraction: parse_num("run", "alpha_holdout_fraction", &fraction)?,
                }
            }
            other => {
                return Err(Error::Parse(format!(
                    "[run] estimator_mode: expected biased or unbiased, got '{other}'"
                )))
            }
        };
        run_sec.take("alpha_holdout_fraction"); // tolerated but unused in biased mode

        let run = RunConfig {
            gen,
            data_seed,
            model,
            iterations: parse_num("run", "iterations", &run_sec.require("iterations")?)?,
            samples_per_iteration: parse_num(
                "run",
                "samples_per_iteration",
                &run_sec.require("samples_per_iteration")?,
            )?,
            beta: parse_num("run", "beta", &run_sec.require("beta")?)?,
            sampler,
            partition: PartitionSpec::parse(&run_sec.require("partition")?)?,
            damage_mode,
            tau_percentile,
            estimator_mode,
            eval_fraction: parse_num("run", "eval_fraction", &run_sec.require("eval_fraction")?)?,
            seed: parse_num("run", "seed", &run_sec.require("seed")?)?,
        };

        let (sweep_strategies, sweep_betas, sweep_seeds) = match sections.remove("sweep") {
            Some(mut sweep_sec) => {
                let strategies: Vec<String> =
                    parse_list("sweep", "strategies", &sweep_sec.require("strategies")?)?;
                let strategies: Vec<Strategy> = strategies
                    .iter()
                    .map(|s| Strategy::parse(s))
                    .collect::<Result<_>>()?;
                let betas = parse_list("sweep", "betas", &sweep_sec.require("betas")?)?;
                let seeds = parse_list("sweep", "seeds", &sweep_sec.require("seeds")?)?;
                if let Some(key) = sweep_sec.unconsumed().first() {
                    return Err(Error::Parse(format!("unknown key '{key}' in [sweep]")));
                }
                (strategies, betas, seeds)
            }
            None => (Vec::new(), Vec::new(), Vec::new()),
        };

        let (out_dir, parallel) = match sections.remove("output") {
            Some(mut out_sec) => {
                let dir = out_sec.take("dir").unwrap_or_else(|| "out".into());
                let parallel = match out_sec.take("parallel") {
                    Some(v) => parse_num("output", "parallel", &v)?,
                    None => 1,
                };
                if let Some(key) = out_sec.unconsumed().first() {
                    return Err(Error::Parse(format!("unknown key '{key}' in [output]")));
                }
                (PathBuf::from(dir), parallel)
            }
            None => (PathBuf::from("out"), 1),
        };

        for (name, section) in [("dataset", &dataset), ("model", &model_sec), ("run", &run_sec)] {
            if let Some(key) = section.unconsumed().first() {
                return Err(Error::Parse(format!("unknown key '{key}' in [{name}]")));
            }
        }

        run.validate()?;
        if parallel == 0 {
            return Err(Error::Parse("[output] parallel must be >= 1".into()));
        }

        Ok(ExperimentSpec {
            run,
            sweep_strategies,
            sweep_betas,
            sweep_seeds,
            out_dir,
            parallel,
        })
    }

    pub fn require_sweep(&self) -> Result<()> {
        if self.sweep_strategies.is_empty() || self.sweep_betas.is_empty() || self.sweep_seeds.is_empty()
        {
            return Err(Error::Parse(
                "sweep requires a [sweep] section with strategies, betas, and seeds".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_spec() -> String {
        "
[dataset]
feature_dim = 6
num_classes = 3
prior_clusters = 6
finetune_clusters = 3
prior_size = 400
finetune_size = 300
cluster_spread = 0.5
center_radius = 4.0
overlap = 0.9
forgetting_pressure = 0.67
data_seed = 11

[model]
hidden_units = 0
learning_rate = 0.1
weight_decay = 0.0
base_epochs = 3
base_seed = 23
minibatch = 32

[run]
iterations = 2
samples_per_iteration = 50
beta = 0.3
strategy = mixcd
partition = meta_label
damage_mode = classification
estimator_mode = biased
eval_fraction = 0.2
seed = 1
"
        .to_string()
    }

    #[test]
    fn parses_minimal_spec() {
        let spec = ExperimentSpec::parse(&minimal_spec()).unwrap();
        assert_eq!(spec.run.iterations, 2);
        assert_eq!(spec.run.sampler.strategy, Strategy::MixCd);
        assert_eq!(spec.parallel, 1);
        assert_eq!(spec.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn rejects_unknown_key() {
        let text = minimal_spec() + "\nturbo = yes\n";
        let err = ExperimentSpec::parse(&text).unwrap_err();
        assert!(err.to_string().contains("turbo"), "{err}");
    }

    #[test]
    fn rejects_unknown_section() {
        let text = minimal_spec() + "\n[extras]\nx = 1\n";
        assert!(ExperimentSpec::parse(&text).is_err());
    }

    #[test]
    fn rejects_missing_required_key() {
        let text = minimal_spec().replace("beta = 0.3\n", "");
        let err = ExperimentSpec::parse(&text).unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn rejects_invalid_beta_before_running() {
        let text = minimal_spec().replace("beta = 0.3", "beta = 0.95");
        assert!(ExperimentSpec::parse(&text).is_err());
    }

    #[test]
    fn unbiased_mode_requires_holdout_fraction() {
        let text = minimal_spec().replace("estimator_mode = biased", "estimator_mode = unbiased");
        assert!(ExperimentSpec::parse(&text).is_err());
        let text = minimal_spec().replace(
            "estimator_mode = biased",
            "estimator_mode = unbiased\nalpha_holdout_fraction = 0.05",
        );
        let spec = ExperimentSpec::parse(&text).unwrap();
        assert!(matches!(
            spec.run.estimator_mode,
            EstimatorMode::Unbiased { .. }
        ));
    }

    #[test]
    fn parses_sweep_and_output_sections() {
        let text = minimal_spec()
            + "
[sweep]
strategies = uniform, mixcd
betas = 0.1, 0.3
seeds = 1, 2, 3

[output]
dir = results
parallel = 4
";
        let spec = ExperimentSpec::parse(&text).unwrap();
        spec.require_sweep().unwrap();
        assert_eq!(spec.sweep_strategies, vec![Strategy::Uniform, Strategy::MixCd]);
        assert_eq!(spec.sweep_betas, vec![0.1, 0.3]);
        assert_eq!(spec.sweep_seeds, vec![1, 2, 3]);
        assert_eq!(spec.out_dir, PathBuf::from("results"));
        assert_eq!(spec.parallel, 4);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# leading comment\n".to_string() + &minimal_spec() + "\n# trailing\n";
        assert!(ExperimentSpec::parse(&text).is_ok());
    }
}
