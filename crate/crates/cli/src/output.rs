//! On-disk layout for run and sweep outputs, and the report tables built
//! back up from them. Column schemas are documented in docs/csv-schema.md;
//! bump the version there when changing anything here.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rehearsal_core::error::{Error, Result};
use rehearsal_core::harness::{RunResult, SweepCell};
use rehearsal_core::report::{
    aggregate, pareto_svg, read_summary_csv, svg_points, write_summary_csv, SummaryRow,
};
use rehearsal_core::sampler::Strategy;

pub fn cell_label(result: &RunResult) -> String {
    SweepCell {
        strategy: result.strategy,
        beta: result.beta,
        seed: result.seed,
    }
    .label()
}

/// Write one run's CSV files under `<out>/runs/<cell>__*.csv`.
pub fn write_run_files(out_dir: &Path, result: &RunResult) -> Result<()> {
    let runs_dir = out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let label = cell_label(result);

    // per-iteration records, per-bin accuracies inline
    let mut f = std::fs::File::create(runs_dir.join(format!("{label}__iters.csv")))?;
    let bin_cols: Vec<String> = (0..result.bin_count)
        .map(|k| format!("bin{k}_accuracy"))
        .collect();
    writeln!(
        f,
        "iteration,prior_accuracy,finetune_accuracy,rehearsed,damaged,cd_proportion,draws_attempted,fallback,sampling_units,rehearsal_train_units,finetune_train_units,{}",
        bin_cols.join(",")
    )?;
    for r in &result.iterations {
        let bins: Vec<String> = r.per_bin_accuracy.iter().map(|a| format!("{a}")).collect();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.prior_accuracy,
            r.finetune_accuracy,
            r.rehearsed,
            r.damaged,
            r.cd_proportion,
            r.draws_attempted,
            u8::from(r.fallback),
            r.sampling_units,
            r.rehearsal_train_units,
            r.finetune_train_units,
            bins.join(",")
        )?;
    }

    // estimator state per iteration
    let mut f = std::fs::File::create(runs_dir.join(format!("{label}__estimator.csv")))?;
    writeln!(f, "iteration,bin,n,u,alpha_hat")?;
    for r in &result.iterations {
        for (bin, n, u, alpha) in &r.estimator {
            writeln!(f, "{},{},{},{},{}", r.iteration, bin, n, u, alpha)?;
        }
    }

    // final per-bin accuracy deltas vs the base model
    let mut f = std::fs::File::create(runs_dir.join(format!("{label}__bins.csv")))?;
    writeln!(f, "bin,eval_count,base_accuracy,final_accuracy,delta")?;
    let last = result.iterations.last().expect("at least one iteration");
    for k in 0..result.bin_count {
        let base = result.base_per_bin_accuracy[k];
        let fin = last.per_bin_accuracy[k];
        writeln!(
            f,
            "{},{},{},{},{}",
            k,
            result.eval_bin_counts[k],
            base,
            fin,
            fin - base
        )?;
    }

    // first-iteration partition effectiveness
    let mut f = std::fs::File::create(runs_dir.join(format!("{label}__kl.csv")))?;
    writeln!(f, "partition,kl,effective")?;
    for row in &result.kl_first_iteration {
        writeln!(f, "{},{},{}", row.partition, row.kl, u8::from(row.effective))?;
    }

    // final fine-tuned weights
    result
        .final_model
        .save_csv(runs_dir.join(format!("{label}__model.csv")))?;

    // budget ledger
    let mut f = std::fs::File::create(runs_dir.join(format!("{label}__ledger.csv")))?;
    writeln!(f, "category,allocated,consumed")?;
    let ledger = &result.ledger;
    writeln!(
        f,
        "sampling,{},{}",
        ledger.sampling_allocated, ledger.sampling_consumed
    )?;
    writeln!(
        f,
        "rehearsal_training,{},{}",
        ledger.rehearsal_training_allocated, ledger.rehearsal_training_consumed
    )?;
    writeln!(
        f,
        "finetune_training,{},{}",
        ledger.finetune_allocated, ledger.finetune_training_consumed
    )?;
    Ok(())
}

/// Write summary.csv plus the Pareto SVG for a set of completed runs.
pub fn write_sweep_files(out_dir: &Path, results: &[&RunResult]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let rows: Vec<SummaryRow> = results.iter().map(|r| SummaryRow::from_result(r)).collect();
    write_summary_csv(&rows, out_dir.join("summary.csv"))?;
    let stats = aggregate(&rows);
    let svg = pareto_svg(&svg_points(&stats)?);
    std::fs::write(out_dir.join("pareto.svg"), svg)?;
    Ok(())
}

fn parse_csv_rows(path: &Path, expected_header: &str) -> Result<Vec<Vec<String>>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{name}: {e}")))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{name}: empty csv")))?;
    if header != expected_header {
        return Err(Error::Parse(format!("{name}: unexpected header '{header}'")));
    }
    let width = expected_header.split(',').count();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != width {
            return Err(Error::Parse(format!(
                "{name}: line {}: expected {width} fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// Split `<strategy>_beta<beta>_seed<seed>` back into its parts.
fn parse_cell_label(label: &str) -> Result<(Strategy, f64, u64)> {
    let (strategy, rest) = label
        .split_once("_beta")
        .ok_or_else(|| Error::Parse(format!("bad run file name '{label}'")))?;
    let (beta, seed) = rest
        .split_once("_seed")
        .ok_or_else(|| Error::Parse(format!("bad run file name '{label}'")))?;
    Ok((
        Strategy::parse(strategy)?,
        beta.parse()
            .map_err(|_| Error::Parse(format!("bad beta in '{label}'")))?,
        seed.parse()
            .map_err(|_| Error::Parse(format!("bad seed in '{label}'")))?,
    ))
}

fn run_files_with_suffix(out_dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let runs_dir = out_dir.join("runs");
    let mut found = Vec::new();
    if runs_dir.is_dir() {
        for entry in std::fs::read_dir(&runs_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(label) = name.strip_suffix(suffix) {
                found.push((label.to_string(), entry.path()));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// The `report` command: read a results directory, rebuild the aggregate
/// tables, write them back as report_*.csv, and return a printable text
/// rendering.
pub fn build_report(out_dir: &Path) -> Result<String> {
    let summary_path = out_dir.join("summary.csv");
    if !summary_path.exists() {
        return Err(Error::Parse(format!(
            "no summary.csv in {}; nothing to report",
            out_dir.display()
        )));
    }
    let rows = read_summary_csv(&summary_path)?;
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no runs in summary", summary_path.display())));
    }
    let stats = aggregate(&rows);
    let mut text = String::new();

    // Pareto table
    let coords: Vec<(f64, f64)> = stats.iter().map(|c| (c.mean_finetune, c.mean_prior)).collect();
    let frontier = rehearsal_core::report::pareto_frontier(&coords)?;
    let mut f = std::fs::File::create(out_dir.join("report_pareto.csv"))?;
    writeln!(
        f,
        "strategy,beta,runs,mean_finetune,se_finetune,mean_prior,se_prior,frontier"
    )?;
    text.push_str("pareto points (seed-averaged):\n");
    for (i, c) in stats.iter().enumerate() {
        let on_frontier = frontier.contains(&i);
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            c.strategy,
            c.beta,
            c.runs,
            c.mean_finetune,
            c.se_finetune,
            c.mean_prior,
            c.se_prior,
            u8::from(on_frontier)
        )?;
        text.push_str(&format!(
            "  {:<12} beta {:<5} ft {:.4} (se {:.4})  prior {:.4} (se {:.4}){}\n",
            c.strategy.to_string(),
            c.beta,
            c.mean_finetune,
            c.se_finetune,
            c.mean_prior,
            c.se_prior,
            if on_frontier { "  [frontier]" } else { "" }
        ));
    }

    // damage proportion table
    let mut f = std::fs::File::create(out_dir.join("report_cd.csv"))?;
    writeln!(f, "strategy,beta,runs,mean_cd_proportion")?;
    text.push_str("rehearsed collateral-damage proportion:\n");
    for c in &stats {
        writeln!(f, "{},{},{},{}", c.strategy, c.beta, c.runs, c.mean_cd_proportion)?;
        text.push_str(&format!(
            "  {:<12} beta {:<5} cd {:.4}\n",
            c.strategy.to_string(),
            c.beta,
            c.mean_cd_proportion
        ));
    }

    // per-bin table from the runs' bins files
    let bins_files = run_files_with_suffix(out_dir, "__bins.csv")?;
    if !bins_files.is_empty() {
        #[derive(Default)]
        struct BinAgg {
            base: Vec<f64>,
            fin: Vec<f64>,
        }
        let mut per_cell_bin: BTreeMap<(Strategy, u64, usize), BinAgg> = BTreeMap::new();
        let mut per_cell_std: BTreeMap<(Strategy, u64), Vec<f64>> = BTreeMap::new();
        for (label, path) in &bins_files {
            let (strategy, beta, _seed) = parse_cell_label(label)?;
            let rows = parse_csv_rows(path, "bin,eval_count,base_accuracy,final_accuracy,delta")?;
            let mut deltas = Vec::new();
            for fields in rows {
                let bin: usize = fields[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("{}: bad bin", path.display())))?;
                let base: f64 = fields[2].parse().unwrap_or(f64::NAN);
                let fin: f64 = fields[3].parse().unwrap_or(f64::NAN);
                if base.is_finite() && fin.is_finite() {
                    let agg = per_cell_bin
                        .entry((strategy, beta.to_bits(), bin))
                        .or_default();
                    agg.base.push(base);
                    agg.fin.push(fin);
                    deltas.push(fin - base);
                }
            }
            if !deltas.is_empty() {
                let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
                let std = (deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                    / deltas.len() as f64)
                    .sqrt();
                per_cell_std
                    .entry((strategy, beta.to_bits()))
                    .or_default()
                    .push(std);
            }
        }
        let mut f = std::fs::File::create(out_dir.join("report_bins.csv"))?;
        writeln!(f, "strategy,beta,bin,runs,mean_base_accuracy,mean_final_accuracy,mean_delta")?;
        for ((strategy, beta_bits, bin), agg) in &per_cell_bin {
            let n = agg.base.len() as f64;
            let base = agg.base.iter().sum::<f64>() / n;
            let fin = agg.fin.iter().sum::<f64>() / n;
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                strategy,
                f64::from_bits(*beta_bits),
                bin,
                agg.base.len(),
                base,
                fin,
                fin - base
            )?;
        }
        let mut f = std::fs::File::create(out_dir.join("report_bin_spread.csv"))?;
        writeln!(f, "strategy,beta,runs,mean_cross_bin_std")?;
        text.push_str("cross-bin spread of accuracy deltas:\n");
        for ((strategy, beta_bits), stds) in &per_cell_std {
            let mean = stds.iter().sum::<f64>() / stds.len() as f64;
            writeln!(
                f,
                "{},{},{},{}",
                strategy,
                f64::from_bits(*beta_bits),
                stds.len(),
                mean
            )?;
            text.push_str(&format!(
                "  {:<12} beta {:<5} std {:.4}\n",
                strategy.to_string(),
                f64::from_bits(*beta_bits),
                mean
            ));
        }
    }

    // partition effectiveness table from the runs' kl files
    let kl_files = run_files_with_suffix(out_dir, "__kl.csv")?;
    if !kl_files.is_empty() {
        let mut f = std::fs::File::create(out_dir.join("report_kl.csv"))?;
        writeln!(f, "strategy,beta,seed,partition,kl,effective")?;
        let mut printed: BTreeMap<String, (f64, bool, usize)> = BTreeMap::new();
        for (label, path) in &kl_files {
            let (strategy, beta, seed) = parse_cell_label(label)?;
            for fields in parse_csv_rows(path, "partition,kl,effective")? {
                writeln!(
                    f,
                    "{},{},{},{},{},{}",
                    strategy, beta, seed, fields[0], fields[1], fields[2]
                )?;
                let kl: f64 = fields[1]
                    .parse()
                    .map_err(|_| Error::Parse(format!("{}: bad kl", path.display())))?;
                let agg = printed.entry(fields[0].clone()).or_insert((0.0, false, 0));
                agg.0 += kl;
                agg.1 |= fields[2] == "1";
                agg.2 += 1;
            }
        }
        text.push_str("partition effectiveness (mean first-iteration KL):\n");
        for (partition, (kl_sum, any_effective, count)) in &printed {
            text.push_str(&format!(
                "  {:<24} kl {:.4}{}\n",
                partition,
                kl_sum / *count as f64,
                if *any_effective { "  [effective]" } else { "" }
            ));
        }
    }

    Ok(text)
}
