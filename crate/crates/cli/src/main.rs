//! Command-line front end: `rehearsal run|sweep|report`.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, bad or missing
//! spec, empty results directory), 2 runtime error.

mod output;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use rehearsal_core::error::Error;
use rehearsal_core::harness::{run, sweep};

use crate::output::{build_report, cell_label, write_run_files, write_sweep_files};
use crate::spec::ExperimentSpec;

const USAGE: &str = "usage:
  rehearsal run    --spec PATH [--out DIR] [--parallel N] [--verbose]
  rehearsal sweep  --spec PATH [--out DIR] [--parallel N] [--verbose]
  rehearsal report --out DIR [--verbose]

run     execute the single run described by the spec's [run] section
sweep   execute the (strategy, beta, seed) grid from the [sweep] section
report  aggregate a results directory into report_*.csv tables";

struct Args {
    command: String,
    spec: Option<PathBuf>,
    out: Option<PathBuf>,
    parallel: Option<usize>,
    verbose: bool,
}

fn parse_args(mut argv: std::env::Args) -> Result<Args, String> {
    let _program = argv.next();
    let command = argv.next().ok_or_else(|| USAGE.to_string())?;
    let mut args = Args {
        command,
        spec: None,
        out: None,
        parallel: None,
        verbose: false,
    };
    while let Some(flag) = argv.next() {
        match flag.as_str() {
            "--spec" => {
                let value = argv.next().ok_or("--spec needs a path")?;
                args.spec = Some(PathBuf::from(value));
            }
            "--out" => {
                let value = argv.next().ok_or("--out needs a directory")?;
                args.out = Some(PathBuf::from(value));
            }
            "--parallel" => {
                let value = argv.next().ok_or("--parallel needs a number")?;
                args.parallel = Some(
                    value
                        .parse()
                        .map_err(|_| format!("--parallel: cannot parse '{value}'"))?,
                );
            }
            "--verbose" => args.verbose = true,
            other => return Err(format!("unknown flag '{other}'\n{USAGE}")),
        }
    }
    Ok(args)
}

fn load_spec(args: &Args) -> Result<ExperimentSpec, Error> {
    let path = args
        .spec
        .as_ref()
        .ok_or_else(|| Error::Parse("--spec is required".into()))?;
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(out) = &args.out {
        spec.out_dir = out.clone();
    }
    if let Some(parallel) = args.parallel {
        spec.parallel = parallel.max(1);
    }
    Ok(spec)
}

fn cmd_run(args: &Args) -> ExitCode {
    let spec = match load_spec(args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if args.verbose {
        eprintln!(
            "running {} beta {} seed {}",
            spec.run.sampler.strategy, spec.run.beta, spec.run.seed
        );
    }
    let result = match run(&spec.run) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = write_run_files(&spec.out_dir, &result)
        .and_then(|()| write_sweep_files(&spec.out_dir, &[&result]))
    {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    println!(
        "prior_perf {} finetune_perf {}",
        result.final_prior_accuracy, result.final_finetune_accuracy
    );
    ExitCode::SUCCESS
}

fn cmd_sweep(args: &Args) -> ExitCode {
    let spec = match load_spec(args).and_then(|s| {
        s.require_sweep()?;
        Ok(s)
    }) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cells = spec.sweep_strategies.len() * spec.sweep_betas.len() * spec.sweep_seeds.len();
    if args.verbose {
        eprintln!("sweeping {cells} cells with parallelism {}", spec.parallel);
    }
    let outcomes = sweep(
        &spec.run,
        &spec.sweep_strategies,
        &spec.sweep_betas,
        &spec.sweep_seeds,
        spec.parallel,
    );

    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (cell, outcome) in &outcomes {
        match outcome {
            Ok(result) => {
                if args.verbose {
                    eprintln!(
                        "  {} -> prior {:.4} finetune {:.4}",
                        cell.label(),
                        result.final_prior_accuracy,
                        result.final_finetune_accuracy
                    );
                }
                completed.push(result);
            }
            Err(e) => failures.push((cell, e)),
        }
    }
    for result in &completed {
        if let Err(e) = write_run_files(&spec.out_dir, result) {
            eprintln!("error writing {}: {e}", cell_label(result));
            return ExitCode::from(2);
        }
    }
    if !completed.is_empty() {
        if let Err(e) = write_sweep_files(&spec.out_dir, &completed) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if !failures.is_empty() {
        let manifest_path = spec.out_dir.join("error_manifest.txt");
        let mut manifest = String::new();
        for (cell, e) in &failures {
            manifest.push_str(&format!("{}: {e}\n", cell.label()));
        }
        if let Err(e) = std::fs::write(&manifest_path, manifest) {
            eprintln!("error writing manifest: {e}");
        }
        eprintln!(
            "error: {} of {cells} cells failed; see {}",
            failures.len(),
            manifest_path.display()
        );
        return ExitCode::from(2);
    }
    println!("sweep complete: {cells} runs in {}", spec.out_dir.display());
    ExitCode::SUCCESS
}

fn cmd_report(args: &Args) -> ExitCode {
    let out_dir = match &args.out {
        Some(dir) => dir.clone(),
        None => {
            eprintln!("error: report needs --out DIR");
            return ExitCode::from(1);
        }
    };
    match build_report(&out_dir) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let args = match parse_args(std::env::args()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(1);
        }
    };
    match args.command.as_str() {
        "run" => cmd_run(&args),
        "sweep" => cmd_sweep(&args),
        "report" => cmd_report(&args),
        other => {
            eprintln!("unknown command '{other}'\n{USAGE}");
            ExitCode::from(1)
        }
    }
}
