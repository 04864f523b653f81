//! Result tables, Pareto frontiers, and the scatter plot.
//!
//! A sweep condenses to one summary row per run; reports aggregate those by
//! (strategy, beta) cell. The frontier is over seed-averaged points with
//! fine-tune accuracy on x and prior accuracy on y: up and to the right wins.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::RunResult;
use crate::sampler::Strategy;

/// Indices of the points not weakly dominated with a strict improvement by
/// any other point (componentwise >=, at least one >). Ties survive: two
/// copies of a frontier point are both kept.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Result<Vec<usize>> {
    for (x, y) in points {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("pareto point"));
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|a, b| {
        points[*b]
            .0
            .partial_cmp(&points[*a].0)
            .expect("finite")
            .then(points[*b].1.partial_cmp(&points[*a].1).expect("finite"))
    });
    let mut frontier = Vec::new();
    let mut best_y_from_larger_x = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // group of equal x
        let x = points[order[i]].0;
        let mut j = i;
        let mut group_max_y = f64::NEG_INFINITY;
        while j < order.len() && points[order[j]].0 == x {
            group_max_y = group_max_y.max(points[order[j]].1);
            j += 1;
        }
        if group_max_y > best_y_from_larger_x {
            for &idx in &order[i..j] {
                if points[idx].1 == group_max_y {
                    frontier.push(idx);
                }
            }
        }
        best_y_from_larger_x = best_y_from_larger_x.max(group_max_y);
        i = j;
    }
    frontier.sort_unstable();
    Ok(frontier)
}

/// One run reduced to its summary point.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
    pub prior_perf: f64,
    pub finetune_perf: f64,
    pub cd_proportion: f64,
    pub total_budget: f64,
    pub consumed_units: f64,
}

impl SummaryRow {
    pub fn from_result(result: &RunResult) -> Self {
        Self {
            strategy: result.strategy,
            beta: result.beta,
            seed: result.seed,
            prior_perf: result.final_prior_accuracy,
            finetune_perf: result.final_finetune_accuracy,
            cd_proportion: result.cd_proportion,
            total_budget: result.total_budget,
            consumed_units: result.ledger.consumed_total(),
        }
    }
}

pub const SUMMARY_HEADER: &str =
    "strategy,beta,seed,prior_perf,finetune_perf,cd_proportion,total_budget,consumed_units";

pub fn write_summary_csv<P: AsRef<Path>>(rows: &[SummaryRow], path: P) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            r.beta,
            r.seed,
            r.prior_perf,
            r.finetune_perf,
            r.cd_proportion,
            r.total_budget,
            r.consumed_units
        )?;
    }
    Ok(())
}

pub fn read_summary_csv<P: AsRef<Path>>(path: P) -> Result<Vec<SummaryRow>> {
    let name = path.as_ref().display().to_string();
    let file = std::fs::File::open(&path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{name}: empty summary csv")))?
        .map_err(Error::Io)?;
    if header != SUMMARY_HEADER {
        return Err(Error::Parse(format!("{name}: unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse(format!(
                "{name}: line {}: expected 8 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Parse(format!("{name}: line {}: bad {what}", lineno + 2));
        rows.push(SummaryRow {
            strategy: Strategy::parse(fields[0])?,
            beta: fields[1].parse().map_err(|_| bad("beta"))?,
            seed: fields[2].parse().map_err(|_| bad("seed"))?,
            prior_perf: fields[3].parse().map_err(|_| bad("prior_perf"))?,
            finetune_perf: fields[4].parse().map_err(|_| bad("finetune_perf"))?,
            cd_proportion: fields[5].parse().map_err(|_| bad("cd_proportion"))?,
            total_budget: fields[6].parse().map_err(|_| bad("total_budget"))?,
            consumed_units: fields[7].parse().map_err(|_| bad("consumed_units"))?,
        });
    }
    Ok(rows)
}

/// Seed-aggregated statistics for one (strategy, beta) cell.
#[derive(Debug, Clone)]
pub struct CellStats {
    pub strategy: Strategy,
    pub beta: f64,
    pub runs: usize,
    pub mean_prior: f64,
    pub se_prior: f64,
    pub mean_finetune: f64,
    pub se_finetune: f64,
    pub mean_cd_proportion: f64,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Group rows by (strategy, beta), averaging over seeds. Output is sorted by
/// (strategy, beta).
pub fn aggregate(rows: &[SummaryRow]) -> Vec<CellStats> {
    let mut cells: BTreeMap<(Strategy, u64), Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        cells
            .entry((row.strategy, row.beta.to_bits()))
            .or_default()
            .push(row);
    }
    cells
        .into_iter()
        .map(|((strategy, beta_bits), group)| {
            let prior: Vec<f64> = group.iter().map(|r| r.prior_perf).collect();
            let ft: Vec<f64> = group.iter().map(|r| r.finetune_perf).collect();
            let cd: Vec<f64> = group.iter().map(|r| r.cd_proportion).collect();
            let (mean_prior, se_prior) = mean_and_se(&prior);
            let (mean_finetune, se_finetune) = mean_and_se(&ft);
            CellStats {
                strategy,
                beta: f64::from_bits(beta_bits),
                runs: group.len(),
                mean_prior,
                se_prior,
                mean_finetune,
                se_finetune,
                mean_cd_proportion: cd.iter().sum::<f64>() / cd.len() as f64,
            }
        })
        .collect()
}

/// Per-bin accuracy deltas between the base and final models, plus the
/// cross-bin spread of those deltas (bins without eval samples are skipped).
#[derive(Debug, Clone)]
pub struct PerBinReport {
    pub rows: Vec<PerBinRow>,
    pub cross_bin_std: f64,
}

#[derive(Debug, Clone)]
pub struct PerBinRow {
    pub bin: usize,
    pub base_accuracy: f64,
    pub final_accuracy: f64,
    pub delta: f64,
}

pub fn per_bin_report(base: &[f64], final_acc: &[f64]) -> PerBinReport {
    let mut rows = Vec::new();
    for (bin, (b, f)) in base.iter().zip(final_acc).enumerate() {
        if b.is_finite() && f.is_finite() {
            rows.push(PerBinRow {
                bin,
                base_accuracy: *b,
                final_accuracy: *f,
                delta: f - b,
            });
        }
    }
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let cross_bin_std = if deltas.is_empty() {
        0.0
    } else {
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        (deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / deltas.len() as f64).sqrt()
    };
    PerBinReport {
        rows,
        cross_bin_std,
    }
}

impl PerBinReport {
    pub fn from_result(result: &RunResult) -> Self {
        let last = result
            .iterations
            .last()
            .expect("run has at least one iteration");
        per_bin_report(&result.base_per_bin_accuracy, &last.per_bin_accuracy)
    }
}

/// One plotted point of the Pareto scatter.
#[derive(Debug, Clone)]
pub struct SvgPoint {
    pub strategy: Strategy,
    pub beta: f64,
    pub finetune: f64,
    pub prior: f64,
    pub frontier: bool,
}

fn strategy_color(s: Strategy) -> &'static str {
    match s {
        Strategy::Uniform => "#888888",
        Strategy::MixCd => "#d62728",
        Strategy::Uncertainty => "#1f77b4",
        Strategy::MirPp => "#2ca02c",
    }
}

/// Render the scatter as a static SVG. Frontier members get a black ring and
/// a `data-frontier="1"` attribute so the plot is machine-checkable.
pub fn pareto_svg(points: &[SvgPoint]) -> String {
    let (w, h) = (640.0, 480.0);
    let margin = 60.0;
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p.finetune);
        max_x = max_x.max(p.finetune);
        min_y = min_y.min(p.prior);
        max_y = max_y.max(p.prior);
    }
    if points.is_empty() {
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    if max_x - min_x < 1e-9 {
        max_x = min_x + 1e-9;
    }
    if max_y - min_y < 1e-9 {
        max_y = min_y + 1e-9;
    }
    let sx = |v: f64| margin + (v - min_x) / (max_x - min_x) * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - min_y) / (max_y - min_y) * (h - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        m = margin,
        y = h - margin,
        x2 = w - margin
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{y2}\" stroke=\"black\"/>\n",
        m = margin,
        y2 = h - margin
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"12\" text-anchor=\"middle\">fine-tune accuracy</text>\n",
        x = w / 2.0,
        y = h - margin / 3.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 {x} {y})\">prior accuracy</text>\n",
        x = margin / 3.0,
        y = h / 2.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"10\">{v}</text>\n",
        x = margin,
        y = h - margin + 14.0,
        v = min_x
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"10\" text-anchor=\"end\">{v}</text>\n",
        x = w - margin,
        y = h - margin + 14.0,
        v = max_x
    ));
    for p in points {
        let cx = sx(p.finetune);
        let cy = sy(p.prior);
        let stroke = if p.frontier {
            " stroke=\"black\" stroke-width=\"2\""
        } else {
            ""
        };
        svg.push_str(&format!(
            "  <circle cx=\"{cx}\" cy=\"{cy}\" r=\"5\" fill=\"{color}\"{stroke} data-strategy=\"{strategy}\" data-beta=\"{beta}\" data-finetune=\"{ft}\" data-prior=\"{prior}\" data-frontier=\"{frontier}\"/>\n",
            color = strategy_color(p.strategy),
            strategy = p.strategy,
            beta = p.beta,
            ft = p.finetune,
            prior = p.prior,
            frontier = u8::from(p.frontier),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Seed-averaged points with frontier flags, ready for [`pareto_svg`].
pub fn svg_points(stats: &[CellStats]) -> Result<Vec<SvgPoint>> {
    let coords: Vec<(f64, f64)> = stats.iter().map(|c| (c.mean_finetune, c.mean_prior)).collect();
    let frontier = pareto_frontier(&coords)?;
    Ok(stats
        .iter()
        .enumerate()
        .map(|(i, c)| SvgPoint {
            strategy: c.strategy,
            beta: c.beta,
            finetune: c.mean_finetune,
            prior: c.mean_prior,
            frontier: frontier.contains(&i),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mutually_nondominated_points_all_survive() {
        let pts = vec![(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)];
        assert_eq!(pareto_frontier(&pts).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn dominated_point_removed() {
        let pts = vec![(1.0, 1.0), (0.5, 0.5)];
        assert_eq!(pareto_frontier(&pts).unwrap(), vec![0]);
    }

    #[test]
    fn duplicate_frontier_points_both_kept() {
        let pts = vec![(1.0, 1.0), (1.0, 1.0), (0.2, 0.4)];
        assert_eq!(pareto_frontier(&pts).unwrap(), vec![0, 1]);
    }

    #[test]
    fn weak_domination_with_equal_x_removes_lower_y() {
        let pts = vec![(1.0, 1.0), (1.0, 0.5)];
        assert_eq!(pareto_frontier(&pts).unwrap(), vec![0]);
    }

    /// Brute-force dominance oracle: quadratic scan straight from the
    /// definition.
    fn brute_force_frontier(points: &[(f64, f64)]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| {
                !points.iter().enumerate().any(|(j, q)| {
                    j != i
                        && q.0 >= points[i].0
                        && q.1 >= points[i].1
                        && (q.0 > points[i].0 || q.1 > points[i].1)
                })
            })
            .collect()
    }

    #[test]
    fn frontier_matches_brute_force_on_random_sets() {
        let mut rng = StdRng::seed_from_u64(60);
        for trial in 0..50 {
            let n = rng.gen_range(1..60);
            // quantize to provoke ties
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        (rng.gen_range(0.0f64..1.0) * 8.0).round() / 8.0,
                        (rng.gen_range(0.0f64..1.0) * 8.0).round() / 8.0,
                    )
                })
                .collect();
            assert_eq!(
                pareto_frontier(&pts).unwrap(),
                brute_force_frontier(&pts),
                "trial {trial}: {pts:?}"
            );
        }
    }

    #[test]
    fn frontier_rejects_nan() {
        assert!(pareto_frontier(&[(f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn aggregate_averages_by_cell() {
        let rows = vec![
            SummaryRow {
                strategy: Strategy::Uniform,
                beta: 0.1,
                seed: 1,
                prior_perf: 0.8,
                finetune_perf: 0.9,
                cd_proportion: 0.1,
                total_budget: 900.0,
                consumed_units: 900.0,
            },
            SummaryRow {
                strategy: Strategy::Uniform,
                beta: 0.1,
                seed: 2,
                prior_perf: 0.9,
                finetune_perf: 0.7,
                cd_proportion: 0.3,
                total_budget: 900.0,
                consumed_units: 900.0,
            },
            SummaryRow {
                strategy: Strategy::MixCd,
                beta: 0.1,
                seed: 1,
                prior_perf: 0.95,
                finetune_perf: 0.9,
                cd_proportion: 0.5,
                total_budget: 900.0,
                consumed_units: 900.0,
            },
        ];
        let stats = aggregate(&rows);
        assert_eq!(stats.len(), 2);
        let uniform = stats.iter().find(|c| c.strategy == Strategy::Uniform).unwrap();
        assert_eq!(uniform.runs, 2);
        assert!((uniform.mean_prior - 0.85).abs() < 1e-12);
        assert!((uniform.mean_cd_proportion - 0.2).abs() < 1e-12);
        assert!(uniform.se_prior > 0.0);
    }

    #[test]
    fn per_bin_report_zero_when_nothing_changed() {
        let base = vec![0.9, 0.8, 0.95];
        let report = per_bin_report(&base, &base);
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.iter().all(|r| r.delta == 0.0));
        assert_eq!(report.cross_bin_std, 0.0);
    }

    #[test]
    fn per_bin_report_skips_empty_bins() {
        let base = vec![0.9, f64::NAN, 0.8];
        let fin = vec![0.7, f64::NAN, 0.8];
        let report = per_bin_report(&base, &fin);
        assert_eq!(report.rows.len(), 2);
        assert!((report.rows[0].delta + 0.2).abs() < 1e-12);
        assert_eq!(report.rows[1].delta, 0.0);
    }

    #[test]
    fn summary_csv_round_trip() {
        let rows = vec![SummaryRow {
            strategy: Strategy::MirPp,
            beta: 0.3,
            seed: 7,
            prior_perf: 0.8123456789,
            finetune_perf: 0.7,
            cd_proportion: 0.25,
            total_budget: 9000.0,
            consumed_units: 8997.0,
        }];
        let dir = std::env::temp_dir().join("rehearsal_core_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("summary.csv");
        write_summary_csv(&rows, &path).unwrap();
        let back = read_summary_csv(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn svg_marks_exactly_the_frontier() {
        let stats = vec![
            CellStats {
                strategy: Strategy::Uniform,
                beta: 0.1,
                runs: 3,
                mean_prior: 0.5,
                se_prior: 0.0,
                mean_finetune: 0.5,
                se_finetune: 0.0,
                mean_cd_proportion: 0.1,
            },
            CellStats {
                strategy: Strategy::MixCd,
                beta: 0.1,
                runs: 3,
                mean_prior: 0.9,
                se_prior: 0.0,
                mean_finetune: 0.9,
                se_finetune: 0.0,
                mean_cd_proportion: 0.4,
            },
        ];
        let points = svg_points(&stats).unwrap();
        let svg = pareto_svg(&points);
        assert_eq!(svg.matches("data-frontier=\"1\"").count(), 1);
        assert_eq!(svg.matches("data-frontier=\"0\"").count(), 1);
        assert!(svg.contains("data-strategy=\"mixcd\""));
    }
}
