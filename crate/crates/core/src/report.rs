//! Summaries over metric CSV rows: per-method means, paired differences by
//! seed, and sign tests on frame consistency.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::metrics::MetricRow;

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub frame_consistency: f64,
    pub align_mean: f64,
    pub align_var_x100: f64,
}

/// Paired comparison of `first` against `second` on frame consistency.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedComparison {
    pub first: String,
    pub second: String,
    pub pairs: usize,
    /// Mean of `first - second` over shared seeds.
    pub mean_difference: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided sign-test p-value; ties are discarded.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<PairedComparison>,
}

/// `P(X >= wins)` for `X ~ Binomial(trials, 1/2)`.
pub fn sign_test_one_sided(wins: usize, trials: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    if wins > trials {
        return 0.0;
    }
    let dist = Binomial::new(0.5, trials as u64).expect("valid binomial");
    1.0 - dist.cdf(wins as u64 - 1)
}

/// Two-sided sign-test p-value for `wins` against `losses`.
pub fn sign_test_two_sided(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let dist = Binomial::new(0.5, n as u64).expect("valid binomial");
    (2.0 * dist.cdf(wins.min(losses) as u64)).min(1.0)
}

fn methods_in_order(rows: &[MetricRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.method) {
            out.push(r.method.clone());
        }
    }
    out
}

fn by_seed<'a>(rows: &'a [MetricRow], method: &str) -> Result<BTreeMap<u64, &'a MetricRow>> {
    let mut map = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method) {
        if map.insert(r.seed, r).is_some() {
            return Err(Error::Metric(format!(
                "method `{method}` has more than one row for seed {}",
                r.seed
            )));
        }
    }
    Ok(map)
}

pub fn summarize(rows: &[MetricRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::Metric("no metric rows".into()));
    }
    let methods = methods_in_order(rows);
    let mut summaries = Vec::new();
    for m in &methods {
        let mine: Vec<&MetricRow> = rows.iter().filter(|r| &r.method == m).collect();
        let n = mine.len() as f64;
        summaries.push(MethodSummary {
            method: m.clone(),
            runs: mine.len(),
            frame_consistency: mine.iter().map(|r| r.frame_consistency).sum::<f64>() / n,
            align_mean: mine.iter().map(|r| r.align_mean).sum::<f64>() / n,
            align_var_x100: mine.iter().map(|r| r.align_var_x100).sum::<f64>() / n,
        });
    }
    let mut comparisons = Vec::new();
    for (a_idx, a) in methods.iter().enumerate() {
        let a_rows = by_seed(rows, a)?;
        for b in &methods[a_idx + 1..] {
            let b_rows = by_seed(rows, b)?;
            let diffs: Vec<f64> = a_rows
                .iter()
                .filter_map(|(seed, ra)| {
                    b_rows
                        .get(seed)
                        .map(|rb| ra.frame_consistency - rb.frame_consistency)
                })
                .collect();
            let wins = diffs.iter().filter(|d| **d > 0.0).count();
            let losses = diffs.iter().filter(|d| **d < 0.0).count();
            comparisons.push(PairedComparison {
                first: a.clone(),
                second: b.clone(),
                pairs: diffs.len(),
                mean_difference: if diffs.is_empty() {
                    0.0
                } else {
                    diffs.iter().sum::<f64>() / diffs.len() as f64
                },
                wins,
                losses,
                ties: diffs.len() - wins - losses,
                p_value: sign_test_two_sided(wins, losses),
            });
        }
    }
    Ok(Report {
        methods: summaries,
        comparisons,
    })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "method\truns\tframe_consistency\talign_mean\talign_var_x100"
        );
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                m.method, m.runs, m.frame_consistency, m.align_mean, m.align_var_x100
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "paired frame_consistency differences (first - second)");
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{} vs {}: pairs {} mean_diff {:.6e} wins {} losses {} ties {} sign_test_p {:.6e}",
                c.first, c.second, c.pairs, c.mean_difference, c.wins, c.losses, c.ties, c.p_value
            );
        }
        s
    }
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `seed value` column files, one per method and metric, sorted by seed.
pub fn write_plot_data(dir: &Path, rows: &[MetricRow]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for m in methods_in_order(rows) {
        let mut mine: Vec<&MetricRow> = rows.iter().filter(|r| r.method == m).collect();
        mine.sort_by_key(|r| r.seed);
        let columns: [(&str, fn(&MetricRow) -> f64); 3] = [
            ("frame_consistency", |r| r.frame_consistency),
            ("align_mean", |r| r.align_mean),
            ("align_var_x100", |r| r.align_var_x100),
        ];
        for (metric, get) in columns {
            let mut text = format!("# seed {metric}\n");
            for r in &mine {
                let _ = writeln!(text, "{} {:.17e}", r.seed, get(r));
            }
            let path = dir.join(format!("{}_{metric}.dat", file_safe(&m)));
            std::fs::write(&path, text)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, fc: f64, seed: u64) -> MetricRow {
        MetricRow::new(format!("run{seed}"), method, fc, (0.5, 0.001), seed)
    }

    #[test]
    fn identical_rows_give_zero_difference_and_unit_p() {
        let rows = vec![row("a", 0.7, 1), row("b", 0.7, 1)];
        let r = summarize(&rows).unwrap();
        assert_eq!(r.comparisons.len(), 1);
        assert_eq!(r.comparisons[0].mean_difference, 0.0);
        assert_eq!(r.comparisons[0].p_value, 1.0);
    }

    #[test]
    fn strictly_ordered_runs_are_significant() {
        let mut rows = Vec::new();
        for s in 0..20 {
            rows.push(row("a", 0.9 + 0.001 * s as f64, s));
            rows.push(row("b", 0.8 + 0.001 * s as f64, s));
        }
        let r = summarize(&rows).unwrap();
        let c = &r.comparisons[0];
        assert_eq!((c.wins, c.losses), (20, 0));
        assert!((c.p_value - 2.0 * 0.5f64.powi(20)).abs() < 1e-15);
        assert!(c.p_value < 0.01);
        assert!((r.methods[0].frame_consistency - 0.9095).abs() < 1e-12);
    }

    #[test]
    fn binomial_tails() {
        // P(X >= 16 | n = 20) = (C(20,16)+C(20,17)+...+C(20,20)) / 2^20 = 6196 / 1048576
        assert!((sign_test_one_sided(16, 20) - 6196.0 / 1048576.0).abs() < 1e-14);
        assert_eq!(sign_test_one_sided(0, 20), 1.0);
        assert_eq!(sign_test_two_sided(0, 0), 1.0);
        assert!((sign_test_two_sided(3, 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(summarize(&[]).is_err());
        assert!(summarize(&[row("a", 0.1, 1), row("a", 0.2, 1)]).is_err());
    }

    #[test]
    fn plot_files() {
        let dir = std::env::temp_dir().join(format!("codenoise-plot-{}", std::process::id()));
        let rows = vec![row("co denoised", 0.7, 2), row("co denoised", 0.6, 1)];
        let files = write_plot_data(&dir, &rows).unwrap();
        assert_eq!(files.len(), 3);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("1 "));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
