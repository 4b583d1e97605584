//! Per-generation statistics over run logs, rendered as CSV.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::runlog::RunLog;

pub const QUANTILE_NOTE: &str =
    "# quantiles: linear interpolation between closest ranks, position h = (n - 1) * p over sorted accuracies";
pub const STATS_COLUMNS: &str =
    "generation,mean_accuracy,min,q1,median,q3,max,mean_parameters,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStats {
    pub generation: usize,
    pub mean_accuracy: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean_parameters: f64,
    pub wall_seconds: f64,
}

/// Quantile `p` of ascending `sorted` by linear interpolation at
/// `h = (n - 1) p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl GenerationStats {
    pub fn from_samples(
        generation: usize,
        accuracies: &[f64],
        parameters: &[usize],
        wall_seconds: f64,
    ) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::Analysis(format!(
                "generation {generation} has no evaluations"
            )));
        }
        let mut sorted = accuracies.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        Ok(Self {
            generation,
            mean_accuracy: sorted.iter().sum::<f64>() / n,
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
            mean_parameters: parameters.iter().map(|&p| p as f64).sum::<f64>()
                / parameters.len().max(1) as f64,
            wall_seconds,
        })
    }
}

/// Statistics of every generation in a complete log.
pub fn generation_stats(log: &RunLog) -> Result<Vec<GenerationStats>> {
    log.check_complete()?;
    log.generations
        .iter()
        .map(|g| {
            let records: Vec<_> = log.generation(g.generation).collect();
            let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
            if let Some(bad) = acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::Analysis(format!(
                    "generation {}: accuracy {bad} outside [0, 1]",
                    g.generation
                )));
            }
            let params: Vec<usize> = records.iter().map(|r| r.parameters).collect();
            GenerationStats::from_samples(g.generation, &acc, &params, g.wall_seconds)
        })
        .collect()
}

/// With elitism the best accuracy of each generation can never drop.
pub fn check_elitism(log: &RunLog, stats: &[GenerationStats]) -> Result<()> {
    if log.header.config.ga.elitism == 0 {
        return Ok(());
    }
    for pair in stats.windows(2) {
        if pair[1].max < pair[0].max {
            return Err(Error::Analysis(format!(
                "best accuracy fell from {} in generation {} to {} in generation {} despite elitism",
                pair[0].max, pair[0].generation, pair[1].max, pair[1].generation
            )));
        }
    }
    Ok(())
}

/// `%g` with six significant digits: fixed notation for exponents in
/// `[-5, 6)`, scientific otherwise, trailing zeros removed.
pub fn format_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn stats_row(s: &GenerationStats) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        s.generation,
        format_g(s.mean_accuracy),
        format_g(s.min),
        format_g(s.q1),
        format_g(s.median),
        format_g(s.q3),
        format_g(s.max),
        format_g(s.mean_parameters),
        format_g(s.wall_seconds)
    )
}

/// One log's statistics with a trailing `total` row holding the summed
/// wall time.
pub fn stats_csv(stats: &[GenerationStats]) -> String {
    let mut out = format!("{QUANTILE_NOTE}\n{STATS_COLUMNS}\n");
    for s in stats {
        writeln!(out, "{}", stats_row(s)).expect("string write");
    }
    let total: f64 = stats.iter().map(|s| s.wall_seconds).sum();
    writeln!(out, "total,,,,,,,,{}", format_g(total)).expect("string write");
    out
}

/// All logs side by side, one row per (log, generation).
pub fn comparison_csv(runs: &[(String, Vec<GenerationStats>)]) -> String {
    let mut out = format!("{QUANTILE_NOTE}\nlog,{STATS_COLUMNS}\n");
    for (label, stats) in runs {
        for s in stats {
            writeln!(out, "{},{}", csv_field(label), stats_row(s)).expect("string write");
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
