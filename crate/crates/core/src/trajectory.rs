//! Peak detection and summary statistics over MI sequences.
//!
//! A step `t` is a peak when `m_t > Q3 + tau * IQR`, with quartiles taken by
//! linear interpolation between order statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::trace_io::RepresentationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakConfig {
    pub tau: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { tau: 1.5 }
    }
}

/// Gaps between consecutive peaks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub max: usize,
    pub min: usize,
    pub avg: f64,
}

fn serialize_aom<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakReport {
    pub indices: Vec<usize>,
    pub len: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
    /// Average outlier magnitude. `+inf` when `degenerate` is set.
    #[serde(serialize_with = "serialize_aom")]
    pub aom: f64,
    pub ratio: f64,
    pub intervals: Option<IntervalStats>,
    /// Peaks were found over a zero IQR.
    pub degenerate: bool,
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite value at step {i}")));
    }
    Ok(())
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64 / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// First quartile, median and third quartile.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    check_values(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok((
        percentile_sorted(&sorted, 25.0),
        percentile_sorted(&sorted, 50.0),
        percentile_sorted(&sorted, 75.0),
    ))
}

/// Mean and population standard deviation (divisor `T`).
pub fn sequence_stats(values: &[f64]) -> Result<(f64, f64)> {
    check_values(values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn detect_peaks(values: &[f64], config: &PeakConfig) -> Result<PeakReport> {
    if !(config.tau >= 0.0 && config.tau.is_finite()) {
        return Err(Error::Config(format!("tau must be nonnegative, got {}", config.tau)));
    }
    let (q1, median, q3) = quartiles(values)?;
    let (mean, std) = sequence_stats(values)?;
    let iqr = q3 - q1;
    let threshold = q3 + config.tau * iqr;
    let indices: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| i)
        .collect();
    let degenerate = iqr == 0.0 && !indices.is_empty();
    let aom = if indices.is_empty() {
        0.0
    } else if degenerate {
        f64::INFINITY
    } else {
        indices.iter().map(|&i| (values[i] - median).abs() / iqr).sum::<f64>() / indices.len() as f64
    };
    let intervals = (indices.len() >= 2).then(|| {
        let gaps: Vec<usize> = indices.windows(2).map(|w| w[1] - w[0]).collect();
        IntervalStats {
            max: *gaps.iter().max().unwrap(),
            min: *gaps.iter().min().unwrap(),
            avg: gaps.iter().sum::<usize>() as f64 / gaps.len() as f64,
        }
    });
    Ok(PeakReport {
        ratio: indices.len() as f64 / values.len() as f64,
        len: values.len(),
        indices,
        q1,
        median,
        q3,
        iqr,
        threshold,
        mean,
        std,
        aom,
        intervals,
        degenerate,
    })
}

/// Arithmetic means of per-sequence report columns, as in a results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub sequences: usize,
    pub peaks: f64,
    pub steps: f64,
    pub ratio: f64,
    /// Interval columns average only over sequences with at least two peaks.
    pub max_interval: Option<f64>,
    pub min_interval: Option<f64>,
    pub avg_interval: Option<f64>,
    pub mean: f64,
    pub std: f64,
    /// Averaged over sequences with a finite AOM.
    pub aom: f64,
}

pub fn summarize_reports(reports: &[PeakReport]) -> Result<ReportSummary> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&PeakReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let with_gaps: Vec<&IntervalStats> = reports.iter().filter_map(|r| r.intervals.as_ref()).collect();
    let gap_avg = |f: &dyn Fn(&IntervalStats) -> f64| {
        (!with_gaps.is_empty()).then(|| with_gaps.iter().map(|g| f(g)).sum::<f64>() / with_gaps.len() as f64)
    };
    let finite_aom: Vec<f64> = reports.iter().map(|r| r.aom).filter(|a| a.is_finite()).collect();
    Ok(ReportSummary {
        sequences: reports.len(),
        peaks: avg(&|r| r.indices.len() as f64),
        steps: avg(&|r| r.len as f64),
        ratio: avg(&|r| r.ratio),
        max_interval: gap_avg(&|g| g.max as f64),
        min_interval: gap_avg(&|g| g.min as f64),
        avg_interval: gap_avg(&|g| g.avg),
        mean: avg(&|r| r.mean),
        std: avg(&|r| r.std),
        aom: if finite_aom.is_empty() {
            0.0
        } else {
            finite_aom.iter().sum::<f64>() / finite_aom.len() as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequency {
    pub token: u32,
    pub count: usize,
    pub frequency: f64,
}

/// Counts the token ids sitting at peak steps across traces and returns the
/// `top_k` most frequent (count descending, then id ascending). Frequencies
/// are relative to all peak tokens counted, not only the returned rows.
pub fn peak_token_histogram(
    traces: &[RepresentationTrace],
    reports: &[PeakReport],
    top_k: usize,
) -> Result<Vec<TokenFrequency>> {
    if traces.len() != reports.len() {
        return Err(Error::Shape(format!(
            "{} traces but {} peak reports",
            traces.len(),
            reports.len()
        )));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut total = 0usize;
    for (i, (trace, report)) in traces.iter().zip(reports).enumerate() {
        let ids = trace
            .token_ids
            .as_ref()
            .ok_or_else(|| Error::MissingAnnotation(format!("trace {i} has no token ids")))?;
        // A batch-level report may extend past a short trace.
        for &t in report.indices.iter().filter(|&&t| t < ids.len()) {
            *counts.entry(ids[t]).or_default() += 1;
            total += 1;
        }
    }
    let mut rows: Vec<TokenFrequency> = counts
        .into_iter()
        .map(|(token, count)| TokenFrequency {
            token,
            count,
            frequency: count as f64 / total as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.token.cmp(&b.token)));
    rows.truncate(top_k);
    Ok(rows)
}
