use std::path::PathBuf;

use clap::{Args, ValueEnum};
use mipeaks::hsic::{default_grid, mi_trajectory, KernelConfig, MiMode, MiSequence, TrajectoryParams};
use mipeaks::trace_io::{read_trace_file, render_mi_csv, RepresentationTrace};
use mipeaks::trajectory::{
    detect_peaks, peak_token_histogram, summarize_reports, PeakConfig, PeakReport, ReportSummary, TokenFrequency,
};
use serde::Serialize;

use crate::failure::{CliResult, Failure};
use crate::output::OutDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// One sequence over the whole batch, one sample per trace at each step.
    Batch,
    /// One sequence per trace from a sliding window of steps.
    Single,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// MITC trace files (a `.json` sidecar next to each file is read if present).
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "batch")]
    pub mode: Mode,
    /// Kernel bandwidth: `auto` (grid search over 50..=400), `median`, or a positive number.
    #[arg(long, default_value = "auto")]
    pub sigma: String,
    /// Peak threshold multiplier: a step is a peak when m_t > Q3 + tau * IQR.
    #[arg(long, default_value_t = 1.5)]
    pub tau: f64,
    /// Minimum contributing traces per step in batch mode.
    #[arg(long, default_value_t = 8)]
    pub n_min: usize,
    /// Window length in single mode.
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    /// Rows of the peak-token histogram (traces with token ids only).
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn kernel_config(sigma: &str) -> CliResult<KernelConfig> {
    let cfg = match sigma {
        "auto" => KernelConfig::grid_search(default_grid()),
        "median" => KernelConfig::median_heuristic(),
        v => KernelConfig::explicit(
            v.parse::<f64>()
                .map_err(|_| Failure::input(format!("--sigma expects auto, median or a number, got {v:?}")))?,
        ),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct SequenceOut {
    sources: Vec<String>,
    csv: String,
    sigma: f64,
    coverage: Vec<usize>,
    values: Vec<f64>,
    report: PeakReport,
}

#[derive(Debug, Serialize)]
struct Report {
    mode: &'static str,
    kernel: KernelConfig,
    tau: f64,
    n_min: usize,
    window: usize,
    sequences: Vec<SequenceOut>,
    summary: ReportSummary,
    peak_tokens: Option<Vec<TokenFrequency>>,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    sequence: String,
    steps: f64,
    peaks: f64,
    ratio: f64,
    max_interval: Option<f64>,
    min_interval: Option<f64>,
    avg_interval: Option<f64>,
    mean: f64,
    std: f64,
    aom: f64,
}

impl SummaryRow {
    fn from_report(sequence: String, r: &PeakReport) -> Self {
        Self {
            sequence,
            steps: r.len as f64,
            peaks: r.indices.len() as f64,
            ratio: r.ratio,
            max_interval: r.intervals.map(|i| i.max as f64),
            min_interval: r.intervals.map(|i| i.min as f64),
            avg_interval: r.intervals.map(|i| i.avg),
            mean: r.mean,
            std: r.std,
            aom: r.aom,
        }
    }

    fn from_summary(s: &ReportSummary) -> Self {
        Self {
            sequence: "mean".into(),
            steps: s.steps,
            peaks: s.peaks,
            ratio: s.ratio,
            max_interval: s.max_interval,
            min_interval: s.min_interval,
            avg_interval: s.avg_interval,
            mean: s.mean,
            std: s.std,
            aom: s.aom,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

fn print_table(rows: &[SummaryRow]) {
    println!(
        "{:<12} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>12} {:>12} {:>8}",
        "sequence", "steps", "peaks", "ratio", "max_int", "min_int", "avg_int", "mean", "std", "aom"
    );
    for r in rows {
        println!(
            "{:<12} {:>6.1} {:>6.1} {:>8.4} {:>8} {:>8} {:>8} {:>12.4e} {:>12.4e} {:>8.3}",
            r.sequence,
            r.steps,
            r.peaks,
            r.ratio,
            opt(r.max_interval),
            opt(r.min_interval),
            opt(r.avg_interval),
            r.mean,
            r.std,
            r.aom
        );
    }
}

pub fn run(args: &AnalyzeArgs) -> CliResult<()> {
    let kernel = kernel_config(&args.sigma)?;
    let peak_cfg = PeakConfig { tau: args.tau };
    let params = TrajectoryParams {
        n_min: args.n_min,
        window: args.window,
    };
    let traces: Vec<RepresentationTrace> = args
        .files
        .iter()
        .map(|p| read_trace_file(p).map_err(Failure::at(p)))
        .collect::<CliResult<_>>()?;
    let names: Vec<String> = args.files.iter().map(|p| p.display().to_string()).collect();

    // (sources, sequence) pairs; nothing is written until every one succeeds
    let mut sequences: Vec<(Vec<String>, MiSequence)> = Vec::new();
    match args.mode {
        Mode::Batch => {
            let mi = mi_trajectory(&traces, &kernel, MiMode::BatchAnchored, &params)?;
            sequences.push((names.clone(), mi));
        }
        Mode::Single => {
            for (trace, (name, path)) in traces.iter().zip(names.iter().zip(&args.files)) {
                let mi = mi_trajectory(std::slice::from_ref(trace), &kernel, MiMode::SingleTrace, &params)
                    .map_err(Failure::at(path))?;
                sequences.push((vec![name.clone()], mi));
            }
        }
    }
    let reports: Vec<PeakReport> = sequences
        .iter()
        .map(|(_, mi)| detect_peaks(&mi.values, &peak_cfg))
        .collect::<mipeaks::Result<_>>()?;
    let summary = summarize_reports(&reports)?;
    let peak_tokens = if traces.iter().all(|t| t.token_ids.is_some()) {
        let per_trace: Vec<PeakReport> = match args.mode {
            Mode::Batch => vec![reports[0].clone(); traces.len()],
            Mode::Single => reports.clone(),
        };
        Some(peak_token_histogram(&traces, &per_trace, args.top_k)?)
    } else {
        None
    };

    let out = OutDir::create(&args.out)?;
    let mut rows = Vec::new();
    let mut seq_out = Vec::new();
    for (i, ((sources, mi), report)) in sequences.into_iter().zip(reports).enumerate() {
        let csv_name = match args.mode {
            Mode::Batch => "mi.csv".to_string(),
            Mode::Single => format!("mi_{i:04}.csv"),
        };
        out.write(&csv_name, render_mi_csv(&mi, &report)?.as_bytes())?;
        let label = match args.mode {
            Mode::Batch => "batch".to_string(),
            Mode::Single => format!("{i}"),
        };
        rows.push(SummaryRow::from_report(label, &report));
        seq_out.push(SequenceOut {
            sources,
            csv: csv_name,
            sigma: mi.sigma,
            coverage: mi.coverage,
            values: mi.values,
            report,
        });
    }
    rows.push(SummaryRow::from_summary(&summary));
    out.write_csv("summary.csv", &rows)?;
    out.write_json(
        "report.json",
        &Report {
            mode: match args.mode {
                Mode::Batch => "batch",
                Mode::Single => "single",
            },
            kernel,
            tau: args.tau,
            n_min: args.n_min,
            window: args.window,
            sequences: seq_out,
            summary,
            peak_tokens,
        },
    )?;
    print_table(&rows);
    Ok(())
}
