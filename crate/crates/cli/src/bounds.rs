use std::path::PathBuf;

use clap::{Args, Subcommand};
use mipeaks::bounds::{verify_bounds_random, BoundsCheckParams};

use crate::failure::{CliResult, Failure, EXIT_VIOLATION};
use crate::output::OutDir;

#[derive(Debug, Subcommand)]
pub enum BoundsCommand {
    /// Check the lower and upper error bounds, the chain rule and the entropy
    /// identities on random joints; writes bounds_report.json.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, env = "MIPEAKS_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Label alphabet sizes, inclusive (`3..5` or `4`).
    #[arg(long, default_value = "3..5", value_parser = parse_range)]
    pub y_card: (usize, usize),
    /// Reasoning steps per joint, inclusive.
    #[arg(long = "t", default_value = "1..3", value_parser = parse_range)]
    pub steps: (usize, usize),
    /// Per-step representation alphabet sizes, inclusive.
    #[arg(long, default_value = "2..4", value_parser = parse_range)]
    pub h_card: (usize, usize),
    /// Random predictors checked per joint, besides the Bayes predictor.
    #[arg(long, default_value_t = 50)]
    pub predictors: usize,
    /// Debug: replace the upper bound by 0 so the check must fail.
    #[arg(long)]
    pub negative_control: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// `a..b` (inclusive) or a single value.
pub fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("expected an integer, got {v:?}"))
    };
    match s.split_once("..") {
        Some((a, b)) => {
            let b = b.strip_prefix('=').unwrap_or(b);
            Ok((parse(a)?, parse(b)?))
        }
        None => {
            let v = parse(s)?;
            Ok((v, v))
        }
    }
}

pub fn run(cmd: &BoundsCommand) -> CliResult<()> {
    let BoundsCommand::Verify(args) = cmd;
    let params = BoundsCheckParams {
        trials: args.trials,
        seed: args.seed,
        y_card: args.y_card,
        steps: args.steps,
        h_card: args.h_card,
        predictors_per_trial: args.predictors,
        negative_control: args.negative_control,
    };
    let report = verify_bounds_random(&params)?;
    let out = OutDir::create(&args.out)?;
    out.write_json("bounds_report.json", &report)?;
    let rows = [
        ("fano", &report.fano),
        ("upper", &report.upper),
        ("chain_rule", &report.chain_rule),
        ("data_processing", &report.data_processing),
        ("bayes_minimality", &report.bayes_minimality),
        ("grouping", &report.grouping),
        ("half_entropy", &report.half_entropy),
    ];
    for (name, t) in rows {
        let slack = t.worst_slack.map_or("-".into(), |s| format!("{s:.3e}"));
        println!(
            "{name:<18} checks {:>7}  violations {:>5}  worst slack {slack}",
            t.checks, t.violations
        );
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VIOLATION,
            message: format!("{} bound violations", report.violations),
        })
    }
}
