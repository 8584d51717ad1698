use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{Args, Subcommand};
use mipeaks::toy::experiments::{
    default_budget, evaluate, recycling_experiment, session_trace, suppression_experiment, ttts_experiment, Evaluation,
    ExperimentParams, SuppressionRow,
};
use mipeaks::toy::task::{parse_tokens, render_tokens};
use mipeaks::toy::{
    encode_weights, generate, read_weights_file, train_toy, GenerationSession, InterventionConfig, TaskSpec, ToyConfig,
    ToyTransformer, TrainConfig,
};
use mipeaks::trace_io::encode_trace;
use serde::Serialize;

use crate::failure::{CliResult, Failure};
use crate::output::OutDir;

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Train on chained addition; writes weights.mitw and train_report.json.
    Train(TrainArgs),
    /// Greedy generation with optional interventions; writes generations.json
    /// and one MITC trace per prompt.
    Generate(GenerateArgs),
    /// Accuracy after suppressing thinking tokens vs. random digits.
    SuppressExp(SuppressArgs),
    /// Accuracy with and without representation recycling.
    RrExp(RrArgs),
    /// Accuracy per token budget with and without thinking-token continuation.
    TttsExp(TttsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Prompt length of the chained-addition task.
    #[arg(long, default_value_t = 4)]
    pub digits: usize,
    #[arg(long, env = "MIPEAKS_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl Common {
    fn task(&self) -> CliResult<TaskSpec> {
        let task = TaskSpec {
            min_digits: self.digits,
            max_digits: self.digits,
            ..Default::default()
        };
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Path to a weights file written by `toy train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Evaluation prompts.
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    /// Generation budget; defaults to the full completion length plus one.
    #[arg(long)]
    pub budget: Option<usize>,
}

impl EvalArgs {
    fn model(&self) -> CliResult<ToyTransformer> {
        read_weights_file(&self.weights).map_err(Failure::at(&self.weights))
    }

    fn params(&self, seed: u64, trace_instances: usize) -> ExperimentParams {
        ExperimentParams {
            instances: self.instances,
            trace_instances,
            seed,
            budget: self.budget,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Gradient-norm cap; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 32)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ff_dim: usize,
    #[arg(long, default_value_t = 48)]
    pub context: usize,
    /// Prompts used for the accuracy reported after training.
    #[arg(long, default_value_t = 200)]
    pub eval_instances: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Space-separated prompt, e.g. "3 4 1 2"; without it, `--count` task prompts are drawn.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Comma-separated tokens whose probability is forced to zero.
    #[arg(long, value_delimiter = ',', value_parser = parse_token)]
    pub suppress: Vec<u32>,
    /// Enable representation recycling at this block.
    #[arg(long)]
    pub rr_layer: Option<usize>,
    /// Tokens whose generation triggers recycling on the next step.
    #[arg(long, value_delimiter = ',', value_parser = parse_token, default_value = "THINK")]
    pub rr_triggers: Vec<u32>,
    /// Replace early halts by a forced thinking token.
    #[arg(long)]
    pub ttts: bool,
    #[arg(long, value_parser = parse_token, default_value = "THINK")]
    pub ttts_token: u32,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SuppressArgs {
    /// Largest number of suppressed tokens per arm.
    #[arg(long, default_value_t = 3)]
    pub top_n: usize,
    /// Random draws averaged in the control arm.
    #[arg(long, default_value_t = 5)]
    pub draws: usize,
    /// Prompts whose traces rank the thinking tokens.
    #[arg(long, default_value_t = 64)]
    pub trace_instances: usize,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RrArgs {
    /// Block that is applied twice after a trigger.
    #[arg(long)]
    pub layer: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_token, default_value = "THINK")]
    pub triggers: Vec<u32>,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TttsArgs {
    /// Ascending comma-separated token budgets.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub budgets: Vec<usize>,
    #[arg(long, value_parser = parse_token, default_value = "THINK")]
    pub token: u32,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub common: Common,
}

fn parse_token(s: &str) -> Result<u32, String> {
    match parse_tokens(s).map_err(|e| e.to_string())?.as_slice() {
        [t] => Ok(*t),
        _ => Err(format!("expected one token, got {s:?}")),
    }
}

pub fn run(cmd: &ToyCommand) -> CliResult<()> {
    match cmd {
        ToyCommand::Train(a) => train(a),
        ToyCommand::Generate(a) => generate_cmd(a),
        ToyCommand::SuppressExp(a) => suppress(a),
        ToyCommand::RrExp(a) => rr(a),
        ToyCommand::TttsExp(a) => ttts(a),
    }
}

#[derive(Serialize)]
struct TrainOut<'a> {
    config: &'a ToyConfig,
    train: &'a TrainConfig,
    task: &'a TaskSpec,
    report: mipeaks::toy::TrainReport,
    /// Measured on the weights as stored (f32).
    evaluation: Option<Evaluation>,
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let task = a.common.task()?;
    let config = ToyConfig {
        vocab_size: mipeaks::toy::task::VOCAB_SIZE,
        model_dim: a.model_dim,
        layers: a.layers,
        heads: a.heads,
        context: a.context,
        ff_dim: a.ff_dim,
        seed: a.common.seed,
    };
    let tc = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        seed: a.common.seed,
        grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
    };
    let (model, report) = train_toy(&config, &task, &tc)?;
    let bytes = encode_weights(&model);
    let stored = mipeaks::toy::decode_weights(&bytes).map_err(mipeaks::Error::from)?;
    let evaluation = if a.eval_instances > 0 {
        let eval = task.instances(a.eval_instances, a.common.seed.wrapping_add(1));
        Some(evaluate(
            &stored,
            &eval,
            &InterventionConfig::greedy(default_budget(&task)),
        )?)
    } else {
        None
    };
    let out = OutDir::create(&a.common.out)?;
    out.write("weights.mitw", &bytes)?;
    if let Some(e) = &evaluation {
        println!("accuracy {:.4} on {} prompts", e.accuracy, e.instances);
    }
    if let Some(l) = report.final_loss {
        println!("final loss {l:.6}");
    }
    out.write_json(
        "train_report.json",
        &TrainOut {
            config: &config,
            train: &tc,
            task: &task,
            report,
            evaluation,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct GenerationOut {
    prompt: String,
    output: String,
    answer: Option<u32>,
    expected: Option<u32>,
    trace: Option<String>,
    session: GenerationSession,
}

fn generate_cmd(a: &GenerateArgs) -> CliResult<()> {
    let model = read_weights_file(&a.weights).map_err(Failure::at(&a.weights))?;
    let task = a.common.task()?;
    let prompts: Vec<Vec<u32>> = match &a.prompt {
        Some(p) => vec![parse_tokens(p)?],
        None => task
            .instances(a.count, a.common.seed)
            .into_iter()
            .map(|i| i.prompt)
            .collect(),
    };
    let cfg = InterventionConfig {
        suppress: a.suppress.iter().copied().collect(),
        rr_enabled: a.rr_layer.is_some(),
        rr_layer: a.rr_layer.unwrap_or(0),
        rr_triggers: a.rr_triggers.iter().copied().collect(),
        ttts_enabled: a.ttts,
        ttts_token: a.ttts_token,
        token_budget: a.budget.unwrap_or_else(|| default_budget(&task)),
        ..Default::default()
    };
    let mut files = Vec::new();
    let mut records = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let session = generate(&model, prompt, &cfg)?;
        // prompts made only of digits have a gold answer
        let inst = prompt
            .iter()
            .all(|&t| t <= 9)
            .then(|| task.instance(prompt))
            .transpose()?;
        let trace = match &inst {
            Some(inst) if !session.is_empty() => {
                let name = format!("trace_{i:04}.mitc");
                files.push((name.clone(), encode_trace(&session_trace(&model, inst, &session)?)?));
                Some(name)
            }
            _ => None,
        };
        records.push(GenerationOut {
            prompt: render_tokens(prompt),
            output: render_tokens(&session.generated),
            answer: mipeaks::toy::task::extract_answer(&session.generated),
            expected: inst.map(|i| i.answer),
            trace,
            session,
        });
    }
    let out = OutDir::create(&a.common.out)?;
    for (name, bytes) in &files {
        out.write(name, bytes)?;
    }
    for r in &records {
        println!("{} => {}", r.prompt, r.output);
    }
    out.write_json("generations.json", &records)?;
    Ok(())
}

#[derive(Serialize)]
struct SuppressCsvRow {
    suppressed: usize,
    arm: mipeaks::toy::experiments::SuppressionArm,
    accuracy: f64,
    tokens: String,
}

fn suppress(a: &SuppressArgs) -> CliResult<()> {
    let model = a.eval.model()?;
    let task = a.common.task()?;
    let params = a.eval.params(a.common.seed, a.trace_instances);
    let result = suppression_experiment(&model, &task, &params, a.top_n, a.draws)?;
    let rows: Vec<SuppressCsvRow> = result
        .rows
        .iter()
        .map(|r: &SuppressionRow| SuppressCsvRow {
            suppressed: r.suppressed,
            arm: r.arm,
            accuracy: r.accuracy,
            tokens: r
                .token_sets
                .iter()
                .map(|s| render_tokens(s))
                .collect::<Vec<_>>()
                .join(" | "),
        })
        .collect();
    let out = OutDir::create(&a.common.out)?;
    out.write_csv("suppression.csv", &rows)?;
    out.write_json("suppression.json", &result)?;
    println!("baseline accuracy {:.4}", result.baseline);
    for r in &rows {
        println!("N={} {:?} accuracy {:.4}", r.suppressed, r.arm, r.accuracy);
    }
    Ok(())
}

#[derive(Serialize)]
struct RrCsvRow {
    arm: &'static str,
    layer: usize,
    accuracy: f64,
    mean_generated: f64,
}

fn rr(a: &RrArgs) -> CliResult<()> {
    let model = a.eval.model()?;
    let task = a.common.task()?;
    let triggers: BTreeSet<u32> = a.triggers.iter().copied().collect();
    let result = recycling_experiment(&model, &task, &a.eval.params(a.common.seed, 0), a.layer, &triggers)?;
    let rows = [
        RrCsvRow {
            arm: "baseline",
            layer: a.layer,
            accuracy: result.baseline.accuracy,
            mean_generated: result.baseline.mean_generated,
        },
        RrCsvRow {
            arm: "recycled",
            layer: a.layer,
            accuracy: result.recycled.accuracy,
            mean_generated: result.recycled.mean_generated,
        },
    ];
    let out = OutDir::create(&a.common.out)?;
    out.write_csv("rr.csv", &rows)?;
    out.write_json("rr.json", &result)?;
    for r in &rows {
        println!("{} accuracy {:.4}", r.arm, r.accuracy);
    }
    Ok(())
}

fn ttts(a: &TttsArgs) -> CliResult<()> {
    let model = a.eval.model()?;
    let task = a.common.task()?;
    let rows = ttts_experiment(&model, &task, &a.eval.params(a.common.seed, 0), &a.budgets, a.token)?;
    let out = OutDir::create(&a.common.out)?;
    out.write_csv("ttts.csv", &rows)?;
    out.write_json("ttts.json", &rows)?;
    for r in &rows {
        println!("budget {:>4} {:?} accuracy {:.4}", r.budget, r.arm, r.accuracy);
    }
    Ok(())
}
