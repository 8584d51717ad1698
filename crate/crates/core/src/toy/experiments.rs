//! Accuracy sweeps for suppression, recycling and TTTS on the toy task.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate, GenerationSession, InterventionConfig};
use super::model::ToyTransformer;
use super::task::{extract_answer, TaskInstance, TaskSpec, ANS, END, PAD, THINK};
use crate::error::{Error, Result};
use crate::hsic::{mi_trajectory, KernelConfig, MiMode, TrajectoryParams};
use crate::trace_io::{GoldPooling, RepresentationTrace};
use crate::trajectory::{detect_peaks, peak_token_histogram, PeakConfig, TokenFrequency};

/// Greedy budget that fits the longest completion of `task` with one token to spare.
pub fn default_budget(task: &TaskSpec) -> usize {
    2 * task.max_digits + 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_generated: f64,
    pub max_generated: usize,
}

pub fn evaluate(model: &ToyTransformer, instances: &[TaskInstance], config: &InterventionConfig) -> Result<Evaluation> {
    if instances.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut correct = 0;
    let mut generated = 0;
    let mut longest = 0;
    for inst in instances {
        let s = generate(model, &inst.prompt, config)?;
        generated += s.len();
        longest = longest.max(s.len());
        if extract_answer(&s.generated) == Some(inst.answer) {
            correct += 1;
        }
    }
    Ok(Evaluation {
        instances: instances.len(),
        correct,
        accuracy: correct as f64 / instances.len() as f64,
        mean_generated: generated as f64 / instances.len() as f64,
        max_generated: longest,
    })
}

/// Final-norm representations of the gold answer tokens `ANS y`.
pub fn gold_representation(model: &ToyTransformer, inst: &TaskInstance) -> Result<Vec<f64>> {
    Ok(model.forward(&inst.gold_tokens())?.final_hidden)
}

/// Trace of one greedy generation, with token ids and the gold matrix.
pub fn session_trace(
    model: &ToyTransformer,
    inst: &TaskInstance,
    session: &GenerationSession,
) -> Result<RepresentationTrace> {
    let d = model.config().model_dim;
    if session.is_empty() {
        return Err(Error::InsufficientData("generation produced no tokens".into()));
    }
    let steps: Vec<f32> = session.representations.iter().flatten().map(|&v| v as f32).collect();
    let gold: Vec<f32> = gold_representation(model, inst)?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let m = gold.len() / d;
    let mut trace =
        RepresentationTrace::new(steps, session.len(), gold, m, d)?.with_token_ids(session.generated.clone())?;
    trace.vocab_size = model.config().vocab_size as u32;
    trace.gold_pooling = GoldPooling::LastToken;
    trace.token_strings = None;
    Ok(trace)
}

pub fn collect_traces(
    model: &ToyTransformer,
    instances: &[TaskInstance],
    config: &InterventionConfig,
) -> Result<Vec<RepresentationTrace>> {
    instances
        .iter()
        .map(|inst| session_trace(model, inst, &generate(model, &inst.prompt, config)?))
        .collect()
}

/// Token ranking derived from one batch-level MI sequence. Markers (`ANS`,
/// `END`, `PAD`) are excluded from both lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRanking {
    /// Tokens by how often they sit at MI peaks.
    pub peaks: Vec<TokenFrequency>,
    /// Every token seen, by mean MI over the steps where it occurs (ties by id).
    pub by_mean_mi: Vec<u32>,
}

pub fn rank_tokens(traces: &[RepresentationTrace], kernel: &KernelConfig, tau: f64) -> Result<TokenRanking> {
    let mi = mi_trajectory(traces, kernel, MiMode::BatchAnchored, &TrajectoryParams::default())?;
    let report = detect_peaks(&mi.values, &PeakConfig { tau })?;
    let reports = vec![report; traces.len()];
    let markers = [ANS, END, PAD];
    let peaks = peak_token_histogram(traces, &reports, usize::MAX)?
        .into_iter()
        .filter(|f| !markers.contains(&f.token))
        .collect();
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for trace in traces {
        let ids = trace.token_ids.as_deref().unwrap_or_default();
        for (&id, &m) in ids.iter().zip(&mi.values) {
            if !markers.contains(&id) {
                let e = sums.entry(id).or_default();
                e.0 += m;
                e.1 += 1;
            }
        }
    }
    let mut by_mean: Vec<(u32, f64)> = sums.into_iter().map(|(t, (s, c))| (t, s / c as f64)).collect();
    by_mean.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(TokenRanking {
        peaks,
        by_mean_mi: by_mean.into_iter().map(|(t, _)| t).collect(),
    })
}

/// `THINK` first, then peak tokens in rank order, then the remaining tokens
/// by mean MI, each listed once.
pub fn thinking_list(ranking: &TokenRanking) -> Vec<u32> {
    let mut list = vec![THINK];
    for t in ranking
        .peaks
        .iter()
        .map(|f| f.token)
        .chain(ranking.by_mean_mi.iter().copied())
    {
        if !list.contains(&t) {
            list.push(t);
        }
    }
    list
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    /// Evaluation instances.
    pub instances: usize,
    /// Instances whose traces seed the thinking list.
    pub trace_instances: usize,
    pub seed: u64,
    pub budget: Option<usize>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            instances: 200,
            trace_instances: 64,
            seed: 0,
            budget: None,
        }
    }
}

impl ExperimentParams {
    fn eval_instances(&self, task: &TaskSpec) -> Vec<TaskInstance> {
        task.instances(self.instances, self.seed.wrapping_add(1))
    }

    fn budget(&self, task: &TaskSpec) -> usize {
        self.budget.unwrap_or_else(|| default_budget(task))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionArm {
    Thinking,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionRow {
    pub suppressed: usize,
    pub arm: SuppressionArm,
    pub accuracy: f64,
    /// Token sets evaluated (several random draws are averaged).
    pub token_sets: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionResult {
    pub baseline: f64,
    pub thinking_list: Vec<u32>,
    pub ranking: TokenRanking,
    pub rows: Vec<SuppressionRow>,
}

/// Accuracy after suppressing the top `n` thinking tokens versus `n` random
/// digits outside that set, for `n = 1..=top_n`.
pub fn suppression_experiment(
    model: &ToyTransformer,
    task: &TaskSpec,
    params: &ExperimentParams,
    top_n: usize,
    random_draws: usize,
) -> Result<SuppressionResult> {
    if random_draws == 0 {
        return Err(Error::Config("random_draws must be at least 1".into()));
    }
    let greedy = InterventionConfig::greedy(params.budget(task));
    let traces = collect_traces(model, &task.instances(params.trace_instances, params.seed), &greedy)?;
    let ranking = rank_tokens(&traces, &KernelConfig::median_heuristic(), PeakConfig::default().tau)?;
    let list = thinking_list(&ranking);
    let eval = params.eval_instances(task);
    let baseline = evaluate(model, &eval, &greedy)?.accuracy;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(2));
    let mut rows = Vec::new();
    for n in 1..=top_n.min(list.len()) {
        let thinking: BTreeSet<u32> = list[..n].iter().copied().collect();
        let cfg = InterventionConfig {
            suppress: thinking.clone(),
            ..greedy.clone()
        };
        rows.push(SuppressionRow {
            suppressed: n,
            arm: SuppressionArm::Thinking,
            accuracy: evaluate(model, &eval, &cfg)?.accuracy,
            token_sets: vec![thinking.iter().copied().collect()],
        });
        let pool: Vec<u32> = (0..10).filter(|t| !thinking.contains(t)).collect();
        if pool.len() < n {
            continue;
        }
        let mut acc = 0.0;
        let mut sets = Vec::new();
        for _ in 0..random_draws {
            let set: BTreeSet<u32> = pool.choose_multiple(&mut rng, n).copied().collect();
            let cfg = InterventionConfig {
                suppress: set.clone(),
                ..greedy.clone()
            };
            acc += evaluate(model, &eval, &cfg)?.accuracy;
            sets.push(set.into_iter().collect());
        }
        rows.push(SuppressionRow {
            suppressed: n,
            arm: SuppressionArm::Random,
            accuracy: acc / random_draws as f64,
            token_sets: sets,
        });
    }
    Ok(SuppressionResult {
        baseline,
        thinking_list: list,
        ranking,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecyclingResult {
    pub layer: usize,
    pub triggers: Vec<u32>,
    pub baseline: Evaluation,
    pub recycled: Evaluation,
}

pub fn recycling_experiment(
    model: &ToyTransformer,
    task: &TaskSpec,
    params: &ExperimentParams,
    layer: usize,
    triggers: &BTreeSet<u32>,
) -> Result<RecyclingResult> {
    model.check_layer(layer)?;
    let eval = params.eval_instances(task);
    let greedy = InterventionConfig::greedy(params.budget(task));
    let rr = InterventionConfig {
        rr_enabled: true,
        rr_layer: layer,
        rr_triggers: triggers.clone(),
        ..greedy.clone()
    };
    Ok(RecyclingResult {
        layer,
        triggers: triggers.iter().copied().collect(),
        baseline: evaluate(model, &eval, &greedy)?,
        recycled: evaluate(model, &eval, &rr)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TttsArm {
    Plain,
    Ttts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttsRow {
    pub budget: usize,
    pub arm: TttsArm,
    pub accuracy: f64,
    pub mean_generated: f64,
    pub max_generated: usize,
}

/// Accuracy per budget with and without thinking-token continuation.
pub fn ttts_experiment(
    model: &ToyTransformer,
    task: &TaskSpec,
    params: &ExperimentParams,
    budgets: &[usize],
    ttts_token: u32,
) -> Result<Vec<TttsRow>> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("budgets must be a non-empty ascending list".into()));
    }
    let eval = params.eval_instances(task);
    let mut rows = Vec::new();
    for &budget in budgets {
        for arm in [TttsArm::Plain, TttsArm::Ttts] {
            let cfg = InterventionConfig {
                ttts_enabled: arm == TttsArm::Ttts,
                ttts_token,
                ..InterventionConfig::greedy(budget)
            };
            let e = evaluate(model, &eval, &cfg)?;
            rows.push(TttsRow {
                budget,
                arm,
                accuracy: e.accuracy,
                mean_generated: e.mean_generated,
                max_generated: e.max_generated,
            });
        }
    }
    Ok(rows)
}
