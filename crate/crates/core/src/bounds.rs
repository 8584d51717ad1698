//! Exact checks of the information-theoretic error bounds on small discrete
//! joints `p(y, h_1, ..., h_T)`.
//!
//! With `I_j = I(y; h_j | h_<j)` and any predictor `y_hat = f(h_1..h_T)` with
//! error `p_e`:
//!
//! ```text
//! lower:  p_e >= [H(y) - sum_j I_j - H_b(p_e)] / log(|Y| - 1)     (|Y| >= 3)
//! upper:  p_e <= 1/2 [H(y) - sum_j I_j] = 1/2 H(y | h_1..h_T)      (Bayes predictor, bits)
//! ```
//!
//! Everything is computed by exhaustive enumeration of the joint table;
//! nothing here samples. Internal quantities are in nats; the upper bound and
//! the half-entropy lemma are checked in bits, the base in which the binary
//! equality case `(1/2, 1/2)` holds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest joint table the module will enumerate.
pub const MAX_STATES: u64 = 1_000_000;
/// Tolerance for the inequalities (lower/upper bound, chain rule, DPI).
pub const BOUND_TOL: f64 = 1e-9;
/// Tolerance for exact identities (grouping axiom, half-entropy lemma, nonnegativity).
pub const IDENTITY_TOL: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-12;

fn xlnx_sum(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn check_probabilities(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::Domain(format!(
            "probability {p} is not a finite nonnegative number"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_probabilities(&probs)?;
        Ok(Self { probs })
    }

    /// Uniform(0,1) masses over `m` classes, normalized. With `sparsity > 0`
    /// each class is zeroed with that probability (one class always survives).
    pub fn random<R: Rng>(rng: &mut R, m: usize, sparsity: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::EmptyInput);
        }
        let keep = rng.gen_range(0..m);
        let mut probs: Vec<f64> = (0..m)
            .map(|i| {
                let zero = i != keep && rng.gen::<f64>() < sparsity;
                let mass = rng.gen::<f64>();
                if zero {
                    0.0
                } else {
                    mass.max(f64::MIN_POSITIVE)
                }
            })
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &DiscreteDistribution) -> f64 {
    xlnx_sum(&dist.probs)
}

pub fn entropy_bits(dist: &DiscreteDistribution) -> f64 {
    entropy(dist) / std::f64::consts::LN_2
}

/// `H_b(p) = -p ln p - (1-p) ln(1-p)` in nats.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("binary entropy needs p in [0, 1], got {p}")));
    }
    Ok(xlnx_sum(&[p, 1.0 - p]))
}

/// Exact joint distribution over `(y, h_1, ..., h_T)`.
///
/// The table is row-major with `y` slowest and `h_T` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    y_card: usize,
    h_cards: Vec<usize>,
    table: Vec<f64>,
}

fn state_count(y_card: usize, h_cards: &[usize]) -> Result<u64> {
    let mut states = y_card as u64;
    for &c in h_cards {
        states = states.saturating_mul(c as u64);
    }
    if states > MAX_STATES {
        return Err(Error::Resource {
            states,
            cap: MAX_STATES,
        });
    }
    Ok(states)
}

impl DiscreteJoint {
    pub fn new(y_card: usize, h_cards: Vec<usize>, table: Vec<f64>) -> Result<Self> {
        if y_card < 2 {
            return Err(Error::Domain(format!("|Y| must be at least 2, got {y_card}")));
        }
        if h_cards.is_empty() {
            return Err(Error::InvalidInput(
                "at least one representation step is required".into(),
            ));
        }
        if h_cards.contains(&0) {
            return Err(Error::InvalidInput("representation alphabets must be nonempty".into()));
        }
        let states = state_count(y_card, &h_cards)?;
        if table.len() as u64 != states {
            return Err(Error::Shape(format!(
                "table has {} entries, expected {states}",
                table.len()
            )));
        }
        check_probabilities(&table)?;
        Ok(Self { y_card, h_cards, table })
    }

    /// I.i.d. uniform(0,1) mass over every state, normalized.
    pub fn random<R: Rng>(rng: &mut R, y_card: usize, h_cards: Vec<usize>) -> Result<Self> {
        let states = state_count(y_card, &h_cards)?;
        let mut table: Vec<f64> = (0..states).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= total);
        Self::new(y_card, h_cards, table)
    }

    /// Builds `p(y) p(h_1..h_T | y)` from a prior and one channel per `y`.
    pub fn from_channel(prior: &[f64], h_cards: Vec<usize>, channel: &[Vec<f64>]) -> Result<Self> {
        if channel.len() != prior.len() {
            return Err(Error::Shape("one channel row per y value is required".into()));
        }
        let table = prior
            .iter()
            .zip(channel)
            .flat_map(|(&py, row)| row.iter().map(move |&q| py * q))
            .collect();
        Self::new(prior.len(), h_cards, table)
    }

    pub fn y_card(&self) -> usize {
        self.y_card
    }

    pub fn h_cards(&self) -> &[usize] {
        &self.h_cards
    }

    pub fn steps(&self) -> usize {
        self.h_cards.len()
    }

    /// Number of joint `(h_1..h_T)` configurations.
    pub fn h_configs(&self) -> usize {
        self.h_cards.iter().product()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn prob(&self, y: usize, h_config: usize) -> f64 {
        self.table[y * self.h_configs() + h_config]
    }

    pub fn y_marginal(&self) -> Vec<f64> {
        self.table
            .chunks_exact(self.h_configs())
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn h_marginal(&self) -> Vec<f64> {
        let hc = self.h_configs();
        let mut out = vec![0.0; hc];
        for row in self.table.chunks_exact(hc) {
            out.iter_mut().zip(row).for_each(|(o, p)| *o += p);
        }
        out
    }

    /// The same joint with `(h_1..h_T)` collapsed into one variable.
    pub fn flatten_h(&self) -> Self {
        Self {
            y_card: self.y_card,
            h_cards: vec![self.h_configs()],
            table: self.table.clone(),
        }
    }

    /// Marginal over `(y, h_1..h_j)`, indexed `y * prod(h_cards[..j]) + prefix`.
    fn prefix_marginal(&self, j: usize) -> Vec<f64> {
        let mut marg = self.table.clone();
        for level in (j..self.steps()).rev() {
            let c = self.h_cards[level];
            marg = marg.chunks_exact(c).map(|g| g.iter().sum()).collect();
        }
        marg
    }
}

/// `H(y)` in nats.
pub fn y_entropy(joint: &DiscreteJoint) -> f64 {
    xlnx_sum(&joint.y_marginal())
}

/// `H(y | h_1..h_T)` in nats.
pub fn conditional_entropy(joint: &DiscreteJoint) -> f64 {
    xlnx_sum(&joint.table) - xlnx_sum(&joint.h_marginal())
}

/// `I(y; h_1..h_T)` in nats, summed directly over the joint table.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let py = joint.y_marginal();
    let ph = joint.h_marginal();
    let hc = joint.h_configs();
    let mut acc = 0.0;
    for (y, row) in joint.table.chunks_exact(hc).enumerate() {
        for (h, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p * (p / (py[y] * ph[h])).ln();
            }
        }
    }
    acc
}

/// The chain-rule terms `I(y; h_j | h_<j)` for `j = 1..T`, in nats.
pub fn chain_mi_terms(joint: &DiscreteJoint) -> Vec<f64> {
    let mut terms = Vec::with_capacity(joint.steps());
    let mut prev = joint.prefix_marginal(0);
    for j in 1..=joint.steps() {
        let cur = joint.prefix_marginal(j);
        let c = joint.h_cards[j - 1];
        let prefixes = prev.len() / joint.y_card;
        // p(h_<j) and p(h_<j, h_j), marginalized over y.
        let mut p_prefix = vec![0.0; prefixes];
        let mut p_prefix_h = vec![0.0; prefixes * c];
        for y in 0..joint.y_card {
            for p in 0..prefixes {
                p_prefix[p] += prev[y * prefixes + p];
                for h in 0..c {
                    p_prefix_h[p * c + h] += cur[(y * prefixes + p) * c + h];
                }
            }
        }
        let mut term = 0.0;
        for y in 0..joint.y_card {
            for p in 0..prefixes {
                let p_y_prefix = prev[y * prefixes + p];
                for h in 0..c {
                    let p_full = cur[(y * prefixes + p) * c + h];
                    if p_full > 0.0 {
                        term += p_full * ((p_full * p_prefix[p]) / (p_y_prefix * p_prefix_h[p * c + h])).ln();
                    }
                }
            }
        }
        terms.push(term);
        prev = cur;
    }
    terms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    BayesOptimal,
    Explicit,
}

/// A deterministic map from every `(h_1..h_T)` configuration to a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    map: Vec<usize>,
    kind: PredictorKind,
}

impl Predictor {
    /// Posterior argmax per configuration, ties to the smallest label.
    pub fn bayes_optimal(joint: &DiscreteJoint) -> Self {
        let hc = joint.h_configs();
        let map = (0..hc)
            .map(|h| {
                (0..joint.y_card).fold(0, |best, y| {
                    if joint.prob(y, h) > joint.prob(best, h) {
                        y
                    } else {
                        best
                    }
                })
            })
            .collect();
        Self {
            map,
            kind: PredictorKind::BayesOptimal,
        }
    }

    pub fn explicit(joint: &DiscreteJoint, map: Vec<usize>) -> Result<Self> {
        if map.len() != joint.h_configs() {
            return Err(Error::Config(format!(
                "predictor covers {} of {} configurations",
                map.len(),
                joint.h_configs()
            )));
        }
        if let Some(bad) = map.iter().find(|&&y| y >= joint.y_card) {
            return Err(Error::Config(format!(
                "predicted label {bad} outside |Y| = {}",
                joint.y_card
            )));
        }
        Ok(Self {
            map,
            kind: PredictorKind::Explicit,
        })
    }

    pub fn random<R: Rng>(rng: &mut R, joint: &DiscreteJoint) -> Self {
        let map = (0..joint.h_configs()).map(|_| rng.gen_range(0..joint.y_card)).collect();
        Self {
            map,
            kind: PredictorKind::Explicit,
        }
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    fn check_against(&self, joint: &DiscreteJoint) -> Result<()> {
        if self.map.len() != joint.h_configs() || self.map.iter().any(|&y| y >= joint.y_card) {
            return Err(Error::Config("predictor does not match the joint".into()));
        }
        Ok(())
    }
}

/// `Pr(f(h) != y)` by enumeration.
pub fn predictor_error(joint: &DiscreteJoint, f: &Predictor) -> Result<f64> {
    f.check_against(joint)?;
    let hc = joint.h_configs();
    let mut err = 0.0;
    for y in 0..joint.y_card {
        for h in 0..hc {
            if f.map[h] != y {
                err += joint.prob(y, h);
            }
        }
    }
    Ok(err)
}

/// Minimal achievable error `1 - sum_h max_y p(y, h)`.
pub fn bayes_error(joint: &DiscreteJoint) -> f64 {
    predictor_error(joint, &Predictor::bayes_optimal(joint)).expect("bayes rule matches its joint")
}

/// `I(y; f(h))` in nats.
pub fn predictor_mutual_information(joint: &DiscreteJoint, f: &Predictor) -> Result<f64> {
    f.check_against(joint)?;
    let k = joint.y_card;
    let hc = joint.h_configs();
    let mut q = vec![0.0; k * k];
    for y in 0..k {
        for h in 0..hc {
            q[y * k + f.map[h]] += joint.prob(y, h);
        }
    }
    let py: Vec<f64> = q.chunks_exact(k).map(|r| r.iter().sum()).collect();
    let mut pyhat = vec![0.0; k];
    for row in q.chunks_exact(k) {
        pyhat.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let mut acc = 0.0;
    for y in 0..k {
        for yh in 0..k {
            let p = q[y * k + yh];
            if p > 0.0 {
                acc += p * (p / (py[y] * pyhat[yh])).ln();
            }
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FanoBound {
    Bound {
        value: f64,
        numerator: f64,
    },
    /// `|Y| = 2`: `log(|Y| - 1) = 0`, so only the numerator is reported.
    Inapplicable {
        numerator: f64,
    },
}

impl FanoBound {
    pub fn value(&self) -> Option<f64> {
        match self {
            FanoBound::Bound { value, .. } => Some(*value),
            FanoBound::Inapplicable { .. } => None,
        }
    }

    pub fn numerator(&self) -> f64 {
        match self {
            FanoBound::Bound { numerator, .. } | FanoBound::Inapplicable { numerator } => *numerator,
        }
    }
}

/// Lower bound on the error of any predictor with error rate `p_e`.
pub fn fano_lower_bound(joint: &DiscreteJoint, p_e: f64) -> Result<FanoBound> {
    if joint.y_card < 2 {
        return Err(Error::Domain("|Y| must be at least 2".into()));
    }
    let cumulative: f64 = chain_mi_terms(joint).iter().sum();
    let numerator = y_entropy(joint) - cumulative - binary_entropy(p_e)?;
    if joint.y_card == 2 {
        return Ok(FanoBound::Inapplicable { numerator });
    }
    Ok(FanoBound::Bound {
        value: numerator / ((joint.y_card - 1) as f64).ln(),
        numerator,
    })
}

/// `1/2 [H(y) - sum_j I(y; h_j | h_<j)]` in both bases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    pub nats: f64,
    pub bits: f64,
}

pub fn error_upper_bound(joint: &DiscreteJoint) -> UpperBound {
    let cumulative: f64 = chain_mi_terms(joint).iter().sum();
    let nats = 0.5 * (y_entropy(joint) - cumulative);
    UpperBound {
        nats,
        bits: nats / std::f64::consts::LN_2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "residual", rename_all = "snake_case")]
pub enum GroupingCheck {
    Residual(f64),
    /// The merged pair carries no mass.
    Skipped,
}

/// Residual of the grouping axiom with the last two classes merged.
pub fn grouping_identity_check(dist: &DiscreteDistribution) -> Result<GroupingCheck> {
    let p = dist.probs();
    if p.len() < 2 {
        return Err(Error::Domain("grouping needs at least two classes".into()));
    }
    let (head, pair) = p.split_at(p.len() - 2);
    let merged = pair[0] + pair[1];
    if merged <= 0.0 {
        return Ok(GroupingCheck::Skipped);
    }
    let mut coarse = head.to_vec();
    coarse.push(merged);
    let within = xlnx_sum(&[pair[0] / merged, pair[1] / merged]);
    Ok(GroupingCheck::Residual(
        xlnx_sum(p) - (xlnx_sum(&coarse) + merged * within),
    ))
}

/// `1/2 H(p) - (1 - max_i p_i)`, entropy in bits. Nonnegative by the lemma.
pub fn half_entropy_lemma_check(dist: &DiscreteDistribution) -> f64 {
    let max = dist.probs().iter().cloned().fold(0.0, f64::max);
    0.5 * entropy_bits(dist) - (1.0 - max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsCheckParams {
    pub trials: usize,
    pub seed: u64,
    pub y_card: (usize, usize),
    pub steps: (usize, usize),
    pub h_card: (usize, usize),
    pub predictors_per_trial: usize,
    /// Checks `bayes_error <= 0` instead of the real upper bound, which must fail.
    pub negative_control: bool,
}

impl Default for BoundsCheckParams {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 42,
            y_card: (3, 5),
            steps: (1, 3),
            h_card: (2, 4),
            predictors_per_trial: 50,
            negative_control: false,
        }
    }
}

/// Count and worst slack for one family of checks. Slack is `rhs - lhs` of
/// the checked inequality, so negative slack beyond tolerance is a violation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckTally {
    pub checks: usize,
    pub violations: usize,
    pub worst_slack: Option<f64>,
}

impl CheckTally {
    // NaN slack counts as a violation
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn record(&mut self, slack: f64, tol: f64) {
        self.checks += 1;
        if !(slack >= -tol) {
            self.violations += 1;
        }
        self.worst_slack = Some(match self.worst_slack {
            Some(w) => w.min(slack),
            None => slack,
        });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub params: Option<BoundsCheckParams>,
    pub trials: usize,
    /// Lower bound against every predictor (Bayes and random), `|Y| >= 3`.
    pub fano: CheckTally,
    pub fano_inapplicable: usize,
    /// Bayes error against the upper bound in bits.
    pub upper: CheckTally,
    /// `-|sum_j I_j - I(y; h_1..h_T)|`.
    pub chain_rule: CheckTally,
    /// `I(y; h) - I(y; f(h))` for every predictor.
    pub data_processing: CheckTally,
    /// Bayes error never exceeds a random predictor's error.
    pub bayes_minimality: CheckTally,
    /// `-|grouping residual|` on one random distribution per trial.
    pub grouping: CheckTally,
    pub grouping_skipped: usize,
    /// Half-entropy lemma slack on one random distribution per trial.
    pub half_entropy: CheckTally,
    pub violations: usize,
    pub passed: bool,
}

fn draw(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

fn check_range(name: &str, range: (usize, usize), min: usize) -> Result<()> {
    if range.0 > range.1 || range.0 < min {
        return Err(Error::Config(format!(
            "{name} range {}..{} is invalid (lower end must be at least {min})",
            range.0, range.1
        )));
    }
    Ok(())
}

/// Runs the full bound battery over `trials` random joints. Each trial uses
/// its own ChaCha stream derived from `seed`, so results do not depend on
/// evaluation order.
pub fn verify_bounds_random(params: &BoundsCheckParams) -> Result<BoundsReport> {
    check_range("y-card", params.y_card, 2)?;
    check_range("steps", params.steps, 1)?;
    check_range("h-card", params.h_card, 1)?;
    state_count(params.y_card.1, &vec![params.h_card.1; params.steps.1])?;

    let mut report = BoundsReport {
        params: Some(params.clone()),
        trials: params.trials,
        ..Default::default()
    };
    for trial in 0..params.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(trial as u64);
        let y_card = draw(&mut rng, params.y_card);
        let steps = draw(&mut rng, params.steps);
        let h_cards: Vec<usize> = (0..steps).map(|_| draw(&mut rng, params.h_card)).collect();
        let joint = DiscreteJoint::random(&mut rng, y_card, h_cards)?;

        let terms = chain_mi_terms(&joint);
        let cumulative: f64 = terms.iter().sum();
        let total_mi = mutual_information(&joint);
        report.chain_rule.record(-(cumulative - total_mi).abs(), BOUND_TOL);

        let bayes = Predictor::bayes_optimal(&joint);
        let bayes_pe = predictor_error(&joint, &bayes)?;
        let upper = if params.negative_control {
            0.0
        } else {
            error_upper_bound(&joint).bits
        };
        report.upper.record(upper - bayes_pe, BOUND_TOL);

        let mut predictors = vec![bayes];
        predictors.extend((0..params.predictors_per_trial).map(|_| Predictor::random(&mut rng, &joint)));
        for f in &predictors {
            let pe = predictor_error(&joint, f)?;
            match fano_lower_bound(&joint, pe)? {
                FanoBound::Bound { value, .. } => report.fano.record(pe - value, BOUND_TOL),
                FanoBound::Inapplicable { .. } => report.fano_inapplicable += 1,
            }
            let mi_f = predictor_mutual_information(&joint, f)?;
            report.data_processing.record(total_mi - mi_f, BOUND_TOL);
            if f.kind() == PredictorKind::Explicit {
                report.bayes_minimality.record(pe - bayes_pe, BOUND_TOL);
            }
        }

        let m = rng.gen_range(2..=6);
        let dist = DiscreteDistribution::random(&mut rng, m, 0.2)?;
        match grouping_identity_check(&dist)? {
            GroupingCheck::Residual(r) => report.grouping.record(-r.abs(), IDENTITY_TOL),
            GroupingCheck::Skipped => report.grouping_skipped += 1,
        }
        report
            .half_entropy
            .record(half_entropy_lemma_check(&dist), IDENTITY_TOL);
    }
    report.violations = [
        &report.fano,
        &report.upper,
        &report.chain_rule,
        &report.data_processing,
        &report.bayes_minimality,
        &report.grouping,
        &report.half_entropy,
    ]
    .iter()
    .map(|t| t.violations)
    .sum();
    report.passed = report.violations == 0;
    Ok(report)
}
