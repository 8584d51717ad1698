//! Greedy decoding with token suppression, representation recycling (RR) and
//! thinking-token test-time scaling (TTTS).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::model::ToyTransformer;
use super::task::{END, THINK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub suppress: BTreeSet<u32>,
    pub rr_enabled: bool,
    pub rr_layer: usize,
    /// RR fires on the step after one of these is generated.
    pub rr_triggers: BTreeSet<u32>,
    pub ttts_enabled: bool,
    pub ttts_token: u32,
    /// Maximum number of generated tokens.
    pub token_budget: usize,
    /// Halting token; `None` generates until the budget or the context is exhausted.
    pub end_token: Option<u32>,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            suppress: BTreeSet::new(),
            rr_enabled: false,
            rr_layer: 0,
            rr_triggers: BTreeSet::from([THINK]),
            ttts_enabled: false,
            ttts_token: THINK,
            token_budget: 32,
            end_token: Some(END),
        }
    }
}

impl InterventionConfig {
    pub fn greedy(token_budget: usize) -> Self {
        Self {
            token_budget,
            ..Default::default()
        }
    }

    pub fn validate(&self, model: &ToyTransformer) -> Result<()> {
        let cfg = model.config();
        let v = cfg.vocab_size as u32;
        if self.token_budget == 0 {
            return Err(Error::Config("token budget must be at least 1".into()));
        }
        if self.rr_enabled {
            model.check_layer(self.rr_layer)?;
        }
        let ids = self
            .suppress
            .iter()
            .chain(&self.rr_triggers)
            .chain(self.end_token.iter());
        if let Some(bad) = ids.chain(std::iter::once(&self.ttts_token)).find(|&&t| t >= v) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary of {v}")));
        }
        if self.suppress.len() >= cfg.vocab_size {
            return Err(Error::Config("suppression covers the whole vocabulary".into()));
        }
        if self.ttts_enabled && self.suppress.contains(&self.ttts_token) {
            return Err(Error::Config(format!("TTTS token {} is suppressed", self.ttts_token)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    EndToken,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSession {
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    /// Last-layer, final-position representation that produced each generated token.
    pub representations: Vec<Vec<f64>>,
    /// Steps whose token was forced by TTTS rather than chosen.
    pub forced: Vec<usize>,
    /// Steps computed with a recycled forward pass.
    pub recycled: Vec<usize>,
    pub token_budget: usize,
    pub stop: StopReason,
}

impl GenerationSession {
    pub fn len(&self) -> usize {
        self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generated.is_empty()
    }

    pub fn remaining_budget(&self) -> usize {
        self.token_budget - self.generated.len()
    }
}

/// Sets suppressed logits to `-inf`, leaving the rest untouched.
pub fn apply_suppression(logits: &[f64], suppress: &BTreeSet<u32>) -> Result<Vec<f64>> {
    if let Some(bad) = suppress.iter().find(|&&t| t as usize >= logits.len()) {
        return Err(Error::Config(format!(
            "suppressed id {bad} outside vocabulary of {}",
            logits.len()
        )));
    }
    if suppress.len() >= logits.len() {
        return Err(Error::Config("suppression covers the whole vocabulary".into()));
    }
    let mut out = logits.to_vec();
    for &t in suppress {
        out[t as usize] = f64::NEG_INFINITY;
    }
    Ok(out)
}

/// Max-shifted softmax; `-inf` entries get probability exactly 0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy token and distribution that the output head assigns to `h`.
pub fn decode_representation(model: &ToyTransformer, h: &[f64]) -> Result<(u32, Vec<f64>)> {
    if h.len() != model.config().model_dim {
        return Err(Error::Shape(format!(
            "representation has {} entries, model dimension is {}",
            h.len(),
            model.config().model_dim
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("representation has non-finite entries".into()));
    }
    let p = softmax(&model.head_logits(h));
    Ok((argmax(&p) as u32, p))
}

pub fn generate(model: &ToyTransformer, prompt: &[u32], config: &InterventionConfig) -> Result<GenerationSession> {
    config.validate(model)?;
    model.check_tokens(prompt)?;
    let context = model.config().context;
    let mut tokens = prompt.to_vec();
    let mut session = GenerationSession {
        prompt: prompt.to_vec(),
        generated: Vec::new(),
        representations: Vec::new(),
        forced: Vec::new(),
        recycled: Vec::new(),
        token_budget: config.token_budget,
        stop: StopReason::Budget,
    };
    loop {
        if session.generated.len() >= config.token_budget {
            session.stop = StopReason::Budget;
            break;
        }
        if tokens.len() >= context {
            session.stop = StopReason::Context;
            break;
        }
        let step = session.generated.len();
        let recycle = config.rr_enabled && session.generated.last().is_some_and(|t| config.rr_triggers.contains(t));
        let out = if recycle {
            session.recycled.push(step);
            model.recycle_forward(&tokens, config.rr_layer)?
        } else {
            model.forward(&tokens)?
        };
        let logits = apply_suppression(out.last_logits(), &config.suppress)?;
        let mut next = argmax(&logits) as u32;
        let halts = config.end_token == Some(next);
        // a halt with at least two budget slots left becomes a forced thinking token
        if halts && config.ttts_enabled && step + 1 < config.token_budget {
            next = config.ttts_token;
            session.forced.push(step);
        }
        session.representations.push(out.last_hidden().to_vec());
        session.generated.push(next);
        tokens.push(next);
        if config.end_token == Some(next) {
            session.stop = StopReason::EndToken;
            break;
        }
    }
    Ok(session)
}

/// One fresh TTTS run per budget in the ascending `budgets`.
pub fn ttts_generate(
    model: &ToyTransformer,
    prompt: &[u32],
    config: &InterventionConfig,
    budgets: &[usize],
) -> Result<Vec<GenerationSession>> {
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("budget schedule must be ascending".into()));
    }
    budgets
        .iter()
        .map(|&b| {
            let cfg = InterventionConfig {
                ttts_enabled: true,
                token_budget: b,
                ..config.clone()
            };
            generate(model, prompt, &cfg)
        })
        .collect()
}
