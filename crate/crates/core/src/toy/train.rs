use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ToyConfig;
use super::grad::{loss_and_grad, TrainExample};
use super::model::ToyTransformer;
use super::task::TaskSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Batch loss before the first update; `None` when `steps == 0`.
    pub initial_loss: Option<f64>,
    /// Batch loss at the last update.
    pub final_loss: Option<f64>,
    /// Batch loss every `LOG_EVERY` steps.
    pub loss_curve: Vec<(usize, f64)>,
}

const LOG_EVERY: usize = 50;

/// Loss is taken on every position from the last prompt token on.
pub fn training_example(prompt_len: usize, sequence: Vec<u32>) -> TrainExample {
    TrainExample {
        tokens: sequence,
        loss_from: prompt_len.saturating_sub(1),
    }
}

/// SGD with momentum on freshly sampled task instances. Deterministic given
/// `config.seed` (initialization) and `train.seed` (data).
pub fn train_toy(config: &ToyConfig, task: &TaskSpec, train: &TrainConfig) -> Result<(ToyTransformer, TrainReport)> {
    let mut model = ToyTransformer::new(config.clone())?;
    task.validate()?;
    train.validate()?;
    if task.max_sequence_len() > config.context {
        return Err(Error::Config(format!(
            "task sequences reach {} tokens but the context is {}",
            task.max_sequence_len(),
            config.context
        )));
    }
    let mut report = TrainReport {
        steps: train.steps,
        initial_loss: None,
        final_loss: None,
        loss_curve: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut velocity = vec![0.0; model.param_count()];
    for step in 0..train.steps {
        let batch: Vec<TrainExample> = (0..train.batch_size)
            .map(|_| {
                let inst = task.sample(&mut rng);
                training_example(inst.prompt.len(), inst.sequence())
            })
            .collect();
        let (loss, mut grad) = loss_and_grad(&model, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { step, loss });
        }
        if step == 0 {
            report.initial_loss = Some(loss);
        }
        if step % LOG_EVERY == 0 || step + 1 == train.steps {
            report.loss_curve.push((step, loss));
        }
        report.final_loss = Some(loss);
        if let Some(clip) = train.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
            *v = train.momentum * *v + g;
            *p -= train.lr * *v;
        }
    }
    Ok((model, report))
}
