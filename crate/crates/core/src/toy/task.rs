//! Chained addition mod 10.
//!
//! A prompt of `k` digits `d_1..d_k` is completed by the running sums
//! `s_j = s_{j-1} + d_j (mod 10)`, each prefixed by `THINK`, then the answer:
//!
//! ```text
//! 3 4 THINK 7 ANS 7 END
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THINK: u32 = 10;
pub const ANS: u32 = 11;
pub const END: u32 = 12;
pub const PAD: u32 = 13;
pub const VOCAB_SIZE: usize = 14;

/// Longest prompt accepted by the task.
pub const MAX_DIGITS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    ChainAdd,
}

/// Instance distribution. The prompt carries no terminator, so a model can
/// only tell where it ends when `min_digits == max_digits`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub min_digits: usize,
    pub max_digits: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::ChainAdd,
            min_digits: 4,
            max_digits: 4,
        }
    }
}

pub fn make_task(kind: &str) -> Result<TaskSpec> {
    match kind {
        "chain-add" => Ok(TaskSpec::default()),
        other => Err(Error::Config(format!("unknown task {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub digits: Vec<u32>,
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
    pub answer: u32,
}

impl TaskInstance {
    /// Prompt followed by completion.
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.completion);
        s
    }

    /// Tokens whose representations stand for the gold answer.
    pub fn gold_tokens(&self) -> [u32; 2] {
        [ANS, self.answer]
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_digits == 0 || self.min_digits > self.max_digits || self.max_digits > MAX_DIGITS {
            return Err(Error::Config(format!(
                "digit range {}..={} must lie in 1..={MAX_DIGITS}",
                self.min_digits, self.max_digits
            )));
        }
        Ok(())
    }

    /// Longest full sequence the spec can produce.
    pub fn max_sequence_len(&self) -> usize {
        3 * self.max_digits + 1
    }

    pub fn instance(&self, digits: &[u32]) -> Result<TaskInstance> {
        if digits.is_empty() || digits.len() > MAX_DIGITS {
            return Err(Error::InvalidInput(format!(
                "chain needs 1..={MAX_DIGITS} digits, got {}",
                digits.len()
            )));
        }
        if let Some(bad) = digits.iter().find(|&&d| d > 9) {
            return Err(Error::InvalidInput(format!("{bad} is not a digit")));
        }
        let mut completion = Vec::with_capacity(2 * digits.len() + 1);
        let mut sum = digits[0];
        for &d in &digits[1..] {
            sum = (sum + d) % 10;
            completion.push(THINK);
            completion.push(sum);
        }
        completion.extend([ANS, sum, END]);
        Ok(TaskInstance {
            digits: digits.to_vec(),
            prompt: digits.to_vec(),
            completion,
            answer: sum,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TaskInstance {
        let k = rng.gen_range(self.min_digits..=self.max_digits);
        let digits: Vec<u32> = (0..k).map(|_| rng.gen_range(0..10)).collect();
        self.instance(&digits).expect("sampled digits are valid")
    }

    /// `count` instances drawn from `seed`.
    pub fn instances(&self, count: usize, seed: u64) -> Vec<TaskInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}

/// The digit following the last `ANS` in `generated`, if any.
pub fn extract_answer(generated: &[u32]) -> Option<u32> {
    let pos = generated.iter().rposition(|&t| t == ANS)?;
    generated.get(pos + 1).copied().filter(|&t| t <= 9)
}

pub fn token_name(id: u32) -> String {
    match id {
        0..=9 => id.to_string(),
        THINK => "THINK".into(),
        ANS => "ANS".into(),
        END => "END".into(),
        PAD => "PAD".into(),
        other => format!("<{other}>"),
    }
}

/// Space-separated digits and marker names, e.g. `"3 4 THINK 7"`.
pub fn parse_tokens(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| match w {
            "THINK" => Ok(THINK),
            "ANS" => Ok(ANS),
            "END" => Ok(END),
            "PAD" => Ok(PAD),
            _ => match w.parse::<u32>() {
                Ok(d) if d <= 9 => Ok(d),
                _ => Err(Error::InvalidInput(format!("unknown token {w:?}"))),
            },
        })
        .collect()
}

pub fn render_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}
