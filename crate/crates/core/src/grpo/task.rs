//! Synthetic addition task with worked, digit-by-digit responses.
//!
//! Prompt: `BOS a₃a₂a₁a₀ + b₃b₂b₁b₀ =` with zero-padded operands.
//! Response: for each column from least significant, the tokens
//! `aᵢ bᵢ sᵢ cᵢ` (operand digits, sum digit, carry out), then `=`, the
//! answer most significant digit first, and `EOS`. Longer operands give
//! longer responses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const BOS: u32 = 2;
pub const PLUS: u32 = 3;
pub const EQ: u32 = 4;
pub const DIGIT0: u32 = 6;
/// Smallest vocabulary that holds every task token.
pub const TASK_VOCAB: usize = 16;

pub fn digit_token(d: u32) -> u32 {
    DIGIT0 + d
}

pub fn token_digit(t: u32) -> Option<u32> {
    (DIGIT0..DIGIT0 + 10).contains(&t).then(|| t - DIGIT0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    /// Operands have between `min_digits` and `max_digits` digits.
    pub min_digits: u32,
    pub max_digits: u32,
    /// Operand digit counts are drawn with weight `digit_decay^(n − min_digits)`;
    /// below 1 most problems are short and a few are long.
    pub digit_decay: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            min_digits: 1,
            max_digits: 4,
            digit_decay: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub a: u64,
    pub b: u64,
}

fn digits_lsb(mut x: u64) -> Vec<u32> {
    let mut out = Vec::new();
    loop {
        out.push((x % 10) as u32);
        x /= 10;
        if x == 0 {
            return out;
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_digits == 0 || self.min_digits > self.max_digits || self.max_digits > 9 {
            return Err(Error::InvalidConfig(format!(
                "digit range {}..={} must lie in 1..=9",
                self.min_digits, self.max_digits
            )));
        }
        if !(self.digit_decay > 0.0 && self.digit_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "digit_decay must be positive, got {}",
                self.digit_decay
            )));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        3 + 2 * self.max_digits as usize
    }

    /// Longest possible response, `EOS` included.
    pub fn max_response_len(&self) -> usize {
        let m = self.max_digits as usize;
        4 * m + 1 + (m + 1) + 1
    }

    pub fn sample_problem<R: Rng>(&self, rng: &mut R) -> Problem {
        let weights: Vec<f64> = (0..=self.max_digits - self.min_digits)
            .map(|i| self.digit_decay.powi(i as i32))
            .collect();
        let total: f64 = weights.iter().sum();
        let operand = |rng: &mut R| {
            let mut u = rng.random::<f64>() * total;
            let mut n = self.max_digits;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    n = self.min_digits + i as u32;
                    break;
                }
                u -= w;
            }
            let lo = if n == 1 { 0 } else { 10u64.pow(n - 1) };
            rng.random_range(lo..10u64.pow(n))
        };
        let a = operand(rng);
        let b = operand(rng);
        Problem { a, b }
    }

    pub fn encode_prompt(&self, p: Problem) -> Vec<u32> {
        let mut out = vec![BOS];
        for x in [p.a, p.b] {
            let mut ds = digits_lsb(x);
            ds.resize(self.max_digits as usize, 0);
            out.extend(ds.iter().rev().map(|&d| digit_token(d)));
            out.push(if out.len() == 1 + self.max_digits as usize {
                PLUS
            } else {
                EQ
            });
        }
        out
    }

    /// Reads the operands back from a prompt.
    pub fn decode_prompt(&self, prompt: &[u32]) -> Result<Problem> {
        let m = self.max_digits as usize;
        let bad = || Error::BadPrompt(format!("{prompt:?}"));
        if prompt.len() != self.prompt_len()
            || prompt[0] != BOS
            || prompt[1 + m] != PLUS
            || prompt[2 + 2 * m] != EQ
        {
            return Err(bad());
        }
        let num = |toks: &[u32]| -> Result<u64> {
            toks.iter().try_fold(0u64, |acc, &t| {
                token_digit(t).map(|d| acc * 10 + d as u64).ok_or_else(bad)
            })
        };
        Ok(Problem {
            a: num(&prompt[1..1 + m])?,
            b: num(&prompt[2 + m..2 + 2 * m])?,
        })
    }

    /// The worked response the task expects, ending in `EOS`.
    pub fn reference_response(&self, p: Problem) -> Vec<u32> {
        let (da, db) = (digits_lsb(p.a), digits_lsb(p.b));
        let cols = da.len().max(db.len());
        let mut out = Vec::with_capacity(4 * cols + 8);
        let mut carry = 0;
        for i in 0..cols {
            let (x, y) = (*da.get(i).unwrap_or(&0), *db.get(i).unwrap_or(&0));
            let s = x + y + carry;
            carry = s / 10;
            out.extend([
                digit_token(x),
                digit_token(y),
                digit_token(s % 10),
                digit_token(carry),
            ]);
        }
        out.push(EQ);
        out.extend(digits_lsb(p.a + p.b).iter().rev().map(|&d| digit_token(d)));
        out.push(EOS);
        out
    }

    /// 1.0 when the response ends with `=` followed by exactly the answer
    /// (optionally then `EOS`), 0.0 otherwise. Never fails on malformed text.
    pub fn reward(&self, prompt: &[u32], response: &[u32]) -> f64 {
        let Ok(p) = self.decode_prompt(prompt) else {
            return 0.0;
        };
        let body = match response.last() {
            Some(&EOS) => &response[..response.len() - 1],
            _ => response,
        };
        let Some(eq) = body.iter().rposition(|&t| t == EQ) else {
            return 0.0;
        };
        let want: Vec<u32> = digits_lsb(p.a + p.b)
            .iter()
            .rev()
            .map(|&d| digit_token(d))
            .collect();
        if body[eq + 1..] == want[..] {
            1.0
        } else {
            0.0
        }
    }
}

/// Rewards for a group of responses to one prompt.
pub fn compute_rewards(task: &TaskSpec, prompt: &[u32], responses: &[Vec<u32>]) -> Vec<f64> {
    responses.iter().map(|r| task.reward(prompt, r)).collect()
}
