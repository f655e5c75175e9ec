//! Concurrency-aware speculation settings and the dynamic-batch engine.

mod engine;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use engine::{
    draft_cost_model, generate_dynamic_batch, BatchState, DecodeMode, GenConfig, GenStats,
    SeqState, StepRecord,
};

/// Per-step speculation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub n_verify: usize,
    pub k_draft: usize,
    pub l_draft: usize,
    pub alpha: f64,
    pub k_max: usize,
    pub l_max: usize,
    pub c_peak: usize,
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_verify >= 1
            && self.k_draft < self.n_verify
            && self.k_draft <= self.k_max
            && self.l_draft <= self.l_max
            && self.alpha > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "inconsistent spec config {self:?}"
            )));
        }
        Ok(())
    }

    /// Plain autoregressive decoding: verify the root only.
    pub fn vanilla(c_peak: usize) -> Self {
        Self {
            n_verify: 1,
            k_draft: 0,
            l_draft: 0,
            alpha: SchedParams::default().alpha,
            k_max: 0,
            l_max: 0,
            c_peak,
        }
    }
}

/// Inputs to [`plan_step`] that stay fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedParams {
    pub alpha: f64,
    pub k_max: usize,
    pub l_max: usize,
    pub c_peak: usize,
}

impl Default for SchedParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            k_max: 10,
            l_max: 6,
            c_peak: 32,
        }
    }
}

impl SchedParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.c_peak == 0 || self.l_max == 0 {
            return Err(Error::InvalidConfig(format!(
                "alpha > 0, c_peak >= 1 and l_max >= 1 required, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn plan(&self, b_cur: usize) -> SpecConfig {
        plan_step(self.c_peak, b_cur, self.alpha, self.k_max, self.l_max)
    }
}

/// `max(1, ⌊c_peak / b⌋)`.
pub fn compute_n_verify(c_peak: usize, b: usize) -> usize {
    (c_peak / b.max(1)).max(1)
}

/// `min(n_verify − 1, k_max)`.
pub fn compute_k_draft(n_verify: usize, k_max: usize) -> usize {
    n_verify.saturating_sub(1).min(k_max)
}

/// Largest `j` with `alpha · 2^j ≤ n`, or `None` when `alpha > n`.
fn floor_log2_ratio(n: usize, alpha: f64) -> Option<usize> {
    let n = n as f64;
    if alpha > n {
        return None;
    }
    let mut j = 0;
    let mut v = alpha;
    while v * 2.0 <= n {
        v *= 2.0;
        j += 1;
    }
    Some(j)
}

/// `min(⌊log2(n_verify / alpha)⌋, l_max)`, at least 1 when drafting and 0
/// when `k_draft = 0`.
pub fn compute_l_draft(n_verify: usize, alpha: f64, l_max: usize, k_draft: usize) -> usize {
    if k_draft == 0 {
        return 0;
    }
    floor_log2_ratio(n_verify, alpha)
        .unwrap_or(0)
        .min(l_max)
        .max(1)
}

/// Composes the three rules for the current number of active sequences.
pub fn plan_step(
    c_peak: usize,
    b_cur: usize,
    alpha: f64,
    k_max: usize,
    l_max: usize,
) -> SpecConfig {
    let n_verify = compute_n_verify(c_peak, b_cur);
    let k_draft = compute_k_draft(n_verify, k_max);
    let l_draft = compute_l_draft(n_verify, alpha, l_max, k_draft);
    SpecConfig {
        n_verify,
        k_draft,
        l_draft,
        alpha,
        k_max,
        l_max,
        c_peak,
    }
}
