//! Supervised warm start of the target on reference responses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::TaskSpec;
use crate::error::Result;
use crate::optim::{AdamW, AdamWConfig};
use crate::tinylm::{weighted_nll_grad, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 16,
            lr: 3e-3,
            seed: 11,
        }
    }
}

/// Teacher-forced training on `prompt ++ reference_response`, with loss on
/// response tokens only. Returns the mean per-token loss of every step.
pub fn sft_warm_start(
    params: &mut ModelParams,
    task: &TaskSpec,
    cfg: &SftConfig,
) -> Result<Vec<f64>> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        params.param_count(),
    );
    let mut grad = vec![0.0f32; params.param_count()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let plen = task.prompt_len();
    for _ in 0..cfg.steps {
        let seqs: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| {
                let p = task.sample_problem(&mut rng);
                let mut s = task.encode_prompt(p);
                s.extend(task.reference_response(p));
                s
            })
            .collect();
        let total: usize = seqs.iter().map(|s| s.len() - plen).sum();
        let w = 1.0 / total as f32;
        grad.fill(0.0);
        let mut loss = 0.0;
        for s in &seqs {
            let n = s.len() - 1;
            let weights: Vec<f32> = (0..n)
                .map(|i| if i + 1 >= plen { w } else { 0.0 })
                .collect();
            loss += weighted_nll_grad(params, &s[..n], &s[1..], &weights, &mut grad)?.0;
        }
        opt.step(params.as_mut_slice(), &grad);
        losses.push(loss);
    }
    Ok(losses)
}
