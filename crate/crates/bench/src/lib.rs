//! Shared fixtures for the criterion benches.

use specrl_core::grpo::TaskSpec;
use specrl_core::tinylm::{DraftConfig, DraftParams, ModelConfig, ModelParams};

/// Default-shaped target and a draft for it.
pub fn models() -> (ModelParams, DraftParams) {
    let t = ModelParams::init(ModelConfig::default()).unwrap();
    let d = DraftParams::init(DraftConfig::for_target(t.config(), 1)).unwrap();
    (t, d)
}

/// `n` fixed addition prompts.
pub fn prompts(n: usize) -> Vec<Vec<u32>> {
    let task = TaskSpec::default();
    (0..n as u64)
        .map(|i| {
            task.encode_prompt(specrl_core::grpo::Problem {
                a: i * 37 % 9999,
                b: i * 91 % 999,
            })
        })
        .collect()
}
