//! Group-relative policy optimization on the synthetic addition task, with
//! online draft learning from the hidden states cached during generation.

pub mod sft;
pub mod task;
mod train;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::scheduler::SeqState;
use crate::tinylm::{
    draft_loss_grad, weighted_nll_grad, DraftLoss, DraftParams, DraftRows, LmHead, ModelParams,
};

pub use task::{compute_rewards, Problem, TaskSpec};
pub use train::{
    pretrain_draft, rollout_digest, train_loop, DraftSection, GrpoParams, IterMetrics, LengthStats,
    ModeParams, PretrainConfig, SchedSection, TrainConfig, Trainer,
};

/// Default threshold below which a group's reward spread counts as zero.
pub const EPS_VAR: f64 = 1e-8;

/// `(r − mean) / std` with the population standard deviation, or `None`
/// when the group carries no signal (`std < eps_var`).
pub fn standardize_advantages(rewards: &[f64], eps_var: f64) -> Result<Option<Vec<f64>>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < eps_var {
        return Ok(None);
    }
    Ok(Some(rewards.iter().map(|r| (r - mean) / std).collect()))
}

/// One prompt with its `G` sampled responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt: Vec<u32>,
    pub responses: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    /// `None` when the group was filtered for zero reward variance.
    pub advantages: Option<Vec<f64>>,
}

impl GroupBatch {
    pub fn is_filtered(&self) -> bool {
        self.advantages.is_none()
    }
}

fn policy_rows(prompt: &[u32], response: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut full = prompt.to_vec();
    full.extend_from_slice(response);
    let n = full.len() - 1;
    (full[..n].to_vec(), full[1..].to_vec())
}

/// Mean over every response token of unfiltered groups of `−A · log p`,
/// with its gradient added into `grad`. Returns `(loss, token count)`.
pub fn policy_loss_grad(
    params: &ModelParams,
    groups: &[GroupBatch],
    grad: &mut [f32],
) -> Result<(f64, usize)> {
    let tokens: usize = groups
        .iter()
        .filter(|g| !g.is_filtered())
        .flat_map(|g| g.responses.iter().map(|r| r.len()))
        .sum();
    if tokens == 0 {
        return Ok((0.0, 0));
    }
    let mut loss = 0.0;
    for g in groups {
        let Some(adv) = &g.advantages else { continue };
        let plen = g.prompt.len();
        for (resp, &a) in g.responses.iter().zip(adv) {
            if resp.is_empty() {
                continue;
            }
            let (inputs, targets) = policy_rows(&g.prompt, resp);
            let w = (a / tokens as f64) as f32;
            let weights: Vec<f32> = (0..inputs.len())
                .map(|i| if i + 1 >= plen { w } else { 0.0 })
                .collect();
            loss += weighted_nll_grad(params, &inputs, &targets, &weights, grad)?.0;
        }
    }
    Ok((loss, tokens))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    pub loss: f64,
    pub tokens: usize,
    /// True when every group was filtered and nothing changed.
    pub skipped: bool,
}

/// One optimizer step on the group-relative policy-gradient loss.
pub fn policy_update(
    params: &mut ModelParams,
    opt: &mut AdamW,
    groups: &[GroupBatch],
) -> Result<PolicyStep> {
    if groups.iter().all(|g| g.is_filtered()) {
        return Ok(PolicyStep {
            loss: 0.0,
            tokens: 0,
            skipped: true,
        });
    }
    let mut grad = vec![0.0f32; params.param_count()];
    let (loss, tokens) = policy_loss_grad(params, groups, &mut grad)?;
    opt.step(params.as_mut_slice(), &grad);
    Ok(PolicyStep {
        loss,
        tokens,
        skipped: false,
    })
}

/// Draft supervision harvested from generation: no target forward needed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DraftTrainBatch {
    pub d_model: usize,
    pub tokens: Vec<u32>,
    pub prev_hidden: Vec<f32>,
    pub target_hidden: Vec<f32>,
    pub next_tokens: Vec<u32>,
}

impl DraftTrainBatch {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Adds one row per generated position `t` (from the last prompt token
    /// up to the second-to-last token): input `(x_t, h_{t−1})`, targets
    /// `h_t` and `x_{t+1}`.
    pub fn push_sequence(&mut self, seq: &SeqState) {
        let d = self.d_model;
        let p = seq.prompt_len;
        let n = seq.tokens.len();
        for t in p - 1..n.saturating_sub(1) {
            let prev = t + 1 - p;
            let Some(rows) = seq.hidden.get(prev * d..(prev + 2) * d) else {
                break;
            };
            self.tokens.push(seq.tokens[t]);
            self.prev_hidden.extend_from_slice(&rows[..d]);
            self.target_hidden.extend_from_slice(&rows[d..]);
            self.next_tokens.push(seq.tokens[t + 1]);
        }
    }

    pub fn from_sequences<'a>(
        d_model: usize,
        seqs: impl IntoIterator<Item = &'a SeqState>,
    ) -> Self {
        let mut b = Self::new(d_model);
        for s in seqs {
            b.push_sequence(s);
        }
        b
    }

    pub fn extend(&mut self, other: &Self) {
        self.tokens.extend_from_slice(&other.tokens);
        self.prev_hidden.extend_from_slice(&other.prev_hidden);
        self.target_hidden.extend_from_slice(&other.target_hidden);
        self.next_tokens.extend_from_slice(&other.next_tokens);
    }

    pub fn rows(&self, idx: &[usize]) -> (Vec<u32>, Vec<f32>, Vec<f32>, Vec<u32>) {
        let d = self.d_model;
        let mut out = (
            Vec::with_capacity(idx.len()),
            Vec::with_capacity(idx.len() * d),
            Vec::with_capacity(idx.len() * d),
            Vec::with_capacity(idx.len()),
        );
        for &i in idx {
            out.0.push(self.tokens[i]);
            out.1
                .extend_from_slice(&self.prev_hidden[i * d..(i + 1) * d]);
            out.2
                .extend_from_slice(&self.target_hidden[i * d..(i + 1) * d]);
            out.3.push(self.next_tokens[i]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftUpdateParams {
    pub w_feat: f32,
    pub w_tok: f32,
    pub minibatch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DraftUpdateParams {
    fn default() -> Self {
        Self {
            w_feat: 1.0,
            w_tok: 0.1,
            minibatch: 256,
            epochs: 1,
            seed: 0,
        }
    }
}

/// Loss of `draft` on the whole batch without updating anything.
pub fn draft_batch_loss(
    draft: &DraftParams,
    batch: &DraftTrainBatch,
    head: LmHead<'_>,
    w_feat: f32,
    w_tok: f32,
) -> Result<DraftLoss> {
    let mut grad = vec![0.0f32; draft.param_count()];
    draft_loss_grad(
        draft,
        DraftRows {
            tokens: &batch.tokens,
            prev_hidden: &batch.prev_hidden,
            target_hidden: &batch.target_hidden,
            next_tokens: &batch.next_tokens,
        },
        head,
        w_feat,
        w_tok,
        &mut grad,
    )
}

/// Minibatch passes over `batch`; the LM head is read-only. Returns the
/// mean of the per-minibatch losses, or `None` for an empty batch.
pub fn draft_update(
    draft: &mut DraftParams,
    opt: &mut AdamW,
    batch: &DraftTrainBatch,
    head: LmHead<'_>,
    p: &DraftUpdateParams,
) -> Result<Option<DraftLoss>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0f32; draft.param_count()];
    let mut sum = DraftLoss::default();
    let mut count = 0;
    for _ in 0..p.epochs.max(1) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(p.minibatch.max(1)) {
            let (tokens, prev, tgt, next) = batch.rows(chunk);
            grad.fill(0.0);
            let l = draft_loss_grad(
                draft,
                DraftRows {
                    tokens: &tokens,
                    prev_hidden: &prev,
                    target_hidden: &tgt,
                    next_tokens: &next,
                },
                head,
                p.w_feat,
                p.w_tok,
                &mut grad,
            )?;
            opt.step(draft.as_mut_slice(), &grad);
            sum.feature += l.feature;
            sum.token += l.token;
            sum.total += l.total;
            count += 1;
        }
    }
    let c = count as f64;
    Ok(Some(DraftLoss {
        feature: sum.feature / c,
        token: sum.token / c,
        total: sum.total / c,
    }))
}
