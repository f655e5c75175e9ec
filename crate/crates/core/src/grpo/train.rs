//! The training loop: generate, update the draft, score, update the policy.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sft::SftConfig;
use super::task::TaskSpec;
use super::{
    compute_rewards, draft_update, policy_update, standardize_advantages, DraftTrainBatch,
    DraftUpdateParams, GroupBatch, EPS_VAR,
};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::roofline::{CostModel, HardwareProfile};

use crate::scheduler::{
    draft_cost_model, generate_dynamic_batch, DecodeMode, GenConfig, SchedParams, SpecConfig,
};
use crate::tinylm::{
    position_key, target_forward_count, DraftConfig, DraftLoss, DraftParams, ModelConfig,
    ModelParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoParams {
    /// Responses per prompt.
    pub g: usize,
    pub prompts_per_iter: usize,
    pub iterations: usize,
    pub policy_lr: f32,
    pub draft_lr: f32,
    pub eps_var: f64,
    pub temperature: f32,
    pub seed: u64,
    pub w_feat: f32,
    pub w_tok: f32,
    /// Passes over each iteration's draft data.
    pub draft_epochs: usize,
    pub draft_minibatch: usize,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            g: 8,
            prompts_per_iter: 8,
            iterations: 300,
            policy_lr: 3e-4,
            draft_lr: 1.5e-2,
            eps_var: EPS_VAR,
            temperature: 1.0,
            seed: 0,
            w_feat: 1.0,
            w_tok: 0.1,
            draft_epochs: 1,
            draft_minibatch: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeParams {
    pub online_draft: bool,
    pub early_term: bool,
    pub decode_mode: DecodeMode,
    /// `[n_verify, k_draft, l_draft]` for fixed speculation; `None` plans
    /// once for the full rollout batch and keeps that setting.
    pub fixed: Option<[usize; 3]>,
    /// Iterations decoded without speculation before the draft is used.
    pub spec_warmup: usize,
}

impl Default for ModeParams {
    fn default() -> Self {
        Self {
            online_draft: true,
            early_term: true,
            decode_mode: DecodeMode::AdaptiveSpec,
            fixed: None,
            spec_warmup: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DraftSection {
    pub n_layers: usize,
    /// Zero means `d_model`.
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for DraftSection {
    fn default() -> Self {
        Self {
            n_layers: 1,
            d_ff: 0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedSection {
    pub alpha: f64,
    pub k_max: usize,
    pub l_max: usize,
    /// Overrides the profile's knee when set.
    pub c_peak: Option<usize>,
    /// Built-in profile name (`desk` or an accelerator row).
    pub profile: String,
    /// Profile JSON file; takes precedence over `profile`.
    pub profile_path: Option<String>,
}

impl Default for SchedSection {
    fn default() -> Self {
        let s = SchedParams::default();
        Self {
            alpha: s.alpha,
            k_max: s.k_max,
            l_max: s.l_max,
            c_peak: None,
            profile: "A100 80GB SXM".into(),
            profile_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub rounds: usize,
    pub prompts: usize,
    pub g: usize,
    pub temperature: f32,
    pub epochs: usize,
    pub lr: f32,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            prompts: 16,
            g: 4,
            temperature: 1.0,
            epochs: 2,
            lr: 3e-3,
            minibatch: 128,
            seed: 1234,
        }
    }
}

/// Full training configuration, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub draft: DraftSection,
    pub task: TaskSpec,
    pub sched: SchedSection,
    pub grpo: GrpoParams,
    pub mode: ModeParams,
    /// Supervised warm start of the target before GRPO.
    pub sft: Option<SftConfig>,
    /// Draft pretraining on target generations before GRPO.
    pub pretrain: Option<PretrainConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            draft: DraftSection::default(),
            task: TaskSpec::default(),
            sched: SchedSection::default(),
            grpo: GrpoParams::default(),
            mode: ModeParams::default(),
            sft: Some(SftConfig::default()),
            pretrain: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.model.vocab_size < super::task::TASK_VOCAB {
            return bad("vocab_size too small for the addition task");
        }
        if self.task.prompt_len() + self.task.max_response_len() > self.model.max_seq_len {
            return bad("max_seq_len cannot hold the longest prompt and response");
        }
        let g = &self.grpo;
        if g.g < 2 {
            return bad("grpo.g must be at least 2");
        }
        if g.prompts_per_iter == 0 {
            return bad("grpo.prompts_per_iter must be positive");
        }
        if g.policy_lr.is_nan()
            || g.policy_lr < 0.0
            || g.draft_lr.is_nan()
            || g.draft_lr < 0.0
            || g.eps_var.is_nan()
            || g.eps_var < 0.0
            || g.temperature.is_nan()
            || g.temperature < 0.0
        {
            return bad("learning rates, eps_var and temperature must be non-negative");
        }
        if self.draft.n_layers == 0 {
            return bad("draft.n_layers must be positive");
        }
        if self.mode.decode_mode == DecodeMode::FixedSpec {
            self.fixed_spec(1).validate()?;
        }
        self.sched_params(1).validate()
    }

    pub fn draft_config(&self) -> DraftConfig {
        DraftConfig {
            vocab_size: self.model.vocab_size,
            d_model: self.model.d_model,
            n_layers: self.draft.n_layers,
            d_ff: if self.draft.d_ff == 0 {
                self.model.d_model
            } else {
                self.draft.d_ff
            },
            seed: self.draft.seed,
        }
    }

    pub fn sched_params(&self, c_peak: usize) -> SchedParams {
        SchedParams {
            alpha: self.sched.alpha,
            k_max: self.sched.k_max,
            l_max: self.sched.l_max,
            c_peak: self.sched.c_peak.unwrap_or(c_peak),
        }
    }

    pub fn fixed_spec(&self, c_peak: usize) -> SpecConfig {
        let batch = self.grpo.g * self.grpo.prompts_per_iter;
        let [n, k, l] = self.mode.fixed.unwrap_or_else(|| {
            let p = self.sched_params(c_peak).plan(batch);
            [p.n_verify, p.k_draft, p.l_draft]
        });
        SpecConfig {
            n_verify: n,
            k_draft: k,
            l_draft: l,
            alpha: self.sched.alpha,
            k_max: self.sched.k_max.max(k),
            l_max: self.sched.l_max.max(l),
            c_peak,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// `max − min`.
    pub range: usize,
}

impl LengthStats {
    pub fn of(lengths: &[usize]) -> Self {
        let min = lengths.iter().copied().min().unwrap_or(0);
        let max = lengths.iter().copied().max().unwrap_or(0);
        let mean = if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
        };
        Self {
            min,
            max,
            mean,
            range: max - min,
        }
    }
}

/// Metrics of one training iteration. Times ending in `_s` without `wall`
/// are simulated by the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iteration: usize,
    pub decode_mode: DecodeMode,
    pub reward_mean: f64,
    pub filtered_frac: f64,
    pub tau: f64,
    pub gen_time_s: f64,
    pub policy_update_s: f64,
    pub draft_update_s: f64,
    /// `policy_update_s + draft_update_s`; reward scoring is charged zero.
    pub update_time_s: f64,
    pub gen_wall_s: f64,
    pub draft_wall_s: f64,
    pub reward_wall_s: f64,
    pub policy_wall_s: f64,
    pub iter_wall_s: f64,
    /// Target forwards counted while the draft was being updated.
    pub draft_target_forwards: u64,
    pub draft_rows: usize,
    /// Draft rows that came from zero-variance groups.
    pub draft_rows_filtered: usize,
    pub draft_loss: Option<DraftLoss>,
    pub policy_loss: f64,
    pub policy_skipped: bool,
    pub b_cur_trace: Vec<usize>,
    pub accepted_trace: Vec<usize>,
    pub length_stats: Vec<LengthStats>,
    /// FNV-1a digest of every response token, for cross-run comparison.
    pub rollout_digest: u64,
}

/// FNV-1a over the responses, with a separator between sequences.
pub fn rollout_digest<'a>(responses: impl IntoIterator<Item = &'a [u32]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u32| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    };
    for r in responses {
        r.iter().for_each(|&t| eat(t));
        eat(u32::MAX);
    }
    h
}

/// Generates draft training data with the target and fits the draft to it.
/// Returns the mean loss of each round.
pub fn pretrain_draft(
    target: &ModelParams,
    draft: &mut DraftParams,
    task: &TaskSpec,
    cfg: &PretrainConfig,
) -> Result<Vec<DraftLoss>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        draft.param_count(),
    );
    let profile = HardwareProfile::desk();
    let d = target.config().d_model;
    let mut losses = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let prompts: Vec<Vec<u32>> = (0..cfg.prompts)
            .map(|_| task.encode_prompt(task.sample_problem(&mut rng)))
            .collect();
        let gen = GenConfig {
            mode: DecodeMode::Vanilla,
            g: cfg.g,
            temperature: cfg.temperature,
            seed: cfg.seed,
            iteration: round as u64,
            ..GenConfig::default()
        };
        let (state, _) = generate_dynamic_batch(target, None, &prompts, &gen, &profile)?;
        let batch = DraftTrainBatch::from_sequences(d, &state.sequences);
        let p = DraftUpdateParams {
            minibatch: cfg.minibatch,
            epochs: cfg.epochs,
            seed: cfg.seed ^ round as u64,
            ..DraftUpdateParams::default()
        };
        if let Some(l) = draft_update(draft, &mut opt, &batch, target.lm_head(), &p)? {
            losses.push(l);
        }
    }
    Ok(losses)
}

/// Owns the models and optimizers across iterations.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub target: ModelParams,
    pub draft: DraftParams,
    pub profile: HardwareProfile,
    policy_opt: AdamW,
    draft_opt: AdamW,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        target: ModelParams,
        draft: DraftParams,
        profile: HardwareProfile,
    ) -> Result<Self> {
        cfg.validate()?;
        profile.validate()?;
        if target.config() != &cfg.model {
            return Err(Error::InvalidConfig(
                "target does not match the model config".into(),
            ));
        }
        let policy_opt = AdamW::new(
            AdamWConfig {
                lr: cfg.grpo.policy_lr,
                ..AdamWConfig::default()
            },
            target.param_count(),
        );
        let draft_opt = AdamW::new(
            AdamWConfig {
                lr: cfg.grpo.draft_lr,
                ..AdamWConfig::default()
            },
            draft.param_count(),
        );
        Ok(Self {
            cfg,
            target,
            draft,
            profile,
            policy_opt,
            draft_opt,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn c_peak(&self) -> usize {
        self.cfg.sched.c_peak.unwrap_or(self.profile.c_peak)
    }

    /// Prompts of iteration `it`; identical for every run with the same seed.
    pub fn prompts(&self, it: usize) -> Vec<Vec<u32>> {
        let g = &self.cfg.grpo;
        let mut rng = ChaCha8Rng::seed_from_u64(position_key(g.seed, it as u64, u64::MAX, 0));
        (0..g.prompts_per_iter)
            .map(|_| {
                self.cfg
                    .task
                    .encode_prompt(self.cfg.task.sample_problem(&mut rng))
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<IterMetrics> {
        let it = self.iteration;
        let iter_start = Instant::now();
        let gp = self.cfg.grpo;
        let mp = self.cfg.mode;
        let c_peak = self.c_peak();
        let prompts = self.prompts(it);
        let decode_mode = if it < mp.spec_warmup {
            DecodeMode::Vanilla
        } else {
            mp.decode_mode
        };
        let gen = GenConfig {
            mode: decode_mode,
            early_term: mp.early_term,
            g: gp.g,
            temperature: gp.temperature,
            seed: gp.seed,
            iteration: it as u64,
            sched: self.cfg.sched_params(c_peak),
            fixed: Some(self.cfg.fixed_spec(c_peak)),
        };
        let t = Instant::now();
        let draft = (decode_mode != DecodeMode::Vanilla).then_some(&self.draft);
        let (state, stats) =
            generate_dynamic_batch(&self.target, draft, &prompts, &gen, &self.profile)?;
        let gen_wall_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let rewards: Vec<Vec<f64>> = prompts
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                let resp: Vec<Vec<u32>> = state.sequences[pi * gp.g..(pi + 1) * gp.g]
                    .iter()
                    .map(|s| s.response().to_vec())
                    .collect();
                compute_rewards(&self.cfg.task, p, &resp)
            })
            .collect();
        let reward_wall_s = t.elapsed().as_secs_f64();

        let d = self.cfg.model.d_model;
        let mut groups = Vec::with_capacity(prompts.len());
        let mut batch = DraftTrainBatch::new(d);
        let mut draft_rows_filtered = 0;
        let mut lengths = Vec::with_capacity(prompts.len());
        for (pi, p) in prompts.iter().enumerate() {
            let seqs = &state.sequences[pi * gp.g..(pi + 1) * gp.g];
            let advantages = standardize_advantages(&rewards[pi], gp.eps_var)?;
            let before = batch.len();
            for s in seqs {
                batch.push_sequence(s);
            }
            if advantages.is_none() {
                draft_rows_filtered += batch.len() - before;
            }
            let resp: Vec<Vec<u32>> = seqs.iter().map(|s| s.response().to_vec()).collect();
            lengths.push(LengthStats::of(
                &resp.iter().map(|r| r.len()).collect::<Vec<_>>(),
            ));
            groups.push(GroupBatch {
                prompt: p.clone(),
                responses: resp,
                rewards: rewards[pi].clone(),
                advantages,
            });
        }

        let draft_cost = draft_cost_model(&self.profile, &self.draft);
        let fwd_before = target_forward_count();
        let t = Instant::now();
        let mut draft_loss = None;
        let mut draft_update_s = 0.0;
        if mp.online_draft {
            let p = DraftUpdateParams {
                w_feat: gp.w_feat,
                w_tok: gp.w_tok,
                minibatch: gp.draft_minibatch,
                epochs: gp.draft_epochs,
                seed: position_key(gp.seed, it as u64, u64::MAX - 1, 0),
            };
            draft_loss = draft_update(
                &mut self.draft,
                &mut self.draft_opt,
                &batch,
                self.target.lm_head(),
                &p,
            )?;
            draft_update_s =
                3.0 * gp.draft_epochs.max(1) as f64 * draft_cost.step_latency(batch.len());
        }
        let draft_wall_s = t.elapsed().as_secs_f64();
        let draft_target_forwards = target_forward_count() - fwd_before;

        let t = Instant::now();
        let step = policy_update(&mut self.target, &mut self.policy_opt, &groups)?;
        let policy_wall_s = t.elapsed().as_secs_f64();
        let trained_tokens: usize = groups
            .iter()
            .filter(|g| !g.is_filtered())
            .flat_map(|g| g.responses.iter().map(|r| g.prompt.len() + r.len() - 1))
            .sum();
        let policy_update_s = 3.0
            * CostModel::new(&self.profile, self.target.param_count()).step_latency(trained_tokens);

        let n_resp = (gp.g * prompts.len()) as f64;
        let reward_mean = rewards.iter().flatten().sum::<f64>() / n_resp;
        let filtered = groups.iter().filter(|g| g.is_filtered()).count();
        self.iteration += 1;
        Ok(IterMetrics {
            iteration: it,
            decode_mode,
            reward_mean,
            filtered_frac: filtered as f64 / groups.len() as f64,
            tau: stats.tau(),
            gen_time_s: stats.gen_time_s,
            policy_update_s,
            draft_update_s,
            update_time_s: policy_update_s + draft_update_s,
            gen_wall_s,
            draft_wall_s,
            reward_wall_s,
            policy_wall_s,
            iter_wall_s: iter_start.elapsed().as_secs_f64(),
            draft_target_forwards,
            draft_rows: batch.len(),
            draft_rows_filtered,
            draft_loss,
            policy_loss: step.loss,
            policy_skipped: step.skipped,
            b_cur_trace: stats.records.iter().map(|r| r.b_cur).collect(),
            accepted_trace: stats.records.iter().map(|r| r.accepted_total).collect(),
            length_stats: lengths,
            rollout_digest: rollout_digest(state.sequences.iter().map(|s| s.response())),
        })
    }
}

/// Runs `cfg.grpo.iterations` iterations and returns the models and metrics.
pub fn train_loop(
    cfg: &TrainConfig,
    target: ModelParams,
    draft: DraftParams,
    profile: HardwareProfile,
) -> Result<(ModelParams, DraftParams, Vec<IterMetrics>)> {
    let mut tr = Trainer::new(cfg.clone(), target, draft, profile)?;
    let mut trace = Vec::with_capacity(cfg.grpo.iterations);
    for _ in 0..cfg.grpo.iterations {
        trace.push(tr.step()?);
    }
    Ok((tr.target, tr.draft, trace))
}
