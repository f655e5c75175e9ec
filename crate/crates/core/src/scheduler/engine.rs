//! Dynamic-batch generation with optional speculative decoding.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{SchedParams, SpecConfig};
use crate::drafttree::{expand_tree, rerank_candidates, verify, DraftTree, PositionKeys};
use crate::error::{Error, Result};
use crate::grpo::task::EOS;
use crate::roofline::{CostModel, HardwareProfile};
use crate::tinylm::{forward_target, DraftParams, KvCache, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Vanilla,
    FixedSpec,
    AdaptiveSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub mode: DecodeMode,
    /// Drop finished sequences from the batch (otherwise they stay as padding).
    pub early_term: bool,
    /// Responses sampled per prompt.
    pub g: usize,
    pub temperature: f32,
    pub seed: u64,
    pub iteration: u64,
    pub sched: SchedParams,
    /// Settings used every step in [`DecodeMode::FixedSpec`].
    pub fixed: Option<SpecConfig>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::AdaptiveSpec,
            early_term: true,
            g: 1,
            temperature: 0.0,
            seed: 0,
            iteration: 0,
            sched: SchedParams::default(),
            fixed: None,
        }
    }
}

/// One sequence of the batch.
#[derive(Debug, Clone)]
pub struct SeqState {
    pub prompt_index: usize,
    pub seq_id: u64,
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    pub finished: bool,
    pub cache: KvCache,
    /// Target hidden states for positions `prompt_len − 2 ..= len − 2`,
    /// row-major. A prompt of length 1 starts with a zero row.
    pub hidden: Vec<f32>,
    root_hidden: Vec<f32>,
}

impl SeqState {
    pub fn response(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Per-step accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub b_cur: usize,
    /// Rows charged to the cost model (`b_cur` with early termination).
    pub b_eff: usize,
    pub spec_config: SpecConfig,
    /// `(seq_id, tokens appended)` for every active sequence.
    pub accepted: Vec<(u64, usize)>,
    pub accepted_total: usize,
    pub draft_passes: usize,
    pub sim_latency_s: f64,
}

#[derive(Debug, Clone)]
pub struct BatchState {
    pub sequences: Vec<SeqState>,
    pub b_cur: usize,
    /// `(b_cur, tokens appended per active sequence)` per step.
    pub step_log: Vec<(usize, Vec<usize>)>,
}

impl BatchState {
    pub fn responses(&self) -> Vec<Vec<u32>> {
        self.sequences
            .iter()
            .map(|s| s.response().to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub records: Vec<StepRecord>,
    pub prefill_s: f64,
    pub decode_s: f64,
    /// `prefill_s + decode_s`, simulated.
    pub gen_time_s: f64,
    pub wall_s: f64,
    pub accepted_sum: usize,
    pub b_cur_sum: usize,
    pub target_forwards: usize,
}

impl GenStats {
    /// Streaming acceptance length: accepted tokens over sequence-steps.
    pub fn tau(&self) -> f64 {
        if self.b_cur_sum == 0 {
            return 0.0;
        }
        self.accepted_sum as f64 / self.b_cur_sum as f64
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn records_from_jsonl(s: &str) -> Result<Vec<StepRecord>> {
        s.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// Cost model of one draft pass: draft weights plus the shared LM head.
pub fn draft_cost_model(profile: &HardwareProfile, draft: &DraftParams) -> CostModel {
    let c = draft.config();
    CostModel::new(profile, draft.param_count() + c.d_model * c.vocab_size)
}

/// Generates `g` responses per prompt until every sequence ends in `EOS`
/// or reaches `max_seq_len`.
///
/// Each step plans (adaptive) or reuses (fixed) a speculation setting, then
/// drafts, verifies and commits tokens for every active sequence. Prefill
/// is plain autoregressive and charged once per prompt.
pub fn generate_dynamic_batch(
    target: &ModelParams,
    draft: Option<&DraftParams>,
    prompts: &[Vec<u32>],
    cfg: &GenConfig,
    profile: &HardwareProfile,
) -> Result<(BatchState, GenStats)> {
    let mcfg = *target.config();
    let max_len = mcfg.max_seq_len;
    if prompts.is_empty() {
        return Err(Error::BadPrompt("no prompts".into()));
    }
    if cfg.g == 0 {
        return Err(Error::InvalidConfig("g must be at least 1".into()));
    }
    for p in prompts {
        if p.is_empty() || p.len() >= max_len {
            return Err(Error::BadPrompt(format!(
                "prompt length {} must be in 1..{}",
                p.len(),
                max_len
            )));
        }
    }
    cfg.sched.validate()?;
    let fixed = match cfg.mode {
        DecodeMode::FixedSpec => {
            let f = cfg
                .fixed
                .ok_or_else(|| Error::InvalidConfig("fixed_spec needs a fixed config".into()))?;
            f.validate()?;
            Some(f)
        }
        _ => None,
    };
    if cfg.mode != DecodeMode::Vanilla && draft.is_none() {
        return Err(Error::InvalidConfig(
            "speculative modes need a draft model".into(),
        ));
    }
    let wall = Instant::now();
    let target_cost = CostModel::new(profile, target.param_count());
    let draft_cost = draft.map(|d| draft_cost_model(profile, d));
    let head = target.lm_head();
    let d = mcfg.d_model;

    let mut target_forwards = 0;
    let mut prefill_tokens = 0;
    let mut sequences = Vec::with_capacity(prompts.len() * cfg.g);
    for (pi, prompt) in prompts.iter().enumerate() {
        let plen = prompt.len();
        let mut cache = KvCache::new(&mcfg);
        let root_hidden = if plen >= 2 {
            let positions: Vec<usize> = (0..plen - 1).collect();
            let out = forward_target(target, &prompt[..plen - 1], &positions, None, &mut cache)?;
            target_forwards += 1;
            prefill_tokens += plen - 1;
            out.hidden_row(plen - 2).to_vec()
        } else {
            vec![0.0; d]
        };
        for j in 0..cfg.g {
            sequences.push(SeqState {
                prompt_index: pi,
                seq_id: (pi * cfg.g + j) as u64,
                prompt_len: plen,
                tokens: prompt.clone(),
                finished: false,
                cache: cache.clone(),
                hidden: root_hidden.clone(),
                root_hidden: root_hidden.clone(),
            });
        }
    }
    let prefill_s = target_cost.step_latency(prefill_tokens);

    let total = sequences.len();
    let mut records = Vec::new();
    let mut step_log = Vec::new();
    let mut decode_s = 0.0;
    let (mut accepted_sum, mut b_cur_sum) = (0, 0);
    loop {
        let b_cur = sequences.iter().filter(|s| !s.finished).count();
        if b_cur == 0 {
            break;
        }
        let b_eff = if cfg.early_term { b_cur } else { total };
        let spec = match cfg.mode {
            DecodeMode::Vanilla => SpecConfig::vanilla(cfg.sched.c_peak),
            DecodeMode::FixedSpec => fixed.expect("checked above"),
            DecodeMode::AdaptiveSpec => cfg.sched.plan(b_eff),
        };
        let mut accepted = Vec::with_capacity(b_cur);
        let mut draft_passes = 0;
        for s in sequences.iter_mut().filter(|s| !s.finished) {
            let len = s.tokens.len();
            let root_pos = len - 1;
            let root = s.tokens[root_pos];
            let l_eff = spec.l_draft.min(max_len - 1 - len);
            let tree = match draft {
                Some(dp) if spec.k_draft > 0 && l_eff > 0 => {
                    draft_passes = draft_passes.max(l_eff);
                    expand_tree(dp, head, &s.root_hidden, root, spec.k_draft, l_eff)?
                }
                _ => DraftTree::root_only(root, Vec::new()),
            };
            let sel = rerank_candidates(&tree, spec.n_verify)?;
            let toks: Vec<u32> = sel.nodes.iter().map(|&i| tree.nodes[i].token).collect();
            let pos: Vec<usize> = sel
                .nodes
                .iter()
                .map(|&i| root_pos + tree.nodes[i].depth)
                .collect();
            let out = forward_target(target, &toks, &pos, Some(&sel.mask), &mut s.cache)?;
            target_forwards += 1;
            let keys = PositionKeys {
                seed: cfg.seed,
                iteration: cfg.iteration,
                seq_id: s.seq_id,
            };
            let vr = verify(&out, &sel, &tree, cfg.temperature, keys, root_pos)?;
            s.cache.retain_path(root_pos, &vr.path_rows);
            let mut take = vr.accepted_tokens.len();
            if let Some(e) = vr.accepted_tokens.iter().position(|&t| t == EOS) {
                take = e + 1;
            }
            s.tokens.extend_from_slice(&vr.accepted_tokens[..take]);
            s.hidden.extend_from_slice(&vr.new_hidden);
            s.hidden.truncate((s.tokens.len() + 1 - s.prompt_len) * d);
            let last = vr.path_rows.len() - 1;
            s.root_hidden = vr.new_hidden[last * d..(last + 1) * d].to_vec();
            s.finished = s.tokens.last() == Some(&EOS) || s.tokens.len() >= max_len;
            accepted.push((s.seq_id, take));
        }
        let mut latency = target_cost.step_latency(b_eff * spec.n_verify);
        if let Some(dc) = draft_cost {
            latency += draft_passes as f64 * dc.step_latency(b_eff * spec.k_draft);
        }
        let accepted_total: usize = accepted.iter().map(|a| a.1).sum();
        accepted_sum += accepted_total;
        b_cur_sum += b_cur;
        decode_s += latency;
        step_log.push((b_cur, accepted.iter().map(|a| a.1).collect()));
        records.push(StepRecord {
            step: records.len(),
            b_cur,
            b_eff,
            spec_config: spec,
            accepted,
            accepted_total,
            draft_passes,
            sim_latency_s: latency,
        });
    }
    let stats = GenStats {
        records,
        prefill_s,
        decode_s,
        gen_time_s: prefill_s + decode_s,
        wall_s: wall.elapsed().as_secs_f64(),
        accepted_sum,
        b_cur_sum,
        target_forwards,
    };
    Ok((
        BatchState {
            sequences,
            b_cur: 0,
            step_log,
        },
        stats,
    ))
}
