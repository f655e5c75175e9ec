//! Run metrics (acceptance length, speedups), model preparation, strategy
//! benchmarking and metrics persistence.

mod bench;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::sft::sft_warm_start;
use crate::grpo::{pretrain_draft, IterMetrics, LengthStats, TrainConfig};
use crate::roofline::HardwareProfile;
use crate::scheduler::StepRecord;
use crate::tinylm::{DraftParams, ModelParams};

pub use bench::{bench, BenchReport, BenchRow, Strategy};

/// Final-window length used by [`RunMetrics::from_trace`].
pub const DEFAULT_WINDOW: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedups {
    pub gen_sr: f64,
    pub e2e_sr: f64,
}

/// Totals of one training run. Times are simulated seconds; `e2e` is
/// generation plus draft update plus policy update (reward scoring is
/// charged zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub iterations: usize,
    pub gen_time_s: f64,
    pub update_time_s: f64,
    /// Acceptance length over the whole run.
    pub tau: f64,
    /// Acceptance length over the last `window` iterations.
    pub final_tau: f64,
    pub window: usize,
    pub reward_mean: f64,
    pub final_reward: f64,
    pub wall_s: f64,
    pub draft_wall_s: f64,
    /// Filled in relative to a baseline by [`bench`].
    pub speedups: Option<Speedups>,
    pub length_stats: Vec<LengthStats>,
}

impl RunMetrics {
    pub fn e2e_time_s(&self) -> f64 {
        self.gen_time_s + self.update_time_s
    }

    /// Aggregates a training trace; `window` is clamped to the trace length.
    pub fn from_trace(trace: &[IterMetrics], window: usize) -> Result<Self> {
        if trace.is_empty() {
            return Err(Error::EmptyLog("training trace"));
        }
        let w = window.clamp(1, trace.len());
        let tail = &trace[trace.len() - w..];
        let tau_of = |t: &[IterMetrics]| {
            let acc: Vec<usize> = t
                .iter()
                .flat_map(|m| m.accepted_trace.iter().copied())
                .collect();
            let b: Vec<usize> = t
                .iter()
                .flat_map(|m| m.b_cur_trace.iter().copied())
                .collect();
            compute_tau(&acc, &b)
        };
        let mean =
            |t: &[IterMetrics]| t.iter().map(|m| m.reward_mean).sum::<f64>() / t.len() as f64;
        Ok(Self {
            iterations: trace.len(),
            gen_time_s: trace.iter().map(|m| m.gen_time_s).sum(),
            update_time_s: trace.iter().map(|m| m.update_time_s).sum(),
            tau: tau_of(trace)?,
            final_tau: tau_of(tail)?,
            window: w,
            reward_mean: mean(trace),
            final_reward: mean(tail),
            wall_s: trace.iter().map(|m| m.iter_wall_s).sum(),
            draft_wall_s: trace.iter().map(|m| m.draft_wall_s).sum(),
            speedups: None,
            length_stats: trace
                .iter()
                .flat_map(|m| m.length_stats.iter().copied())
                .collect(),
        })
    }
}

/// `Σ accepted / Σ b_cur` over a streaming step log.
pub fn compute_tau(accepted_per_step: &[usize], b_cur_per_step: &[usize]) -> Result<f64> {
    if accepted_per_step.len() != b_cur_per_step.len() {
        return Err(Error::DimensionMismatch {
            what: "accepted vs b_cur log",
            expected: b_cur_per_step.len(),
            got: accepted_per_step.len(),
        });
    }
    let b: usize = b_cur_per_step.iter().sum();
    if b == 0 {
        return Err(Error::EmptyLog("b_cur log"));
    }
    Ok(accepted_per_step.iter().sum::<usize>() as f64 / b as f64)
}

/// Acceptance length rebuilt from per-sequence events: every sequence's
/// appended tokens over its number of verification steps, pooled.
pub fn recount_tau(records: &[StepRecord]) -> Result<f64> {
    let mut per_seq: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in records {
        for &(id, n) in &r.accepted {
            let e = per_seq.entry(id).or_default();
            e.0 += n;
            e.1 += 1;
        }
    }
    let (acc, steps) = per_seq
        .values()
        .fold((0, 0), |(a, s), &(x, y)| (a + x, s + y));
    if steps == 0 {
        return Err(Error::EmptyLog("acceptance events"));
    }
    Ok(acc as f64 / steps as f64)
}

/// Baseline time over candidate time, for generation and end to end.
pub fn compute_speedup(baseline: &RunMetrics, candidate: &RunMetrics) -> Result<Speedups> {
    if candidate.gen_time_s <= 0.0 {
        return Err(Error::ZeroTime("generation"));
    }
    if candidate.e2e_time_s() <= 0.0 {
        return Err(Error::ZeroTime("end-to-end"));
    }
    Ok(Speedups {
        gen_sr: baseline.gen_time_s / candidate.gen_time_s,
        e2e_sr: baseline.e2e_time_s() / candidate.e2e_time_s(),
    })
}

/// The profile named by the config: a JSON file when `profile_path` is set,
/// otherwise a built-in row. `sched.c_peak` overrides the knee.
pub fn resolve_profile(cfg: &TrainConfig) -> Result<HardwareProfile> {
    let mut p = match &cfg.sched.profile_path {
        Some(path) => HardwareProfile::from_json(&fs::read_to_string(path)?)?,
        None => HardwareProfile::by_name(&cfg.sched.profile).ok_or_else(|| {
            Error::InvalidConfig(format!("unknown profile {:?}", cfg.sched.profile))
        })?,
    };
    if let Some(c) = cfg.sched.c_peak {
        p.c_peak = c;
    }
    p.validate()?;
    Ok(p)
}

/// Initial target and draft for a run: random init, then the optional
/// supervised warm start and draft pretraining from the config.
pub fn prepare_models(cfg: &TrainConfig) -> Result<(ModelParams, DraftParams)> {
    cfg.validate()?;
    let mut target = ModelParams::init(cfg.model)?;
    if let Some(sft) = &cfg.sft {
        sft_warm_start(&mut target, &cfg.task, sft)?;
    }
    let mut draft = DraftParams::init(cfg.draft_config())?;
    if let Some(pre) = &cfg.pretrain {
        pretrain_draft(&target, &mut draft, &cfg.task, pre)?;
    }
    Ok((target, draft))
}

/// One JSON object per line.
pub fn metrics_to_jsonl(trace: &[IterMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in trace {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn metrics_from_jsonl(s: &str) -> Result<Vec<IterMetrics>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn write_metrics(path: &Path, trace: &[IterMetrics]) -> Result<()> {
    fs::write(path, metrics_to_jsonl(trace)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterMetrics>> {
    metrics_from_jsonl(&fs::read_to_string(path)?)
}
