//! Sequential strategy comparison on a shared seed and prompt stream.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{compute_speedup, RunMetrics, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::grpo::{train_loop, IterMetrics, TrainConfig};
use crate::roofline::HardwareProfile;
use crate::scheduler::DecodeMode;
use crate::tinylm::{DraftParams, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "vanilla+early_term")]
    VanillaEarlyTerm,
    #[serde(rename = "fixed_spec")]
    FixedSpec,
    #[serde(rename = "adaptive_spec")]
    AdaptiveSpec,
    #[serde(rename = "adaptive_spec+online_draft")]
    AdaptiveOnline,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Vanilla,
        Strategy::VanillaEarlyTerm,
        Strategy::FixedSpec,
        Strategy::AdaptiveSpec,
        Strategy::AdaptiveOnline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::VanillaEarlyTerm => "vanilla+early_term",
            Strategy::FixedSpec => "fixed_spec",
            Strategy::AdaptiveSpec => "adaptive_spec",
            Strategy::AdaptiveOnline => "adaptive_spec+online_draft",
        }
    }

    /// Overwrites the decode settings of `cfg` with this strategy's.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let m = &mut cfg.mode;
        let (mode, et, online) = match self {
            Strategy::Vanilla => (DecodeMode::Vanilla, false, false),
            Strategy::VanillaEarlyTerm => (DecodeMode::Vanilla, true, false),
            Strategy::FixedSpec => (DecodeMode::FixedSpec, true, false),
            Strategy::AdaptiveSpec => (DecodeMode::AdaptiveSpec, true, false),
            Strategy::AdaptiveOnline => (DecodeMode::AdaptiveSpec, true, true),
        };
        m.decode_mode = mode;
        m.early_term = et;
        m.online_draft = online;
    }

    /// Parses a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Strategy>> {
        s.split(',').map(|x| x.trim().parse()).collect()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub metrics: RunMetrics,
    pub trace: Vec<IterMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: Strategy,
    pub rows: Vec<BenchRow>,
    /// Strategies from fastest to slowest simulated generation time.
    pub ordering: Vec<Strategy>,
}

impl BenchReport {
    pub fn row(&self, s: Strategy) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    /// CSV summary, one line per strategy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,gen_time_s,update_time_s,tau,final_tau,final_reward,gen_sr,e2e_sr\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            let s = m.speedups.unwrap_or(super::Speedups {
                gen_sr: f64::NAN,
                e2e_sr: f64::NAN,
            });
            out.push_str(&format!(
                "{},{:.6e},{:.6e},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.strategy,
                m.gen_time_s,
                m.update_time_s,
                m.tau,
                m.final_tau,
                m.final_reward,
                s.gen_sr,
                s.e2e_sr
            ));
        }
        out
    }
}

/// Trains once per strategy from the same initial models and seeds.
///
/// Every strategy must produce the same responses at every iteration;
/// any difference is reported as [`Error::Divergence`]. Speedups are taken
/// against `vanilla` when it is listed, else the first strategy.
pub fn bench(
    strategies: &[Strategy],
    cfg: &TrainConfig,
    target: &ModelParams,
    draft: &DraftParams,
    profile: &HardwareProfile,
) -> Result<BenchReport> {
    if strategies.len() < 2 {
        return Err(Error::InvalidConfig(
            "bench needs at least two strategies".into(),
        ));
    }
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(Error::InvalidConfig(format!("strategy {s} listed twice")));
        }
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let mut c = cfg.clone();
        s.apply(&mut c);
        let (_, _, trace) = train_loop(&c, target.clone(), draft.clone(), profile.clone())?;
        if let Some(first) = rows.first() {
            check_identical(first, s, &trace)?;
        }
        let metrics = RunMetrics::from_trace(&trace, DEFAULT_WINDOW)?;
        rows.push(BenchRow {
            strategy: s,
            metrics,
            trace,
        });
    }
    let baseline = if strategies.contains(&Strategy::Vanilla) {
        Strategy::Vanilla
    } else {
        strategies[0]
    };
    let base = rows
        .iter()
        .find(|r| r.strategy == baseline)
        .map(|r| r.metrics.clone());
    if let Some(base) = base {
        for r in &mut rows {
            r.metrics.speedups = Some(compute_speedup(&base, &r.metrics)?);
        }
    }
    let mut ordering: Vec<(Strategy, f64)> = rows
        .iter()
        .map(|r| (r.strategy, r.metrics.gen_time_s))
        .collect();
    ordering.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(BenchReport {
        baseline,
        rows,
        ordering: ordering.into_iter().map(|x| x.0).collect(),
    })
}

fn check_identical(first: &BenchRow, s: Strategy, trace: &[IterMetrics]) -> Result<()> {
    for (a, b) in first.trace.iter().zip(trace) {
        if a.rollout_digest != b.rollout_digest {
            return Err(Error::Divergence(format!(
                "{} and {} differ at iteration {}",
                first.strategy, s, a.iteration
            )));
        }
    }
    Ok(())
}
