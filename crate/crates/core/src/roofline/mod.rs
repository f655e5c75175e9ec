//! Operational intensity, hardware profiles, knee detection, and the
//! simulated step-latency cost model.

mod knee;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::ModelConfig;

pub use knee::{detect_knee, Knee};

/// Fraction of the memory-bound plateau charged as fixed launch overhead.
pub const DEFAULT_OVERHEAD_FRAC: f64 = 0.05;

/// Accelerator description plus its measured concurrency knee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub bandwidth: f64,
    pub bytes_per_element: u32,
    pub c_peak: usize,
    #[serde(default)]
    pub confidence: f64,
    /// `(batch, seconds)` pairs with strictly increasing batch.
    #[serde(default)]
    pub latency_curve: Vec<(usize, f64)>,
}

/// `(name, TFLOPS, TB/s)` of the built-in accelerator table (dense BF16).
const TABLE: [(&str, f64, f64); 12] = [
    ("A100 40GB PCIe x 16", 312.0, 1.555),
    ("A100 40GB SXM", 312.0, 1.555),
    ("A100 80GB PCIe x 16", 312.0, 1.935),
    ("A100 80GB SXM", 312.0, 2.039),
    ("H100 SXM", 1979.0, 3.35),
    ("H100 PCIe", 1513.0, 3.026),
    ("H100 NVL", 3958.0, 7.8),
    ("H800 SXM", 1979.0, 3.35),
    ("H800 PCIe", 1513.0, 2.0),
    ("H200 SXM", 1979.0, 4.8),
    ("B100", 3500.0, 8.0),
    ("B200", 4500.0, 8.0),
];

impl HardwareProfile {
    /// Profile with `c_peak` set to the cost model's compute/memory crossover.
    pub fn new(name: &str, peak_flops: f64, bandwidth: f64, bytes_per_element: u32) -> Self {
        let mut p = Self {
            name: name.to_string(),
            peak_flops,
            bandwidth,
            bytes_per_element,
            c_peak: 1,
            confidence: 1.0,
            latency_curve: Vec::new(),
        };
        p.c_peak = p.crossover_tokens().floor().max(1.0) as usize;
        p
    }

    /// All built-in accelerator rows, BF16 (`s = 2`).
    pub fn builtin() -> Vec<Self> {
        TABLE
            .iter()
            .map(|&(name, tflops, tbs)| Self::new(name, tflops * 1e12, tbs * 1e12, 2))
            .collect()
    }

    pub fn by_name(name: &str) -> Option<Self> {
        if name.eq_ignore_ascii_case("desk") {
            return Some(Self::desk());
        }
        Self::builtin()
            .into_iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
    }

    /// A small machine whose knee sits at 32 concurrent tokens in `f32`, so
    /// desk-scale batches straddle it.
    pub fn desk() -> Self {
        Self::new("desk", 64e9, 4e9, 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.peak_flops.is_nan()
            || self.peak_flops <= 0.0
            || self.bandwidth.is_nan()
            || self.bandwidth <= 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "profile {:?} needs positive peak_flops and bandwidth",
                self.name
            )));
        }
        if self.bytes_per_element == 0 || self.c_peak == 0 {
            return Err(Error::InvalidConfig(format!(
                "profile {:?} needs bytes_per_element >= 1 and c_peak >= 1",
                self.name
            )));
        }
        if self.latency_curve.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidConfig(
                "latency_curve batches must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Token count where compute time equals weight-streaming time:
    /// `s · I_peak / 2`, independent of model size.
    pub fn crossover_tokens(&self) -> f64 {
        self.bytes_per_element as f64 * self.peak_flops / (2.0 * self.bandwidth)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// `I_peak = peak_flops / bandwidth` in FLOPs per byte.
pub fn peak_intensity(profile: &HardwareProfile) -> Result<f64> {
    if profile.bandwidth.is_nan() || profile.bandwidth <= 0.0 {
        return Err(Error::InvalidConfig("bandwidth must be positive".into()));
    }
    Ok(profile.peak_flops / profile.bandwidth)
}

/// Operand shapes of `[B × D_in] · [D_in × D_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub batch: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub bytes_per_element: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    Exact,
    /// `2B/s`, valid for `B ≪ min(D_in, D_out)`.
    Approx,
}

/// FLOPs per byte of a GEMM.
pub fn gemm_intensity(shape: GemmShape, mode: IntensityMode) -> Result<f64> {
    let GemmShape {
        batch,
        d_in,
        d_out,
        bytes_per_element,
    } = shape;
    if batch == 0 || d_in == 0 || d_out == 0 || bytes_per_element == 0 {
        return Err(Error::InvalidConfig(format!(
            "degenerate gemm shape {shape:?}"
        )));
    }
    let (b, i, o, s) = (
        batch as f64,
        d_in as f64,
        d_out as f64,
        bytes_per_element as f64,
    );
    Ok(match mode {
        IntensityMode::Exact => 2.0 * b * i * o / ((b * i + i * o + b * o) * s),
        IntensityMode::Approx => 2.0 * b / s,
    })
}

/// Latency of one forward step that streams `param_count` weights once and
/// processes `total_tokens` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub peak_flops: f64,
    pub bandwidth: f64,
    pub bytes_per_element: u32,
    pub param_count: usize,
    pub overhead_frac: f64,
}

impl CostModel {
    pub fn new(profile: &HardwareProfile, param_count: usize) -> Self {
        Self {
            peak_flops: profile.peak_flops,
            bandwidth: profile.bandwidth,
            bytes_per_element: profile.bytes_per_element,
            param_count,
            overhead_frac: DEFAULT_OVERHEAD_FRAC,
        }
    }

    pub fn memory_time(&self) -> f64 {
        self.param_count as f64 * self.bytes_per_element as f64 / self.bandwidth
    }

    pub fn compute_time(&self, total_tokens: usize) -> f64 {
        2.0 * self.param_count as f64 * total_tokens as f64 / self.peak_flops
    }

    pub fn overhead(&self) -> f64 {
        self.overhead_frac * self.memory_time()
    }

    /// Zero tokens cost nothing; otherwise `max(memory, compute) + overhead`.
    pub fn step_latency(&self, total_tokens: usize) -> f64 {
        if total_tokens == 0 {
            return 0.0;
        }
        self.memory_time().max(self.compute_time(total_tokens)) + self.overhead()
    }
}

/// `max(weight_bytes / bandwidth, 2 · params · tokens / peak_flops) + overhead`
/// for the target model described by `model`.
pub fn simulate_step_latency(
    profile: &HardwareProfile,
    model: &ModelConfig,
    total_tokens: usize,
) -> f64 {
    CostModel::new(profile, model.param_count()).step_latency(total_tokens.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureOptions {
    pub b_max: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Relative drop between consecutive medians tolerated before the
    /// result is flagged.
    pub monotone_tol: f64,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            b_max: 128,
            warmup: 5,
            reps: 20,
            monotone_tol: 0.05,
        }
    }
}

/// Outcome of [`measure_c_peak`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CPeakMeasurement {
    pub c_peak: usize,
    pub confidence: f64,
    pub low_confidence: bool,
    pub curve: Vec<(usize, f64)>,
}

/// Confidence below this marks a measurement as unreliable.
pub const LOW_CONFIDENCE: f64 = 0.05;

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Samples `latency_fn(b)` for every batch `1..=b_max` (after `warmup`
/// discarded calls), keeps the median of `reps` samples, and places
/// `c_peak` at the curve's knee.
pub fn measure_c_peak<F: FnMut(usize) -> f64>(
    mut latency_fn: F,
    opts: MeasureOptions,
) -> Result<CPeakMeasurement> {
    if opts.b_max < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            got: opts.b_max,
        });
    }
    if opts.reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    let mut curve = Vec::with_capacity(opts.b_max);
    let mut samples = vec![0.0; opts.reps];
    for b in 1..=opts.b_max {
        for _ in 0..opts.warmup {
            latency_fn(b);
        }
        for s in samples.iter_mut() {
            *s = latency_fn(b);
        }
        curve.push((b, median(&mut samples)));
    }
    let knee = detect_knee(&curve)?;
    let non_monotone = curve
        .windows(2)
        .any(|w| w[1].1 < w[0].1 * (1.0 - opts.monotone_tol));
    Ok(CPeakMeasurement {
        c_peak: curve[knee.index].0,
        confidence: knee.confidence,
        low_confidence: knee.confidence < LOW_CONFIDENCE || non_monotone,
        curve,
    })
}

/// Wall-clock seconds taken by `f`.
pub fn time_call<F: FnOnce()>(f: F) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64()
}

/// Fills `c_peak`, `confidence` and `latency_curve` by measuring the
/// simulated latency of `model` on `profile`.
pub fn calibrate(
    profile: &HardwareProfile,
    model: &ModelConfig,
    b_max: usize,
) -> Result<HardwareProfile> {
    profile.validate()?;
    let m = measure_c_peak(
        |b| simulate_step_latency(profile, model, b),
        MeasureOptions {
            b_max,
            warmup: 0,
            reps: 1,
            ..MeasureOptions::default()
        },
    )?;
    Ok(HardwareProfile {
        c_peak: m.c_peak,
        confidence: m.confidence,
        latency_curve: m.curve,
        ..profile.clone()
    })
}
