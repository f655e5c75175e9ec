//! `specrl`: hardware profiles, draft pretraining, training, generation and
//! strategy benchmarks from the command line.
//!
//! Exit codes: 0 on success, 2 on a configuration error, 3 when bench
//! strategies disagree token for token, 1 for anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specrl_core::grpo::task::{token_digit, BOS, EOS, EQ, PLUS};
use specrl_core::grpo::{pretrain_draft, train_loop, Problem, TaskSpec, TrainConfig};
use specrl_core::harness::{
    bench, prepare_models, resolve_profile, write_metrics, RunMetrics, Strategy, DEFAULT_WINDOW,
};
use specrl_core::roofline::{
    calibrate, measure_c_peak, peak_intensity, time_call, HardwareProfile, MeasureOptions,
};
use specrl_core::scheduler::{generate_dynamic_batch, DecodeMode, GenConfig};
use specrl_core::tinylm::{
    forward_target, load_draft, load_target, save_draft, save_target, DraftParams, KvCache,
    ModelConfig, ModelParams,
};
use specrl_core::Error;

#[derive(Parser)]
#[command(name = "specrl", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit a hardware profile as JSON, with a calibrated c_peak.
    Profile(ProfileArgs),
    /// Warm-start the target and pretrain the draft; write both checkpoints.
    Pretrain(PretrainArgs),
    /// Run the training loop and report run metrics.
    Train(TrainArgs),
    /// Decode prompts with the chosen mode.
    Generate(GenerateArgs),
    /// Train once per strategy from the same models and compare.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Training config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target checkpoint; prepared from the config when absent.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Draft checkpoint; prepared from the config when absent.
    #[arg(long)]
    draft: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Built-in profile name.
    #[arg(long, default_value = "A100 80GB SXM")]
    gpu: String,
    /// List the built-in profiles and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, default_value_t = 256)]
    b_max: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Time real forward passes of the configured model on this machine.
    #[arg(long, conflicts_with = "simulated")]
    real: bool,
    /// Use the roofline cost model (default).
    #[arg(long)]
    simulated: bool,
    /// Model shape used for calibration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for `target.ckpt` and `draft.ckpt`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Override the config's decode settings with a bench strategy.
    #[arg(long)]
    strategy: Option<String>,
    /// Per-iteration metrics as JSON lines.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Directory for the trained checkpoints.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Vanilla,
    Fixed,
    Adaptive,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long, value_enum, default_value = "adaptive")]
    mode: Mode,
    /// Problem such as `17+25`; repeatable.
    #[arg(long)]
    prompt: Vec<String>,
    /// Sampled problems when no `--prompt` is given.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Responses per prompt.
    #[arg(long, default_value_t = 1)]
    g: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Comma-separated strategy names; all of them by default.
    #[arg(long)]
    strategies: Option<String>,
    /// Report path: `.json` for the full report, CSV otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_json(&text)?)
        }
    }
}

fn load_models(cfg: &TrainConfig, m: &ModelArgs) -> Result<(ModelParams, DraftParams)> {
    let (target, draft) = match (&m.target, &m.draft) {
        (Some(t), Some(d)) => (load_target(t)?, load_draft(d)?),
        (Some(t), None) => (load_target(t)?, DraftParams::init(cfg.draft_config())?),
        (None, Some(d)) => (prepare_models(cfg)?.0, load_draft(d)?),
        (None, None) => prepare_models(cfg)?,
    };
    if target.config() != &cfg.model {
        return Err(Error::InvalidConfig(
            "target checkpoint does not match the config's model".into(),
        )
        .into());
    }
    if draft.config() != &cfg.draft_config() {
        return Err(Error::InvalidConfig(
            "draft checkpoint does not match the config's draft".into(),
        )
        .into());
    }
    Ok((target, draft))
}

fn render(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            BOS => String::new(),
            EOS => "<eos>".into(),
            PLUS => "+".into(),
            EQ => "=".into(),
            _ => token_digit(t).map_or_else(|| format!("<{t}>"), |d| d.to_string()),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_problem(s: &str, task: &TaskSpec) -> Result<Problem> {
    let bad = || {
        Error::BadPrompt(format!(
            "{s:?} is not `a+b` with at most {} digits each",
            task.max_digits
        ))
    };
    let (a, b) = s.split_once('+').ok_or_else(bad)?;
    let parse = |x: &str| match x.trim().parse::<u64>() {
        Ok(v) if v < 10u64.pow(task.max_digits) => Ok(v),
        _ => Err(bad()),
    };
    Ok(Problem {
        a: parse(a)?,
        b: parse(b)?,
    })
}

fn profile(a: ProfileArgs) -> Result<()> {
    if a.list {
        println!(
            "{:<22} {:>10} {:>8} {:>8}",
            "name", "TFLOPS", "TB/s", "I_peak"
        );
        for p in HardwareProfile::builtin() {
            println!(
                "{:<22} {:>10.1} {:>8.3} {:>8.1}",
                p.name,
                p.peak_flops / 1e12,
                p.bandwidth / 1e12,
                peak_intensity(&p)?
            );
        }
        return Ok(());
    }
    let base = HardwareProfile::by_name(&a.gpu)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown profile {:?}", a.gpu)))?;
    let cfg = load_config(a.config.as_deref())?;
    let out = if a.real {
        let shape = ModelConfig {
            max_seq_len: cfg.model.max_seq_len.max(a.b_max),
            ..cfg.model
        };
        let model = ModelParams::init(shape)?;
        let m = measure_c_peak(
            |b| {
                let tokens = vec![BOS; b];
                let pos: Vec<usize> = (0..b).collect();
                let mut cache = KvCache::new(model.config());
                time_call(|| {
                    forward_target(&model, &tokens, &pos, None, &mut cache).expect("forward");
                })
            },
            MeasureOptions {
                b_max: a.b_max,
                warmup: a.warmup,
                reps: a.reps,
                ..MeasureOptions::default()
            },
        )?;
        if m.low_confidence {
            eprintln!(
                "warning: low-confidence knee (confidence {:.3})",
                m.confidence
            );
        }
        HardwareProfile {
            name: format!("{} (measured on this machine)", base.name),
            c_peak: m.c_peak,
            confidence: m.confidence,
            latency_curve: m.curve,
            ..base
        }
    } else {
        calibrate(&base, &cfg.model, a.b_max)?
    };
    eprintln!("I_peak {:.1}, c_peak {}", peak_intensity(&out)?, out.c_peak);
    let json = out.to_json()?;
    match a.out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let pre = cfg.pretrain.take().unwrap_or_default();
    let (target, mut draft) = prepare_models(&cfg)?;
    let losses = pretrain_draft(&target, &mut draft, &cfg.task, &pre)?;
    fs::create_dir_all(&a.out_dir)?;
    save_target(&target, &a.out_dir.join("target.ckpt"))?;
    save_draft(&draft, &a.out_dir.join("draft.ckpt"))?;
    println!("{}", serde_json::to_string(&losses)?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.models.config.as_deref())?;
    if let Some(s) = &a.strategy {
        s.parse::<Strategy>()?.apply(&mut cfg);
    }
    let (target, draft) = load_models(&cfg, &a.models)?;
    let profile = resolve_profile(&cfg)?;
    let (target, draft, trace) = train_loop(&cfg, target, draft, profile)?;
    if let Some(p) = &a.metrics_out {
        write_metrics(p, &trace)?;
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        save_target(&target, &dir.join("target.ckpt"))?;
        save_draft(&draft, &dir.join("draft.ckpt"))?;
    }
    if !trace.is_empty() {
        println!(
            "{}",
            serde_json::to_string_pretty(&RunMetrics::from_trace(&trace, DEFAULT_WINDOW)?)?
        );
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(a.models.config.as_deref())?;
    let (target, draft) = load_models(&cfg, &a.models)?;
    let profile = resolve_profile(&cfg)?;
    let problems: Vec<Problem> = if a.prompt.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        (0..a.n)
            .map(|_| cfg.task.sample_problem(&mut rng))
            .collect()
    } else {
        a.prompt
            .iter()
            .map(|s| parse_problem(s, &cfg.task))
            .collect::<Result<_>>()?
    };
    let prompts: Vec<Vec<u32>> = problems
        .iter()
        .map(|&p| cfg.task.encode_prompt(p))
        .collect();
    let c_peak = cfg.sched.c_peak.unwrap_or(profile.c_peak);
    let gen = GenConfig {
        mode: match a.mode {
            Mode::Vanilla => DecodeMode::Vanilla,
            Mode::Fixed => DecodeMode::FixedSpec,
            Mode::Adaptive => DecodeMode::AdaptiveSpec,
        },
        early_term: cfg.mode.early_term,
        g: a.g,
        temperature: a.temperature,
        seed: a.seed,
        sched: cfg.sched_params(c_peak),
        fixed: Some(cfg.fixed_spec(c_peak)),
        ..GenConfig::default()
    };
    let (state, stats) = generate_dynamic_batch(&target, Some(&draft), &prompts, &gen, &profile)?;
    for s in &state.sequences {
        let prompt = &s.tokens[..s.prompt_len];
        let reward = cfg.task.reward(prompt, s.response());
        println!(
            "{} | {}   reward {reward}",
            render(prompt),
            render(s.response())
        );
    }
    eprintln!(
        "tau {:.3}, simulated gen time {:.4e}s, {} steps",
        stats.tau(),
        stats.gen_time_s,
        stats.records.len()
    );
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let cfg = load_config(a.models.config.as_deref())?;
    let strategies = match &a.strategies {
        Some(s) => Strategy::parse_list(s)?,
        None => Strategy::ALL.to_vec(),
    };
    let (target, draft) = load_models(&cfg, &a.models)?;
    let profile = resolve_profile(&cfg)?;
    let report = bench(&strategies, &cfg, &target, &draft, &profile)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = &a.out {
        let body = if p.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(&report)?
        } else {
            csv
        };
        fs::write(p, body)?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence(_)) => 3,
        Some(
            Error::InvalidConfig(_)
            | Error::UnknownStrategy(_)
            | Error::Json(_)
            | Error::BadPrompt(_)
            | Error::Checkpoint(_)
            | Error::TooFewPoints { .. },
        ) => 2,
        _ if e.downcast_ref::<std::io::Error>().is_some() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Profile(a) => profile(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Train(a) => train(a),
        Cmd::Generate(a) => generate(a),
        Cmd::Bench(a) => run_bench(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
