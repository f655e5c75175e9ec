mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrl_core::grpo::task::{digit_token, EOS, EQ};
use specrl_core::grpo::*;
use specrl_core::optim::{AdamW, AdamWConfig};
use specrl_core::roofline::HardwareProfile;
use specrl_core::scheduler::{generate_dynamic_batch, DecodeMode, GenConfig};
use specrl_core::tinylm::*;
use specrl_core::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 24,
        seed: 3,
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            max_seq_len: 20,
            ..tiny_model()
        },
        task: TaskSpec {
            min_digits: 1,
            max_digits: 2,
            digit_decay: 0.5,
        },
        grpo: GrpoParams {
            g: 4,
            prompts_per_iter: 3,
            iterations: 4,
            ..GrpoParams::default()
        },
        sched: SchedSection {
            profile: "desk".into(),
            ..SchedSection::default()
        },
        sft: None,
        pretrain: None,
        mode: ModeParams {
            spec_warmup: 0,
            ..ModeParams::default()
        },
        ..TrainConfig::default()
    }
}

fn random_groups(seed: u64) -> Vec<GroupBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|gi| {
            let prompt: Vec<u32> = (0..4).map(|_| rng.random_range(0..16)).collect();
            let responses: Vec<Vec<u32>> = (0..3)
                .map(|_| {
                    (0..rng.random_range(1..6))
                        .map(|_| rng.random_range(0..16))
                        .collect()
                })
                .collect();
            let rewards = if gi == 0 {
                vec![1.0, 0.0, 0.5]
            } else {
                vec![0.0, 1.0, 1.0]
            };
            let advantages = standardize_advantages(&rewards, EPS_VAR).unwrap();
            GroupBatch {
                prompt,
                responses,
                rewards,
                advantages,
            }
        })
        .collect()
}

#[test]
fn reward_fixtures() {
    let task = TaskSpec::default();
    let prompt = task.encode_prompt(Problem { a: 7, b: 5 });
    let mut good = task.reference_response(Problem { a: 7, b: 5 });
    assert_eq!(
        &good[good.len() - 4..],
        &[EQ, digit_token(1), digit_token(2), EOS]
    );
    assert_eq!(task.reward(&prompt, &good), 1.0);
    let n = good.len();
    good[n - 2] = digit_token(3);
    assert_eq!(task.reward(&prompt, &good), 0.0);
    assert_eq!(task.reward(&prompt, &[digit_token(7), digit_token(5)]), 0.0);
    assert_eq!(task.reward(&prompt, &[]), 0.0);
    assert_eq!(task.reward(&[1, 2, 3], &good), 0.0);
    assert_eq!(
        compute_rewards(
            &task,
            &prompt,
            &[vec![EQ, digit_token(1), digit_token(2)], vec![EQ]]
        ),
        vec![1.0, 0.0]
    );
}

#[test]
fn advantage_fixtures() {
    assert_eq!(
        standardize_advantages(&[1.0, 1.0, 0.0, 0.0], EPS_VAR)
            .unwrap()
            .unwrap(),
        vec![1.0, 1.0, -1.0, -1.0]
    );
    assert_eq!(standardize_advantages(&[1.0; 4], EPS_VAR).unwrap(), None);
    let a = standardize_advantages(&[1.0, 0.0, 0.0, 0.0], EPS_VAR)
        .unwrap()
        .unwrap();
    for (x, y) in a.iter().zip([1.732, -0.577, -0.577, -0.577]) {
        assert!((x - y).abs() < 1e-3);
    }
    assert!(matches!(
        standardize_advantages(&[1.0], EPS_VAR),
        Err(Error::GroupTooSmall(1))
    ));
}

proptest! {
    #[test]
    fn advantages_are_standardized(r in prop::collection::vec(0.0f64..1.0, 2..16)) {
        match standardize_advantages(&r, EPS_VAR).unwrap() {
            None => {
                let m = r.iter().sum::<f64>() / r.len() as f64;
                prop_assert!(r.iter().all(|x| (x - m).abs() < 1e-6));
            }
            Some(a) => {
                let n = a.len() as f64;
                let mean = a.iter().sum::<f64>() / n;
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampled_problems_round_trip(seed in any::<u64>()) {
        let task = TaskSpec::default();
        let p = task.sample_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        let prompt = task.encode_prompt(p);
        prop_assert_eq!(prompt.len(), task.prompt_len());
        prop_assert_eq!(task.decode_prompt(&prompt).unwrap(), p);
        let resp = task.reference_response(p);
        prop_assert!(resp.len() <= task.max_response_len());
        prop_assert_eq!(task.reward(&prompt, &resp), 1.0);
    }
}

#[test]
fn zero_advantages_leave_params() {
    let mut p = init_model(tiny_model()).unwrap();
    let before = p.clone();
    let mut groups = random_groups(1);
    for g in &mut groups {
        g.advantages = Some(vec![0.0; g.responses.len()]);
    }
    let mut opt = AdamW::new(AdamWConfig::default(), p.param_count());
    let s = policy_update(&mut p, &mut opt, &groups).unwrap();
    assert!(!s.skipped);
    assert_eq!(p, before);
    for g in &mut groups {
        g.advantages = None;
    }
    assert!(policy_update(&mut p, &mut opt, &groups).unwrap().skipped);
    assert_eq!(p, before);
}

/// Two one-token responses with advantages ±1: the LM-head gradient is
/// `h · (δ_{y2} − δ_{y1}) / 2` in closed form.
#[test]
fn single_token_gradient_is_analytic() {
    let p = init_model(tiny_model()).unwrap();
    let prompt = vec![2u32, 7, 3, 9];
    let (y1, y2) = (5u32, 11u32);
    let groups = vec![GroupBatch {
        prompt: prompt.clone(),
        responses: vec![vec![y1], vec![y2]],
        rewards: vec![1.0, 0.0],
        advantages: standardize_advantages(&[1.0, 0.0], EPS_VAR).unwrap(),
    }];
    let mut grad = vec![0.0f32; p.param_count()];
    policy_loss_grad(&p, &groups, &mut grad).unwrap();
    let out = forward_target(
        &p,
        &prompt,
        &[0, 1, 2, 3],
        None,
        &mut KvCache::new(p.config()),
    )
    .unwrap();
    let h = out.hidden_row(3);
    let head = &grad[p.lm_head_range()];
    for i in 0..16 {
        for j in 0..16 {
            let delta = (j as u32 == y2) as i32 as f32 - (j as u32 == y1) as i32 as f32;
            let want = 0.5 * h[i] * delta;
            assert!(
                (head[i * 16 + j] - want).abs() < 1e-5,
                "({i},{j}) {} vs {want}",
                head[i * 16 + j]
            );
        }
    }
}

#[test]
fn policy_gradient_matches_reference_differences() {
    let p = init_model(tiny_model()).unwrap();
    let groups = random_groups(7);
    let mut grad = vec![0.0f32; p.param_count()];
    let (loss, _) = policy_loss_grad(&p, &groups, &mut grad).unwrap();
    let (cfg, x) = common::target_view(&p);
    assert!((common::policy_loss(&cfg, &x, &groups) - loss).abs() < 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let i = nonzero[rng.random_range(0..nonzero.len())];
        let fd = common::central_diff(&x, i, 1e-5, |q| common::policy_loss(&cfg, q, &groups));
        worst = worst.max(common::rel_err(grad[i] as f64, fd));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

fn draft_fixture() -> (ModelParams, DraftParams, DraftTrainBatch) {
    let t = init_model(tiny_model()).unwrap();
    let d = DraftParams::init(DraftConfig::for_target(t.config(), 2)).unwrap();
    let gen = GenConfig {
        mode: DecodeMode::Vanilla,
        g: 3,
        temperature: 1.0,
        ..GenConfig::default()
    };
    let prompts = vec![vec![2u32, 8, 9], vec![2, 6, 12, 3]];
    let (s, _) =
        generate_dynamic_batch(&t, None, &prompts, &gen, &HardwareProfile::desk()).unwrap();
    let batch = DraftTrainBatch::from_sequences(16, &s.sequences);
    (t, d, batch)
}

#[test]
fn draft_batch_aligns_with_tokens() {
    let t = init_model(tiny_model()).unwrap();
    let gen = GenConfig {
        mode: DecodeMode::Vanilla,
        g: 2,
        temperature: 1.0,
        ..GenConfig::default()
    };
    let prompts = vec![vec![2u32, 8, 9]];
    let (s, _) =
        generate_dynamic_batch(&t, None, &prompts, &gen, &HardwareProfile::desk()).unwrap();
    for seq in &s.sequences {
        let b = DraftTrainBatch::from_sequences(16, [seq]);
        assert_eq!(b.len(), seq.response().len());
        let pos: Vec<usize> = (0..seq.tokens.len()).collect();
        let full =
            forward_target(&t, &seq.tokens, &pos, None, &mut KvCache::new(t.config())).unwrap();
        for r in 0..b.len() {
            let at = seq.prompt_len - 1 + r;
            assert_eq!(b.tokens[r], seq.tokens[at]);
            assert_eq!(b.next_tokens[r], seq.tokens[at + 1]);
            let want = full.hidden_row(at);
            let got = &b.target_hidden[r * 16..(r + 1) * 16];
            assert!(want.iter().zip(got).all(|(a, b)| (a - b).abs() < 1e-4));
            if at > 0 {
                let prev = &b.prev_hidden[r * 16..(r + 1) * 16];
                assert!(full
                    .hidden_row(at - 1)
                    .iter()
                    .zip(prev)
                    .all(|(a, b)| (a - b).abs() < 1e-4));
            }
        }
    }
}

#[test]
fn draft_gradient_matches_reference_differences() {
    let (t, d, batch) = draft_fixture();
    let mut grad = vec![0.0f32; d.param_count()];
    let rows = DraftRows {
        tokens: &batch.tokens,
        prev_hidden: &batch.prev_hidden,
        target_hidden: &batch.target_hidden,
        next_tokens: &batch.next_tokens,
    };
    let l = draft_loss_grad(&d, rows, t.lm_head(), 1.0, 0.1, &mut grad).unwrap();
    let cfg = *d.config();
    let head = common::to_f64(t.lm_head().weights());
    let (ph, th) = (
        common::to_f64(&batch.prev_hidden),
        common::to_f64(&batch.target_hidden),
    );
    let f = |q: &[f64]| {
        common::draft_loss(
            cfg.d_model,
            cfg.d_ff,
            cfg.vocab_size,
            cfg.n_layers,
            q,
            &head,
            &batch.tokens,
            &ph,
            &th,
            &batch.next_tokens,
            1.0,
            0.1,
        )
    };
    let x = common::draft_view(&d);
    assert!((f(&x) - l.total).abs() < 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let i = nonzero[rng.random_range(0..nonzero.len())];
        worst = worst.max(common::rel_err(
            grad[i] as f64,
            common::central_diff(&x, i, 1e-5, f),
        ));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn draft_update_behaviour() {
    let (t, mut d, batch) = draft_fixture();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        d.param_count(),
    );
    let p = DraftUpdateParams {
        minibatch: batch.len(),
        ..DraftUpdateParams::default()
    };
    let first = draft_batch_loss(&d, &batch, t.lm_head(), p.w_feat, p.w_tok).unwrap();
    for _ in 0..20 {
        draft_update(&mut d, &mut opt, &batch, t.lm_head(), &p).unwrap();
    }
    let last = draft_batch_loss(&d, &batch, t.lm_head(), p.w_feat, p.w_tok).unwrap();
    assert!(
        last.total < first.total,
        "{} -> {}",
        first.total,
        last.total
    );

    let before = d.clone();
    let empty = DraftTrainBatch::new(16);
    assert!(draft_update(&mut d, &mut opt, &empty, t.lm_head(), &p)
        .unwrap()
        .is_none());
    assert_eq!(d, before);

    // targets equal to the draft's own predictions
    let (pred, _) =
        forward_draft_batch(&d, &batch.tokens, &batch.prev_hidden, t.lm_head()).unwrap();
    let exact = DraftTrainBatch {
        target_hidden: pred,
        ..batch.clone()
    };
    assert_eq!(
        draft_batch_loss(&d, &exact, t.lm_head(), p.w_feat, p.w_tok)
            .unwrap()
            .feature,
        0.0
    );
}

#[test]
fn zero_iterations_leave_models() {
    let cfg = TrainConfig {
        grpo: GrpoParams {
            iterations: 0,
            ..tiny_train().grpo
        },
        ..tiny_train()
    };
    let t = init_model(cfg.model).unwrap();
    let d = DraftParams::init(cfg.draft_config()).unwrap();
    let (t2, d2, trace) = train_loop(&cfg, t.clone(), d.clone(), HardwareProfile::desk()).unwrap();
    assert!(trace.is_empty());
    assert_eq!(t2, t);
    assert_eq!(d2, d);
}

#[test]
fn frozen_models_keep_tau() {
    let mut cfg = tiny_train();
    cfg.grpo.policy_lr = 0.0;
    cfg.grpo.iterations = 6;
    cfg.grpo.prompts_per_iter = 16;
    cfg.grpo.g = 8;
    cfg.mode.online_draft = false;
    let t = init_model(cfg.model).unwrap();
    let d = DraftParams::init(cfg.draft_config()).unwrap();
    let (t2, d2, trace) = train_loop(&cfg, t.clone(), d.clone(), HardwareProfile::desk()).unwrap();
    assert_eq!(d2, d);
    assert_eq!(t2, t);
    let mean = trace.iter().map(|m| m.tau).sum::<f64>() / trace.len() as f64;
    let taus: Vec<f64> = trace.iter().map(|m| m.tau).collect();
    assert!(
        trace.iter().all(|m| (m.tau - mean).abs() <= 0.05),
        "{taus:?}"
    );
}

#[test]
fn filtered_groups_still_feed_the_draft() {
    // an untrained target never answers correctly, so every group is filtered
    let cfg = tiny_train();
    let t = init_model(cfg.model).unwrap();
    let d = DraftParams::init(cfg.draft_config()).unwrap();
    let mut tr = Trainer::new(cfg.clone(), t.clone(), d.clone(), HardwareProfile::desk()).unwrap();
    let m = tr.step().unwrap();
    assert_eq!(m.filtered_frac, 1.0);
    assert!(m.policy_skipped);
    assert_eq!(tr.target, t);
    assert!(m.draft_rows > 0);
    assert_eq!(m.draft_rows_filtered, m.draft_rows);
    assert_ne!(tr.draft, d);
    assert_eq!(m.draft_target_forwards, 0);
    let expected: usize = m
        .length_stats
        .iter()
        .map(|s| (s.mean * cfg.grpo.g as f64).round() as usize)
        .sum();
    assert_eq!(m.draft_rows, expected);
}

#[test]
fn config_validation() {
    assert!(tiny_train().validate().is_ok());
    let mut c = tiny_train();
    c.grpo.g = 1;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    let mut c = tiny_train();
    c.model.max_seq_len = 12;
    assert!(c.validate().is_err());
    let mut c = tiny_train();
    c.mode.decode_mode = DecodeMode::FixedSpec;
    c.mode.fixed = Some([1, 3, 2]);
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&tiny_train()).unwrap();
    assert_eq!(TrainConfig::from_json(&json).unwrap(), tiny_train());
    assert!(TrainConfig::from_json("{\"grpo\": {\"g\": 1}}").is_err());
    let partial = TrainConfig::from_json("{\"grpo\": {\"iterations\": 5}}").unwrap();
    assert_eq!(partial.grpo.iterations, 5);
    assert_eq!(partial.grpo.g, GrpoParams::default().g);
}

#[test]
fn metrics_serialize() {
    let cfg = tiny_train();
    let t = init_model(cfg.model).unwrap();
    let d = DraftParams::init(cfg.draft_config()).unwrap();
    let (_, _, trace) = train_loop(&cfg, t, d, HardwareProfile::desk()).unwrap();
    assert_eq!(trace.len(), 4);
    for m in &trace {
        let back: IterMetrics = serde_json::from_str(&serde_json::to_string(m).unwrap()).unwrap();
        assert_eq!(&back, m);
        assert_eq!(m.b_cur_trace.len(), m.accepted_trace.len());
        assert_eq!(m.length_stats.len(), cfg.grpo.prompts_per_iter);
        for s in &m.length_stats {
            assert!(s.min as f64 <= s.mean && s.mean <= s.max as f64);
        }
    }
}
