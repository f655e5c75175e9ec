//! Draft head: predicts the target's next hidden state from the previous
//! token and hidden state, and decodes it through the target's LM head.
//!
//! Each block is a pre-norm residual unit. Because the draft runs one
//! position at a time, its attention reduces to the value/output projection
//! of the single visible position.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{normal_fill, Cursor, LmHead};
use super::ops::{
    self, bias_back, gelu, gelu_grad, layer_norm, layer_norm_back, matmul, matmul_back_input,
    matmul_back_weight,
};
use crate::error::{Error, Result};

/// Dimensions of the draft head. `d_model` and `vocab_size` must match the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl DraftConfig {
    /// One block with `d_ff = d_model`, sized for the given target.
    pub fn for_target(target: &super::ModelConfig, seed: u64) -> Self {
        Self {
            vocab_size: target.vocab_size,
            d_model: target.d_model,
            n_layers: 1,
            d_ff: target.d_model,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig(format!("bad draft dims {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        DraftLayout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DraftBlock {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_v: Range<usize>,
    w_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_up: Range<usize>,
    b_up: Range<usize>,
    w_down: Range<usize>,
    b_down: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DraftLayout {
    emb: Range<usize>,
    w_fc: Range<usize>,
    b_fc: Range<usize>,
    blocks: Vec<DraftBlock>,
    total: usize,
}

impl DraftLayout {
    fn new(cfg: &DraftConfig) -> Self {
        let d = cfg.d_model;
        let mut c = Cursor(0);
        let emb = c.take(cfg.vocab_size * d);
        let w_fc = c.take(2 * d * d);
        let b_fc = c.take(d);
        let blocks = (0..cfg.n_layers)
            .map(|_| DraftBlock {
                ln1_g: c.take(d),
                ln1_b: c.take(d),
                w_v: c.take(d * d),
                w_o: c.take(d * d),
                ln2_g: c.take(d),
                ln2_b: c.take(d),
                w_up: c.take(d * cfg.d_ff),
                b_up: c.take(cfg.d_ff),
                w_down: c.take(cfg.d_ff * d),
                b_down: c.take(d),
            })
            .collect();
        Self {
            emb,
            w_fc,
            b_fc,
            blocks,
            total: c.0,
        }
    }
}

/// Draft head weights in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftParams {
    config: DraftConfig,
    layout: DraftLayout,
    data: Vec<f32>,
}

impl DraftParams {
    pub fn init(config: DraftConfig) -> Result<Self> {
        config.validate()?;
        let layout = DraftLayout::new(&config);
        let mut data = vec![0.0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model as f32;
        let resid = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        normal_fill(&mut rng, &mut data[layout.emb.clone()], 0.5);
        normal_fill(
            &mut rng,
            &mut data[layout.w_fc.clone()],
            1.0 / (2.0 * d).sqrt(),
        );
        for b in &layout.blocks {
            data[b.ln1_g.clone()].fill(1.0);
            data[b.ln2_g.clone()].fill(1.0);
            normal_fill(&mut rng, &mut data[b.w_v.clone()], 1.0 / d.sqrt());
            normal_fill(&mut rng, &mut data[b.w_o.clone()], resid / d.sqrt());
            normal_fill(&mut rng, &mut data[b.w_up.clone()], 1.0 / d.sqrt());
            normal_fill(
                &mut rng,
                &mut data[b.w_down.clone()],
                resid / (config.d_ff as f32).sqrt(),
            );
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn from_vec(config: DraftConfig, data: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = DraftLayout::new(&config);
        if data.len() != layout.total {
            return Err(Error::DimensionMismatch {
                what: "draft parameter count",
                expected: layout.total,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "non-finite draft parameter at {i}"
            )));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &DraftConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn slice(&self, r: &Range<usize>) -> &[f32] {
        &self.data[r.clone()]
    }

    fn check_head(&self, head: &LmHead<'_>) -> Result<()> {
        if head.d_model != self.config.d_model || head.vocab_size != self.config.vocab_size {
            return Err(Error::DimensionMismatch {
                what: "lm head",
                expected: self.config.d_model * self.config.vocab_size,
                got: head.d_model * head.vocab_size,
            });
        }
        Ok(())
    }
}

struct BlockActs {
    xhat1: Vec<f32>,
    rstd1: Vec<f32>,
    h1: Vec<f32>,
    v: Vec<f32>,
    xhat2: Vec<f32>,
    rstd2: Vec<f32>,
    h2: Vec<f32>,
    up_pre: Vec<f32>,
    up_act: Vec<f32>,
}

struct Acts {
    input: Vec<f32>,
    blocks: Vec<BlockActs>,
    out: Vec<f32>,
}

fn check_rows(draft: &DraftParams, tokens: &[u32], prev_hidden: &[f32]) -> Result<()> {
    let d = draft.config.d_model;
    if prev_hidden.len() != tokens.len() * d {
        return Err(Error::DimensionMismatch {
            what: "prev_hidden",
            expected: tokens.len() * d,
            got: prev_hidden.len(),
        });
    }
    if let Some(&t) = tokens
        .iter()
        .find(|&&t| t as usize >= draft.config.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: draft.config.vocab_size,
        });
    }
    Ok(())
}

fn forward_rows(draft: &DraftParams, tokens: &[u32], prev_hidden: &[f32]) -> Acts {
    let cfg = draft.config;
    let (d, ff, n) = (cfg.d_model, cfg.d_ff, tokens.len());
    let lay = &draft.layout;
    let emb = draft.slice(&lay.emb);
    let mut input = vec![0.0f32; n * 2 * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut input[i * 2 * d..(i + 1) * 2 * d];
        row[..d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        row[d..].copy_from_slice(&prev_hidden[i * d..(i + 1) * d]);
    }
    let mut x = vec![0.0f32; n * d];
    matmul(
        &mut x,
        &input,
        draft.slice(&lay.w_fc),
        Some(draft.slice(&lay.b_fc)),
        2 * d,
        d,
    );
    let mut tmp = vec![0.0f32; n * d];
    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for b in &lay.blocks {
        let mut xhat1 = vec![0.0; n * d];
        let mut rstd1 = vec![0.0; n];
        let mut h1 = vec![0.0; n * d];
        layer_norm(
            &mut h1,
            &x,
            draft.slice(&b.ln1_g),
            draft.slice(&b.ln1_b),
            Some(&mut xhat1),
            Some(&mut rstd1),
        );
        let mut v = vec![0.0; n * d];
        matmul(&mut v, &h1, draft.slice(&b.w_v), None, d, d);
        matmul(&mut tmp, &v, draft.slice(&b.w_o), None, d, d);
        ops::axpy(&mut x, 1.0, &tmp);
        let mut xhat2 = vec![0.0; n * d];
        let mut rstd2 = vec![0.0; n];
        let mut h2 = vec![0.0; n * d];
        layer_norm(
            &mut h2,
            &x,
            draft.slice(&b.ln2_g),
            draft.slice(&b.ln2_b),
            Some(&mut xhat2),
            Some(&mut rstd2),
        );
        let mut up_pre = vec![0.0; n * ff];
        matmul(
            &mut up_pre,
            &h2,
            draft.slice(&b.w_up),
            Some(draft.slice(&b.b_up)),
            d,
            ff,
        );
        let up_act: Vec<f32> = up_pre.iter().map(|&u| gelu(u)).collect();
        matmul(
            &mut tmp,
            &up_act,
            draft.slice(&b.w_down),
            Some(draft.slice(&b.b_down)),
            ff,
            d,
        );
        ops::axpy(&mut x, 1.0, &tmp);
        blocks.push(BlockActs {
            xhat1,
            rstd1,
            h1,
            v,
            xhat2,
            rstd2,
            h2,
            up_pre,
            up_act,
        });
    }
    Acts {
        input,
        blocks,
        out: x,
    }
}

/// One draft step: returns the predicted next hidden state and its logits
/// under the target's LM head.
pub fn forward_draft(
    draft: &DraftParams,
    prev_token: u32,
    prev_hidden: &[f32],
    head: LmHead<'_>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    draft.check_head(&head)?;
    check_rows(draft, &[prev_token], prev_hidden)?;
    let acts = forward_rows(draft, &[prev_token], prev_hidden);
    let mut logits = vec![0.0f32; head.vocab_size];
    matmul(
        &mut logits,
        &acts.out,
        head.weight,
        None,
        head.d_model,
        head.vocab_size,
    );
    Ok((acts.out, logits))
}

/// Batched [`forward_draft`] over independent rows.
pub fn forward_draft_batch(
    draft: &DraftParams,
    tokens: &[u32],
    prev_hidden: &[f32],
    head: LmHead<'_>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    draft.check_head(&head)?;
    check_rows(draft, tokens, prev_hidden)?;
    let acts = forward_rows(draft, tokens, prev_hidden);
    let mut logits = vec![0.0f32; tokens.len() * head.vocab_size];
    matmul(
        &mut logits,
        &acts.out,
        head.weight,
        None,
        head.d_model,
        head.vocab_size,
    );
    Ok((acts.out, logits))
}

/// Per-term draft losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DraftLoss {
    /// Mean elementwise smooth-L1 between predicted and target hidden states.
    pub feature: f64,
    /// Mean cross-entropy of the next token under the LM head.
    pub token: f64,
    /// `w_feat · feature + w_tok · token`.
    pub total: f64,
}

/// Training rows for the draft head.
///
/// Row `i` feeds `(tokens[i], prev_hidden[i])` and asks for
/// `target_hidden[i]` and `next_tokens[i]`.
#[derive(Debug, Clone, Copy)]
pub struct DraftRows<'a> {
    pub tokens: &'a [u32],
    pub prev_hidden: &'a [f32],
    pub target_hidden: &'a [f32],
    pub next_tokens: &'a [u32],
}

#[inline]
fn smooth_l1(diff: f32) -> (f32, f32) {
    let a = diff.abs();
    if a < 1.0 {
        (0.5 * diff * diff, diff)
    } else {
        (a - 0.5, diff.signum())
    }
}

/// Computes the draft loss and adds its gradient into `grad`. The LM head
/// is read but receives no gradient.
pub fn draft_loss_grad(
    draft: &DraftParams,
    rows: DraftRows<'_>,
    head: LmHead<'_>,
    w_feat: f32,
    w_tok: f32,
    grad: &mut [f32],
) -> Result<DraftLoss> {
    draft.check_head(&head)?;
    check_rows(draft, rows.tokens, rows.prev_hidden)?;
    let cfg = draft.config;
    let (d, ff, v, n) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, rows.tokens.len());
    if rows.target_hidden.len() != n * d || rows.next_tokens.len() != n {
        return Err(Error::DimensionMismatch {
            what: "draft targets",
            expected: n,
            got: rows.next_tokens.len(),
        });
    }
    if grad.len() != draft.param_count() {
        return Err(Error::DimensionMismatch {
            what: "draft gradient buffer",
            expected: draft.param_count(),
            got: grad.len(),
        });
    }
    if let Some(&t) = rows.next_tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: v,
        });
    }
    if n == 0 {
        return Ok(DraftLoss::default());
    }
    let acts = forward_rows(draft, rows.tokens, rows.prev_hidden);
    let mut logits = vec![0.0f32; n * v];
    matmul(&mut logits, &acts.out, head.weight, None, d, v);

    let feat_scale = w_feat / (n * d) as f32;
    let tok_scale = w_tok / n as f32;
    let mut feat = 0.0f64;
    let mut tok = 0.0f64;
    let mut dout = vec![0.0f32; n * d];
    for (i, (o, t)) in acts.out.iter().zip(rows.target_hidden).enumerate() {
        let (l, g) = smooth_l1(o - t);
        feat += l as f64;
        dout[i] = feat_scale * g;
    }
    let mut dlogits = vec![0.0f32; n * v];
    for i in 0..n {
        let lp = ops::log_softmax(&logits[i * v..(i + 1) * v]);
        let y = rows.next_tokens[i] as usize;
        tok -= lp[y];
        let dr = &mut dlogits[i * v..(i + 1) * v];
        for j in 0..v {
            dr[j] = tok_scale * lp[j].exp() as f32;
        }
        dr[y] -= tok_scale;
    }
    matmul_back_input(&mut dout, &dlogits, head.weight, d, v);
    let feature = feat / (n * d) as f64;
    let token = tok / n as f64;

    let lay = &draft.layout;
    let g = |r: &Range<usize>| r.clone();
    let mut dx = dout;
    let mut dtmp = vec![0.0f32; n * d];
    for (b, a) in lay.blocks.iter().zip(&acts.blocks).rev() {
        matmul_back_weight(&mut grad[g(&b.w_down)], &a.up_act, &dx, ff, d);
        bias_back(&mut grad[g(&b.b_down)], &dx);
        let mut dup = vec![0.0f32; n * ff];
        matmul_back_input(&mut dup, &dx, draft.slice(&b.w_down), ff, d);
        for (du, &u) in dup.iter_mut().zip(&a.up_pre) {
            *du *= gelu_grad(u);
        }
        matmul_back_weight(&mut grad[g(&b.w_up)], &a.h2, &dup, d, ff);
        bias_back(&mut grad[g(&b.b_up)], &dup);
        dtmp.fill(0.0);
        matmul_back_input(&mut dtmp, &dup, draft.slice(&b.w_up), d, ff);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_back(
            &mut dx,
            &dtmp,
            &a.xhat2,
            &a.rstd2,
            draft.slice(&b.ln2_g),
            &mut dg,
            &mut db,
        );
        ops::axpy(&mut grad[g(&b.ln2_g)], 1.0, &dg);
        ops::axpy(&mut grad[g(&b.ln2_b)], 1.0, &db);

        matmul_back_weight(&mut grad[g(&b.w_o)], &a.v, &dx, d, d);
        let mut dv = vec![0.0f32; n * d];
        matmul_back_input(&mut dv, &dx, draft.slice(&b.w_o), d, d);
        matmul_back_weight(&mut grad[g(&b.w_v)], &a.h1, &dv, d, d);
        dtmp.fill(0.0);
        matmul_back_input(&mut dtmp, &dv, draft.slice(&b.w_v), d, d);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_back(
            &mut dx,
            &dtmp,
            &a.xhat1,
            &a.rstd1,
            draft.slice(&b.ln1_g),
            &mut dg,
            &mut db,
        );
        ops::axpy(&mut grad[g(&b.ln1_g)], 1.0, &dg);
        ops::axpy(&mut grad[g(&b.ln1_b)], 1.0, &db);
    }
    matmul_back_weight(&mut grad[g(&lay.w_fc)], &acts.input, &dx, 2 * d, d);
    bias_back(&mut grad[g(&lay.b_fc)], &dx);
    let mut dinput = vec![0.0f32; n * 2 * d];
    matmul_back_input(&mut dinput, &dx, draft.slice(&lay.w_fc), 2 * d, d);
    for (i, &t) in rows.tokens.iter().enumerate() {
        let t = t as usize;
        ops::axpy(
            &mut grad[lay.emb.start + t * d..lay.emb.start + (t + 1) * d],
            1.0,
            &dinput[i * 2 * d..i * 2 * d + d],
        );
    }
    Ok(DraftLoss {
        feature,
        token,
        total: w_feat as f64 * feature + w_tok as f64 * token,
    })
}
