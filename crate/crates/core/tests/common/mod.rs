//! Double-precision reference implementations used as test oracles.
#![allow(dead_code)]

use specrl_core::grpo::GroupBatch;
use specrl_core::tinylm::{DraftParams, ModelConfig, ModelParams};

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) * r * g + b)
        .collect()
}

/// `x[k] · W[k×m] (+ bias)`
fn affine(x: &[f64], w: &[f64], bias: Option<&[f64]>, m: usize) -> Vec<f64> {
    let mut out = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; m],
    };
    for (k, &xk) in x.iter().enumerate() {
        for j in 0..m {
            out[j] += xk * w[k * m + j];
        }
    }
    out
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

struct Reader<'a> {
    p: &'a [f64],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.p[self.at..self.at + n];
        self.at += n;
        s
    }
}

/// Log-probability of every `targets[i]` given `inputs[..=i]`, causal.
pub fn target_log_probs(cfg: &ModelConfig, p: &[f64], inputs: &[u32], targets: &[u32]) -> Vec<f64> {
    let (v, d, f, nh) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.n_heads);
    let hd = d / nh;
    let mut r = Reader { p, at: 0 };
    let tok = r.take(v * d);
    let pos = r.take(cfg.max_seq_len * d);
    let n = inputs.len();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let t = inputs[i] as usize;
            (0..d).map(|j| tok[t * d + j] + pos[i * d + j]).collect()
        })
        .collect();
    for _ in 0..cfg.n_layers {
        let (g1, b1) = (r.take(d), r.take(d));
        let wqkv = r.take(3 * d * d);
        let wo = r.take(d * d);
        let (g2, b2) = (r.take(d), r.take(d));
        let (wu, bu) = (r.take(d * f), r.take(f));
        let (wd, bd) = (r.take(f * d), r.take(d));
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|row| affine(&layer_norm(row, g1, b1), wqkv, None, 3 * d))
            .collect();
        for i in 0..n {
            let mut att = vec![0.0; d];
            for h in 0..nh {
                let q = &qkv[i][h * hd..(h + 1) * hd];
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][d + h * hd..d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let w = log_softmax(&s);
                for j in 0..=i {
                    for c in 0..hd {
                        att[h * hd + c] += w[j].exp() * qkv[j][2 * d + h * hd + c];
                    }
                }
            }
            let o = affine(&att, wo, None, d);
            x[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        for row in x.iter_mut() {
            let up: Vec<f64> = affine(&layer_norm(row, g2, b2), wu, Some(bu), f)
                .into_iter()
                .map(gelu)
                .collect();
            let down = affine(&up, wd, Some(bd), d);
            row.iter_mut().zip(down).for_each(|(a, b)| *a += b);
        }
    }
    let (gf, bf) = (r.take(d), r.take(d));
    let head = r.take(d * v);
    (0..n)
        .map(|i| {
            log_softmax(&affine(&layer_norm(&x[i], gf, bf), head, None, v))[targets[i] as usize]
        })
        .collect()
}

/// Group-relative policy loss: mean over response tokens of unfiltered
/// groups of `−A · log p`.
pub fn policy_loss(cfg: &ModelConfig, p: &[f64], groups: &[GroupBatch]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for g in groups {
        let Some(adv) = &g.advantages else { continue };
        for (resp, a) in g.responses.iter().zip(adv) {
            let mut full = g.prompt.clone();
            full.extend(resp);
            let lp = target_log_probs(cfg, p, &full[..full.len() - 1], &full[1..]);
            total -= a * lp[g.prompt.len() - 1..].iter().sum::<f64>();
            count += resp.len();
        }
    }
    total / count as f64
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// `w_feat · mean smooth-L1 + w_tok · mean cross-entropy` of the draft on
/// teacher-forced rows, with the LM head taken from `head` (`d × V`).
#[allow(clippy::too_many_arguments)]
pub fn draft_loss(
    d: usize,
    ff: usize,
    v: usize,
    n_layers: usize,
    p: &[f64],
    head: &[f64],
    tokens: &[u32],
    prev_hidden: &[f64],
    target_hidden: &[f64],
    next_tokens: &[u32],
    w_feat: f64,
    w_tok: f64,
) -> f64 {
    let n = tokens.len();
    let mut feat = 0.0;
    let mut ce = 0.0;
    for i in 0..n {
        let mut r = Reader { p, at: 0 };
        let emb = r.take(v * d);
        let (wfc, bfc) = (r.take(2 * d * d), r.take(d));
        let t = tokens[i] as usize;
        let mut input = emb[t * d..(t + 1) * d].to_vec();
        input.extend_from_slice(&prev_hidden[i * d..(i + 1) * d]);
        let mut x = affine(&input, wfc, Some(bfc), d);
        for _ in 0..n_layers {
            let (g1, b1) = (r.take(d), r.take(d));
            let (wv, wo) = (r.take(d * d), r.take(d * d));
            let (g2, b2) = (r.take(d), r.take(d));
            let (wu, bu) = (r.take(d * ff), r.take(ff));
            let (wd, bd) = (r.take(ff * d), r.take(d));
            let a = affine(&affine(&layer_norm(&x, g1, b1), wv, None, d), wo, None, d);
            x.iter_mut().zip(a).for_each(|(s, b)| *s += b);
            let up: Vec<f64> = affine(&layer_norm(&x, g2, b2), wu, Some(bu), ff)
                .into_iter()
                .map(gelu)
                .collect();
            let down = affine(&up, wd, Some(bd), d);
            x.iter_mut().zip(down).for_each(|(s, b)| *s += b);
        }
        feat += x
            .iter()
            .zip(&target_hidden[i * d..(i + 1) * d])
            .map(|(a, b)| smooth_l1(a - b))
            .sum::<f64>();
        ce -= log_softmax(&affine(&x, head, None, v))[next_tokens[i] as usize];
    }
    w_feat * feat / (n * d) as f64 + w_tok * ce / n as f64
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `|a − b| / max(|a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Central difference of `f` along coordinate `i` of `p`.
pub fn central_diff(p: &[f64], i: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut q = p.to_vec();
    q[i] = p[i] + h;
    let up = f(&q);
    q[i] = p[i] - h;
    let down = f(&q);
    (up - down) / (2.0 * h)
}

pub fn target_view(p: &ModelParams) -> (ModelConfig, Vec<f64>) {
    (*p.config(), to_f64(p.as_slice()))
}

pub fn draft_view(d: &DraftParams) -> Vec<f64> {
    to_f64(d.as_slice())
}
