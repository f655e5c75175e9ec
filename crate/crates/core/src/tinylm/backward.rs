//! Full-sequence training pass of the target with hand-written backprop.

use super::forward::bump_forward_count;
use super::model::ModelParams;
use super::ops::{
    self, bias_back, gelu, gelu_grad, layer_norm, layer_norm_back, matmul, matmul_back_input,
    matmul_back_weight,
};
use crate::error::{Error, Result};

struct BlockActs {
    xhat1: Vec<f32>,
    rstd1: Vec<f32>,
    h1: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>, // [head][i][j], causal rows
    att: Vec<f32>,
    xhat2: Vec<f32>,
    rstd2: Vec<f32>,
    h2: Vec<f32>,
    up_pre: Vec<f32>,
    up_act: Vec<f32>,
}

/// Computes `Σ_t weights[t] · −log p(targets[t] | inputs[..=t])` and adds its
/// gradient with respect to every parameter into `grad`.
///
/// Positions with zero weight still run forward but contribute nothing.
/// Returns the weighted loss and the per-position log-probabilities.
pub fn weighted_nll_grad(
    params: &ModelParams,
    inputs: &[u32],
    targets: &[u32],
    weights: &[f32],
    grad: &mut [f32],
) -> Result<(f64, Vec<f64>)> {
    let cfg = *params.config();
    let (d, n, v, ff) = (cfg.d_model, inputs.len(), cfg.vocab_size, cfg.d_ff);
    if targets.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch {
            what: "targets/weights",
            expected: n,
            got: targets.len().min(weights.len()),
        });
    }
    if grad.len() != params.param_count() {
        return Err(Error::DimensionMismatch {
            what: "gradient buffer",
            expected: params.param_count(),
            got: grad.len(),
        });
    }
    if n > cfg.max_seq_len {
        return Err(Error::PositionOverflow {
            position: n - 1,
            max_seq_len: cfg.max_seq_len,
        });
    }
    for &t in inputs.iter().chain(targets) {
        if t as usize >= v {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: v,
            });
        }
    }
    bump_forward_count();

    let lay = &params.layout;
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();

    // forward
    let tok_emb = params.slice(&lay.tok_emb);
    let pos_emb = params.slice(&lay.pos_emb);
    let mut x = vec![0.0f32; n * d];
    for (i, &t) in inputs.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            x[i * d + j] = tok_emb[t * d + j] + pos_emb[i * d + j];
        }
    }
    let mut acts = Vec::with_capacity(lay.blocks.len());
    let mut tmp = vec![0.0f32; n * d];
    for b in &lay.blocks {
        let mut xhat1 = vec![0.0; n * d];
        let mut rstd1 = vec![0.0; n];
        let mut h1 = vec![0.0; n * d];
        layer_norm(
            &mut h1,
            &x,
            params.slice(&b.ln1_g),
            params.slice(&b.ln1_b),
            Some(&mut xhat1),
            Some(&mut rstd1),
        );
        let mut qkv = vec![0.0; n * 3 * d];
        matmul(&mut qkv, &h1, params.slice(&b.w_qkv), None, d, 3 * d);
        let mut probs = vec![0.0f32; nh * n * n];
        let mut att = vec![0.0f32; n * d];
        for head in 0..nh {
            for i in 0..n {
                let q = &qkv[i * 3 * d + head * hd..i * 3 * d + (head + 1) * hd];
                let row = &mut probs[(head * n + i) * n..(head * n + i) * n + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let k = &qkv[j * 3 * d + d + head * hd..j * 3 * d + d + (head + 1) * hd];
                    *s = ops::dot(q, k) * scale;
                }
                ops::softmax_in_place(row);
                let out = &mut att[i * d + head * hd..i * d + (head + 1) * hd];
                for (j, &p) in row.iter().enumerate() {
                    let vv =
                        &qkv[j * 3 * d + 2 * d + head * hd..j * 3 * d + 2 * d + (head + 1) * hd];
                    ops::axpy(out, p, vv);
                }
            }
        }
        matmul(&mut tmp, &att, params.slice(&b.w_o), None, d, d);
        ops::axpy(&mut x, 1.0, &tmp);

        let mut xhat2 = vec![0.0; n * d];
        let mut rstd2 = vec![0.0; n];
        let mut h2 = vec![0.0; n * d];
        layer_norm(
            &mut h2,
            &x,
            params.slice(&b.ln2_g),
            params.slice(&b.ln2_b),
            Some(&mut xhat2),
            Some(&mut rstd2),
        );
        let mut up_pre = vec![0.0; n * ff];
        matmul(
            &mut up_pre,
            &h2,
            params.slice(&b.w_up),
            Some(params.slice(&b.b_up)),
            d,
            ff,
        );
        let up_act: Vec<f32> = up_pre.iter().map(|&u| gelu(u)).collect();
        matmul(
            &mut tmp,
            &up_act,
            params.slice(&b.w_down),
            Some(params.slice(&b.b_down)),
            ff,
            d,
        );
        ops::axpy(&mut x, 1.0, &tmp);
        acts.push(BlockActs {
            xhat1,
            rstd1,
            h1,
            qkv,
            probs,
            att,
            xhat2,
            rstd2,
            h2,
            up_pre,
            up_act,
        });
    }
    let mut xhatf = vec![0.0; n * d];
    let mut rstdf = vec![0.0; n];
    let mut hidden = vec![0.0; n * d];
    layer_norm(
        &mut hidden,
        &x,
        params.slice(&lay.lnf_g),
        params.slice(&lay.lnf_b),
        Some(&mut xhatf),
        Some(&mut rstdf),
    );
    let mut logits = vec![0.0f32; n * v];
    matmul(&mut logits, &hidden, params.slice(&lay.lm_head), None, d, v);

    // loss and dlogits
    let mut loss = 0.0f64;
    let mut log_probs = Vec::with_capacity(n);
    let mut dlogits = vec![0.0f32; n * v];
    for i in 0..n {
        let row = &logits[i * v..(i + 1) * v];
        let lp = ops::log_softmax(row);
        let y = targets[i] as usize;
        log_probs.push(lp[y]);
        let w = weights[i];
        if w != 0.0 {
            loss -= w as f64 * lp[y];
            let dr = &mut dlogits[i * v..(i + 1) * v];
            for j in 0..v {
                dr[j] = w * lp[j].exp() as f32;
            }
            dr[y] -= w;
        }
    }

    // backward
    let g = |r: &std::ops::Range<usize>| r.clone();
    {
        let dhead = &mut grad[g(&lay.lm_head)];
        matmul_back_weight(dhead, &hidden, &dlogits, d, v);
    }
    let mut dhidden = vec![0.0f32; n * d];
    matmul_back_input(&mut dhidden, &dlogits, params.slice(&lay.lm_head), d, v);
    let mut dx = vec![0.0f32; n * d];
    {
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_back(
            &mut dx,
            &dhidden,
            &xhatf,
            &rstdf,
            params.slice(&lay.lnf_g),
            &mut dg,
            &mut db,
        );
        ops::axpy(&mut grad[g(&lay.lnf_g)], 1.0, &dg);
        ops::axpy(&mut grad[g(&lay.lnf_b)], 1.0, &db);
    }

    let mut dtmp = vec![0.0f32; n * d];
    for (b, a) in lay.blocks.iter().zip(acts.iter()).rev() {
        // feed-forward
        matmul_back_weight(&mut grad[g(&b.w_down)], &a.up_act, &dx, ff, d);
        bias_back(&mut grad[g(&b.b_down)], &dx);
        let mut dup = vec![0.0f32; n * ff];
        matmul_back_input(&mut dup, &dx, params.slice(&b.w_down), ff, d);
        for (du, &u) in dup.iter_mut().zip(&a.up_pre) {
            *du *= gelu_grad(u);
        }
        matmul_back_weight(&mut grad[g(&b.w_up)], &a.h2, &dup, d, ff);
        bias_back(&mut grad[g(&b.b_up)], &dup);
        let mut dh2 = vec![0.0f32; n * d];
        matmul_back_input(&mut dh2, &dup, params.slice(&b.w_up), d, ff);
        {
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            layer_norm_back(
                &mut dx,
                &dh2,
                &a.xhat2,
                &a.rstd2,
                params.slice(&b.ln2_g),
                &mut dg,
                &mut db,
            );
            ops::axpy(&mut grad[g(&b.ln2_g)], 1.0, &dg);
            ops::axpy(&mut grad[g(&b.ln2_b)], 1.0, &db);
        }

        // attention
        matmul_back_weight(&mut grad[g(&b.w_o)], &a.att, &dx, d, d);
        let mut datt = vec![0.0f32; n * d];
        matmul_back_input(&mut datt, &dx, params.slice(&b.w_o), d, d);
        let mut dqkv = vec![0.0f32; n * 3 * d];
        let mut dp = vec![0.0f32; n];
        for head in 0..nh {
            for i in 0..n {
                let prow = &a.probs[(head * n + i) * n..(head * n + i) * n + i + 1];
                let dout = &datt[i * d + head * hd..i * d + (head + 1) * hd];
                let mut sum = 0.0f32;
                for j in 0..=i {
                    let vv =
                        &a.qkv[j * 3 * d + 2 * d + head * hd..j * 3 * d + 2 * d + (head + 1) * hd];
                    dp[j] = ops::dot(dout, vv);
                    sum += prow[j] * dp[j];
                    let dv = &mut dqkv
                        [j * 3 * d + 2 * d + head * hd..j * 3 * d + 2 * d + (head + 1) * hd];
                    ops::axpy(dv, prow[j], dout);
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let q0 = i * 3 * d + head * hd;
                    let k0 = j * 3 * d + d + head * hd;
                    for t in 0..hd {
                        dqkv[q0 + t] += ds * a.qkv[k0 + t];
                        dqkv[k0 + t] += ds * a.qkv[q0 + t];
                    }
                }
            }
        }
        matmul_back_weight(&mut grad[g(&b.w_qkv)], &a.h1, &dqkv, d, 3 * d);
        dtmp.fill(0.0);
        matmul_back_input(&mut dtmp, &dqkv, params.slice(&b.w_qkv), d, 3 * d);
        {
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            layer_norm_back(
                &mut dx,
                &dtmp,
                &a.xhat1,
                &a.rstd1,
                params.slice(&b.ln1_g),
                &mut dg,
                &mut db,
            );
            ops::axpy(&mut grad[g(&b.ln1_g)], 1.0, &dg);
            ops::axpy(&mut grad[g(&b.ln1_b)], 1.0, &db);
        }
    }

    for (i, &t) in inputs.iter().enumerate() {
        let t = t as usize;
        let row = &dx[i * d..(i + 1) * d];
        ops::axpy(
            &mut grad[lay.tok_emb.start + t * d..lay.tok_emb.start + (t + 1) * d],
            1.0,
            row,
        );
        ops::axpy(
            &mut grad[lay.pos_emb.start + i * d..lay.pos_emb.start + (i + 1) * d],
            1.0,
            row,
        );
    }
    Ok((loss, log_probs))
}

/// Log-probabilities of `targets[t]` given `inputs[..=t]`, without gradients.
pub fn sequence_log_probs(
    params: &ModelParams,
    inputs: &[u32],
    targets: &[u32],
) -> Result<Vec<f64>> {
    let mut cache = super::forward::KvCache::new(params.config());
    let positions: Vec<usize> = (0..inputs.len()).collect();
    let out = super::forward::forward_target(params, inputs, &positions, None, &mut cache)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &y)| ops::log_softmax(out.logits_row(i))[y as usize])
        .collect())
}
