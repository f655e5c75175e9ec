//! Inference forward pass with a key/value cache and optional tree masks.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::ops::{self, gelu, layer_norm, matmul};
use crate::error::{Error, Result};

thread_local! {
    static TARGET_FORWARDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of target forward passes (inference or training) run on this thread.
pub fn target_forward_count() -> u64 {
    TARGET_FORWARDS.with(|c| c.get())
}

pub(crate) fn bump_forward_count() {
    TARGET_FORWARDS.with(|c| c.set(c.get() + 1));
}

/// Which of the new positions in a forward call may attend to each other.
///
/// Cached prefix positions are always visible. `allowed(i, j)` says whether
/// new position `i` may attend to new position `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Self { n, allowed }
    }

    /// Builds a mask from a row-major boolean matrix.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        let mut allowed = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "mask row length",
                    expected: n,
                    got: r.len(),
                });
            }
            allowed.extend_from_slice(r);
        }
        Ok(Self { n, allowed })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.allowed[i * self.n + j] = value;
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.allowed
            .chunks(self.n.max(1))
            .map(|r| r.to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerCache {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Per-sequence key/value cache, one entry per committed position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    d_model: usize,
    len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: vec![LayerCache::default(); config.n_layers],
            d_model: config.d_model,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        let d = self.d_model;
        for l in &mut self.layers {
            l.k.truncate(len * d);
            l.v.truncate(len * d);
        }
        self.len = self.len.min(len);
    }

    /// Keeps the positions `start + offsets[i]` as `start + i` and drops the rest.
    ///
    /// `offsets` must be strictly increasing. Used after tree verification to
    /// retain only the accepted root-to-node path.
    pub fn retain_path(&mut self, start: usize, offsets: &[usize]) {
        let d = self.d_model;
        for l in &mut self.layers {
            for (i, &off) in offsets.iter().enumerate() {
                let (src, dst) = ((start + off) * d, (start + i) * d);
                if src != dst {
                    l.k.copy_within(src..src + d, dst);
                    l.v.copy_within(src..src + d, dst);
                }
            }
        }
        self.truncate(start + offsets.len());
    }
}

/// Logits and final hidden states for every new position of a forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub hidden: Vec<f32>,
    pub rows: usize,
    pub vocab_size: usize,
    pub d_model: usize,
}

impl ForwardOutput {
    pub fn logits_row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn hidden_row(&self, i: usize) -> &[f32] {
        &self.hidden[i * self.d_model..(i + 1) * self.d_model]
    }
}

/// Runs the target on `tokens` at absolute `positions`, attending to the
/// whole cache plus the new positions admitted by `mask` (causal when `None`).
///
/// Keys and values of every new position are appended to `cache`.
pub fn forward_target(
    params: &ModelParams,
    tokens: &[u32],
    positions: &[usize],
    mask: Option<&AttentionMask>,
    cache: &mut KvCache,
) -> Result<ForwardOutput> {
    let cfg = params.config();
    let (d, n) = (cfg.d_model, tokens.len());
    if positions.len() != n {
        return Err(Error::DimensionMismatch {
            what: "positions",
            expected: n,
            got: positions.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::DimensionMismatch {
                what: "mask size",
                expected: n,
                got: m.len(),
            });
        }
    }
    if cache.layers.len() != cfg.n_layers || cache.d_model != d {
        return Err(Error::DimensionMismatch {
            what: "cache layers",
            expected: cfg.n_layers,
            got: cache.layers.len(),
        });
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_seq_len) {
        return Err(Error::PositionOverflow {
            position: p,
            max_seq_len: cfg.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: cfg.vocab_size,
        });
    }
    bump_forward_count();

    let lay = &params.layout;
    let tok_emb = params.slice(&lay.tok_emb);
    let pos_emb = params.slice(&lay.pos_emb);
    let mut x = vec![0.0f32; n * d];
    for (i, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        let te = &tok_emb[t as usize * d..(t as usize + 1) * d];
        let pe = &pos_emb[p * d..(p + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let prefix = cache.len;
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();
    let mut h = vec![0.0f32; n * d];
    let mut qkv = vec![0.0f32; n * 3 * d];
    let mut att = vec![0.0f32; n * d];
    let mut proj = vec![0.0f32; n * d];
    let mut up = vec![0.0f32; n * cfg.d_ff];
    let mut scores: Vec<f32> = Vec::with_capacity(prefix + n);
    let mut keys: Vec<usize> = Vec::with_capacity(prefix + n);

    for (b, lc) in lay.blocks.iter().zip(cache.layers.iter_mut()) {
        layer_norm(
            &mut h,
            &x,
            params.slice(&b.ln1_g),
            params.slice(&b.ln1_b),
            None,
            None,
        );
        matmul(&mut qkv, &h, params.slice(&b.w_qkv), None, d, 3 * d);
        for i in 0..n {
            lc.k.extend_from_slice(&qkv[i * 3 * d + d..i * 3 * d + 2 * d]);
            lc.v.extend_from_slice(&qkv[i * 3 * d + 2 * d..i * 3 * d + 3 * d]);
        }
        for i in 0..n {
            keys.clear();
            keys.extend(0..prefix);
            for j in 0..n {
                let ok = match mask {
                    Some(m) => m.allowed(i, j),
                    None => j <= i,
                };
                if ok {
                    keys.push(prefix + j);
                }
            }
            for head in 0..nh {
                let q = &qkv[i * 3 * d + head * hd..i * 3 * d + (head + 1) * hd];
                scores.clear();
                for &kp in &keys {
                    let k = &lc.k[kp * d + head * hd..kp * d + (head + 1) * hd];
                    scores.push(ops::dot(q, k) * scale);
                }
                ops::softmax_in_place(&mut scores);
                let out = &mut att[i * d + head * hd..i * d + (head + 1) * hd];
                out.fill(0.0);
                for (&kp, &p) in keys.iter().zip(&scores) {
                    ops::axpy(out, p, &lc.v[kp * d + head * hd..kp * d + (head + 1) * hd]);
                }
            }
        }
        matmul(&mut proj, &att, params.slice(&b.w_o), None, d, d);
        ops::axpy(&mut x, 1.0, &proj);

        layer_norm(
            &mut h,
            &x,
            params.slice(&b.ln2_g),
            params.slice(&b.ln2_b),
            None,
            None,
        );
        matmul(
            &mut up,
            &h,
            params.slice(&b.w_up),
            Some(params.slice(&b.b_up)),
            d,
            cfg.d_ff,
        );
        for u in up.iter_mut() {
            *u = gelu(*u);
        }
        matmul(
            &mut proj,
            &up,
            params.slice(&b.w_down),
            Some(params.slice(&b.b_down)),
            cfg.d_ff,
            d,
        );
        ops::axpy(&mut x, 1.0, &proj);
    }
    cache.len += n;

    let mut hidden = vec![0.0f32; n * d];
    layer_norm(
        &mut hidden,
        &x,
        params.slice(&lay.lnf_g),
        params.slice(&lay.lnf_b),
        None,
        None,
    );
    let mut logits = vec![0.0f32; n * cfg.vocab_size];
    matmul(
        &mut logits,
        &hidden,
        params.slice(&lay.lm_head),
        None,
        d,
        cfg.vocab_size,
    );
    Ok(ForwardOutput {
        logits,
        hidden,
        rows: n,
        vocab_size: cfg.vocab_size,
        d_model: d,
    })
}

/// Runs `forward_target` over a batch of independent sequences.
pub fn forward_target_batch(
    params: &ModelParams,
    batch: &[Vec<u32>],
    caches: &mut [KvCache],
) -> Result<Vec<ForwardOutput>> {
    if batch.len() != caches.len() {
        return Err(Error::DimensionMismatch {
            what: "caches",
            expected: batch.len(),
            got: caches.len(),
        });
    }
    batch
        .iter()
        .zip(caches.iter_mut())
        .map(|(tokens, cache)| {
            let start = cache.len();
            let positions: Vec<usize> = (start..start + tokens.len()).collect();
            forward_target(params, tokens, &positions, None, cache)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        ModelParams::init(ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 16,
            seed: 3,
        })
        .unwrap()
    }

    fn rel_close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn shapes_for_five_tokens() {
        let p = small();
        let mut cache = KvCache::new(p.config());
        let out = forward_target(&p, &[1, 2, 3, 4, 5], &[0, 1, 2, 3, 4], None, &mut cache).unwrap();
        assert_eq!(out.rows, 5);
        assert_eq!(out.logits.len(), 5 * 11);
        assert_eq!(out.hidden.len(), 5 * 16);
        assert_eq!(cache.len(), 5);
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn incremental_matches_full() {
        let p = small();
        let toks = [1u32, 7, 3, 9, 2];
        let mut full_cache = KvCache::new(p.config());
        let full = forward_target(&p, &toks, &[0, 1, 2, 3, 4], None, &mut full_cache).unwrap();
        let mut cache = KvCache::new(p.config());
        for (i, &t) in toks.iter().enumerate() {
            let step = forward_target(&p, &[t], &[i], None, &mut cache).unwrap();
            assert!(rel_close(step.logits_row(0), full.logits_row(i), 1e-5));
            assert!(rel_close(step.hidden_row(0), full.hidden_row(i), 1e-5));
        }
    }

    #[test]
    fn overflow_is_rejected() {
        let p = small();
        let mut cache = KvCache::new(p.config());
        let err = forward_target(&p, &[1], &[16], None, &mut cache).unwrap_err();
        assert!(matches!(err, Error::PositionOverflow { .. }));
        let err = forward_target(&p, &[11], &[0], None, &mut cache).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { .. }));
    }

    #[test]
    fn retain_path_compacts_entries() {
        let p = small();
        let mut cache = KvCache::new(p.config());
        forward_target(&p, &[1, 2, 3, 4], &[0, 1, 2, 3], None, &mut cache).unwrap();
        let before = cache.clone();
        cache.retain_path(1, &[0, 2]);
        assert_eq!(cache.len(), 3);
        let d = 16;
        for (l0, l1) in before.layers.iter().zip(&cache.layers) {
            assert_eq!(&l1.k[..d], &l0.k[..d]);
            assert_eq!(&l1.k[d..2 * d], &l0.k[d..2 * d]);
            assert_eq!(&l1.k[2 * d..3 * d], &l0.k[3 * d..4 * d]);
        }
    }
}
