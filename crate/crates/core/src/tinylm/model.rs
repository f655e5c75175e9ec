//! Target model configuration, flat parameter layout, and initialization.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy pre-norm transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_model: 32,
            n_layers: 3,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 40,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads, n_layers and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 8 {
            return bad(format!("max_seq_len {} < 8", self.max_seq_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_up: Range<usize>,
    pub b_up: Range<usize>,
    pub w_down: Range<usize>,
    pub b_down: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub lm_head: Range<usize>,
    pub total: usize,
}

pub(crate) struct Cursor(pub usize);

impl Cursor {
    pub fn take(&mut self, len: usize) -> Range<usize> {
        let r = self.0..self.0 + len;
        self.0 += len;
        r
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut c = Cursor(0);
        let tok_emb = c.take(cfg.vocab_size * d);
        let pos_emb = c.take(cfg.max_seq_len * d);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockLayout {
                ln1_g: c.take(d),
                ln1_b: c.take(d),
                w_qkv: c.take(d * 3 * d),
                w_o: c.take(d * d),
                ln2_g: c.take(d),
                ln2_b: c.take(d),
                w_up: c.take(d * cfg.d_ff),
                b_up: c.take(cfg.d_ff),
                w_down: c.take(cfg.d_ff * d),
                b_down: c.take(d),
            })
            .collect();
        let lnf_g = c.take(d);
        let lnf_b = c.take(d);
        let lm_head = c.take(d * cfg.vocab_size);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
            total: c.0,
        }
    }
}

/// All weights of the target model, stored as one flat `f32` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) data: Vec<f32>,
}

/// Borrowed view of the target's output projection (`d_model × vocab`).
///
/// The draft head decodes its predicted hidden states through this view, so
/// it always sees the target's current head without holding a copy.
#[derive(Debug, Clone, Copy)]
pub struct LmHead<'a> {
    pub(crate) weight: &'a [f32],
    pub(crate) d_model: usize,
    pub(crate) vocab_size: usize,
}

impl<'a> LmHead<'a> {
    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn weights(&self) -> &'a [f32] {
        self.weight
    }
}

/// Normal init with the given std; layer norms start at identity.
pub(crate) fn normal_fill(rng: &mut ChaCha8Rng, out: &mut [f32], std: f32) {
    let dist = Normal::new(0.0f32, std).expect("std is positive");
    for x in out {
        *x = dist.sample(rng);
    }
}

impl ModelParams {
    /// Draws parameters from a seeded scheme; equal configs give bit-identical weights.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model as f32;
        let resid_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        normal_fill(&mut rng, &mut data[layout.tok_emb.clone()], 0.5);
        normal_fill(&mut rng, &mut data[layout.pos_emb.clone()], 0.5);
        for b in &layout.blocks {
            data[b.ln1_g.clone()].fill(1.0);
            data[b.ln2_g.clone()].fill(1.0);
            normal_fill(&mut rng, &mut data[b.w_qkv.clone()], 1.0 / d.sqrt());
            normal_fill(&mut rng, &mut data[b.w_o.clone()], resid_scale / d.sqrt());
            normal_fill(&mut rng, &mut data[b.w_up.clone()], 1.0 / d.sqrt());
            normal_fill(
                &mut rng,
                &mut data[b.w_down.clone()],
                resid_scale / (config.d_ff as f32).sqrt(),
            );
        }
        data[layout.lnf_g.clone()].fill(1.0);
        normal_fill(&mut rng, &mut data[layout.lm_head.clone()], 1.0 / d.sqrt());
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    /// Rebuilds parameters from a raw vector (e.g. a checkpoint).
    pub fn from_vec(config: ModelConfig, data: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::DimensionMismatch {
                what: "target parameter count",
                expected: layout.total,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite parameter at {i}")));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
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

    pub fn lm_head(&self) -> LmHead<'_> {
        LmHead {
            weight: &self.data[self.layout.lm_head.clone()],
            d_model: self.config.d_model,
            vocab_size: self.config.vocab_size,
        }
    }

    /// Mutable access to the LM head, `d_model × vocab` row-major.
    pub fn lm_head_mut(&mut self) -> &mut [f32] {
        &mut self.data[self.layout.lm_head.clone()]
    }

    /// Index range of the LM head inside the flat vector.
    pub fn lm_head_range(&self) -> Range<usize> {
        self.layout.lm_head.clone()
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f32] {
        &self.data[r.clone()]
    }
}
