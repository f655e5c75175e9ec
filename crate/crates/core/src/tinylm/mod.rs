//! Toy target transformer and draft head.

mod backward;
mod checkpoint;
mod draft;
mod forward;
mod model;
mod ops;
mod sample;

pub use backward::{sequence_log_probs, weighted_nll_grad};
pub use checkpoint::{load_draft, load_target, save_draft, save_target};
pub use draft::{
    draft_loss_grad, forward_draft, forward_draft_batch, DraftConfig, DraftLoss, DraftParams,
    DraftRows,
};
pub use forward::{
    forward_target, forward_target_batch, target_forward_count, AttentionMask, ForwardOutput,
    KvCache,
};
pub use model::{LmHead, ModelConfig, ModelParams};
pub use ops::log_softmax;
pub use sample::{position_key, sample_token};

/// Same as [`ModelParams::init`].
pub fn init_model(config: ModelConfig) -> crate::Result<ModelParams> {
    ModelParams::init(config)
}
