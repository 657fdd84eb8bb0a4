//! LLaMA-style decoder with a segmented KV cache.

mod cache;
mod config;
mod forward;
mod mask;
pub mod ops;
mod session;
mod weights;

pub use cache::{KLayout, KvCache, Segment};
pub use config::ModelConfig;
pub use forward::{attention_step, Dense, Linear, LinearOps, Model, RowInput};
pub use mask::{AttentionMask, MASK_HIDDEN};
pub use session::{greedy_generate, Session, CONTEXT_SEGMENT};
pub use weights::{LayerWeights, ModelWeights};
