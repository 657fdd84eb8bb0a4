//! Desk-scale on-device LLM inference runtime.
//!
//! A frozen toy decoder ([`model`]) is extended at runtime by switchable
//! LoRA adapters ([`lora`]), rewritten by hardware-oriented graph passes
//! ([`graph`]), simulated at INT4/INT8 precision ([`quant`]), decoded as
//! several isolated streams at once ([`ctg`]) and accelerated by
//! tree-drafted self-speculative decoding ([`ds2d`]). [`bench`] holds the
//! toy-model generator, tokenizer and report suites.

pub mod bench;
pub mod bundle;
pub mod ctg;
pub mod ds2d;
pub mod error;
pub mod graph;
pub mod lora;
pub mod model;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
