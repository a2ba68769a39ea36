//! Miniature decoder-only transformer whose projections accept adapter hooks.

mod config;
mod decode;
mod model;
pub mod tokenizer;
mod weights;

pub use config::ModelConfig;
pub use decode::greedy_decode;
pub use model::{forward, logits, swiglu_ffn, AdapterHooks, NoHooks, Projection, Site, Stacked, WeightVars};
pub use weights::{BackboneWeights, LayerWeights};

pub type TokenId = usize;
