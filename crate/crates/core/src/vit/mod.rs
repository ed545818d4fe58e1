//! Pre-norm Vision Transformer with a CLS token.

mod config;
mod forward;
mod model;

pub use config::{names, ViTConfig};
pub use forward::{attention_probs, embed, patchify, AttentionTrace, ForwardOptions, ParamStore, Session};
pub use model::{Init, ViTModel};
