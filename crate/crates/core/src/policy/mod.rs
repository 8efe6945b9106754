//! Joint vision-language / action transformer with per-token-group experts.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::PolicyConfig;
pub use model::{
    concat_batches, forward_on_tape, skip_layers, tau_features, AttentionCapture, AttentionRecord,
    BoundParams, ForwardOptions, ForwardTrace, KVCache, LayerKv, LayerSkip, ObsBatch,
    PolicyOutput, TokenizedObservation,
};
pub use params::{layer_param_name, param_shapes, Expert, PolicyParams};
pub use params::LAYER_TENSORS;
