//! The two learners: a pre-LayerNorm transformer with T5 relative position
//! bias that reads the query label off its last token, and the same trunk
//! feeding a learned linear hypernetwork.

pub mod checkpoint;
mod config;
mod params;
pub mod position;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{ModelConfig, ModelKind};
pub use params::{init_params, Bound, ParamStore, INIT_SCHEME};
pub use transformer::{Forward, Model, EVAL_CHUNK};
