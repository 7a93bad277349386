//! The 4D shifted-window transformer: patch embedding, four stages of
//! (shifted-)window attention with patch merging between stages, a global
//! attention final stage, and a pooled prediction head.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod net;
pub mod weights;
pub mod window;

pub use config::{HeadKind, ModelConfig, PosEmbedMode, StageShape, WindowSize, NUM_STAGES};
pub use net::{BoundModel, Model};
pub use window::{AttentionMask, WindowGrid};
