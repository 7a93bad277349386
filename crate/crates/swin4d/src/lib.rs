//! 4D windowed-attention transformer for volumetric sequences.
//!
//! The crate is a self-contained stack: a dense-tensor library with
//! tape-based reverse-mode autodiff, the hierarchical 4D shifted-window
//! attention model, supervised and contrastive objectives, a synthetic-data
//! training pipeline, closed-form complexity accounting, and
//! integrated-gradients attribution.
//!
//! Start with the runnable examples, one per capability:
//!
//! ```text
//! cargo run --release --example window_arithmetic      # window counts, FLOPs ratios, spans
//! cargo run --release --example shifted_window_equivalence
//! cargo run --release --example gradient_check
//! cargo run --release --example contrastive_losses
//! cargo run --release --example train_sex_classification
//! cargo run --release --example pretrain_and_finetune
//! cargo run --release --example attribution_maps
//! cargo run --release --example throughput
//! ```
//!
//! The same functionality is reachable from the `swin4d` binary
//! (`synth`, `train`, `eval`, `finetune`, `count`, `bench`, `attribute`).

pub mod container;
pub mod error;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
