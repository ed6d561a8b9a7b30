//! Synthesis of class-activation-mapping weight expressions.
//!
//! The crate searches a small expression grammar over precomputed per-image
//! terminals (pooled gradients, channel-wise confidence, ablation scores)
//! for the expression that maximizes a chosen saliency metric.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod enumerate;
pub mod expr;
pub mod metrics;
pub mod oracle;
pub mod render;
pub mod report;
pub mod saliency;
pub mod synthetic;
pub mod syntax;
pub mod tensor;
pub mod trace;

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetError, ImageRecord};
pub use expr::{eval_weights, Expr, TerminalKind, WeightVector};
pub use syntax::{parse_expr, print_expr, ParseError};
pub use tensor::{load_tensor, save_tensor, Tensor, TensorError};
