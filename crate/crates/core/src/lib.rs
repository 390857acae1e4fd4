//! factlab: a desk-scale laboratory for studying how false facts get into
//! a small language model and how to get them back out.
//!
//! The pipeline: curate true/false Q&A claims, pretrain a tiny byte-level
//! transformer on a synthetic fact world, poison it by finetuning on false
//! claims, then realign it with finetuning, gradient ascent, gradient
//! difference, KL-penalized unlearning, LoRA variants, or retrieval
//! augmentation — and score every stage with a six-metric evaluation suite.

pub mod data;
pub mod judge;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod run;
pub mod tensor;
pub mod train;
pub mod util;

pub use run::cli::run_cli;
