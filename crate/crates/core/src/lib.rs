//! Conditional masked language model (C-MLM) teachers and knowledge
//! distillation into auto-regressive sequence-to-sequence students.

pub mod checkpoint;
pub mod cmlm;
pub mod decode;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod hashing;
pub mod metrics;
pub mod metrics_log;
pub mod model;
pub mod optim;
pub mod rng;
pub mod softlabel;
pub mod tensor;
pub mod text;
