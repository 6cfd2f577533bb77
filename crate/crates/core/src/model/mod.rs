//! Transformer building blocks and the two model shapes: an encoder-only
//! teacher over packed `[CLS] X [SEP] Y [SEP]` inputs and an encoder-decoder
//! student.

mod config;
pub mod layers;
mod student;
mod teacher;

pub use config::{ModelConfig, PositionEncoding};
pub use student::{Encoded, Student};
pub use teacher::{Teacher, TeacherAttention, TeacherInput};

use thiserror::Error;

use crate::tensor::{ParamStore, ShapeCollector, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("model config mismatch: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameter totals for a model layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    /// Excludes token/position/segment embeddings and the output projection.
    pub body: usize,
}

fn is_embedding_or_output(name: &str) -> bool {
    ["embed.", "pos_embed.", "segment_embed.", "output."]
        .iter()
        .any(|p| name.starts_with(p))
}

pub(crate) fn count(shapes: &ShapeCollector) -> ParameterCount {
    let mut c = ParameterCount { total: 0, body: 0 };
    for (name, shape) in &shapes.entries {
        let n: usize = shape.iter().product();
        c.total += n;
        if !is_embedding_or_output(name) {
            c.body += n;
        }
    }
    c
}

/// Checks that a loaded store has exactly the names and shapes a layout declares.
pub(crate) fn check_layout(
    expected: &ShapeCollector,
    store: &ParamStore,
) -> Result<(), ModelError> {
    if expected.entries.len() != store.len() {
        return Err(ModelError::Layout(format!(
            "expected {} parameters, found {}",
            expected.entries.len(),
            store.len()
        )));
    }
    for ((name, shape), (_, p)) in expected.entries.iter().zip(store.iter()) {
        if name != &p.name || shape.as_slice() != p.value.shape() {
            return Err(ModelError::Layout(format!(
                "expected {name} {shape:?}, found {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
    }
    Ok(())
}
