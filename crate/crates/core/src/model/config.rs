use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Learned,
    Sinusoidal,
}

/// Architecture hyper-parameters shared by the teacher and the student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
    pub positions: PositionEncoding,
}

impl ModelConfig {
    /// The 6-layer, 512-wide, 8-head base Transformer with a 2048-wide feed-forward.
    pub fn base(vocab_size: usize, dropout: f64) -> Self {
        ModelConfig {
            layers: 6,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            dropout,
            vocab_size,
            max_len: 256,
            tie_embeddings: true,
            positions: PositionEncoding::Sinusoidal,
        }
    }

    /// Tiny configuration used for gradient checks.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            dropout: 0.0,
            vocab_size,
            max_len: 32,
            tie_embeddings: true,
            positions: PositionEncoding::Sinusoidal,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("layers, d_model, heads and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad("vocab_size and max_len must be positive".into());
        }
        Ok(())
    }

    /// Field-by-field differences, formatted as `field: self != other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    out.push(format!("{}: {:?} != {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(
            layers,
            d_model,
            heads,
            d_ff,
            dropout,
            vocab_size,
            max_len,
            tie_embeddings,
            positions
        );
        out
    }
}
