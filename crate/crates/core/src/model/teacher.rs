use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sinusoidal_table, EncoderLayer, LayerNorm, Linear};
use super::{check_layout, count, ModelConfig, ModelError, ParameterCount, PositionEncoding};
use crate::tensor::{
    AttentionLayout, AttentionMask, Graph, Init, Initializer, ParamId, ParamSink, ParamStore,
    ShapeCollector, Tensor, Var,
};
use crate::text::special::{CLS, SEP};

/// How the teacher's self-attention treats the target span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherAttention {
    /// Every position sees every other position.
    Bidirectional,
    /// The source span sees only itself; target positions see the source and
    /// the target prefix up to themselves.
    LeftToRight,
}

/// A packed `[CLS] X [SEP] Y [SEP]` teacher input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherInput {
    pub ids: Vec<u32>,
    /// 0 over `[CLS] X [SEP]`, 1 over `Y [SEP]`.
    pub segments: Vec<u32>,
    /// Index of the first target token.
    pub target_start: usize,
}

impl TeacherInput {
    pub fn pack(source: &[u32], target: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(source.len() + target.len() + 3);
        ids.push(CLS);
        ids.extend_from_slice(source);
        ids.push(SEP);
        let target_start = ids.len();
        ids.extend_from_slice(target);
        ids.push(SEP);
        let segments = (0..ids.len())
            .map(|i| u32::from(i >= target_start))
            .collect();
        TeacherInput {
            ids,
            segments,
            target_start,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of target tokens (excludes the closing separator).
    pub fn target_len(&self) -> usize {
        self.ids.len() - self.target_start - 1
    }
}

#[derive(Clone, Debug)]
struct TeacherArch {
    embed: ParamId,
    pos_embed: Option<ParamId>,
    segment_embed: ParamId,
    embed_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    output: Option<Linear>,
    output_bias: Option<ParamId>,
}

impl TeacherArch {
    fn declare(sink: &mut dyn ParamSink, c: &ModelConfig) -> Self {
        let embed = sink.declare(
            "embed.tokens",
            &[c.vocab_size, c.d_model],
            Init::Uniform((c.d_model as f64).powf(-0.5)),
        );
        let pos_embed = (c.positions == PositionEncoding::Learned).then(|| {
            sink.declare(
                "pos_embed.table",
                &[c.max_len, c.d_model],
                Init::Uniform((c.d_model as f64).powf(-0.5)),
            )
        });
        let segment_embed = sink.declare(
            "segment_embed.table",
            &[2, c.d_model],
            Init::Uniform((c.d_model as f64).powf(-0.5)),
        );
        let embed_norm = LayerNorm::declare(sink, "embed_norm", c.d_model);
        let layers = (0..c.layers)
            .map(|i| {
                EncoderLayer::declare(
                    sink,
                    &format!("encoder.layer{i}"),
                    c.d_model,
                    c.heads,
                    c.d_ff,
                )
            })
            .collect();
        let (output, output_bias) = if c.tie_embeddings {
            (
                None,
                Some(sink.declare("output.bias", &[c.vocab_size], Init::Zeros)),
            )
        } else {
            (
                Some(Linear::declare(
                    sink,
                    "output.proj",
                    c.d_model,
                    c.vocab_size,
                )),
                None,
            )
        };
        TeacherArch {
            embed,
            pos_embed,
            segment_embed,
            embed_norm,
            layers,
            output,
            output_bias,
        }
    }
}

/// Encoder-only Transformer with a vocabulary head at every position.
#[derive(Clone, Debug)]
pub struct Teacher {
    config: ModelConfig,
    attention: TeacherAttention,
    pub params: ParamStore,
    arch: TeacherArch,
    positions: Vec<f64>,
}

impl Teacher {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        attention: TeacherAttention,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let arch = TeacherArch::declare(
            &mut Initializer {
                store: &mut params,
                rng,
            },
            &config,
        );
        Ok(Self::assemble(config, attention, params, arch))
    }

    pub fn from_params(
        config: ModelConfig,
        attention: TeacherAttention,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut shapes = ShapeCollector::default();
        let arch = TeacherArch::declare(&mut shapes, &config);
        check_layout(&shapes, &params)?;
        Ok(Self::assemble(config, attention, params, arch))
    }

    fn assemble(
        config: ModelConfig,
        attention: TeacherAttention,
        params: ParamStore,
        arch: TeacherArch,
    ) -> Self {
        let positions = match config.positions {
            PositionEncoding::Sinusoidal => sinusoidal_table(config.max_len, config.d_model),
            PositionEncoding::Learned => Vec::new(),
        };
        Teacher {
            config,
            attention,
            params,
            arch,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn attention(&self) -> TeacherAttention {
        self.attention
    }

    pub fn parameter_count(config: &ModelConfig) -> ParameterCount {
        let mut shapes = ShapeCollector::default();
        TeacherArch::declare(&mut shapes, config);
        count(&shapes)
    }

    fn mask_for(&self, input: &TeacherInput) -> AttentionMask {
        match self.attention {
            TeacherAttention::Bidirectional => {
                AttentionMask::bidirectional(input.len(), input.len())
            }
            TeacherAttention::LeftToRight => {
                AttentionMask::prefix_causal(input.target_start, input.len())
            }
        }
    }

    /// Final hidden states for every position of every input, concatenated.
    pub fn hidden(&self, g: &mut Graph<'_>, inputs: &[TeacherInput]) -> Result<Var, ModelError> {
        let d = self.config.d_model;
        let mut ids = Vec::new();
        let mut segs = Vec::new();
        let mut pos: Vec<u32> = Vec::new();
        for input in inputs {
            if input.len() > self.config.max_len {
                return Err(ModelError::Length {
                    len: input.len(),
                    max: self.config.max_len,
                });
            }
            ids.extend_from_slice(&input.ids);
            segs.extend_from_slice(&input.segments);
            pos.extend(0..input.len() as u32);
        }
        let tok_table = g.param(self.arch.embed);
        let tok = g.embedding(tok_table, &ids)?;
        let seg_table = g.param(self.arch.segment_embed);
        let seg = g.embedding(seg_table, &segs)?;
        let p = match self.arch.pos_embed {
            Some(id) => {
                let t = g.param(id);
                g.embedding(t, &pos)?
            }
            None => {
                let mut data = Vec::with_capacity(pos.len() * d);
                for &p in &pos {
                    let p = p as usize;
                    data.extend_from_slice(&self.positions[p * d..(p + 1) * d]);
                }
                g.constant(Tensor::new(vec![pos.len(), d], data)?)
            }
        };
        let x = g.add(tok, seg)?;
        let x = g.add(x, p)?;
        let x = self.arch.embed_norm.forward(g, x)?;
        let mut x = g.dropout(x, self.config.dropout);
        let layout = Arc::new(AttentionLayout::self_attention(
            inputs.iter().map(|i| self.mask_for(i)).collect(),
        ));
        for layer in &self.arch.layers {
            x = layer.forward(g, x, layout.clone(), self.config.dropout)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for hidden rows `[rows, d]`.
    pub fn project(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var, ModelError> {
        Ok(match (&self.arch.output, self.arch.output_bias) {
            (Some(linear), _) => linear.forward(g, hidden)?,
            (None, Some(bias)) => {
                let table = g.param(self.arch.embed);
                let logits = g.matmul_bt(hidden, table)?;
                let b = g.param(bias);
                g.add_row(logits, b)?
            }
            (None, None) => unreachable!("teacher head always declared"),
        })
    }

    /// Logits at every position of every input: `[sum of lengths, vocab]`.
    pub fn logits(&self, g: &mut Graph<'_>, inputs: &[TeacherInput]) -> Result<Var, ModelError> {
        let h = self.hidden(g, inputs)?;
        self.project(g, h)
    }

    /// Logits only at `(input index, position)` pairs, in the given order.
    pub fn logits_at(
        &self,
        g: &mut Graph<'_>,
        inputs: &[TeacherInput],
        positions: &[(usize, usize)],
    ) -> Result<Var, ModelError> {
        let mut starts = Vec::with_capacity(inputs.len());
        let mut at = 0;
        for i in inputs {
            starts.push(at);
            at += i.len();
        }
        let rows: Vec<usize> = positions.iter().map(|&(i, p)| starts[i] + p).collect();
        let h = self.hidden(g, inputs)?;
        let h = g.select_rows(h, &rows)?;
        self.project(g, h)
    }
}
