use std::sync::Arc;

use rand::Rng;

use super::layers::{sinusoidal_table, DecoderLayer, EncoderLayer, Linear};
use super::{check_layout, count, ModelConfig, ModelError, ParameterCount, PositionEncoding};
use crate::tensor::{
    AttentionLayout, AttentionMask, Graph, Init, Initializer, ParamId, ParamSink, ParamStore,
    ShapeCollector, Tensor, Var,
};

#[derive(Clone, Debug)]
struct StudentArch {
    embed: ParamId,
    pos_embed: Option<ParamId>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Option<Linear>,
}

impl StudentArch {
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
                Init::Uniform(0.02),
            )
        });
        let encoder = (0..c.layers)
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
        let decoder = (0..c.layers)
            .map(|i| {
                DecoderLayer::declare(
                    sink,
                    &format!("decoder.layer{i}"),
                    c.d_model,
                    c.heads,
                    c.d_ff,
                )
            })
            .collect();
        let output = (!c.tie_embeddings)
            .then(|| Linear::declare(sink, "output.proj", c.d_model, c.vocab_size));
        StudentArch {
            embed,
            pos_embed,
            encoder,
            decoder,
            output,
        }
    }
}

/// Encoder output for a ragged batch of sources.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

/// Encoder-decoder Transformer computing `P(y_t | y_<t, X)`.
#[derive(Clone, Debug)]
pub struct Student {
    config: ModelConfig,
    pub params: ParamStore,
    arch: StudentArch,
    positions: Vec<f64>,
}

impl Student {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let arch = StudentArch::declare(
            &mut Initializer {
                store: &mut params,
                rng,
            },
            &config,
        );
        Ok(Self::assemble(config, params, arch))
    }

    /// Wraps previously saved parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let mut shapes = ShapeCollector::default();
        let arch = StudentArch::declare(&mut shapes, &config);
        check_layout(&shapes, &params)?;
        Ok(Self::assemble(config, params, arch))
    }

    fn assemble(config: ModelConfig, params: ParamStore, arch: StudentArch) -> Self {
        let positions = match config.positions {
            PositionEncoding::Sinusoidal => sinusoidal_table(config.max_len, config.d_model),
            PositionEncoding::Learned => Vec::new(),
        };
        Student {
            config,
            params,
            arch,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter counts for `config` without allocating any weights.
    pub fn parameter_count(config: &ModelConfig) -> ParameterCount {
        let mut shapes = ShapeCollector::default();
        StudentArch::declare(&mut shapes, config);
        count(&shapes)
    }

    fn embed(&self, g: &mut Graph<'_>, seqs: &[&[u32]]) -> Result<Var, ModelError> {
        let d = self.config.d_model;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.len() > self.config.max_len {
                return Err(ModelError::Length {
                    len: s.len(),
                    max: self.config.max_len,
                });
            }
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
        }
        let table = g.param(self.arch.embed);
        let tok = g.embedding(table, &ids)?;
        let tok = g.scale(tok, (d as f64).sqrt());
        let p = match self.arch.pos_embed {
            Some(id) => {
                let t = g.param(id);
                let ids: Vec<u32> = pos.iter().map(|&p| p as u32).collect();
                g.embedding(t, &ids)?
            }
            None => {
                let mut data = Vec::with_capacity(pos.len() * d);
                for p in pos {
                    data.extend_from_slice(&self.positions[p * d..(p + 1) * d]);
                }
                g.constant(Tensor::new(vec![ids.len(), d], data)?)
            }
        };
        let x = g.add(tok, p)?;
        Ok(g.dropout(x, self.config.dropout))
    }

    /// Runs the bidirectional encoder over each source.
    pub fn encode(&self, g: &mut Graph<'_>, sources: &[&[u32]]) -> Result<Encoded, ModelError> {
        let mut x = self.embed(g, sources)?;
        let masks = sources
            .iter()
            .map(|s| AttentionMask::bidirectional(s.len(), s.len()))
            .collect();
        let layout = Arc::new(AttentionLayout::self_attention(masks));
        for layer in &self.arch.encoder {
            x = layer.forward(g, x, layout.clone(), self.config.dropout)?;
        }
        let mut starts = Vec::with_capacity(sources.len());
        let mut at = 0;
        for s in sources {
            starts.push(at);
            at += s.len();
        }
        Ok(Encoded {
            states: x,
            starts,
            lens: sources.iter().map(|s| s.len()).collect(),
        })
    }

    /// Decoder hidden states for each prefix; prefix `i` attends to encoded source `memory_of[i]`.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        prefixes: &[&[u32]],
        memory_of: &[usize],
    ) -> Result<Var, ModelError> {
        let mut x = self.embed(g, prefixes)?;
        let self_layout = Arc::new(AttentionLayout::self_attention(
            prefixes
                .iter()
                .map(|p| AttentionMask::causal(p.len()))
                .collect(),
        ));
        let mut cross = AttentionLayout::new();
        let mut q_start = 0;
        for (p, &m) in prefixes.iter().zip(memory_of) {
            cross.push(
                q_start,
                enc.starts[m],
                AttentionMask::bidirectional(p.len(), enc.lens[m]),
            );
            q_start += p.len();
        }
        let cross = Arc::new(cross);
        for layer in &self.arch.decoder {
            x = layer.forward(
                g,
                x,
                enc.states,
                self_layout.clone(),
                cross.clone(),
                self.config.dropout,
            )?;
        }
        Ok(x)
    }

    /// Vocabulary logits for hidden states `[rows, d]`.
    pub fn project(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var, ModelError> {
        Ok(match &self.arch.output {
            Some(linear) => linear.forward(g, hidden)?,
            None => {
                let table = g.param(self.arch.embed);
                g.matmul_bt(hidden, table)?
            }
        })
    }

    /// Teacher-forced logits: one row per decoder input position, sequences concatenated.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        sources: &[&[u32]],
        decoder_inputs: &[&[u32]],
    ) -> Result<Var, ModelError> {
        let enc = self.encode(g, sources)?;
        let memory_of: Vec<usize> = (0..decoder_inputs.len()).collect();
        let h = self.decode(g, &enc, decoder_inputs, &memory_of)?;
        self.project(g, h)
    }
}
