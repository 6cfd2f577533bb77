use std::sync::Arc;

use crate::tensor::{AttentionLayout, Graph, Init, ParamId, ParamSink, Result, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: sink.declare(&format!("{name}.w"), &[input, output], Init::XavierUniform),
            bias: sink.declare(&format!("{name}.b"), &[output], Init::Zeros),
        }
    }

    /// Declares with explicit weight/bias names (used for the attention projections).
    fn declare_named(
        sink: &mut dyn ParamSink,
        w: &str,
        b: &str,
        input: usize,
        output: usize,
    ) -> Self {
        Linear {
            weight: sink.declare(w, &[input, output], Init::XavierUniform),
            bias: sink.declare(b, &[output], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: sink.declare(&format!("{name}.gamma"), &[dim], Init::Ones),
            beta: sink.declare(&format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d_model: usize, heads: usize) -> Self {
        let mut proj = |suffix: &str| {
            Linear::declare_named(
                sink,
                &format!("{name}.w{suffix}"),
                &format!("{name}.b{suffix}"),
                d_model,
                d_model,
            )
        };
        MultiHeadAttention {
            query: proj("q"),
            key: proj("k"),
            value: proj("v"),
            output: proj("o"),
            heads,
        }
    }

    /// Attends from `queries` rows to `memory` rows as described by `layout`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        memory: Var,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let ctx = g.attention(q, k, v, layout, self.heads)?;
        self.output.forward(g, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d_model: usize, d_ff: usize) -> Self {
        FeedForward {
            inner: Linear::declare(sink, &format!("{name}.ff1"), d_model, d_ff),
            outer: Linear::declare(sink, &format!("{name}.ff2"), d_ff, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Post-norm residual block: `norm(x + dropout(f(x)))`.
fn residual(g: &mut Graph<'_>, x: Var, fx: Var, norm: &LayerNorm, dropout: f64) -> Result<Var> {
    let fx = g.dropout(fx, dropout);
    let sum = g.add(x, fx)?;
    norm.forward(g, sum)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ff: FeedForward,
    pub ff_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn declare(
        sink: &mut dyn ParamSink,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::declare(sink, &format!("{name}.attn"), d_model, heads),
            attn_norm: LayerNorm::declare(sink, &format!("{name}.attn_norm"), d_model),
            ff: FeedForward::declare(sink, name, d_model, d_ff),
            ff_norm: LayerNorm::declare(sink, &format!("{name}.ff_norm"), d_model),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        layout: Arc<AttentionLayout>,
        dropout: f64,
    ) -> Result<Var> {
        let a = self.attn.forward(g, x, x, layout)?;
        let x = residual(g, x, a, &self.attn_norm, dropout)?;
        let f = self.ff.forward(g, x)?;
        residual(g, x, f, &self.ff_norm, dropout)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ff: FeedForward,
    pub ff_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn declare(
        sink: &mut dyn ParamSink,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::declare(
                sink,
                &format!("{name}.self_attn"),
                d_model,
                heads,
            ),
            self_norm: LayerNorm::declare(sink, &format!("{name}.self_norm"), d_model),
            cross_attn: MultiHeadAttention::declare(
                sink,
                &format!("{name}.cross_attn"),
                d_model,
                heads,
            ),
            cross_norm: LayerNorm::declare(sink, &format!("{name}.cross_norm"), d_model),
            ff: FeedForward::declare(sink, name, d_model, d_ff),
            ff_norm: LayerNorm::declare(sink, &format!("{name}.ff_norm"), d_model),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        memory: Var,
        self_layout: Arc<AttentionLayout>,
        cross_layout: Arc<AttentionLayout>,
        dropout: f64,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, x, x, self_layout)?;
        let x = residual(g, x, a, &self.self_norm, dropout)?;
        let c = self.cross_attn.forward(g, x, memory, cross_layout)?;
        let x = residual(g, x, c, &self.cross_norm, dropout)?;
        let f = self.ff.forward(g, x)?;
        residual(g, x, f, &self.ff_norm, dropout)
    }
}

/// `[len, d]` sinusoidal position table.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
