//! Parameterised building blocks composed from graph primitives.
//!
//! Blocks use post-norm residual layout: `x = norm(x + sublayer(x))`.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamStore};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), c_in, c_out, fan_in_bound(c_in));
        let bias = store.add_filled(&format!("{name}.bias"), 1, c_out, 0.0);
        Linear {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.c_in {
            return Err(Error::shape(format!(
                "linear expects {} input channels, got {}",
                self.c_in,
                g.shape(x).1
            )));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add_filled(&format!("{name}.gain"), 1, width, 1.0),
            bias: store.add_filled(&format!("{name}.bias"), 1, width, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape(format!(
                "attention width {width} not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), width, width),
            key: Linear::new(store, &format!("{name}.k"), width, width),
            value: Linear::new(store, &format!("{name}.v"), width, width),
            out: Linear::new(store, &format!("{name}.o"), width, width),
            heads,
        })
    }

    /// Queries come from `query`, keys and values from `key_value`; self-attention
    /// passes the same node twice.
    pub fn forward(&self, g: &mut Graph<'_>, query: Var, key_value: Var) -> Result<Var> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, key_value)?;
        let v = self.value.forward(g, key_value)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.out.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.fc1"), width, hidden),
            outer: Linear::new(store, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.gelu(h);
        self.outer.forward(g, h)
    }
}

/// Self-attention followed by a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, x)
    }
}

pub fn encoder_stack(
    store: &mut ParamStore,
    name: &str,
    depth: usize,
    width: usize,
    heads: usize,
    hidden: usize,
) -> Result<Vec<EncoderBlock>> {
    (0..depth)
        .map(|i| EncoderBlock::new(store, &format!("{name}.{i}"), width, heads, hidden))
        .collect()
}

pub fn run_stack(blocks: &[EncoderBlock], g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x)?;
    }
    Ok(x)
}

/// Self-attention, cross-attention to a memory sequence, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(DecoderBlock {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), width, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, hidden),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Var) -> Result<Var> {
        let a = self.self_attn.forward(g, x, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let c = self.cross_attn.forward(g, x, memory)?;
        let x = g.add(x, c)?;
        let x = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm3.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, width: usize) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::shape(format!(
                "conv1d needs an odd kernel width, got {width}"
            )));
        }
        Ok(Conv1d {
            kernel: store.add_uniform(
                &format!("{name}.kernel"),
                width * c_in,
                c_out,
                fan_in_bound(width * c_in),
            ),
            bias: store.add_filled(&format!("{name}.bias"), 1, c_out, 0.0),
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        g.conv1d(x, k, b, self.width)
    }
}
