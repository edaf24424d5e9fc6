//! Pre-norm transformer encoder and decoder stacks.

mod attention;
mod mask;

pub use attention::MultiHeadAttention;
pub use mask::{AttentionMask, BLOCKED};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, FeedForward, LayerNorm};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Shape of one stack: layer count, width, heads and feed-forward width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackShape {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, shape: StackShape) -> Result<Self> {
        Ok(EncoderLayer {
            norm_attn: LayerNorm::new(&mut b.child("norm_attn"), shape.width),
            attn: MultiHeadAttention::new(&mut b.child("attn"), shape.width, shape.heads)?,
            norm_ff: LayerNorm::new(&mut b.child("norm_ff"), shape.width),
            ff: FeedForward::new(&mut b.child("ff"), shape.width, shape.ff, shape.width),
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        x: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, S>> {
        let h = self.norm_attn.forward(ctx, x)?;
        let x = x.add(ctx.dropout(self.attn.forward(ctx, h, h, mask)?))?;
        let h = self.norm_ff.forward(ctx, x)?;
        x.add(ctx.dropout(self.ff.forward(ctx, h)?))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, shape: StackShape) -> Result<Self> {
        Ok(DecoderLayer {
            norm_self: LayerNorm::new(&mut b.child("norm_self"), shape.width),
            self_attn: MultiHeadAttention::new(&mut b.child("self_attn"), shape.width, shape.heads)?,
            norm_cross: LayerNorm::new(&mut b.child("norm_cross"), shape.width),
            cross_attn: MultiHeadAttention::new(&mut b.child("cross_attn"), shape.width, shape.heads)?,
            norm_ff: LayerNorm::new(&mut b.child("norm_ff"), shape.width),
            ff: FeedForward::new(&mut b.child("ff"), shape.width, shape.ff, shape.width),
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        x: Var<'t, S>,
        memory: Var<'t, S>,
        target_mask: &AttentionMask,
    ) -> Result<Var<'t, S>> {
        let h = self.norm_self.forward(ctx, x)?;
        let x = x.add(ctx.dropout(self.self_attn.forward(ctx, h, h, Some(target_mask))?))?;
        let h = self.norm_cross.forward(ctx, x)?;
        let x = x.add(ctx.dropout(self.cross_attn.forward(ctx, h, memory, None)?))?;
        let h = self.norm_ff.forward(ctx, x)?;
        x.add(ctx.dropout(self.ff.forward(ctx, h)?))
    }
}

/// `L` encoder layers with non-shared weights and a closing LayerNorm
/// (omitted when `L = 0`, making the empty stack the identity).
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
    pub width: usize,
}

impl EncoderStack {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, shape: StackShape) -> Result<Self> {
        let layers = (0..shape.layers)
            .map(|i| EncoderLayer::new(&mut b.child(&format!("layer{i}")), shape))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = (shape.layers > 0).then(|| LayerNorm::new(&mut b.child("final_norm"), shape.width));
        Ok(EncoderStack {
            layers,
            final_norm,
            width: shape.width,
        })
    }

    pub fn encode<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        x: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, S>> {
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(ctx, x, mask)?;
        }
        match &self.final_norm {
            Some(n) => n.forward(ctx, x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Option<LayerNorm>,
    pub width: usize,
}

impl DecoderStack {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, shape: StackShape) -> Result<Self> {
        let layers = (0..shape.layers)
            .map(|i| DecoderLayer::new(&mut b.child(&format!("layer{i}")), shape))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = (shape.layers > 0).then(|| LayerNorm::new(&mut b.child("final_norm"), shape.width));
        Ok(DecoderStack {
            layers,
            final_norm,
            width: shape.width,
        })
    }

    /// Masked self-attention over `targets`, unmasked cross-attention over `memory`.
    pub fn decode<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        targets: Var<'t, S>,
        memory: Var<'t, S>,
        target_mask: &AttentionMask,
    ) -> Result<Var<'t, S>> {
        let n = targets.shape()[0];
        if target_mask.rows() != n || target_mask.cols() != n {
            return Err(Error::shape(
                "decode",
                &[target_mask.rows(), target_mask.cols()],
                &[n, n],
            ));
        }
        let mut x = targets;
        for layer in &self.layers {
            x = layer.forward(ctx, x, memory, target_mask)?;
        }
        match &self.final_norm {
            Some(n) => n.forward(ctx, x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    #[default]
    Learned,
    Sinusoidal,
}

/// Closed-form sine/cosine position table: even columns `sin`, odd columns `cos`.
pub fn sinusoidal_table<S: Scalar>(len: usize, width: usize) -> Tensor<S> {
    Tensor::from_fn(&[len, width], |i| {
        let (pos, col) = ((i / width) as f64, i % width);
        let pair = (col / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * pair / width as f64);
        S::lit(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Position encodings for sequences up to `max_len`.
#[derive(Clone, Debug)]
pub struct PositionTable {
    pub kind: PositionKind,
    pub table: Option<ParamId>,
    pub max_len: usize,
    pub width: usize,
}

impl PositionTable {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, kind: PositionKind, max_len: usize, width: usize) -> Self {
        let table = match kind {
            PositionKind::Learned => Some(b.normal("table", &[max_len, width], 0.02)),
            PositionKind::Sinusoidal => None,
        };
        PositionTable {
            kind,
            table,
            max_len,
            width,
        }
    }

    /// The first `len` rows, shape `[len, width]`.
    pub fn encodings<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, len: usize) -> Result<Var<'t, S>> {
        if len == 0 || len > self.max_len {
            return Err(Error::Index(format!(
                "sequence length {len} exceeds position table of {}",
                self.max_len
            )));
        }
        match self.table {
            Some(id) => {
                let t = ctx.p(id);
                if len == self.max_len {
                    Ok(t)
                } else {
                    t.rows(0, len)
                }
            }
            None => Ok(ctx.tape.constant(sinusoidal_table(len, self.width))),
        }
    }

    /// `x + encodings(rows(x))`.
    pub fn add_to<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let len = x.shape()[0];
        x.add(self.encodings(ctx, len)?)
    }
}
