use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, Var};

use super::mask::AttentionMask;

/// Multi-head scaled dot-product attention with separate q/k/v/out projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "model width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(&mut b.child("query"), width, width),
            key: Linear::new(&mut b.child("key"), width, width),
            value: Linear::new(&mut b.child("value"), width, width),
            out: Linear::new(&mut b.child("out"), width, width),
            heads,
            width,
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        queries: Var<'t, S>,
        keys: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, S>> {
        Ok(self.forward_with_weights(ctx, queries, keys, mask)?.0)
    }

    /// Also returns each head's `[Lq, Lk]` attention weights.
    pub fn forward_with_weights<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        queries: Var<'t, S>,
        keys: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var<'t, S>, Vec<Var<'t, S>>)> {
        let (qs, ks) = (queries.shape(), keys.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.width || ks[1] != self.width {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let additive = match mask {
            Some(m) if m.rows() != qs[0] || m.cols() != ks[0] => {
                return Err(Error::shape("attention_mask", &[m.rows(), m.cols()], &[qs[0], ks[0]]));
            }
            Some(m) if !m.is_all_allowed() => Some(m.additive::<S>()),
            _ => None,
        };
        let q = self.query.forward(ctx, queries)?;
        let k = self.key.forward(ctx, keys)?;
        let v = self.value.forward(ctx, keys)?;
        let head_width = self.width / self.heads;
        let scale = S::lit(1.0 / (head_width as f64).sqrt());
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let start = h * head_width;
                (
                    q.slice_cols(start, head_width)?,
                    k.slice_cols(start, head_width)?,
                    v.slice_cols(start, head_width)?,
                )
            };
            let mut scores = qh.matmul_t(kh)?.scale(scale);
            if let Some(add) = &additive {
                scores = scores.add_const(add)?;
            }
            let probs = scores.softmax(1)?;
            outputs.push(ctx.dropout(probs).matmul(vh)?);
            weights.push(probs);
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            concat_cols(&outputs)?
        };
        Ok((self.out.forward(ctx, joined)?, weights))
    }
}
