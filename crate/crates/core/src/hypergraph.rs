//! Learnable action/relation queries, their decoders over video memory, and
//! the per-query class heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{softmax_slice, Tensor};
use crate::transformer::{AttentionMask, DecoderStack, StackShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Action,
    Relation,
}

/// `Q·T` learnable query rows; row `t·Q + q` is query `q` of frame `t`.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub kind: QueryKind,
    pub per_frame: usize,
    pub frames: usize,
    pub width: usize,
    pub table: ParamId,
}

impl QuerySet {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, kind: QueryKind, per_frame: usize, frames: usize, width: usize) -> Result<Self> {
        if per_frame == 0 || frames == 0 || width == 0 {
            return Err(Error::Config(format!(
                "{kind:?} queries need Q, T, d >= 1 (got {per_frame}, {frames}, {width})"
            )));
        }
        Ok(QuerySet {
            kind,
            per_frame,
            frames,
            width,
            table: b.normal("queries", &[per_frame * frames, width], 0.02),
        })
    }

    pub fn rows(&self) -> usize {
        self.per_frame * self.frames
    }

    pub fn row(&self, frame: usize, slot: usize) -> usize {
        frame * self.per_frame + slot
    }
}

/// Stand-alone seeded query table.
pub fn init_queries<S: Scalar>(kind: QueryKind, per_frame: usize, frames: usize, width: usize, seed: u64) -> Result<(QuerySet, ParamStore<S>)> {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let q = QuerySet::new(&mut Builder::new(&mut store, &mut rng), kind, per_frame, frames, width)?;
    Ok((q, store))
}

/// LayerNorm → Linear(d, d) → GELU → Linear(d, classes + 1), applied per row.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub norm: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
    pub classes: usize,
}

impl PredictionHead {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, width: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("prediction head needs at least one class".into()));
        }
        Ok(PredictionHead {
            norm: LayerNorm::new(&mut b.child("norm"), width),
            hidden: Linear::new(&mut b.child("hidden"), width, width),
            out: Linear::new(&mut b.child("out"), width, classes + 1),
            classes,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let h = self.hidden.forward(ctx, self.norm.forward(ctx, x)?)?.gelu();
        self.out.forward(ctx, h)
    }
}

/// One query set decoded against video memory under the block-causal mask.
#[derive(Clone, Debug)]
pub struct HyperGraphDecoder {
    pub queries: QuerySet,
    pub stack: DecoderStack,
    pub head: PredictionHead,
    mask: AttentionMask,
}

impl HyperGraphDecoder {
    pub fn new<S: Scalar>(
        b: &mut Builder<'_, S>,
        kind: QueryKind,
        per_frame: usize,
        frames: usize,
        shape: StackShape,
        classes: usize,
    ) -> Result<Self> {
        Ok(HyperGraphDecoder {
            queries: QuerySet::new(b, kind, per_frame, frames, shape.width)?,
            stack: DecoderStack::new(&mut b.child("decoder"), shape)?,
            head: PredictionHead::new(&mut b.child("head"), shape.width, classes)?,
            mask: AttentionMask::block_causal(frames, per_frame),
        })
    }

    /// Decoded query embeddings, `[Q·T, d]`.
    pub fn decode<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, memory: Var<'t, S>) -> Result<Var<'t, S>> {
        self.decode_from(ctx, ctx.p(self.queries.table), memory)
    }

    /// Decodes an explicit `[Q·T, d]` query block instead of the learned table.
    pub fn decode_from<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, queries: Var<'t, S>, memory: Var<'t, S>) -> Result<Var<'t, S>> {
        self.stack.decode(ctx, queries, memory, &self.mask)
    }

    pub fn logits<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, embeddings: Var<'t, S>) -> Result<Var<'t, S>> {
        self.head.forward(ctx, embeddings)
    }
}

/// One emitted class of a frame after duplicate collapse.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedLabel {
    pub class: usize,
    /// Highest softmax probability among the slots that chose the class.
    pub score: f64,
    /// Number of slots whose argmax was this class.
    pub raw_count: usize,
}

/// Per-frame argmax sets from `[Q·T, classes + 1]` logits. Slots whose argmax
/// is φ emit nothing; repeated classes in a frame keep the best score.
pub fn predict_sets<S: Scalar>(logits: &Tensor<S>, per_frame: usize) -> Result<Vec<Vec<PredictedLabel>>> {
    let shape = logits.shape();
    if shape.len() != 2 || per_frame == 0 || shape[0] % per_frame != 0 || shape[1] < 2 {
        return Err(Error::shape("predict_sets", shape, &[per_frame]));
    }
    let k = shape[1];
    let phi = k - 1;
    let mut probs = vec![S::zero(); k];
    let frames = shape[0] / per_frame;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut set: Vec<PredictedLabel> = Vec::new();
        for q in 0..per_frame {
            let row = logits.row(t * per_frame + q);
            softmax_slice(row, &mut probs);
            // First maximum wins ties.
            let (class, p) = probs
                .iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
            if class == phi {
                continue;
            }
            match set.iter_mut().find(|l| l.class == class) {
                Some(l) => {
                    l.raw_count += 1;
                    l.score = l.score.max(p.as_f64());
                }
                None => set.push(PredictedLabel {
                    class,
                    score: p.as_f64(),
                    raw_count: 1,
                }),
            }
        }
        set.sort_by_key(|l| l.class);
        out.push(set);
    }
    Ok(out)
}
