//! The situation hyper-graph token sequence.
//!
//! Layout: position 0 is `[HG]`; frame `t` then occupies
//! `1 + t·(N+M) .. 1 + (t+1)·(N+M)`, its `N` action tokens first and its `M`
//! relation tokens after them. Each token is the decoded query embedding
//! plus a type embedding (`[ACT]` or `[REL]`) plus the frame's situation
//! embedding.

use crate::error::{Error, Result};
use crate::hypergraph::QueryKind;
use crate::nn::{Builder, Ctx};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tape::{concat_rows, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphLayout {
    pub frames: usize,
    pub actions: usize,
    pub relations: usize,
}

impl GraphLayout {
    pub fn per_frame(&self) -> usize {
        self.actions + self.relations
    }

    pub fn len(&self) -> usize {
        1 + self.per_frame() * self.frames
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token_index(&self, frame: usize, kind: QueryKind, slot: usize) -> Result<usize> {
        let limit = match kind {
            QueryKind::Action => self.actions,
            QueryKind::Relation => self.relations,
        };
        if frame >= self.frames || slot >= limit {
            return Err(Error::Index(format!(
                "{kind:?} slot {slot} of frame {frame} outside {}x{limit}",
                self.frames
            )));
        }
        let offset = match kind {
            QueryKind::Action => slot,
            QueryKind::Relation => self.actions + slot,
        };
        Ok(1 + frame * self.per_frame() + offset)
    }
}

/// Which graph tokens may be attended.
#[derive(Clone, Debug)]
pub enum MaskPolicy<'a> {
    /// Per-row "matched to a real label" flags for the action and relation
    /// blocks; rows matched to φ are padding.
    Train {
        actions: &'a [bool],
        relations: &'a [bool],
    },
    /// Every token is visible.
    Inference,
}

pub struct HyperGraphSequence<'t, S: Scalar> {
    pub tokens: Var<'t, S>,
    pub mask: Vec<bool>,
    pub layout: GraphLayout,
}

/// `[HG]` token, `[ACT]`/`[REL]` type table and per-frame situation table.
#[derive(Clone, Debug)]
pub struct HyperGraphEmbedding {
    pub hg_token: ParamId,
    pub type_table: ParamId,
    pub situation_table: ParamId,
    pub frames: usize,
    pub width: usize,
}

impl HyperGraphEmbedding {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, frames: usize, width: usize) -> Self {
        HyperGraphEmbedding {
            hg_token: b.normal("hg_token", &[1, width], 0.02),
            type_table: b.normal("type_table", &[2, width], 0.02),
            situation_table: b.normal("situation_table", &[frames, width], 0.02),
            frames,
            width,
        }
    }

    /// Builds the sequence from `[N·T, d]` action and `[M·T, d]` relation
    /// embeddings; either block may be absent (`N` or `M` is then 0).
    pub fn assemble<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        actions: Option<Var<'t, S>>,
        relations: Option<Var<'t, S>>,
        policy: MaskPolicy<'_>,
    ) -> Result<HyperGraphSequence<'t, S>> {
        let t = self.frames;
        let per_frame = |v: &Option<Var<'t, S>>, name: &str| -> Result<usize> {
            match v {
                None => Ok(0),
                Some(v) => {
                    let s = v.shape();
                    if s.len() != 2 || s[1] != self.width || s[0] % t != 0 || s[0] == 0 {
                        return Err(Error::shape("assemble", &s, &[t, self.width])
                            .context(format!("{name} embeddings")));
                    }
                    Ok(s[0] / t)
                }
            }
        };
        let layout = GraphLayout {
            frames: t,
            actions: per_frame(&actions, "action")?,
            relations: per_frame(&relations, "relation")?,
        };
        if layout.per_frame() == 0 {
            return Err(Error::Contract("hyper-graph with neither actions nor relations".into()));
        }
        let (act_flags, rel_flags): (Vec<bool>, Vec<bool>) = match policy {
            MaskPolicy::Train { actions: a, relations: r } => {
                if a.len() != layout.actions * t || r.len() != layout.relations * t {
                    return Err(Error::shape(
                        "assemble_mask",
                        &[a.len(), r.len()],
                        &[layout.actions * t, layout.relations * t],
                    ));
                }
                (a.to_vec(), r.to_vec())
            }
            MaskPolicy::Inference => (
                vec![true; layout.actions * t],
                vec![true; layout.relations * t],
            ),
        };

        // Source rows: actions first, then relations; reorder frame-major.
        let rel_base = layout.actions * t;
        let mut order = Vec::with_capacity(layout.len() - 1);
        let mut types = Vec::with_capacity(layout.len() - 1);
        let mut frames = Vec::with_capacity(layout.len() - 1);
        let mut mask = Vec::with_capacity(layout.len());
        mask.push(true);
        for f in 0..t {
            for q in 0..layout.actions {
                order.push(f * layout.actions + q);
                types.push(0);
                frames.push(f);
                mask.push(act_flags[f * layout.actions + q]);
            }
            for q in 0..layout.relations {
                order.push(rel_base + f * layout.relations + q);
                types.push(1);
                frames.push(f);
                mask.push(rel_flags[f * layout.relations + q]);
            }
        }
        let blocks: Vec<Var<'t, S>> = [actions, relations].into_iter().flatten().collect();
        let source = if blocks.len() == 1 { blocks[0] } else { concat_rows(&blocks)? };
        let body = source
            .gather_rows(&order)?
            .add(ctx.p(self.type_table).gather_rows(&types)?)?
            .add(ctx.p(self.situation_table).gather_rows(&frames)?)?;
        let tokens = concat_rows(&[ctx.p(self.hg_token), body])?;
        Ok(HyperGraphSequence { tokens, mask, layout })
    }
}
