//! End-to-end question answering over predicted situation hyper-graphs.
//!
//! adapt → encode video → action/relation decoders → heads → matching →
//! graph assembly → encode question → co-attention → answer head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AdapterKind, ModeFlags, ModelConfig};
use crate::dataset::SituationAnnotation;
use crate::embedding::{HyperGraphEmbedding, HyperGraphSequence, MaskPolicy};
use crate::error::{Error, Result};
use crate::hypergraph::{HyperGraphDecoder, QueryKind};
use crate::matching::{hungarian_loss, match_sequence, MatchScope, SequenceMatch};
use crate::nn::{Builder, Ctx, FeedForward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, concat_rows, sum_all, Var};
use crate::tensor::{softmax_slice, Tensor};
use crate::transformer::{AttentionMask, EncoderStack, MultiHeadAttention, PositionTable, StackShape};
use crate::vocab::Tokenizer;

fn stack_shape(cfg: &ModelConfig, layers: usize) -> StackShape {
    StackShape {
        layers,
        width: cfg.width,
        heads: cfg.heads,
        ff: cfg.ff,
    }
}

/// Per-cell linear map from backbone channels to model width, optionally
/// after averaging frame pairs.
#[derive(Clone, Debug)]
pub struct FeatureAdapter {
    pub kind: AdapterKind,
    pub linear: Linear,
    pub cells: usize,
}

impl FeatureAdapter {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, cfg: &ModelConfig) -> Self {
        FeatureAdapter {
            kind: cfg.adapter,
            linear: Linear::new(&mut b.child("linear"), cfg.feature_dim, cfg.width),
            cells: cfg.cells(),
        }
    }

    /// Averages frame pairs of a `[T, cells, d_x]` block (a constant input).
    pub fn pool<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.cells {
            return Err(Error::shape("adapt_features", s, &[0, self.cells, 0]));
        }
        match self.kind {
            AdapterKind::IdentityTime => Ok(x.clone()),
            AdapterKind::TemporalPool => {
                if s[0] % 2 != 0 {
                    return Err(Error::Config(format!(
                        "temporal pooling needs an even frame count, got {}",
                        s[0]
                    )));
                }
                let plane = s[1] * s[2];
                let half = S::lit(0.5);
                let d = x.data();
                let out = (0..s[0] / 2 * plane)
                    .map(|i| {
                        let (t, r) = (i / plane, i % plane);
                        (d[2 * t * plane + r] + d[(2 * t + 1) * plane + r]) * half
                    })
                    .collect();
                Tensor::new(&[s[0] / 2, s[1], s[2]], out)
            }
        }
    }

    /// `[T'·cells, d]`, frame-major then row-major over the grid.
    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: &Tensor<S>) -> Result<Var<'t, S>> {
        let pooled = self.pool(x)?;
        let s = pooled.shape().to_vec();
        let flat = pooled.reshape(&[s[0] * s[1], s[2]])?;
        self.linear.forward(ctx, ctx.tape.constant(flat))
    }
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub adapter: FeatureAdapter,
    pub vis_token: ParamId,
    pub positions: PositionTable,
    pub stack: EncoderStack,
}

impl VideoEncoder {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, cfg: &ModelConfig) -> Result<Self> {
        Ok(VideoEncoder {
            adapter: FeatureAdapter::new(&mut b.child("adapter"), cfg),
            vis_token: b.normal("vis_token", &[1, cfg.width], 0.02),
            positions: PositionTable::new(&mut b.child("positions"), cfg.position, cfg.video_tokens(), cfg.width),
            stack: EncoderStack::new(&mut b.child("encoder"), stack_shape(cfg, cfg.layers))?,
        })
    }

    /// `[1 + T'·h·w, d]` with `[VIS]` first.
    pub fn encode<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, features: &Tensor<S>) -> Result<Var<'t, S>> {
        let tokens = self.adapter.forward(ctx, features)?;
        let seq = concat_rows(&[ctx.p(self.vis_token), tokens])?;
        let seq = self.positions.add_to(ctx, seq)?;
        self.stack.encode(ctx, seq, None)
    }
}

#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub words: ParamId,
    pub positions: PositionTable,
    pub stack: EncoderStack,
}

impl QuestionEncoder {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, cfg: &ModelConfig) -> Result<Self> {
        Ok(QuestionEncoder {
            words: b.normal("words", &[cfg.num_words + 3, cfg.width], 0.02),
            positions: PositionTable::new(&mut b.child("positions"), cfg.position, cfg.max_question_len, cfg.width),
            stack: EncoderStack::new(&mut b.child("encoder"), stack_shape(cfg, cfg.layers))?,
        })
    }

    pub fn encode<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, ids: &[usize]) -> Result<Var<'t, S>> {
        let x = ctx.p(self.words).gather_rows(ids)?;
        let x = self.positions.add_to(ctx, x)?;
        self.stack.encode(ctx, x, None)
    }
}

/// `[CLS] Q [SEP] A0 [SEP] A1 …` for multiple choice, `[CLS] Q` otherwise.
pub fn compose_qa(tok: &Tokenizer, question: &str, choices: Option<&[String]>) -> Result<Vec<usize>> {
    let q = tok.encode(question);
    if q.is_empty() {
        return Err(Error::Schema("empty question".into()));
    }
    let mut ids = vec![Tokenizer::CLS];
    ids.extend(q);
    if let Some(choices) = choices {
        if choices.is_empty() {
            return Err(Error::Config("multiple-choice question without choices".into()));
        }
        for c in choices {
            ids.push(Tokenizer::SEP);
            ids.extend(tok.encode(c));
        }
    }
    Ok(ids)
}

/// One two-stream layer: each stream cross-attends to the other (both read
/// the layer's input states), then applies its own feed-forward block.
#[derive(Clone, Debug)]
pub struct CoAttentionLayer {
    pub q_norm_cross: LayerNorm,
    pub q_cross: MultiHeadAttention,
    pub g_norm_cross: LayerNorm,
    pub g_cross: MultiHeadAttention,
    pub q_norm_ff: LayerNorm,
    pub q_ff: FeedForward,
    pub g_norm_ff: LayerNorm,
    pub g_ff: FeedForward,
}

impl CoAttentionLayer {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, cfg: &ModelConfig) -> Result<Self> {
        let (d, h) = (cfg.width, cfg.heads);
        Ok(CoAttentionLayer {
            q_norm_cross: LayerNorm::new(&mut b.child("q_norm_cross"), d),
            q_cross: MultiHeadAttention::new(&mut b.child("q_cross"), d, h)?,
            g_norm_cross: LayerNorm::new(&mut b.child("g_norm_cross"), d),
            g_cross: MultiHeadAttention::new(&mut b.child("g_cross"), d, h)?,
            q_norm_ff: LayerNorm::new(&mut b.child("q_norm_ff"), d),
            q_ff: FeedForward::new(&mut b.child("q_ff"), d, cfg.ff, d),
            g_norm_ff: LayerNorm::new(&mut b.child("g_norm_ff"), d),
            g_ff: FeedForward::new(&mut b.child("g_ff"), d, cfg.ff, d),
        })
    }

    /// `graph_keys` blocks padded graph tokens for the question stream.
    pub fn forward<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        q: Var<'t, S>,
        g: Var<'t, S>,
        graph_keys: Option<&AttentionMask>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let hq = self.q_norm_cross.forward(ctx, q)?;
        let hg = self.g_norm_cross.forward(ctx, g)?;
        let q = q.add(ctx.dropout(self.q_cross.forward(ctx, hq, hg, graph_keys)?))?;
        let g = g.add(ctx.dropout(self.g_cross.forward(ctx, hg, hq, None)?))?;
        let hq = self.q_norm_ff.forward(ctx, q)?;
        let hg = self.g_norm_ff.forward(ctx, g)?;
        let q = q.add(ctx.dropout(self.q_ff.forward(ctx, hq)?))?;
        let g = g.add(ctx.dropout(self.g_ff.forward(ctx, hg)?))?;
        Ok((q, g))
    }
}

#[derive(Clone, Debug)]
pub struct CoAttention {
    pub layers: Vec<CoAttentionLayer>,
    pub q_norm: LayerNorm,
    pub g_norm: LayerNorm,
}

/// Question-stream and graph-stream outputs.
pub struct FusedOutputs<'t, S: Scalar> {
    pub question: Var<'t, S>,
    pub graph: Var<'t, S>,
}

impl<'t, S: Scalar> FusedOutputs<'t, S> {
    /// `[1, 2d]`: the `[CLS]` row next to the graph summary row.
    pub fn pooled(&self) -> Result<Var<'t, S>> {
        concat_cols(&[self.question.rows(0, 1)?, self.graph.rows(0, 1)?])
    }
}

impl CoAttention {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, cfg: &ModelConfig) -> Result<Self> {
        Ok(CoAttention {
            layers: (0..cfg.fusion_layers)
                .map(|i| CoAttentionLayer::new(&mut b.child(&format!("layer{i}")), cfg))
                .collect::<Result<_>>()?,
            q_norm: LayerNorm::new(&mut b.child("q_norm"), cfg.width),
            g_norm: LayerNorm::new(&mut b.child("g_norm"), cfg.width),
        })
    }

    /// Graph-stream tokens with `graph_mask[j] == false` are invisible to
    /// the question stream.
    pub fn forward<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        q: Var<'t, S>,
        g: Var<'t, S>,
        graph_mask: &[bool],
    ) -> Result<FusedOutputs<'t, S>> {
        let (sq, sg) = (q.shape()[0], g.shape()[0]);
        if graph_mask.len() != sg {
            return Err(Error::shape("cross_attend", &[graph_mask.len()], &[sg]));
        }
        let keys = if graph_mask.iter().all(|&m| m) {
            None
        } else {
            Some(AttentionMask::key_padding(sq, graph_mask)?)
        };
        let (mut q, mut g) = (q, g);
        for layer in &self.layers {
            (q, g) = layer.forward(ctx, q, g, keys.as_ref())?;
        }
        Ok(FusedOutputs {
            question: self.q_norm.forward(ctx, q)?,
            graph: self.g_norm.forward(ctx, g)?,
        })
    }
}

/// One question of a clip with its token ids and gold answer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionInput {
    pub tokens: Vec<usize>,
    pub answer: usize,
}

pub struct ClipInput<'a, S: Scalar> {
    pub features: &'a Tensor<S>,
    /// Needed for the set losses, the training mask and ground-truth graphs.
    pub annotation: Option<&'a SituationAnnotation>,
    pub questions: &'a [QuestionInput],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Graph padding mask from the matching.
    Train,
    /// All graph tokens visible; the answer path never reads annotations.
    Eval,
}

#[derive(Clone, Debug, Default)]
pub struct Matches<S> {
    pub action: Option<SequenceMatch<S>>,
    pub relation: Option<SequenceMatch<S>>,
}

pub struct ForwardOutput<'t, S: Scalar> {
    pub answer_logits: Vec<Var<'t, S>>,
    pub action_logits: Option<Var<'t, S>>,
    pub relation_logits: Option<Var<'t, S>>,
    pub matches: Matches<S>,
    pub l_act: Option<Var<'t, S>>,
    pub l_rel: Option<Var<'t, S>>,
    pub l_vqa: Option<Var<'t, S>>,
    pub total: Option<Var<'t, S>>,
}

#[derive(Clone, Debug)]
pub struct QaModel {
    pub config: ModelConfig,
    pub flags: ModeFlags,
    pub match_scope: MatchScope,
    pub video: VideoEncoder,
    pub action_decoder: HyperGraphDecoder,
    pub relation_decoder: HyperGraphDecoder,
    pub graph: HyperGraphEmbedding,
    /// Label embeddings (φ last) used when the graph comes from annotations.
    pub gt_action_labels: ParamId,
    pub gt_relation_labels: ParamId,
    pub question: QuestionEncoder,
    pub fusion: CoAttention,
    pub answer_head: FeedForward,
}

impl QaModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new<S: Scalar>(config: &ModelConfig, flags: ModeFlags, match_scope: MatchScope, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let model = Self::build(&mut store, config, flags, match_scope, seed)?;
        Ok((model, store))
    }

    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &ModelConfig,
        flags: ModeFlags,
        match_scope: MatchScope,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        flags.validate()?;
        if config.num_actions == 0 || config.num_predicates == 0 || config.answer_classes() == 0 {
            return Err(Error::Config("vocabulary sizes are not resolved".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(store, &mut rng);
        let shape = stack_shape(config, config.layers);
        let d = config.width;
        Ok(QaModel {
            config: config.clone(),
            flags,
            match_scope,
            video: VideoEncoder::new(&mut b.child("video"), config)?,
            action_decoder: HyperGraphDecoder::new(
                &mut b.child("action"),
                QueryKind::Action,
                config.action_queries,
                config.frames,
                shape,
                config.num_actions,
            )?,
            relation_decoder: HyperGraphDecoder::new(
                &mut b.child("relation"),
                QueryKind::Relation,
                config.relation_queries,
                config.frames,
                shape,
                config.num_predicates,
            )?,
            graph: HyperGraphEmbedding::new(&mut b.child("graph"), config.frames, d),
            gt_action_labels: b.normal("gt_labels.action", &[config.num_actions + 1, d], 0.02),
            gt_relation_labels: b.normal("gt_labels.relation", &[config.num_predicates + 1, d], 0.02),
            question: QuestionEncoder::new(&mut b.child("question"), config)?,
            fusion: CoAttention::new(&mut b.child("fusion"), config)?,
            answer_head: FeedForward::new(&mut b.child("answer_head"), 2 * d, 2 * d, config.answer_classes()),
        })
    }

    fn check_input<S: Scalar>(&self, input: &ClipInput<'_, S>) -> Result<()> {
        let c = &self.config;
        let s = input.features.shape();
        if s != [c.frames, c.cells(), c.feature_dim] {
            return Err(Error::shape("features", s, &[c.frames, c.cells(), c.feature_dim]));
        }
        if let Some(a) = input.annotation {
            if a.frames != c.frames {
                return Err(Error::Schema(format!(
                    "clip {}: {} frames, model expects {}",
                    a.clip_id, a.frames, c.frames
                )));
            }
        }
        let classes = c.answer_classes();
        for q in input.questions {
            if q.answer >= classes {
                return Err(Error::Index(format!("answer {} of {classes}", q.answer)));
            }
            if q.tokens.len() > c.max_question_len {
                return Err(Error::Config(format!(
                    "question of {} tokens exceeds max_question_len {}",
                    q.tokens.len(),
                    c.max_question_len
                )));
            }
        }
        Ok(())
    }

    /// Label embeddings for the annotated sets, padded with φ; padding is masked.
    fn gt_block<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        table: ParamId,
        sets: &[Vec<usize>],
        per_frame: usize,
        phi: usize,
    ) -> Result<(Var<'t, S>, Vec<bool>)> {
        let mut idx = Vec::with_capacity(sets.len() * per_frame);
        let mut mask = Vec::with_capacity(sets.len() * per_frame);
        for set in sets {
            if set.len() > per_frame {
                return Err(Error::Contract(format!("{} labels for {per_frame} slots", set.len())));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            for q in 0..per_frame {
                idx.push(sorted.get(q).copied().unwrap_or(phi));
                mask.push(q < sorted.len());
            }
        }
        Ok((ctx.p(table).gather_rows(&idx)?, mask))
    }

    fn set_branch<'t, S: Scalar>(
        &self,
        decoder: &HyperGraphDecoder,
        ctx: &Ctx<'t, S>,
        memory: Var<'t, S>,
        truth: Option<&[Vec<usize>]>,
        fixed: Option<&SequenceMatch<S>>,
    ) -> Result<(Var<'t, S>, Var<'t, S>, Option<SequenceMatch<S>>, Option<Var<'t, S>>)> {
        let emb = decoder.decode(ctx, memory)?;
        let logits = decoder.logits(ctx, emb)?;
        let Some(truth) = truth else {
            return Ok((emb, logits, None, None));
        };
        let matched = match fixed {
            Some(m) => m.clone(),
            None => {
                let probs = logits.with_data(|d| {
                    let k = decoder.head.classes + 1;
                    let mut p = vec![S::zero(); d.len()];
                    for (src, dst) in d.chunks(k).zip(p.chunks_mut(k)) {
                        softmax_slice(src, dst);
                    }
                    p
                });
                let probs = Tensor::new(&logits.shape(), probs)?;
                match_sequence(&probs, truth, decoder.queries.per_frame, self.match_scope)?
            }
        };
        let loss = hungarian_loss(logits, &matched, self.config.phi_weight)?;
        Ok((emb, logits, Some(matched), Some(loss)))
    }

    /// Full forward pass for one clip and its questions. `fixed` replaces
    /// the matching (used to hold assignments still under perturbation).
    pub fn forward<'t, S: Scalar>(
        &self,
        ctx: &Ctx<'t, S>,
        input: &ClipInput<'_, S>,
        phase: Phase,
        fixed: Option<&Matches<S>>,
    ) -> Result<ForwardOutput<'t, S>> {
        self.check_input(input)?;
        let f = self.flags;
        let ann = input.annotation;
        if f.gt_graph && f.uses_graph() && ann.is_none() {
            return Err(Error::Contract("ground-truth graph mode needs the annotation".into()));
        }
        let decoders = !f.gt_graph;
        let memory = if decoders || f.fuses_video() {
            Some(self.video.encode(ctx, input.features)?)
        } else {
            None
        };

        let mut out = ForwardOutput {
            answer_logits: Vec::with_capacity(input.questions.len()),
            action_logits: None,
            relation_logits: None,
            matches: Matches::default(),
            l_act: None,
            l_rel: None,
            l_vqa: None,
            total: None,
        };
        let mut act_emb = None;
        let mut rel_emb = None;
        if let (true, Some(mem)) = (decoders, memory) {
            if f.uses_actions() {
                let (e, l, m, loss) = self.set_branch(
                    &self.action_decoder,
                    ctx,
                    mem,
                    ann.map(|a| a.actions.as_slice()),
                    fixed.and_then(|x| x.action.as_ref()),
                )?;
                act_emb = Some(e);
                out.action_logits = Some(l);
                out.matches.action = m;
                out.l_act = loss;
            }
            if f.uses_relations() {
                let (e, l, m, loss) = self.set_branch(
                    &self.relation_decoder,
                    ctx,
                    mem,
                    ann.map(|a| a.relations.as_slice()),
                    fixed.and_then(|x| x.relation.as_ref()),
                )?;
                rel_emb = Some(e);
                out.relation_logits = Some(l);
                out.matches.relation = m;
                out.l_rel = loss;
            }
        }

        let graph: Option<HyperGraphSequence<'t, S>> = if !f.uses_graph() {
            None
        } else if f.gt_graph {
            let a = ann.expect("checked above");
            let c = &self.config;
            let acts = f
                .uses_actions()
                .then(|| self.gt_block(ctx, self.gt_action_labels, &a.actions, c.action_queries, c.num_actions))
                .transpose()?;
            let rels = f
                .uses_relations()
                .then(|| self.gt_block(ctx, self.gt_relation_labels, &a.relations, c.relation_queries, c.num_predicates))
                .transpose()?;
            let am = acts.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            let rm = rels.as_ref().map(|x| x.1.clone()).unwrap_or_default();
            Some(self.graph.assemble(
                ctx,
                acts.map(|x| x.0),
                rels.map(|x| x.0),
                MaskPolicy::Train {
                    actions: &am,
                    relations: &rm,
                },
            )?)
        } else {
            let policy_flags = match phase {
                Phase::Train => {
                    let flags = |m: &Option<SequenceMatch<S>>, classes: usize| {
                        m.as_ref().map(|m| m.matched_mask(classes)).unwrap_or_default()
                    };
                    if ann.is_none() {
                        return Err(Error::Contract("training phase needs the annotation".into()));
                    }
                    Some((
                        flags(&out.matches.action, self.config.num_actions),
                        flags(&out.matches.relation, self.config.num_predicates),
                    ))
                }
                Phase::Eval => None,
            };
            let policy = match &policy_flags {
                Some((a, r)) => MaskPolicy::Train {
                    actions: a,
                    relations: r,
                },
                None => MaskPolicy::Inference,
            };
            Some(self.graph.assemble(ctx, act_emb, rel_emb, policy)?)
        };

        let (stream, mask) = match (graph, memory) {
            (Some(g), Some(mem)) if f.q_plus_v_plus_hg => {
                let mut mask = g.mask;
                mask.extend(std::iter::repeat_n(true, mem.shape()[0]));
                (concat_rows(&[g.tokens, mem])?, mask)
            }
            (Some(g), _) => (g.tokens, g.mask),
            (None, Some(mem)) => (mem, vec![true; mem.shape()[0]]),
            (None, None) => return Err(Error::Contract("nothing to fuse the question with".into())),
        };

        let mut vqa_terms = Vec::with_capacity(input.questions.len());
        for q in input.questions {
            let qs = self.question.encode(ctx, &q.tokens)?;
            let fused = self.fusion.forward(ctx, qs, stream, &mask)?;
            let logits = self.answer_head.forward(ctx, fused.pooled()?)?;
            let logits = logits.reshape(&[self.config.answer_classes()])?;
            vqa_terms.push(logits.cross_entropy(q.answer)?);
            out.answer_logits.push(logits);
        }
        if !vqa_terms.is_empty() {
            out.l_vqa = Some(sum_all(&vqa_terms)?);
        }
        let terms: Vec<Var<'t, S>> = [out.l_act, out.l_rel, out.l_vqa].into_iter().flatten().collect();
        if !terms.is_empty() {
            out.total = Some(sum_all(&terms)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::vocab::{VocabKind, Vocabulary};

    #[test]
    fn composition_layouts() {
        let words: Vec<String> = ["a", "b", "c", "d", "did", "person", "take", "the", "what"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let tok = Tokenizer::new(Vocabulary::new(VocabKind::Word, words).unwrap());
        let choices: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let ids = compose_qa(&tok, "what did the person take", Some(&choices)).unwrap();
        let text: Vec<&str> = ids.iter().map(|&i| tok.token_text(i)).collect();
        assert_eq!(
            text.join(" "),
            "[CLS] what did the person take [SEP] a [SEP] b [SEP] c [SEP] d"
        );
        let ids = compose_qa(&tok, "what did the person take", None).unwrap();
        assert_eq!(ids.len(), 6);
        assert!(matches!(compose_qa(&tok, "what", Some(&[])), Err(Error::Config(_))));
        assert!(matches!(compose_qa(&tok, "  ", None), Err(Error::Schema(_))));
    }

    #[test]
    fn temporal_pool_averages_pairs() {
        let mut cfg = ModelConfig::toy();
        cfg.adapter = AdapterKind::TemporalPool;
        cfg.grid_h = 1;
        cfg.grid_w = 1;
        cfg.feature_dim = 2;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = FeatureAdapter::new(&mut Builder::new(&mut store, &mut rng), &cfg);
        let x = Tensor::from_f64(&[4, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.pool(&x).unwrap().data(), &[2.0, 3.0, 6.0, 7.0]);
        let odd = Tensor::<f64>::zeros(&[3, 1, 2]);
        assert!(matches!(a.pool(&odd), Err(Error::Config(_))));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        assert_eq!(a.forward(&ctx, &x).unwrap().shape(), vec![2, cfg.width]);
    }
}
