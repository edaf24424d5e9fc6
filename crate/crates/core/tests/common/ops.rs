//! Finite-difference cases for every tape op and every layer, shared by the
//! gradient tests and the acceptance suite.

use hypergraph_vqa::config::ModelConfig;
use hypergraph_vqa::embedding::{HyperGraphEmbedding, MaskPolicy};
use hypergraph_vqa::hypergraph::{HyperGraphDecoder, PredictionHead, QueryKind};
use hypergraph_vqa::matching::{hungarian_loss, match_sequence, MatchScope};
use hypergraph_vqa::model::{CoAttention, VideoEncoder};
use hypergraph_vqa::nn::{Builder, Ctx, FeedForward, LayerNorm, Linear};
use hypergraph_vqa::tape::{concat_cols, concat_rows};
use hypergraph_vqa::transformer::{
    AttentionMask, DecoderStack, EncoderStack, MultiHeadAttention, PositionKind, PositionTable, StackShape,
};
use hypergraph_vqa::{ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradReport};

/// Entries checked per tensor.
const PICKS: usize = 12;

/// Random parameters with unit scale so that no op sits in a flat region.
fn store_of(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = {
        let mut b = Builder::new(&mut store, &mut rng);
        shapes.iter().map(|(n, s)| b.normal(n, s, 1.0)).collect()
    };
    (store, ids)
}

/// `sum(x ⊙ W)` with a fixed random `W`, so every output entry matters
/// with a different weight.
fn project<'t>(ctx: &Ctx<'t, f64>, x: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = ctx.tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    x.mul(w).unwrap().sum()
}

fn unary(shape: &[usize], f: &dyn for<'t> Fn(&Ctx<'t, f64>, Var<'t>) -> Var<'t>) -> GradReport {
    let (mut store, ids) = store_of(&[("x", shape)], 1);
    grad_check(&mut store, PICKS, &|ctx| project(ctx, f(ctx, ctx.p(ids[0]))))
}

fn binary(
    a: &[usize],
    b: &[usize],
    f: &dyn for<'t> Fn(&Ctx<'t, f64>, Var<'t>, Var<'t>) -> Var<'t>,
) -> GradReport {
    let (mut store, ids) = store_of(&[("a", a), ("b", b)], 2);
    grad_check(&mut store, PICKS, &|ctx| project(ctx, f(ctx, ctx.p(ids[0]), ctx.p(ids[1]))))
}

/// Registers a module under a seeded builder and returns its store.
fn module<M>(seed: u64, make: impl FnOnce(&mut Builder<'_, f64>) -> M) -> (M, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = make(&mut Builder::new(&mut store, &mut rng));
    (m, store)
}

fn input<'t>(ctx: &Ctx<'t, f64>, shape: &[usize], seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ctx.tape.constant(Tensor::randn(shape, 1.0, &mut rng))
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        frames: 3,
        num_words: 12,
        ..ModelConfig::toy()
    }
}

fn shape(layers: usize) -> StackShape {
    StackShape {
        layers,
        width: 16,
        heads: 2,
        ff: 32,
    }
}

pub type Case = (&'static str, fn() -> GradReport);

pub fn cases() -> Vec<Case> {
    vec![
        ("matmul", || binary(&[3, 4], &[4, 2], &|_, a, b| a.matmul(b).unwrap())),
        ("matmul_t", || binary(&[3, 4], &[2, 4], &|_, a, b| a.matmul_t(b).unwrap())),
        ("add", || binary(&[3, 4], &[3, 4], &|_, a, b| a.add(b).unwrap())),
        ("add_broadcast", || binary(&[3, 4], &[4], &|_, a, b| a.add(b).unwrap())),
        ("sub", || binary(&[2, 5], &[2, 5], &|_, a, b| a.sub(b).unwrap())),
        ("mul", || binary(&[2, 5], &[2, 5], &|_, a, b| a.mul(b).unwrap())),
        ("dot", || binary(&[6], &[6], &|_, a, b| a.dot(b).unwrap())),
        ("scale", || unary(&[3, 3], &|_, x| x.scale(-1.7))),
        ("add_const", || unary(&[2, 3], &|_, x| x.add_const(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())),
        ("reshape", || unary(&[2, 6], &|_, x| x.reshape(&[3, 4]).unwrap())),
        ("transpose", || unary(&[2, 5], &|_, x| x.transpose().unwrap())),
        ("softmax_rows", || unary(&[3, 5], &|_, x| x.softmax(1).unwrap())),
        ("softmax_cols", || unary(&[3, 5], &|_, x| x.softmax(0).unwrap())),
        ("gelu", || unary(&[4, 4], &|_, x| x.gelu())),
        ("sum", || unary(&[3, 2], &|_, x| x.sum())),
        ("slice_cols", || unary(&[3, 6], &|_, x| x.slice_cols(2, 3).unwrap())),
        ("rows", || unary(&[5, 3], &|_, x| x.rows(1, 3).unwrap())),
        ("gather_rows", || unary(&[4, 3], &|_, x| x.gather_rows(&[3, 0, 3, 1]).unwrap())),
        ("concat_cols", || {
            binary(&[3, 2], &[3, 4], &|_, a, b| concat_cols(&[a, b, a]).unwrap())
        }),
        ("concat_rows", || {
            binary(&[2, 3], &[4, 3], &|_, a, b| concat_rows(&[b, a]).unwrap())
        }),
        ("layer_norm", || {
            let (mut store, ids) = store_of(&[("x", &[3, 6]), ("gain", &[6]), ("bias", &[6])], 3);
            grad_check(&mut store, PICKS, &|ctx| {
                let y = ctx.p(ids[0]).layer_norm(ctx.p(ids[1]), ctx.p(ids[2]), 1e-5).unwrap();
                project(ctx, y)
            })
        }),
        ("cross_entropy", || {
            unary(&[5], &|_, x| x.reshape(&[1, 5]).unwrap().cross_entropy(3).unwrap())
        }),
        ("cross_entropy_rows", || {
            unary(&[4, 3], &|_, x| x.cross_entropy_rows(&[0, 2, 1, 2], &[1.0, 0.5, 1.0, 0.25]).unwrap())
        }),
        ("dropout", || {
            let (mut store, ids) = store_of(&[("x", &[4, 5])], 4);
            grad_check(&mut store, PICKS, &|ctx| {
                let ctx = Ctx::new(ctx.tape, ctx.store).with_dropout(0.3, 17);
                project(&ctx, ctx.dropout(ctx.p(ids[0])))
            })
        }),
        ("linear", || {
            let (lin, mut store) = module(5, |b| Linear::new(b, 6, 4));
            grad_check(&mut store, PICKS, &|ctx| project(ctx, lin.forward(ctx, input(ctx, &[3, 6], 1)).unwrap()))
        }),
        ("layer_norm_module", || {
            let (ln, mut store) = module(6, |b| LayerNorm::new(b, 5));
            grad_check(&mut store, PICKS, &|ctx| project(ctx, ln.forward(ctx, input(ctx, &[2, 5], 2)).unwrap()))
        }),
        ("feed_forward", || {
            let (ff, mut store) = module(7, |b| FeedForward::new(b, 5, 8, 3));
            grad_check(&mut store, PICKS, &|ctx| project(ctx, ff.forward(ctx, input(ctx, &[4, 5], 3)).unwrap()))
        }),
        ("attention_masked", || {
            let (mha, mut store) = module(8, |b| MultiHeadAttention::new(b, 8, 2).unwrap());
            let mask = AttentionMask::key_padding(3, &[true, false, true, true]).unwrap();
            grad_check(&mut store, PICKS, &|ctx| {
                let y = mha.forward(ctx, input(ctx, &[3, 8], 4), input(ctx, &[4, 8], 5), Some(&mask));
                project(ctx, y.unwrap())
            })
        }),
        ("encoder_stack", || {
            let (enc, mut store) = module(9, |b| EncoderStack::new(b, shape(2)).unwrap());
            grad_check(&mut store, PICKS, &|ctx| project(ctx, enc.encode(ctx, input(ctx, &[5, 16], 6), None).unwrap()))
        }),
        ("decoder_stack", || {
            let (dec, mut store) = module(10, |b| DecoderStack::new(b, shape(2)).unwrap());
            let mask = AttentionMask::block_causal(3, 2);
            grad_check(&mut store, PICKS, &|ctx| {
                let y = dec.decode(ctx, input(ctx, &[6, 16], 7), input(ctx, &[4, 16], 8), &mask);
                project(ctx, y.unwrap())
            })
        }),
        ("learned_positions", || {
            let (pos, mut store) = module(11, |b| PositionTable::new(b, PositionKind::Learned, 8, 16));
            grad_check(&mut store, PICKS, &|ctx| project(ctx, pos.add_to(ctx, input(ctx, &[5, 16], 9)).unwrap()))
        }),
        ("prediction_head", || {
            let (head, mut store) = module(12, |b| PredictionHead::new(b, 16, 5).unwrap());
            grad_check(&mut store, PICKS, &|ctx| project(ctx, head.forward(ctx, input(ctx, &[4, 16], 10)).unwrap()))
        }),
        ("hypergraph_decoder", || {
            let (dec, mut store) = module(13, |b| {
                HyperGraphDecoder::new(b, QueryKind::Action, 2, 3, shape(2), 4).unwrap()
            });
            grad_check(&mut store, PICKS, &|ctx| {
                let e = dec.decode(ctx, input(ctx, &[4, 16], 11)).unwrap();
                project(ctx, dec.logits(ctx, e).unwrap())
            })
        }),
        ("hungarian_loss", || {
            let (mut store, ids) = store_of(&[("logits", &[6, 4])], 14);
            let probs = {
                let t = store.get(ids[0]);
                let mut p = t.data().to_vec();
                for row in p.chunks_mut(4) {
                    let m: f64 = row.iter().map(|x| x.exp()).sum();
                    row.iter_mut().for_each(|x| *x = x.exp() / m);
                }
                Tensor::new(&[6, 4], p).unwrap()
            };
            let gt = vec![vec![2], vec![0, 1], vec![]];
            let matched = match_sequence(&probs, &gt, 2, MatchScope::Frame).unwrap();
            grad_check(&mut store, PICKS, &|ctx| hungarian_loss(ctx.p(ids[0]), &matched, 0.4).unwrap())
        }),
        ("hypergraph_embedding", || {
            let (emb, mut store) = module(15, |b| HyperGraphEmbedding::new(b, 3, 16));
            let acts = [true, false, true, true, false, false];
            let rels = [false, true, true];
            grad_check(&mut store, PICKS, &|ctx| {
                let seq = emb
                    .assemble(
                        ctx,
                        Some(input(ctx, &[6, 16], 12)),
                        Some(input(ctx, &[3, 16], 13)),
                        MaskPolicy::Train {
                            actions: &acts,
                            relations: &rels,
                        },
                    )
                    .unwrap();
                project(ctx, seq.tokens)
            })
        }),
        ("video_encoder", || {
            let cfg = ModelConfig {
                frames: 4,
                ..toy_model_config()
            };
            let (enc, mut store) = module(16, |b| VideoEncoder::new(b, &cfg).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let x = Tensor::randn(&[4, cfg.cells(), cfg.feature_dim], 1.0, &mut rng);
            grad_check(&mut store, PICKS, &|ctx| project(ctx, enc.encode(ctx, &x).unwrap()))
        }),
        ("co_attention", || {
            let cfg = toy_model_config();
            let (fusion, mut store) = module(17, |b| CoAttention::new(b, &cfg).unwrap());
            let mask = [true, true, false, true, false, true];
            grad_check(&mut store, PICKS, &|ctx| {
                let out = fusion.forward(ctx, input(ctx, &[5, 16], 15), input(ctx, &[6, 16], 16), &mask).unwrap();
                project(ctx, concat_rows(&[out.question, out.graph]).unwrap())
            })
        }),
    ]
}
