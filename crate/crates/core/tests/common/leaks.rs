//! Exact zero-gradient checks for blocked attention positions.

use hypergraph_vqa::config::ModelConfig;
use hypergraph_vqa::hypergraph::{HyperGraphDecoder, QueryKind};
use hypergraph_vqa::model::CoAttention;
use hypergraph_vqa::nn::{Builder, Ctx};
use hypergraph_vqa::transformer::{AttentionMask, DecoderStack, MultiHeadAttention, StackShape};
use hypergraph_vqa::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradient summary over the rows that must not leak and the rows that must.
#[derive(Debug)]
pub struct Leak {
    /// Largest `|grad|` over blocked rows; must be exactly 0.
    pub blocked_max: f64,
    pub blocked_entries: usize,
    /// Largest `|grad|` over visible rows; must be non-zero.
    pub visible_max: f64,
}

impl Leak {
    pub fn holds(&self) -> bool {
        self.blocked_max == 0.0 && self.blocked_entries > 0 && self.visible_max > 0.0
    }
}

const SHAPE: StackShape = StackShape {
    layers: 2,
    width: 16,
    heads: 2,
    ff: 32,
};

fn constant<'t>(ctx: &Ctx<'t, f64>, shape: &[usize], seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ctx.tape.constant(Tensor::randn(shape, 1.0, &mut rng))
}

fn weighted_sum<'t>(ctx: &Ctx<'t, f64>, x: Var<'t>) -> Var<'t> {
    let w = constant(ctx, &x.shape(), 99);
    x.mul(w).unwrap().sum()
}

/// Backpropagates `f` and splits the gradient of `probe` (a `[rows, d]`
/// parameter) into blocked and visible rows.
fn split(
    store: &mut ParamStore,
    probe: ParamId,
    blocked: &[bool],
    f: &dyn for<'t> Fn(&Ctx<'t, f64>) -> Var<'t>,
) -> Leak {
    store.zero_grad();
    let tape = Tape::new();
    let loss = {
        let ctx = Ctx::new(&tape, &*store);
        tape.adopt(f(&ctx))
    };
    tape.backward(loss, store).unwrap();
    let t = store.get(probe);
    let d = t.shape()[1];
    let grad = t.grad().unwrap();
    let mut leak = Leak {
        blocked_max: 0.0,
        blocked_entries: 0,
        visible_max: 0.0,
    };
    for (r, row) in grad.chunks(d).enumerate() {
        let m = row.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if blocked[r] {
            leak.blocked_max = leak.blocked_max.max(m);
            leak.blocked_entries += d;
        } else {
            leak.visible_max = leak.visible_max.max(m);
        }
    }
    leak
}

fn with_store<M>(seed: u64, make: impl FnOnce(&mut Builder<'_, f64>) -> M) -> (M, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = make(&mut Builder::new(&mut store, &mut rng));
    (m, store)
}

/// Frame-0 decoder outputs against later-frame target rows (T=3, Q=2).
pub fn decoder_block_causal() -> Leak {
    let (dec, mut store) = with_store(1, |b| {
        let dec = DecoderStack::new(&mut b.child("dec"), SHAPE).unwrap();
        let targets = b.normal("targets", &[6, 16], 1.0);
        (dec, targets)
    });
    let (dec, targets) = dec;
    let mask = AttentionMask::block_causal(3, 2);
    let blocked = [false, false, true, true, true, true];
    split(&mut store, targets, &blocked, &|ctx| {
        let out = dec.decode(ctx, ctx.p(targets), constant(ctx, &[4, 16], 2), &mask).unwrap();
        weighted_sum(ctx, out.rows(0, 2).unwrap())
    })
}

/// Frames 0 and 1 of the action decoder against the frame-2 query rows.
pub fn query_table_block_causal() -> Leak {
    let (dec, mut store) = with_store(3, |b| HyperGraphDecoder::new(b, QueryKind::Action, 2, 3, SHAPE, 4).unwrap());
    let blocked = [false, false, false, false, true, true];
    let table = dec.queries.table;
    split(&mut store, table, &blocked, &|ctx| {
        let e = dec.decode(ctx, constant(ctx, &[5, 16], 4)).unwrap();
        weighted_sum(ctx, dec.logits(ctx, e.rows(0, 4).unwrap()).unwrap())
    })
}

/// Padded keys of a single cross-attention.
pub fn cross_attention_padding() -> Leak {
    let ((mha, keys), mut store) = with_store(5, |b| {
        let mha = MultiHeadAttention::new(&mut b.child("mha"), 16, 2).unwrap();
        (mha, b.normal("keys", &[5, 16], 1.0))
    });
    let visible = [true, false, true, false, false];
    let mask = AttentionMask::key_padding(4, &visible).unwrap();
    let blocked: Vec<bool> = visible.iter().map(|v| !v).collect();
    split(&mut store, keys, &blocked, &|ctx| {
        let out = mha.forward(ctx, constant(ctx, &[4, 16], 6), ctx.p(keys), Some(&mask)).unwrap();
        weighted_sum(ctx, out)
    })
}

/// Question-stream output of the two-layer co-attention against masked
/// graph tokens.
pub fn co_attention_padding() -> Leak {
    let cfg = ModelConfig {
        frames: 2,
        num_words: 8,
        ..ModelConfig::toy()
    };
    let ((fusion, graph), mut store) = with_store(7, |b| {
        let f = CoAttention::new(&mut b.child("fusion"), &cfg).unwrap();
        (f, b.normal("graph", &[7, 16], 1.0))
    });
    let mask = [true, true, false, false, true, false, true];
    let blocked: Vec<bool> = mask.iter().map(|v| !v).collect();
    split(&mut store, graph, &blocked, &|ctx| {
        let out = fusion.forward(ctx, constant(ctx, &[6, 16], 8), ctx.p(graph), &mask).unwrap();
        weighted_sum(ctx, out.question)
    })
}

pub type Check = (&'static str, fn() -> Leak);

pub fn checks() -> Vec<Check> {
    vec![
        ("decoder block-causal mask", decoder_block_causal),
        ("query table block-causal mask", query_table_block_causal),
        ("cross-attention key padding", cross_attention_padding),
        ("co-attention graph padding", co_attention_padding),
    ]
}
