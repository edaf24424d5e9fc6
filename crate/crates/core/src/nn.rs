//! Parameter construction and the small layers everything else is built from.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Registers named, seeded parameters under a hierarchical prefix.
pub struct Builder<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, S: Scalar> Builder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> Builder<'_, S> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.insert(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let t = Tensor::full(shape, S::lit(value));
        self.store.insert(self.full_name(name), t)
    }
}

/// Forward-pass context: the tape, the parameter values, and dropout state.
pub struct Ctx<'t, S: Scalar> {
    pub tape: &'t Tape<S>,
    pub store: &'t ParamStore<S>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'t, S: Scalar> Ctx<'t, S> {
    pub fn new(tape: &'t Tape<S>, store: &'t ParamStore<S>) -> Self {
        Ctx {
            tape,
            store,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, RefCell::new(ChaCha8Rng::seed_from_u64(seed))));
        }
        self
    }

    pub fn p(&self, id: ParamId) -> Var<'t, S> {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&self, x: Var<'t, S>) -> Var<'t, S> {
        match &self.dropout {
            Some((rate, rng)) => x.dropout(*rate, &mut *rng.borrow_mut()),
            None => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, input: usize, output: usize) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        Linear {
            weight: b.normal("weight", &[input, output], std),
            bias: b.constant("bias", &[output], 0.0),
            input,
            output,
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.matmul(ctx.p(self.weight))?.add(ctx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, width: usize) -> Self {
        LayerNorm {
            gain: b.constant("gain", &[width], 1.0),
            bias: b.constant("bias", &[width], 0.0),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias), LAYER_NORM_EPS)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, input: usize, hidden: usize, output: usize) -> Self {
        FeedForward {
            up: Linear::new(&mut b.child("up"), input, hidden),
            down: Linear::new(&mut b.child("down"), hidden, output),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, ctx: &Ctx<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let h = self.up.forward(ctx, x)?.gelu();
        self.down.forward(ctx, ctx.dropout(h))
    }
}
