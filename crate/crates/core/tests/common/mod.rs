#![allow(dead_code)]

pub mod leaks;
pub mod ops;
pub mod sets;

use hypergraph_vqa::config::{ModeFlags, ModelConfig};
use hypergraph_vqa::matching::MatchScope;
use hypergraph_vqa::model::{ClipInput, Matches, Phase, QaModel};
use hypergraph_vqa::nn::Ctx;
use hypergraph_vqa::synth::{generate, SynthSpec};
use hypergraph_vqa::train::prepare;
use hypergraph_vqa::{ParamStore, Tape, Var};

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Denominator floor so that two near-zero gradients compare as equal.
pub const FLOOR: f64 = 1e-5;

pub type LossFn<'a> = &'a dyn for<'t> Fn(&Ctx<'t, f64>) -> Var<'t>;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Debug)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
}

fn eval(store: &ParamStore, f: LossFn<'_>) -> f64 {
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, store);
    f(&ctx).item()
}

/// Compares autodiff gradients of `f` with central differences on up to
/// `per_tensor` entries of every parameter (evenly spaced, plus the entry
/// with the largest analytic gradient).
pub fn grad_check(store: &mut ParamStore, per_tensor: usize, f: LossFn<'_>) -> GradReport {
    store.zero_grad();
    {
        let tape = Tape::new();
        let loss = {
            let ctx = Ctx::new(&tape, &*store);
            tape.adopt(f(&ctx))
        };
        tape.backward(loss, store).unwrap();
    }
    let ids: Vec<_> = store.ids().collect();
    let mut report = GradReport {
        worst: 0.0,
        worst_at: String::new(),
        checked: 0,
    };
    for id in ids {
        let grad = store.get(id).grad().unwrap().to_vec();
        let n = grad.len();
        let mut picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|i| i * n / per_tensor).collect()
        };
        let top = (0..n).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
        if !picks.contains(&top) {
            picks.push(top);
        }
        for i in picks {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + H;
            let up = eval(store, f);
            store.get_mut(id).data_mut()[i] = orig - H;
            let down = eval(store, f);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let e = rel_error(grad[i], numeric);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.worst_at = format!("{}[{i}] analytic {} numeric {numeric}", store.name(id), grad[i]);
            }
        }
    }
    report
}

/// Gradient check of the whole toy model's training loss on one clip, with
/// the matching frozen at its initial value.
pub fn toy_end_to_end(flags: ModeFlags) -> GradReport {
    let spec = SynthSpec {
        episodes: 2,
        ..SynthSpec::toy()
    };
    let ds = generate(3, &spec, "g").unwrap();
    let mut cfg = ModelConfig::toy();
    cfg.resolve(&ds).unwrap();
    let data = prepare::<f64>(&ds, &cfg, 0.1).unwrap();
    let clip = &data.clips[0];
    let (model, mut store) = QaModel::new::<f64>(&cfg, flags, MatchScope::Frame, 5).unwrap();
    let input = ClipInput {
        features: &clip.features,
        annotation: Some(&clip.annotation),
        questions: &clip.questions,
    };
    let matches: Matches<f64> = {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        model.forward(&ctx, &input, Phase::Train, None).unwrap().matches
    };
    grad_check(&mut store, 4, &|ctx| {
        model.forward(ctx, &input, Phase::Train, Some(&matches)).unwrap().total.unwrap()
    })
}
