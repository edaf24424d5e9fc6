//! Assignment oracle and set-loss invariance checks.

use hypergraph_vqa::config::{ModeFlags, ModelConfig};
use hypergraph_vqa::matching::{hungarian_loss, hungarian_match, match_sequence, CostMatrix, MatchScope};
use hypergraph_vqa::model::{ClipInput, Phase, QaModel};
use hypergraph_vqa::nn::Ctx;
use hypergraph_vqa::synth::{generate, SynthSpec};
use hypergraph_vqa::train::{prepare, PreparedClip};
use hypergraph_vqa::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum of `Σ_i c[i][p(i)]` over all permutations, summed in row order.
pub fn brute_force_min(c: &[f64], n: usize) -> f64 {
    fn go(c: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for col in 0..n {
            if !used[col] {
                used[col] = true;
                go(c, n, row + 1, used, acc + c[row * n + col], best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

/// Random matrix in the shape the set loss produces: negative class
/// probabilities, with some φ columns of zeros. Every fourth matrix uses
/// small integers so that ties are common.
pub fn random_cost(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<f64> {
    let real = rng.gen_range(0..=n);
    (0..n * n)
        .map(|i| {
            if i % n >= real {
                0.0
            } else if k % 4 == 3 {
                -(rng.gen_range(0..4) as f64)
            } else {
                -rng.gen::<f64>()
            }
        })
        .collect()
}

/// Per size: `(size, matrices, mismatches, whether every result was a permutation)`.
pub fn hungarian_against_brute_force(count: usize) -> Vec<(usize, usize, usize, bool)> {
    (2..=7)
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + n as u64);
            let mut mismatches = 0;
            let mut valid = true;
            for k in 0..count {
                let data = random_cost(&mut rng, n, k);
                let want = brute_force_min(&data, n);
                let c = CostMatrix::new(n, data).unwrap();
                let a = hungarian_match(&c).unwrap();
                let mut seen = a.perm.clone();
                seen.sort_unstable();
                valid &= seen == (0..n).collect::<Vec<_>>();
                if a.cost != want {
                    mismatches += 1;
                }
            }
            (n, count, mismatches, valid)
        })
        .collect()
}

/// Toy model plus one prepared clip of synthetic data.
pub fn toy_clip(seed: u64) -> (QaModel, ParamStore, PreparedClip<f64>) {
    let spec = SynthSpec {
        episodes: 3,
        ..SynthSpec::toy()
    };
    let ds = generate(seed, &spec, "s").unwrap();
    let mut cfg = ModelConfig::toy();
    cfg.resolve(&ds).unwrap();
    let mut data = prepare::<f64>(&ds, &cfg, 0.1).unwrap();
    let (model, store) = QaModel::new::<f64>(&cfg, ModeFlags::default(), MatchScope::Frame, seed).unwrap();
    (model, store, data.clips.swap_remove(0))
}

/// `(L_act, L_rel)` bit patterns for the clip as given and with every
/// frame's ground-truth lists shuffled, for both matching scopes.
pub fn permutation_invariance(seed: u64) -> Vec<((u64, u64), (u64, u64))> {
    let (mut model, store, clip) = toy_clip(seed);
    let mut shuffled = clip.annotation.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in shuffled.actions.iter_mut().chain(shuffled.relations.iter_mut()) {
        let before = f.clone();
        while f.len() > 1 && *f == before {
            f.shuffle(&mut rng);
        }
    }
    assert_ne!(shuffled, clip.annotation, "clip {} has no multi-label frame", clip.annotation.clip_id);
    let mut out = Vec::new();
    for scope in [MatchScope::Frame, MatchScope::Video] {
        model.match_scope = scope;
        let losses = |ann| {
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &store);
            let input = ClipInput {
                features: &clip.features,
                annotation: Some(ann),
                questions: &clip.questions,
            };
            let o = model.forward(&ctx, &input, Phase::Train, None).unwrap();
            (o.l_act.unwrap().item().to_bits(), o.l_rel.unwrap().item().to_bits())
        };
        out.push((losses(&clip.annotation), losses(&shuffled)));
    }
    out
}

/// Mean per-slot loss over an all-empty clip whose every slot puts
/// logit margin `margin` on φ.
pub fn empty_frame_loss_per_slot(slots: usize, frames: usize, classes: usize, margin: f64) -> f64 {
    let k = classes + 1;
    let rows = slots * frames;
    let mut logits = vec![0.0; rows * k];
    for r in 0..rows {
        logits[r * k + classes] = margin;
    }
    let gt = vec![Vec::new(); frames];
    let tape = Tape::no_grad();
    let v = tape.constant(Tensor::new(&[rows, k], logits).unwrap());
    let probs = v.softmax(1).unwrap().value();
    let matched = match_sequence(&probs, &gt, slots, MatchScope::Frame).unwrap();
    hungarian_loss(v, &matched, 1.0).unwrap().item() / rows as f64
}
