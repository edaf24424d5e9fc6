//! Seeded synthetic situation videos with template questions, and the
//! codebook feature provider that stands in for a frozen video backbone.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Clip, Dataset, FeatureSource, QaMode, QaSample, SituationAnnotation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{PredicateTriplet, Vocabularies};

const VERBS: [&str; 20] = [
    "open", "close", "take", "put", "hold", "wash", "eat", "drink", "throw", "sit", "stand",
    "walk", "lie", "tidy", "watch", "cook", "read", "wipe", "carry", "sneeze",
];
const RELATIONS: [&str; 8] = ["hold", "touch", "on", "in", "behind", "beside", "above", "under"];
const OBJECTS: [&str; 12] = [
    "cup", "book", "door", "table", "chair", "phone", "bag", "bed", "towel", "box", "laptop",
    "shoe",
];
const NUMBERS: [&str; 16] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
];

pub const ACTION_QUESTION: &str = "which action does the person perform in the video";
pub const RELATION_QUESTION: &str = "which relation holds in the video";
pub const ACTION_COUNT_QUESTION: &str = "how many different actions happen in the video";
pub const RELATION_COUNT_QUESTION: &str = "how many different relations hold in the video";

/// Weight of the action template when both templates are feasible.
pub const ACTION_TEMPLATE_WEIGHT: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub episodes: usize,
    pub frames: usize,
    pub max_actions: usize,
    pub max_relations: usize,
    pub num_actions: usize,
    pub num_predicates: usize,
    pub num_choices: usize,
    pub qa_per_episode: usize,
    pub open_ended: bool,
    /// Probability that a label present in frame t is carried into frame t + 1.
    pub persistence: f64,
    pub codebook_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::toy()
    }
}

impl SynthSpec {
    pub fn toy() -> Self {
        SynthSpec {
            episodes: 200,
            frames: 4,
            max_actions: 2,
            max_relations: 3,
            num_actions: 10,
            num_predicates: 12,
            num_choices: 4,
            qa_per_episode: 2,
            open_ended: false,
            persistence: 0.7,
            codebook_seed: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(SynthSpec::toy()),
            "tiny" => Ok(SynthSpec {
                episodes: 12,
                ..SynthSpec::toy()
            }),
            other => Err(Error::Config(format!("unknown synthetic preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.episodes == 0 || self.frames == 0 || self.qa_per_episode == 0 {
            return bad("episodes, frames and qa_per_episode must be positive".into());
        }
        if self.max_actions == 0 || self.max_relations == 0 {
            return bad("set sizes must be positive".into());
        }
        if self.num_actions < self.max_actions || self.num_predicates < self.max_relations {
            return bad(format!(
                "vocabularies ({} actions, {} predicates) smaller than set sizes ({}, {})",
                self.num_actions, self.num_predicates, self.max_actions, self.max_relations
            ));
        }
        if self.num_predicates > RELATIONS.len() * OBJECTS.len() {
            return bad(format!(
                "at most {} predicates available",
                RELATIONS.len() * OBJECTS.len()
            ));
        }
        if !self.open_ended && self.num_choices == 0 {
            return bad("multiple-choice spec needs at least one choice".into());
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return bad("persistence must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn max_count(&self, action: bool) -> usize {
        if action {
            self.num_actions.min(self.max_actions * self.frames)
        } else {
            self.num_predicates.min(self.max_relations * self.frames)
        }
    }
}

pub fn action_labels(n: usize) -> Vec<String> {
    let mut v: Vec<String> = (0..n)
        .map(|i| {
            let verb = VERBS[i % VERBS.len()];
            match i / VERBS.len() {
                0 => verb.to_string(),
                k => format!("{verb}{k}"),
            }
        })
        .collect();
    v.sort();
    v
}

pub fn predicate_labels(n: usize) -> Vec<String> {
    let objects = OBJECTS.len();
    let mut v: Vec<String> = (0..n)
        .map(|k| {
            // (k + k / O) mod R is injective over k < R·O because gcd(O + 1, R) = 1.
            let r = RELATIONS[(k + k / objects) % RELATIONS.len()];
            let o = OBJECTS[k % objects];
            PredicateTriplet::new("person", r, o).flatten().expect("valid triplet")
        })
        .collect();
    v.sort();
    v
}

fn number_word(n: usize) -> String {
    NUMBERS.get(n - 1).map_or_else(|| n.to_string(), |w| w.to_string())
}

/// Vocabularies are a function of the spec only, so every split shares them.
pub fn synth_vocabularies(spec: &SynthSpec) -> Result<Vocabularies> {
    let actions = action_labels(spec.num_actions);
    let predicates = predicate_labels(spec.num_predicates);
    let mut words = BTreeSet::new();
    let mut answers = BTreeSet::new();
    if spec.open_ended {
        for q in [ACTION_COUNT_QUESTION, RELATION_COUNT_QUESTION] {
            words.extend(q.split_whitespace().map(String::from));
        }
        for n in 1..=spec.max_count(true).max(spec.max_count(false)) {
            answers.insert(number_word(n));
        }
    } else {
        for q in [ACTION_QUESTION, RELATION_QUESTION] {
            words.extend(q.split_whitespace().map(String::from));
        }
        words.extend(actions.iter().cloned());
        words.extend(predicates.iter().cloned());
    }
    Vocabularies::from_labels(
        actions,
        predicates,
        answers.into_iter().collect(),
        words.into_iter().collect(),
    )
}

fn sample_frames(rng: &mut ChaCha8Rng, frames: usize, cap: usize, classes: usize, keep: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(frames);
    for t in 0..frames {
        let k = rng.gen_range(1..=cap);
        let mut set: Vec<usize> = match t {
            0 => Vec::new(),
            _ => out[t - 1].iter().copied().filter(|_| rng.gen_bool(keep)).collect(),
        };
        if set.len() > k {
            set.shuffle(rng);
            set.truncate(k);
        }
        let fresh: Vec<usize> = (0..classes).filter(|c| !set.contains(c)).collect();
        set.extend(fresh.choose_multiple(rng, k - set.len()).copied());
        set.sort_unstable();
        out.push(set);
    }
    out
}

/// Usage counters that steer the generator towards balanced answers.
struct Balancer {
    positions: Vec<usize>,
    labels: HashMap<(bool, usize), usize>,
}

impl Balancer {
    fn least_used<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], count: impl Fn(T) -> usize) -> T {
        let min = items.iter().map(|&i| count(i)).min().unwrap();
        let best: Vec<T> = items.iter().copied().filter(|&i| count(i) == min).collect();
        *best.choose(rng).unwrap()
    }
}

fn make_question(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    vocab: &Vocabularies,
    ann: &SituationAnnotation,
    bal: &mut Balancer,
) -> Option<QaSample> {
    let present = [ann.all_actions(), ann.all_relations()];
    let sizes = [spec.num_actions, spec.num_predicates];
    let first_is_action = rng.gen_bool(ACTION_TEMPLATE_WEIGHT);
    let order = if first_is_action { [true, false] } else { [false, true] };
    for is_action in order {
        let k = usize::from(!is_action);
        let (question, category) = match (spec.open_ended, is_action) {
            (false, true) => (ACTION_QUESTION, "action"),
            (false, false) => (RELATION_QUESTION, "relation"),
            (true, true) => (ACTION_COUNT_QUESTION, "action_count"),
            (true, false) => (RELATION_COUNT_QUESTION, "relation_count"),
        };
        if spec.open_ended {
            let n = present[k].len();
            let answer = vocab.answers.get(&number_word(n))?;
            return Some(QaSample {
                clip_id: ann.clip_id.clone(),
                question: question.into(),
                mode: QaMode::OpenEnded,
                choices: None,
                answer,
                category: Some(category.into()),
            });
        }
        let mut inside: Vec<usize> = present[k].iter().copied().collect();
        inside.sort_unstable();
        let outside: Vec<usize> = (0..sizes[k]).filter(|c| !present[k].contains(c)).collect();
        let c = spec.num_choices;
        if inside.is_empty() || outside.len() < c - 1 {
            continue;
        }
        let correct = Balancer::least_used(rng, &inside, |l| {
            bal.labels.get(&(is_action, l)).copied().unwrap_or(0)
        });
        let positions: Vec<usize> = (0..c).collect();
        let pos = Balancer::least_used(rng, &positions, |p| bal.positions[p]);
        *bal.labels.entry((is_action, correct)).or_default() += 1;
        bal.positions[pos] += 1;
        let mut options: Vec<usize> = outside.choose_multiple(rng, c - 1).copied().collect();
        options.shuffle(rng);
        options.insert(pos, correct);
        let labels = if is_action { &vocab.actions } else { &vocab.predicates };
        let choices = options
            .iter()
            .map(|&i| labels.label(i).unwrap().to_string())
            .collect();
        return Some(QaSample {
            clip_id: ann.clip_id.clone(),
            question: question.into(),
            mode: QaMode::MultipleChoice,
            choices: Some(choices),
            answer: pos,
            category: Some(category.into()),
        });
    }
    None
}

/// One split of `spec.episodes` clips named `{prefix}_{index}`.
pub fn generate(seed: u64, spec: &SynthSpec, prefix: &str) -> Result<Dataset> {
    spec.validate()?;
    let vocab = synth_vocabularies(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bal = Balancer {
        positions: vec![0; spec.num_choices.max(1)],
        labels: HashMap::new(),
    };
    let mut clips = Vec::with_capacity(spec.episodes);
    let mut qa = Vec::with_capacity(spec.episodes * spec.qa_per_episode);
    for e in 0..spec.episodes {
        let clip_id = format!("{prefix}_{e:05}");
        let mut attempts = 0;
        let (ann, questions) = loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config(format!(
                    "cannot build {} distinct-answer questions for clip {clip_id}",
                    spec.num_choices
                )));
            }
            let ann = SituationAnnotation {
                clip_id: clip_id.clone(),
                frames: spec.frames,
                actions: sample_frames(&mut rng, spec.frames, spec.max_actions, spec.num_actions, spec.persistence),
                relations: sample_frames(&mut rng, spec.frames, spec.max_relations, spec.num_predicates, spec.persistence),
            };
            let questions: Option<Vec<QaSample>> = (0..spec.qa_per_episode)
                .map(|_| make_question(&mut rng, spec, &vocab, &ann, &mut bal))
                .collect();
            if let Some(q) = questions {
                break (ann, q);
            }
        };
        clips.push(Clip {
            annotation: ann,
            features: FeatureSource::CodebookSeed(spec.codebook_seed),
        });
        qa.extend(questions);
    }
    let ds = Dataset { vocab, clips, qa };
    ds.validate()?;
    Ok(ds)
}

/// Train and validation splits from one seed with disjoint derived streams.
pub fn generate_splits(seed: u64, spec: &SynthSpec, val_episodes: usize) -> Result<(Dataset, Dataset)> {
    let train = generate(derive_seed(seed, 1), spec, "train")?;
    let val_spec = SynthSpec {
        episodes: val_episodes,
        ..spec.clone()
    };
    let val = generate(derive_seed(seed, 2), &val_spec, "val")?;
    Ok((train, val))
}

/// SplitMix64 finalizer over `seed ⊕ stream`, for independent sub-streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Fixed random vector per action and predicate class; features are the sum
/// of a frame's label vectors over every spatial cell, plus Gaussian noise.
#[derive(Clone, Debug)]
pub struct FeatureProvider<S: Scalar> {
    pub codebook: Tensor<S>,
    pub num_actions: usize,
    pub cells: usize,
    pub sigma: f64,
    seed: u64,
}

impl<S: Scalar> FeatureProvider<S> {
    pub fn new(seed: u64, num_actions: usize, num_predicates: usize, dim: usize, cells: usize, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codebook = Tensor::randn(&[num_actions + num_predicates, dim], 1.0, &mut rng);
        FeatureProvider {
            codebook,
            num_actions,
            cells,
            sigma,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.codebook.shape()[1]
    }

    /// Row of the codebook for an action (`false`) or predicate (`true`) class.
    pub fn code(&self, predicate: bool, class: usize) -> &[S] {
        self.codebook.row(if predicate { self.num_actions + class } else { class })
    }

    /// `[T, cells, dim]`.
    pub fn features(&self, ann: &SituationAnnotation) -> Tensor<S> {
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, fnv1a(&ann.clip_id)));
        let mut out = Vec::with_capacity(ann.frames * self.cells * d);
        for t in 0..ann.frames {
            let mut frame = vec![S::zero(); d];
            let codes = ann.actions[t]
                .iter()
                .map(|&a| self.code(false, a))
                .chain(ann.relations[t].iter().map(|&r| self.code(true, r)));
            for code in codes {
                frame.iter_mut().zip(code).for_each(|(f, &c)| *f += c);
            }
            for _ in 0..self.cells {
                out.extend(frame.iter().map(|&f| {
                    if self.sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        f + S::lit(self.sigma * z)
                    } else {
                        f
                    }
                }));
            }
        }
        Tensor::new(&[ann.frames, self.cells, d], out).expect("feature shape")
    }
}

/// Resolves every clip's features to `[T, cells, dim]`, checking inline
/// blocks against the expected grid and channel count.
pub fn resolve_features<S: Scalar>(ds: &Dataset, cells: usize, dim: usize, sigma: f64) -> Result<Vec<Tensor<S>>> {
    let mut providers: HashMap<u64, FeatureProvider<S>> = HashMap::new();
    let (na, np) = (ds.vocab.actions.len(), ds.vocab.predicates.len());
    ds.clips
        .iter()
        .map(|clip| match &clip.features {
            FeatureSource::Inline(frames) => {
                let got = [frames.len(), frames[0].len(), frames[0][0].len()];
                if got[1] != cells || got[2] != dim {
                    return Err(Error::Schema(format!(
                        "clip {}: inline features are {got:?}, model expects [T, {cells}, {dim}]",
                        clip.annotation.clip_id
                    )));
                }
                let flat: Vec<f64> = frames.iter().flatten().flatten().copied().collect();
                Tensor::from_f64(&got, &flat)
            }
            FeatureSource::CodebookSeed(seed) => {
                let p = providers
                    .entry(*seed)
                    .or_insert_with(|| FeatureProvider::new(*seed, na, np, dim, cells, sigma));
                Ok(p.features(&clip.annotation))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicate_labels_are_unique() {
        let all = predicate_labels(RELATIONS.len() * OBJECTS.len());
        let set: BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn frames_respect_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for set in sample_frames(&mut rng, 50, 3, 12, 0.7) {
            assert!((1..=3).contains(&set.len()));
            let uniq: BTreeSet<_> = set.iter().collect();
            assert_eq!(uniq.len(), set.len());
        }
    }

    #[test]
    fn single_label_spec() {
        let spec = SynthSpec {
            episodes: 5,
            max_actions: 1,
            max_relations: 1,
            num_actions: 1,
            num_predicates: 1,
            num_choices: 1,
            ..SynthSpec::toy()
        };
        let ds = generate(0, &spec, "d").unwrap();
        for c in &ds.clips {
            assert!(c.annotation.actions.iter().all(|s| s == &[0]));
            assert!(c.annotation.relations.iter().all(|s| s == &[0]));
        }
        assert!(ds.qa.iter().all(|q| q.answer == 0));
    }

    #[test]
    fn infeasible_spec_is_a_config_error() {
        let spec = SynthSpec {
            num_actions: 1,
            ..SynthSpec::toy()
        };
        assert!(matches!(generate(0, &spec, "d"), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_single_label_feature_is_its_code() {
        let p = FeatureProvider::<f64>::new(9, 3, 2, 6, 4, 0.0);
        let ann = SituationAnnotation {
            clip_id: "x".into(),
            frames: 1,
            actions: vec![vec![1]],
            relations: vec![vec![]],
        };
        let f = p.features(&ann);
        for cell in 0..4 {
            assert_eq!(&f.data()[cell * 6..(cell + 1) * 6], p.code(false, 1));
        }
    }

    #[test]
    fn open_ended_answers_count_labels() {
        let spec = SynthSpec {
            episodes: 20,
            open_ended: true,
            ..SynthSpec::toy()
        };
        let ds = generate(5, &spec, "o").unwrap();
        for q in &ds.qa {
            let ann = &ds.clip(&q.clip_id).unwrap().annotation;
            let n = if q.category.as_deref() == Some("action_count") {
                ann.all_actions().len()
            } else {
                ann.all_relations().len()
            };
            assert_eq!(ds.vocab.answers.label(q.answer).unwrap(), number_word(n));
        }
    }
}
