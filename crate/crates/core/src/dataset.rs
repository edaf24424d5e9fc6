//! Indexed annotations, QA samples and the JSON dataset file format.
//!
//! ```text
//! {
//!   "vocab": {"actions": [..], "predicates": [..], "answers": [..], "words": [..]},
//!   "clips": [{"clip_id", "T", "actions": [[int]], "relations": [[int]],
//!              "features": {"inline": [[[float]]]} | {"codebook_seed": int}}],
//!   "qa":    [{"clip_id", "question", "mode", "choices"?, "answer", "category"?}]
//! }
//! ```
//!
//! Inline features are indexed `[frame][cell][channel]` with cells in
//! row-major `h × w` order. Unknown fields are rejected.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{AnnotationCorpus, Vocabularies};

/// Per-frame ground-truth label sets of one clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SituationAnnotation {
    pub clip_id: String,
    pub frames: usize,
    pub actions: Vec<Vec<usize>>,
    pub relations: Vec<Vec<usize>>,
}

impl SituationAnnotation {
    pub fn validate(&self, num_actions: usize, num_predicates: usize) -> Result<()> {
        let id = &self.clip_id;
        if self.frames == 0 {
            return Err(Error::Schema(format!("clip {id}: T must be positive")));
        }
        if self.actions.len() != self.frames || self.relations.len() != self.frames {
            return Err(Error::Schema(format!(
                "clip {id}: T = {} but {} action frames and {} relation frames",
                self.frames,
                self.actions.len(),
                self.relations.len()
            )));
        }
        for (kind, sets, limit) in [
            ("action", &self.actions, num_actions),
            ("predicate", &self.relations, num_predicates),
        ] {
            for (t, set) in sets.iter().enumerate() {
                let mut seen = HashSet::new();
                for &c in set {
                    if c >= limit {
                        return Err(Error::Vocabulary(format!(
                            "clip {id} frame {t}: {kind} index {c} outside vocabulary of {limit}"
                        )));
                    }
                    if !seen.insert(c) {
                        return Err(Error::Schema(format!(
                            "clip {id} frame {t}: duplicate {kind} {c}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every action appearing anywhere in the clip.
    pub fn all_actions(&self) -> HashSet<usize> {
        self.actions.iter().flatten().copied().collect()
    }

    pub fn all_relations(&self) -> HashSet<usize> {
        self.relations.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMode {
    MultipleChoice,
    OpenEnded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSample {
    pub clip_id: String,
    pub question: String,
    pub mode: QaMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl QaSample {
    pub fn validate(&self, num_answers: usize) -> Result<()> {
        let id = &self.clip_id;
        match (self.mode, &self.choices) {
            (QaMode::MultipleChoice, Some(c)) => {
                if c.is_empty() {
                    return Err(Error::Schema(format!("clip {id}: multiple-choice QA with no choices")));
                }
                if self.answer >= c.len() {
                    return Err(Error::Schema(format!(
                        "clip {id}: answer {} outside {} choices",
                        self.answer,
                        c.len()
                    )));
                }
            }
            (QaMode::MultipleChoice, None) => {
                return Err(Error::Schema(format!("clip {id}: multiple-choice QA without choices")));
            }
            (QaMode::OpenEnded, Some(_)) => {
                return Err(Error::Schema(format!("clip {id}: open-ended QA with choices")));
            }
            (QaMode::OpenEnded, None) => {
                if self.answer >= num_answers {
                    return Err(Error::Vocabulary(format!(
                        "clip {id}: answer index {} outside answer vocabulary of {num_answers}",
                        self.answer
                    )));
                }
            }
        }
        if self.question.trim().is_empty() {
            return Err(Error::Schema(format!("clip {id}: empty question")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSource {
    /// `[frame][cell][channel]`
    Inline(Vec<Vec<Vec<f64>>>),
    /// Features are synthesized from a seeded label codebook.
    CodebookSeed(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub annotation: SituationAnnotation,
    pub features: FeatureSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabularies,
    pub clips: Vec<Clip>,
    pub qa: Vec<QaSample>,
}

impl Dataset {
    /// Checks vocab ranges, frame counts, feature shapes and that every QA
    /// refers to a known clip.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for clip in &self.clips {
            let a = &clip.annotation;
            if !ids.insert(a.clip_id.as_str()) {
                return Err(Error::Schema(format!("duplicate clip_id {}", a.clip_id)));
            }
            a.validate(self.vocab.actions.len(), self.vocab.predicates.len())?;
            if let FeatureSource::Inline(frames) = &clip.features {
                if frames.len() != a.frames {
                    return Err(Error::Schema(format!(
                        "clip {}: T = {} but features have {} frames",
                        a.clip_id,
                        a.frames,
                        frames.len()
                    )));
                }
                let cells = frames.first().map_or(0, Vec::len);
                let channels = frames.first().and_then(|f| f.first()).map_or(0, Vec::len);
                let ragged = frames.iter().any(|f| {
                    f.len() != cells || f.iter().any(|c| c.len() != channels || c.iter().any(|x| !x.is_finite()))
                });
                if cells == 0 || channels == 0 || ragged {
                    return Err(Error::Schema(format!(
                        "clip {}: inline features must be a finite, non-empty [T][cells][channels] block",
                        a.clip_id
                    )));
                }
            }
        }
        for qa in &self.qa {
            if !ids.contains(qa.clip_id.as_str()) {
                return Err(Error::Schema(format!("QA refers to unknown clip {}", qa.clip_id)));
            }
            qa.validate(self.vocab.answers.len())?;
        }
        Ok(())
    }

    pub fn clip(&self, clip_id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.annotation.clip_id == clip_id)
    }

    pub fn clip_index(&self) -> HashMap<&str, usize> {
        self.clips
            .iter()
            .enumerate()
            .map(|(i, c)| (c.annotation.clip_id.as_str(), i))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let ds = file.into_dataset()?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&DatasetFile::from_dataset(self))?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Dataset::from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    /// Caps per-frame set sizes at `max_actions` / `max_relations`, dropping
    /// the classes that are least frequent across the dataset first.
    /// Returns how many frame sets were truncated.
    pub fn truncate_sets(&mut self, max_actions: usize, max_relations: usize) -> usize {
        let mut act_freq: BTreeMap<usize, usize> = BTreeMap::new();
        let mut rel_freq: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &self.clips {
            for &a in c.annotation.actions.iter().flatten() {
                *act_freq.entry(a).or_default() += 1;
            }
            for &r in c.annotation.relations.iter().flatten() {
                *rel_freq.entry(r).or_default() += 1;
            }
        }
        let mut truncated = 0;
        for c in &mut self.clips {
            truncated += truncate_frames(&mut c.annotation.actions, max_actions, &act_freq);
            truncated += truncate_frames(&mut c.annotation.relations, max_relations, &rel_freq);
        }
        truncated
    }
}

fn truncate_frames(frames: &mut [Vec<usize>], cap: usize, freq: &BTreeMap<usize, usize>) -> usize {
    let mut count = 0;
    for set in frames.iter_mut().filter(|s| s.len() > cap) {
        // Most frequent first; ties keep the lower class index.
        let mut ranked = set.clone();
        ranked.sort_by_key(|c| (std::cmp::Reverse(freq.get(c).copied().unwrap_or(0)), *c));
        let keep: HashSet<usize> = ranked.into_iter().take(cap).collect();
        set.retain(|c| keep.contains(c));
        count += 1;
    }
    count
}

/// Converts a label-level corpus into an indexed dataset against `vocab`.
/// Unknown labels are reported by name.
pub fn index_corpus(corpus: &AnnotationCorpus, vocab: &Vocabularies, feature_seed: u64) -> Result<Dataset> {
    let mut clips = Vec::with_capacity(corpus.clips.len());
    for raw in &corpus.clips {
        let mut actions = Vec::with_capacity(raw.frames.len());
        let mut relations = Vec::with_capacity(raw.frames.len());
        for f in &raw.frames {
            actions.push(
                f.actions
                    .iter()
                    .map(|a| vocab.actions.lookup(a))
                    .collect::<Result<Vec<_>>>()?,
            );
            relations.push(
                f.relations
                    .iter()
                    .map(|t| vocab.predicates.lookup(&t.flatten()?))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        clips.push(Clip {
            annotation: SituationAnnotation {
                clip_id: raw.clip_id.clone(),
                frames: raw.frames.len(),
                actions,
                relations,
            },
            features: FeatureSource::CodebookSeed(feature_seed),
        });
    }
    let mut qa = Vec::with_capacity(corpus.qa.len());
    for raw in &corpus.qa {
        let (mode, answer) = match &raw.choices {
            Some(choices) => {
                let idx = choices.iter().position(|c| c == &raw.answer).ok_or_else(|| {
                    Error::Schema(format!(
                        "clip {}: answer {:?} is not among the choices",
                        raw.clip_id, raw.answer
                    ))
                })?;
                (QaMode::MultipleChoice, idx)
            }
            None => (QaMode::OpenEnded, vocab.answers.lookup(&raw.answer)?),
        };
        qa.push(QaSample {
            clip_id: raw.clip_id.clone(),
            question: raw.question.clone(),
            mode,
            choices: raw.choices.clone(),
            answer,
            category: raw.category.clone(),
        });
    }
    let ds = Dataset {
        vocab: vocab.clone(),
        clips,
        qa,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    actions: Vec<String>,
    predicates: Vec<String>,
    answers: Vec<String>,
    words: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipFile {
    clip_id: String,
    #[serde(rename = "T")]
    frames: usize,
    actions: Vec<Vec<usize>>,
    relations: Vec<Vec<usize>>,
    features: FeatureSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    vocab: VocabFile,
    clips: Vec<ClipFile>,
    qa: Vec<QaSample>,
}

impl DatasetFile {
    fn into_dataset(self) -> Result<Dataset> {
        let v = self.vocab;
        let vocab = Vocabularies::from_labels(v.actions, v.predicates, v.answers, v.words)?;
        let clips = self
            .clips
            .into_iter()
            .map(|c| Clip {
                annotation: SituationAnnotation {
                    clip_id: c.clip_id,
                    frames: c.frames,
                    actions: c.actions,
                    relations: c.relations,
                },
                features: c.features,
            })
            .collect();
        Ok(Dataset {
            vocab,
            clips,
            qa: self.qa,
        })
    }

    fn from_dataset(ds: &Dataset) -> Self {
        DatasetFile {
            vocab: VocabFile {
                actions: ds.vocab.actions.labels().to_vec(),
                predicates: ds.vocab.predicates.labels().to_vec(),
                answers: ds.vocab.answers.labels().to_vec(),
                words: ds.vocab.words.labels().to_vec(),
            },
            clips: ds
                .clips
                .iter()
                .map(|c| ClipFile {
                    clip_id: c.annotation.clip_id.clone(),
                    frames: c.annotation.frames,
                    actions: c.annotation.actions.clone(),
                    relations: c.annotation.relations.clone(),
                    features: c.features.clone(),
                })
                .collect(),
            qa: ds.qa.clone(),
        }
    }
}
