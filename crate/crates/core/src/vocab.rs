//! Label vocabularies, predicate triplets and the question tokenizer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRIPLET_SEPARATOR: &str = "--";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    Action,
    Predicate,
    Answer,
    Word,
}

impl VocabKind {
    /// Action and predicate vocabularies reserve one extra "no class" slot.
    pub fn has_phi(self) -> bool {
        matches!(self, VocabKind::Action | VocabKind::Predicate)
    }
}

/// Ordered unique labels with a reverse index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(kind: VocabKind, labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate {kind:?} label {l:?}")));
            }
        }
        Ok(Vocabulary {
            kind,
            labels,
            index,
        })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn lookup(&self, label: &str) -> Result<usize> {
        self.get(label).ok_or_else(|| {
            Error::Vocabulary(format!("unknown {:?} label {label:?}", self.kind))
        })
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels.get(i).map(String::as_str)
    }

    /// Index of the no-class slot, equal to the number of real labels.
    pub fn phi_index(&self) -> Option<usize> {
        self.kind.has_phi().then_some(self.labels.len())
    }

    /// Width of a prediction head over this vocabulary (φ included).
    pub fn num_outputs(&self) -> usize {
        self.labels.len() + usize::from(self.kind.has_phi())
    }
}

/// `⟨subject, relation, object⟩`, flattened into one predicate class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredicateTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl PredicateTriplet {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        PredicateTriplet {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }

    pub fn flatten(&self) -> Result<String> {
        for part in [&self.subject, &self.relation, &self.object] {
            if part.is_empty() || part.contains(TRIPLET_SEPARATOR) {
                return Err(Error::Schema(format!(
                    "triplet component {part:?} is empty or contains {TRIPLET_SEPARATOR:?}"
                )));
            }
        }
        Ok(format!(
            "{}{TRIPLET_SEPARATOR}{}{TRIPLET_SEPARATOR}{}",
            self.subject, self.relation, self.object
        ))
    }

    pub fn unflatten(label: &str) -> Result<Self> {
        let parts: Vec<&str> = label.split(TRIPLET_SEPARATOR).collect();
        match parts.as_slice() {
            [s, r, o] if !s.is_empty() && !r.is_empty() && !o.is_empty() => {
                Ok(PredicateTriplet::new(s, r, o))
            }
            _ => Err(Error::Schema(format!("{label:?} is not a flattened triplet"))),
        }
    }
}

/// The four vocabularies a dataset carries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    pub actions: Vocabulary,
    pub predicates: Vocabulary,
    pub answers: Vocabulary,
    pub words: Vocabulary,
}

impl Vocabularies {
    pub fn from_labels(
        actions: Vec<String>,
        predicates: Vec<String>,
        answers: Vec<String>,
        words: Vec<String>,
    ) -> Result<Self> {
        for p in &predicates {
            PredicateTriplet::unflatten(p)?;
        }
        Ok(Vocabularies {
            actions: Vocabulary::new(VocabKind::Action, actions)?,
            predicates: Vocabulary::new(VocabKind::Predicate, predicates)?,
            answers: Vocabulary::new(VocabKind::Answer, answers)?,
            words: Vocabulary::new(VocabKind::Word, words)?,
        })
    }
}

/// One frame of a label-level (not yet indexed) annotation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFrame {
    pub actions: Vec<String>,
    pub relations: Vec<PredicateTriplet>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawClip {
    pub clip_id: String,
    pub frames: Vec<RawFrame>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQa {
    pub clip_id: String,
    pub question: String,
    pub choices: Option<Vec<String>>,
    pub answer: String,
    pub category: Option<String>,
}

/// Label-level corpus as read from an external annotation source.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationCorpus {
    pub clips: Vec<RawClip>,
    pub qa: Vec<RawQa>,
}

/// Builds lexicographically ordered vocabularies from the labels the corpus
/// actually uses; predicate classes are the observed triplets only.
pub fn build_vocabularies(corpus: &AnnotationCorpus) -> Result<Vocabularies> {
    if corpus.clips.is_empty() {
        return Err(Error::Schema("annotation corpus has no clips".into()));
    }
    let mut actions = BTreeSet::new();
    let mut predicates = BTreeMap::new();
    let mut answers = BTreeSet::new();
    let mut words = BTreeSet::new();
    for clip in &corpus.clips {
        for frame in &clip.frames {
            actions.extend(frame.actions.iter().cloned());
            for t in &frame.relations {
                let flat = t.flatten()?;
                if let Some(prev) = predicates.insert(flat.clone(), t.clone()) {
                    if &prev != t {
                        return Err(Error::Schema(format!(
                            "triplets {prev:?} and {t:?} flatten to the same label {flat:?}"
                        )));
                    }
                }
            }
        }
    }
    for qa in &corpus.qa {
        words.extend(tokenize(&qa.question));
        for c in qa.choices.iter().flatten() {
            words.extend(tokenize(c));
        }
        if qa.choices.is_none() {
            answers.insert(qa.answer.clone());
        }
    }
    Vocabularies::from_labels(
        actions.into_iter().collect(),
        predicates.into_keys().collect(),
        answers.into_iter().collect(),
        words.into_iter().collect(),
    )
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Maps words to embedding rows. Rows 0..3 are reserved for the unknown-word,
/// `[CLS]` and `[SEP]` tokens; vocabulary words follow in order.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vocabulary,
}

impl Tokenizer {
    pub const UNK: usize = 0;
    pub const CLS: usize = 1;
    pub const SEP: usize = 2;
    const RESERVED: usize = 3;

    pub fn new(words: Vocabulary) -> Self {
        Tokenizer { words }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len() + Self::RESERVED
    }

    pub fn token_id(&self, word: &str) -> usize {
        self.words
            .get(word)
            .map_or(Self::UNK, |i| i + Self::RESERVED)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.token_id(w)).collect()
    }

    pub fn token_text(&self, id: usize) -> &str {
        match id {
            Self::UNK => "<unk>",
            Self::CLS => "[CLS]",
            Self::SEP => "[SEP]",
            _ => self.words.label(id - Self::RESERVED).unwrap_or("<unk>"),
        }
    }
}
