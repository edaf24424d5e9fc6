//! Model and run configuration, presets, and the `key = value` file format.
//!
//! A config file is either JSON or a list of `dotted.key = value` lines laid
//! over the defaults. Values are read as JSON when they parse (numbers,
//! `true`, `null`, `"quoted"`) and as bare strings otherwise. `#` starts a
//! comment. Unknown keys are rejected.
//!
//! ```text
//! seed = 7
//! model.width = 32
//! optim.lr = 5e-4
//! data.train = data/train.json
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Dataset, QaMode};
use crate::error::{Error, Result};
use crate::matching::MatchScope;
use crate::metrics::ApVariant;
use crate::optim::AdamConfig;
use crate::synth::SynthSpec;
use crate::transformer::PositionKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Average-pool frame pairs, then a per-cell linear map: `T' = T / 2`.
    #[default]
    TemporalPool,
    /// Per-cell linear map only: `T' = T`.
    IdentityTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Annotated frames per clip (`T`).
    pub frames: usize,
    /// Action queries per frame (`N`).
    pub action_queries: usize,
    /// Relation queries per frame (`M`).
    pub relation_queries: usize,
    pub width: usize,
    /// Layers in the video encoder, question encoder and both decoders.
    pub layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub feature_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub adapter: AdapterKind,
    pub position: PositionKind,
    pub dropout: f64,
    pub max_question_len: usize,
    pub qa_mode: QaMode,
    pub num_choices: usize,
    /// Vocabulary sizes; 0 means "take from the dataset".
    pub num_actions: usize,
    pub num_predicates: usize,
    pub num_answers: usize,
    pub num_words: usize,
    pub phi_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            frames: 4,
            action_queries: 2,
            relation_queries: 3,
            width: 16,
            layers: 2,
            fusion_layers: 2,
            heads: 2,
            ff: 32,
            feature_dim: 32,
            grid_h: 2,
            grid_w: 2,
            adapter: AdapterKind::IdentityTime,
            position: PositionKind::Sinusoidal,
            dropout: 0.1,
            max_question_len: 32,
            qa_mode: QaMode::MultipleChoice,
            num_choices: 4,
            num_actions: 10,
            num_predicates: 12,
            num_answers: 0,
            num_words: 0,
            phi_weight: 1.0,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            frames: 16,
            action_queries: 3,
            relation_queries: 8,
            width: 768,
            layers: 5,
            fusion_layers: 2,
            heads: 8,
            ff: 3072,
            feature_dim: 2048,
            grid_h: 7,
            grid_w: 7,
            adapter: AdapterKind::TemporalPool,
            position: PositionKind::Learned,
            dropout: 0.1,
            max_question_len: 128,
            qa_mode: QaMode::MultipleChoice,
            num_choices: 4,
            num_actions: 111,
            num_predicates: 563,
            num_answers: 0,
            num_words: 0,
            phi_weight: 1.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Frames left after the adapter.
    pub fn video_frames(&self) -> usize {
        match self.adapter {
            AdapterKind::TemporalPool => self.frames / 2,
            AdapterKind::IdentityTime => self.frames,
        }
    }

    /// `[VIS]` plus one token per adapted cell.
    pub fn video_tokens(&self) -> usize {
        1 + self.video_frames() * self.cells()
    }

    pub fn answer_classes(&self) -> usize {
        match self.qa_mode {
            QaMode::MultipleChoice => self.num_choices,
            QaMode::OpenEnded => self.num_answers,
        }
    }

    /// Shape checks that do not need a dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("frames", self.frames),
            ("action_queries", self.action_queries),
            ("relation_queries", self.relation_queries),
            ("width", self.width),
            ("heads", self.heads),
            ("ff", self.ff),
            ("feature_dim", self.feature_dim),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("max_question_len", self.max_question_len),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if self.width % self.heads != 0 {
            return bad(format!("model width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.adapter == AdapterKind::TemporalPool && self.frames % 2 != 0 {
            return bad(format!("temporal pooling needs an even frame count, got {}", self.frames));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.phi_weight < 0.0 || !self.phi_weight.is_finite() {
            return bad(format!("phi_weight {} must be finite and non-negative", self.phi_weight));
        }
        if self.qa_mode == QaMode::MultipleChoice && self.num_choices == 0 {
            return bad("multiple-choice mode needs num_choices >= 1".into());
        }
        Ok(())
    }

    /// Fills zero vocabulary sizes from `ds` and checks the rest against it.
    pub fn resolve(&mut self, ds: &Dataset) -> Result<()> {
        let v = &ds.vocab;
        for (name, slot, actual) in [
            ("num_actions", &mut self.num_actions, v.actions.len()),
            ("num_predicates", &mut self.num_predicates, v.predicates.len()),
            ("num_answers", &mut self.num_answers, v.answers.len()),
            ("num_words", &mut self.num_words, v.words.len()),
        ] {
            if *slot == 0 {
                *slot = actual;
            } else if *slot != actual {
                return Err(Error::Config(format!(
                    "model.{name} = {slot} but the dataset vocabulary has {actual}"
                )));
            }
        }
        if self.num_actions == 0 || self.num_predicates == 0 {
            return Err(Error::Config("dataset has no action or predicate classes".into()));
        }
        if self.qa_mode == QaMode::OpenEnded && self.num_answers == 0 {
            return Err(Error::Config("open-ended mode needs a non-empty answer vocabulary".into()));
        }
        for clip in &ds.clips {
            let a = &clip.annotation;
            if a.frames != self.frames {
                return Err(Error::Config(format!(
                    "clip {} has {} frames, model expects {}",
                    a.clip_id, a.frames, self.frames
                )));
            }
            let over_a = a.actions.iter().any(|s| s.len() > self.action_queries);
            let over_r = a.relations.iter().any(|s| s.len() > self.relation_queries);
            if over_a || over_r {
                return Err(Error::Config(format!(
                    "clip {} has more labels in a frame than queries; truncate the dataset first",
                    a.clip_id
                )));
            }
        }
        for q in &ds.qa {
            if q.mode != self.qa_mode {
                return Err(Error::Config(format!(
                    "clip {}: {:?} question in a {:?} model",
                    q.clip_id, q.mode, self.qa_mode
                )));
            }
            if let Some(c) = &q.choices {
                if c.len() != self.num_choices {
                    return Err(Error::Config(format!(
                        "clip {}: {} choices, model expects {}",
                        q.clip_id,
                        c.len(),
                        self.num_choices
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeFlags {
    /// Build the graph from ground-truth label embeddings instead of decoders.
    pub gt_graph: bool,
    /// Fuse the question with video tokens only.
    pub q_plus_v: bool,
    /// Fuse the question with the graph and the video tokens.
    pub q_plus_v_plus_hg: bool,
    /// Drop the relation branch (objective `L_act + L_vqa`).
    pub action_only: bool,
    /// Drop the action branch (objective `L_rel + L_vqa`).
    pub relation_only: bool,
}

impl ModeFlags {
    pub fn validate(&self) -> Result<()> {
        if self.q_plus_v && self.q_plus_v_plus_hg {
            return Err(Error::Config("q_plus_v and q_plus_v_plus_hg are exclusive".into()));
        }
        if self.action_only && self.relation_only {
            return Err(Error::Config("action_only and relation_only are exclusive".into()));
        }
        Ok(())
    }

    pub fn uses_actions(&self) -> bool {
        !self.relation_only
    }

    pub fn uses_relations(&self) -> bool {
        !self.action_only
    }

    pub fn uses_graph(&self) -> bool {
        !self.q_plus_v
    }

    pub fn fuses_video(&self) -> bool {
        self.q_plus_v || self.q_plus_v_plus_hg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset files; when absent the synthetic generator is used.
    pub train: Option<String>,
    pub val: Option<String>,
    pub synth: SynthSpec,
    pub val_episodes: usize,
    /// Gaussian noise added by the codebook feature provider.
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            val: None,
            synth: SynthSpec::toy(),
            val_episodes: 50,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    /// Clips per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub match_scope: MatchScope,
    pub map_variant: ApVariant,
    pub flags: ModeFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::toy()
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            seed: 42,
            data: DataConfig::default(),
            model: ModelConfig::toy(),
            optim: AdamConfig {
                lr: 5e-3,
                warmup_fraction: Some(0.05),
                ..AdamConfig::default()
            },
            batch_size: 8,
            max_epochs: 100,
            max_steps: Some(3000),
            patience: 10,
            match_scope: MatchScope::Frame,
            map_variant: ApVariant::AllPoint,
            flags: ModeFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flags.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if !(self.optim.lr >= 0.0) || self.optim.total_steps == 0 {
            return Err(Error::Config("optim.lr must be non-negative and total_steps positive".into()));
        }
        if self.data.noise_sigma < 0.0 {
            return Err(Error::Config("data.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses JSON (overlaid on the defaults) or `key = value` text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = serde_json::to_value(RunConfig::default())?;
        if text.trim_start().starts_with('{') {
            let overlay: Value = serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("config JSON: {e}")))?;
            merge(&mut base, overlay, "")?;
        } else {
            for (n, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
                })?;
                set_path(&mut base, key.trim(), parse_value(value.trim()))
                    .map_err(|e| e.context(format!("line {}", n + 1)))?;
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading config {}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// Applies one `dotted.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        set_path(&mut v, key, parse_value(value))?;
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        *self = cfg;
        Ok(())
    }
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config(format!("empty config key {key:?}")))
}

fn merge(base: &mut Value, overlay: Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_overrides() {
        let cfg = RunConfig::parse(
            "# comment\nseed = 7\nmodel.width = 32 # trailing\noptim.clip_norm = 1.0\ndata.train = a/b.json\nmatch_scope = video\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.width, 32);
        assert_eq!(cfg.optim.clip_norm, Some(1.0));
        assert_eq!(cfg.data.train.as_deref(), Some("a/b.json"));
        assert_eq!(cfg.match_scope, MatchScope::Video);
    }

    #[test]
    fn json_overlay() {
        let cfg = RunConfig::parse(r#"{"flags": {"gt_graph": true}, "batch_size": 2}"#).unwrap();
        assert!(cfg.flags.gt_graph);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.model, ModelConfig::toy());
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        for text in ["nope = 1", "model.widht = 3", "model.width = wide", r#"{"extra": 1}"#] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.is_validation(), "{text}: {err}");
        }
    }

    #[test]
    fn width_must_divide_heads() {
        assert!(RunConfig::parse("model.heads = 3").is_err());
    }

    #[test]
    fn full_size_shapes() {
        let m = ModelConfig::full();
        m.validate().unwrap();
        assert_eq!(m.video_frames(), 8);
        assert_eq!(m.video_tokens(), 393);
    }
}
