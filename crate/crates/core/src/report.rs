//! Metrics report and hyper-graph dump files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub per_category: BTreeMap<String, CategoryAccuracy>,
    pub action_map: f64,
    pub relation_map: f64,
    pub loss_curve: Vec<LossPoint>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.overall_accuracy) || !unit(self.action_map) || !unit(self.relation_map) {
            return Err(Error::Report("accuracy or mAP outside [0, 1]".into()));
        }
        if self.per_category.values().any(|c| !unit(c.accuracy) || c.correct > c.total) {
            return Err(Error::Report("inconsistent per-category accuracy".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let r: MetricsReport = serde_json::from_str(&text)?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphItemKind {
    Action,
    Relation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpItem {
    pub kind: GraphItemKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet: Option<DumpTriplet>,
    pub score: f64,
    /// Slots that predicted this class in the frame before duplicates collapsed.
    pub raw_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDump {
    pub clip_id: String,
    pub frames: Vec<Vec<DumpItem>>,
}

impl GraphDump {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Within-frame duplicate predictions, summed over frames.
    pub fn duplicate_count(&self) -> usize {
        self.frames
            .iter()
            .flatten()
            .map(|i| i.raw_count.saturating_sub(1))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("r.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn dump_round_trips() {
        let d = GraphDump {
            clip_id: "c".into(),
            frames: vec![
                vec![DumpItem {
                    kind: GraphItemKind::Relation,
                    label: "person--hold--cup".into(),
                    triplet: Some(DumpTriplet {
                        subject: "person".into(),
                        relation: "hold".into(),
                        object: "cup".into(),
                    }),
                    score: 0.5,
                    raw_count: 3,
                }],
                vec![],
            ],
        };
        let back = GraphDump::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.duplicate_count(), 2);
    }
}
