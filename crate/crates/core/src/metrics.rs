//! VQA accuracy with per-category breakdown, and per-frame set mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::PredictedLabel;
use crate::report::CategoryAccuracy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApVariant {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean precision at each hit, without the envelope.
    NonInterpolated,
}

/// Average precision of `(score, is_hit)` predictions against `positives`
/// ground-truth instances. Sorting is stable, so equal scores keep input order.
pub fn average_precision(predictions: &[(f64, bool)], positives: usize, variant: ApVariant) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut ranked = predictions.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = positives as f64;
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total);
    }
    match variant {
        ApVariant::AllPoint => {
            for k in (0..precision.len().saturating_sub(1)).rev() {
                precision[k] = precision[k].max(precision[k + 1]);
            }
            let mut prev = 0.0;
            let mut ap = 0.0;
            for (p, r) in precision.iter().zip(&recall) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        ApVariant::NonInterpolated => {
            ranked
                .iter()
                .zip(&precision)
                .filter(|((_, hit), _)| *hit)
                .map(|(_, p)| p)
                .sum::<f64>()
                / total
        }
    }
}

/// Mean over classes with at least one ground-truth instance of the AP of
/// per-frame predictions. `predicted[i]` and `truth[i]` describe the same frame.
pub fn mean_average_precision(
    predicted: &[&[PredictedLabel]],
    truth: &[&[usize]],
    classes: usize,
    variant: ApVariant,
) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Report(format!(
            "{} predicted frames against {} annotated frames",
            predicted.len(),
            truth.len()
        )));
    }
    let mut per_class: Vec<Vec<(f64, bool)>> = vec![Vec::new(); classes];
    let mut positives = vec![0usize; classes];
    for (pred, gt) in predicted.iter().zip(truth) {
        for &c in gt.iter() {
            if c >= classes {
                return Err(Error::Index(format!("class {c} of {classes}")));
            }
            positives[c] += 1;
        }
        for l in pred.iter() {
            if l.class < classes {
                per_class[l.class].push((l.score, gt.contains(&l.class)));
            }
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| positives[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::Report("no ground-truth instances to score".into()));
    }
    let sum: f64 = present
        .iter()
        .map(|&c| average_precision(&per_class[c], positives[c], variant))
        .sum();
    Ok(sum / present.len() as f64)
}

/// Overall accuracy plus a per-category tally. Without any category tags
/// the breakdown has a single `all` entry; untagged samples among tagged
/// ones count as `uncategorized`.
pub fn vqa_accuracy(outcomes: &[(Option<&str>, bool)]) -> Result<(f64, BTreeMap<String, CategoryAccuracy>)> {
    if outcomes.is_empty() {
        return Err(Error::Report("no QA samples to evaluate".into()));
    }
    let tagged = outcomes.iter().any(|(c, _)| c.is_some());
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (cat, ok) in outcomes {
        let key = match (tagged, cat) {
            (false, _) => "all",
            (true, Some(c)) => c,
            (true, None) => "uncategorized",
        };
        let e = tally.entry(key.to_string()).or_default();
        e.0 += usize::from(*ok);
        e.1 += 1;
    }
    let correct = outcomes.iter().filter(|o| o.1).count();
    let per = tally
        .into_iter()
        .map(|(k, (c, t))| {
            (
                k,
                CategoryAccuracy {
                    correct: c,
                    total: t,
                    accuracy: c as f64 / t as f64,
                },
            )
        })
        .collect();
    Ok((correct as f64 / outcomes.len() as f64, per))
}

/// Mean number of surplus same-class predictions per frame.
pub fn mean_duplicates(frames: &[&[PredictedLabel]]) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let dups: usize = frames
        .iter()
        .flat_map(|f| f.iter())
        .map(|l| l.raw_count.saturating_sub(1))
        .sum();
    dups as f64 / frames.len() as f64
}
