//! Optimal assignment between prediction slots and φ-padded label sets,
//! and the set-prediction losses built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{sum_all, Var};
use crate::tensor::Tensor;

/// Square cost matrix; rows are prediction slots, columns padded labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<S> {
    size: usize,
    data: Vec<S>,
}

impl<S: Scalar> CostMatrix<S> {
    pub fn new(size: usize, data: Vec<S>) -> Result<Self> {
        if size == 0 || data.len() != size * size {
            return Err(Error::shape("cost_matrix", &[size, size], &[data.len()]));
        }
        Ok(CostMatrix { size, data })
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> S) -> Self {
        let data = (0..size * size).map(|k| f(k / size, k % size)).collect();
        CostMatrix { size, data }
    }

    /// `cost(i, j) = -1{c_j != φ} · p_i(c_j)` with `gt` padded by φ up to
    /// the number of rows in `probs` (`[slots, classes + 1]`, row-major).
    pub fn build(probs: &[S], classes_with_phi: usize, gt: &[usize]) -> Result<Self> {
        let k = classes_with_phi;
        if k == 0 || probs.len() % k != 0 {
            return Err(Error::shape("build_cost_matrix", &[probs.len()], &[k]));
        }
        let size = probs.len() / k;
        let phi = k - 1;
        if gt.len() > size {
            return Err(Error::Contract(format!(
                "{} ground-truth labels for {size} prediction slots",
                gt.len()
            )));
        }
        if let Some(&bad) = gt.iter().find(|&&c| c >= phi) {
            return Err(Error::Index(format!("ground-truth class {bad} with φ at {phi}")));
        }
        Ok(Self::from_fn(size, |i, j| match gt.get(j) {
            Some(&c) => -probs[i * k + c],
            None => S::zero(),
        }))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        self.data[row * self.size + col]
    }

    /// Sum of `cost(i, perm[i])` in row order.
    pub fn cost_of(&self, perm: &[usize]) -> S {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// A permutation from slots to padded label columns with its total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<S> {
    pub perm: Vec<usize>,
    pub cost: S,
}

/// Minimum-cost perfect matching (Kuhn–Munkres with potentials, O(n³)).
///
/// Ties are broken by the scan order: rows are inserted in index order and
/// the first column reaching the minimal reduced cost wins.
pub fn hungarian_match<S: Scalar>(c: &CostMatrix<S>) -> Result<Assignment<S>> {
    if c.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("cost matrix has a non-finite entry".into()));
    }
    let n = c.size;
    let inf = S::infinity();
    // 1-based potentials; p[j] is the row matched to column j, way[] the
    // alternating-path back pointers.
    let mut u = vec![S::zero(); n + 1];
    let mut v = vec![S::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let cost = c.cost_of(&perm);
    Ok(Assignment { perm, cost })
}

/// Whether slots are matched within each frame or across the whole clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScope {
    #[default]
    Frame,
    Video,
}

/// Matching of a `[Q·T, classes + 1]` prediction block against per-frame sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMatch<S> {
    pub scope: MatchScope,
    pub slots: usize,
    pub frames: usize,
    /// Matched class for every row, φ for rows matched to padding.
    pub targets: Vec<usize>,
    /// One assignment per frame, or a single clip-wide one.
    pub assignments: Vec<Assignment<S>>,
    pub cost: S,
}

impl<S> SequenceMatch<S> {
    /// `true` for rows matched to a real label.
    pub fn matched_mask(&self, phi: usize) -> Vec<bool> {
        self.targets.iter().map(|&c| c != phi).collect()
    }
}

pub fn match_sequence<S: Scalar>(
    probs: &Tensor<S>,
    gt: &[Vec<usize>],
    slots: usize,
    scope: MatchScope,
) -> Result<SequenceMatch<S>> {
    let shape = probs.shape();
    let frames = gt.len();
    if shape.len() != 2 || slots == 0 || frames == 0 || shape[0] != slots * frames {
        return Err(Error::shape("match_sequence", shape, &[slots * frames]));
    }
    let k = shape[1];
    let phi = k - 1;
    let data = probs.data();
    let mut targets = vec![phi; slots * frames];
    let mut assignments = Vec::new();
    match scope {
        MatchScope::Frame => {
            for (t, labels) in gt.iter().enumerate() {
                let rows = &data[t * slots * k..(t + 1) * slots * k];
                let c = CostMatrix::build(rows, k, labels)
                    .map_err(|e| e.context(format!("frame {t}")))?;
                let a = hungarian_match(&c)?;
                for (q, &col) in a.perm.iter().enumerate() {
                    if let Some(&class) = labels.get(col) {
                        targets[t * slots + q] = class;
                    }
                }
                assignments.push(a);
            }
        }
        MatchScope::Video => {
            for (t, labels) in gt.iter().enumerate() {
                if labels.len() > slots {
                    return Err(Error::Contract(format!(
                        "frame {t}: {} labels for {slots} slots",
                        labels.len()
                    )));
                }
            }
            let flat: Vec<usize> = gt.iter().flatten().copied().collect();
            let c = CostMatrix::build(data, k, &flat)?;
            let a = hungarian_match(&c)?;
            for (row, &col) in a.perm.iter().enumerate() {
                if let Some(&class) = flat.get(col) {
                    targets[row] = class;
                }
            }
            assignments.push(a);
        }
    }
    let cost = assignments.iter().map(|a| a.cost).sum();
    Ok(SequenceMatch {
        scope,
        slots,
        frames,
        targets,
        assignments,
        cost,
    })
}

/// Sum over all slots of the cross-entropy against the matched class;
/// φ targets are weighted by `phi_weight`. The matching is a constant.
pub fn hungarian_loss<'t, S: Scalar>(
    logits: Var<'t, S>,
    matched: &SequenceMatch<S>,
    phi_weight: f64,
) -> Result<Var<'t, S>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != matched.targets.len() {
        return Err(Error::shape("hungarian_loss", &shape, &[matched.targets.len()]));
    }
    let phi = shape[1] - 1;
    let weights: Vec<S> = matched
        .targets
        .iter()
        .map(|&c| if c == phi { S::lit(phi_weight) } else { S::one() })
        .collect();
    logits.cross_entropy_rows(&matched.targets, &weights)
}

/// `L = L_act + L_rel + L_vqa`.
pub fn total_loss<'t, S: Scalar>(
    l_act: Var<'t, S>,
    l_rel: Var<'t, S>,
    l_vqa: Var<'t, S>,
) -> Result<Var<'t, S>> {
    sum_all(&[l_act, l_rel, l_vqa])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn cost_matrix_substitution() {
        let probs = [0.9, 0.05, 0.05, 0.1, 0.8, 0.1];
        let c = CostMatrix::build(&probs, 3, &[0]).unwrap();
        assert_eq!([c.get(0, 0), c.get(1, 0)], [-0.9, -0.1]);
        assert_eq!([c.get(0, 1), c.get(1, 1)], [0.0, 0.0]);
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.cost, -0.9);
    }

    #[test]
    fn empty_frame_is_zero_cost() {
        let probs = [0.2, 0.8, 0.6, 0.4];
        let c = CostMatrix::build(&probs, 2, &[]).unwrap();
        assert!(c.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn oversized_ground_truth_is_rejected() {
        let err = CostMatrix::build(&[0.5, 0.5], 2, &[0, 0]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn single_entry() {
        let c = CostMatrix::new(1, vec![-0.3]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap().perm, vec![0]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let c = CostMatrix::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(hungarian_match(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn frame_scope_stays_within_frames() {
        // Two frames, two slots each; frame 1 holds class 1 only.
        let probs = Tensor::<f64>::from_f64(
            &[4, 3],
            &[
                0.1, 0.8, 0.1, 0.7, 0.2, 0.1, //
                0.6, 0.3, 0.1, 0.3, 0.3, 0.4,
            ],
        )
        .unwrap();
        let gt = vec![vec![0], vec![1]];
        let m = match_sequence(&probs, &gt, 2, MatchScope::Frame).unwrap();
        assert_eq!(m.targets, vec![2, 0, 1, 2]);
        assert_eq!(m.assignments.len(), 2);
        let v = match_sequence(&probs, &gt, 2, MatchScope::Video).unwrap();
        assert!(v.cost <= m.cost);
    }

    #[test]
    fn uniform_logits_give_log_k_per_slot() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[6, 4]));
        let m = SequenceMatch {
            scope: MatchScope::Frame,
            slots: 2,
            frames: 3,
            targets: vec![0, 3, 1, 3, 3, 3],
            assignments: vec![],
            cost: 0.0,
        };
        let l = hungarian_loss(logits, &m, 1.0).unwrap().item();
        assert!((l - 6.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_adds_terms() {
        let tape = Tape::new();
        let l = total_loss(
            tape.constant(Tensor::scalar(1.5)),
            tape.constant(Tensor::scalar(2.5)),
            tape.constant(Tensor::scalar(1.0)),
        )
        .unwrap();
        assert_eq!(l.item(), 5.0);
    }
}
