use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Additive stand-in for −∞. After max-subtraction it underflows to an exact
/// zero weight in both f32 and f64.
pub const BLOCKED: f64 = -1e9;

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || allowed.len() != rows * cols {
            return Err(Error::shape("attention_mask", &[rows, cols], &[allowed.len()]));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].contains(&true)) {
            return Err(Error::Contract(format!(
                "attention mask row {r} blocks every key"
            )));
        }
        Ok(AttentionMask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        AttentionMask::new(rows, cols, vec![true; rows * cols]).expect("non-empty mask")
    }

    /// Frame-level causal mask over `frames · per_frame` queries laid out
    /// frame-major: query `i` sees key `j` iff `j / per_frame <= i / per_frame`.
    pub fn block_causal(frames: usize, per_frame: usize) -> Self {
        let n = frames * per_frame;
        let allowed = (0..n)
            .flat_map(|i| (0..n).map(move |j| j / per_frame <= i / per_frame))
            .collect();
        AttentionMask::new(n, n, allowed).expect("block-causal rows always see their own frame")
    }

    /// Every query sees exactly the keys whose bit is set.
    pub fn key_padding(rows: usize, keys: &[bool]) -> Result<Self> {
        let allowed = (0..rows).flat_map(|_| keys.iter().copied()).collect();
        AttentionMask::new(rows, keys.len(), allowed)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.cols + key]
    }

    pub fn is_all_allowed(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// 0 for allowed entries, [`BLOCKED`] otherwise.
    pub fn additive<S: Scalar>(&self) -> Vec<S> {
        self.allowed
            .iter()
            .map(|&a| if a { S::zero() } else { S::lit(BLOCKED) })
            .collect()
    }
}
