use std::sync::Arc;

use crate::dipr::dipr_scan;
use crate::error::{Error, Result};
use crate::vector::{dot, Matrix, TokenId};

/// All keys of one head, scanned exhaustively. Row `i` is token `i`.
#[derive(Clone, Debug)]
pub struct FlatIndex {
    keys: Arc<Matrix>,
}

impl FlatIndex {
    pub fn new(keys: Arc<Matrix>) -> Self {
        FlatIndex { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &Arc<Matrix> {
        &self.keys
    }

    /// Exact top-k by inner product, best first, smaller id on ties.
    pub fn topk(&self, q: &[f32], k: usize) -> Result<Vec<TokenId>> {
        self.topk_prefix(q, k, self.len())
    }

    /// Top-k among tokens `< prefix_len`.
    pub fn topk_prefix(&self, q: &[f32], k: usize, prefix_len: usize) -> Result<Vec<TokenId>> {
        let n = prefix_len.min(self.len());
        if k > n {
            return Err(Error::invalid(format!("k={k} exceeds {n} keys")));
        }
        if q.len() != self.keys.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.keys.dim(),
                actual: q.len(),
            });
        }
        let mut scored: Vec<(f32, u32)> = (0..n).map(|i| (dot(q, self.keys.row(i)), i as u32)).collect();
        let cmp = |a: &(f32, u32), b: &(f32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.truncate(k);
        Ok(scored.into_iter().map(|(_, i)| TokenId(i)).collect())
    }

    /// Exact DIPR; identical contract to [`crate::dipr::dipr_bruteforce`].
    pub fn dipr(&self, q: &[f32], beta: f64) -> Result<Vec<TokenId>> {
        dipr_scan(q, &self.keys, self.len(), beta, None)
    }

    /// Exact DIPR among tokens `< prefix_len`.
    pub fn dipr_prefix(&self, q: &[f32], beta: f64, prefix_len: usize) -> Result<Vec<TokenId>> {
        dipr_scan(q, &self.keys, prefix_len, beta, None)
    }

    /// [`FlatIndex::dipr_prefix`] with the slack measured from
    /// `max(best, window_max)`; may return nothing.
    pub fn dipr_window(&self, q: &[f32], beta: f64, prefix_len: usize, window_max: Option<f32>) -> Result<Vec<TokenId>> {
        dipr_scan(q, &self.keys, prefix_len, beta, window_max)
    }
}
