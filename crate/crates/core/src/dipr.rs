//! Dynamic inner-product range (DIPR) queries.
//!
//! A token is critical for `q` when its attention weight is at least `alpha`
//! times the largest weight. Because softmax is monotone in the scaled score
//! this is the same as `q·k >= max_s(q·k_s) - beta` with
//! `beta = -√d · ln(alpha)`, which is what every search here evaluates.
//!
//! [`diprs`] is the graph search: a candidate list that first grows without
//! pruning up to `l0` entries and afterwards only admits points whose inner
//! product is within `beta` of the best one found so far.

use crate::error::{Error, Result};
use crate::index::GraphIndex;
use crate::vector::{dot, Matrix, TokenId};

/// An `alpha`/`beta` pair for a fixed head dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticalityThreshold {
    pub alpha: f64,
    pub beta: f64,
    pub dim: usize,
}

impl CriticalityThreshold {
    pub fn from_alpha(alpha: f64, dim: usize) -> Result<Self> {
        Ok(CriticalityThreshold {
            alpha,
            beta: alpha_to_beta(alpha, dim)?,
            dim,
        })
    }

    pub fn from_beta(beta: f64, dim: usize) -> Result<Self> {
        if !(beta >= 0.0) || dim == 0 {
            return Err(Error::invalid(format!("beta must be >= 0 (got {beta}), dim > 0")));
        }
        let alpha = if beta.is_infinite() {
            0.0
        } else {
            (-beta / (dim as f64).sqrt()).exp()
        };
        Ok(CriticalityThreshold { alpha, beta, dim })
    }
}

/// `-√d · ln(alpha)`.
pub fn alpha_to_beta(alpha: f64, d: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    // ln(1) is exactly 0; avoid returning -0.0.
    Ok((-(d as f64).sqrt() * alpha.ln()).max(0.0))
}

pub fn is_critical_by_attention(a_j: f64, a_max: f64, alpha: f64) -> bool {
    a_j >= alpha * a_max
}

fn check_beta(beta: f64) -> Result<()> {
    if beta >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("beta must be >= 0, got {beta}")))
    }
}

/// Exact DIPR by enumeration: every id with `q·k >= max - beta`, ascending.
pub fn dipr_bruteforce<K: AsRef<[f32]>>(
    q: &[f32],
    keys: &[(TokenId, K)],
    beta: f64,
) -> Result<Vec<TokenId>> {
    if keys.is_empty() {
        return Err(Error::Empty("key list"));
    }
    check_beta(beta)?;
    let mut scores = Vec::with_capacity(keys.len());
    for (id, k) in keys {
        let k = k.as_ref();
        if k.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                actual: k.len(),
            });
        }
        scores.push((*id, dot(q, k)));
    }
    let max = scores.iter().map(|s| s.1).fold(f32::NEG_INFINITY, f32::max);
    let bound = max as f64 - beta;
    let mut out: Vec<TokenId> = scores
        .into_iter()
        .filter(|(_, s)| *s as f64 >= bound)
        .map(|(id, _)| id)
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Exact DIPR over the first `limit` rows of `keys`; `window_max` raises
/// the maximum the slack is measured from, as in [`diprs`].
pub(crate) fn dipr_scan(
    q: &[f32],
    keys: &Matrix,
    limit: usize,
    beta: f64,
    window_max: Option<f32>,
) -> Result<Vec<TokenId>> {
    if limit == 0 || keys.is_empty() {
        return Err(Error::Empty("key list"));
    }
    check_beta(beta)?;
    if keys.dim() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            actual: q.len(),
        });
    }
    let limit = limit.min(keys.len());
    let scores: Vec<f32> = (0..limit).map(|i| dot(q, keys.row(i))).collect();
    let max = scores.iter().copied().fold(window_max.unwrap_or(f32::NEG_INFINITY), f32::max);
    let bound = max as f64 - beta;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|(_, s)| **s as f64 >= bound)
        .map(|(i, _)| TokenId::from(i))
        .collect())
}

/// Compares the attention-weight definition of criticality with the
/// inner-product definition at `beta = alpha_to_beta(alpha, d)`.
///
/// Tokens whose inner product lies within `1e-6 · max(1, |max|)` of the
/// inner-product threshold are left out of the comparison, since rounding
/// can legitimately put them on either side.
pub fn theorem1_check<K: AsRef<[f32]>>(q: &[f32], keys: &[(TokenId, K)], alpha: f64) -> Result<bool> {
    let d = q.len();
    let beta = alpha_to_beta(alpha, d)?;
    let by_ip = dipr_bruteforce(q, keys, beta)?;

    let ips: Vec<f32> = keys.iter().map(|(_, k)| dot(q, k.as_ref())).collect();
    let sqrt_d = (d as f64).sqrt();
    let z: Vec<f64> = ips.iter().map(|&s| s as f64 / sqrt_d).collect();
    let z_max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - z_max).exp()).collect();
    let sum: f64 = e.iter().sum();
    let a_max = e.iter().copied().fold(0.0, f64::max) / sum;

    let ip_max = ips.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let threshold = ip_max - beta;
    let tol = 1e-6 * ip_max.abs().max(1.0);

    let by_ip: std::collections::HashSet<TokenId> = by_ip.into_iter().collect();
    for (((id, _), e_j), ip) in keys.iter().zip(&e).zip(&ips) {
        if (*ip as f64 - threshold).abs() <= tol {
            continue;
        }
        let by_attention = is_critical_by_attention(e_j / sum, a_max, alpha);
        if by_attention != by_ip.contains(id) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Append-only candidate list of the graph search.
///
/// Entries keep insertion order. While the list holds at most `l0` entries
/// every offered point is appended; after that only points scoring at least
/// `bound - beta` are, where `bound` is the best score in the list (or the
/// window maximum, when larger).
#[derive(Clone, Debug)]
pub struct CandidateList {
    entries: Vec<(TokenId, f32)>,
    l0: usize,
    best: usize,
}

impl CandidateList {
    pub fn new(l0: usize, start: TokenId, score: f32) -> Self {
        CandidateList {
            entries: vec![(start, score)],
            l0,
            best: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(TokenId, f32)] {
        &self.entries
    }

    /// Highest score, smallest id on ties.
    pub fn best(&self) -> (TokenId, f32) {
        self.entries[self.best]
    }

    fn bound(&self, window_max: Option<f32>) -> f64 {
        let b = self.best().1;
        window_max.map_or(b, |w| w.max(b)) as f64
    }

    pub fn try_append(&mut self, id: TokenId, score: f32, beta: f64, window_max: Option<f32>) -> bool {
        if self.entries.len() <= self.l0 || score as f64 >= self.bound(window_max) - beta {
            self.entries.push((id, score));
            let (bid, bs) = self.best();
            if score > bs || (score == bs && id < bid) {
                self.best = self.entries.len() - 1;
            }
            true
        } else {
            false
        }
    }

    /// Ids within `beta` of the bound, ascending.
    pub fn finish(&self, beta: f64, window_max: Option<f32>) -> Vec<TokenId> {
        let bound = self.bound(window_max) - beta;
        let mut out: Vec<TokenId> = self
            .entries
            .iter()
            .filter(|(_, s)| *s as f64 >= bound)
            .map(|(id, _)| *id)
            .collect();
        out.sort_unstable();
        out
    }
}

/// Graph DIPR search from `start`.
///
/// `window_max` is the largest raw inner product over tokens the caller
/// attends to regardless of retrieval. When given, it raises both the
/// pruning bound and the final filter.
pub fn diprs(
    index: &GraphIndex,
    q: &[f32],
    start: TokenId,
    l0: usize,
    beta: f64,
    window_max: Option<f32>,
) -> Result<Vec<TokenId>> {
    let list = diprs_search(index, q, start, l0, beta, window_max, |node, out| {
        out.extend_from_slice(index.neighbors(node));
    })?;
    Ok(list.finish(beta, window_max))
}

/// Shared traversal. `expand` pushes the ids to offer for one node; the
/// traversal itself drops ids that were already visited.
pub(crate) fn diprs_search<F>(
    index: &GraphIndex,
    q: &[f32],
    start: TokenId,
    l0: usize,
    beta: f64,
    window_max: Option<f32>,
    mut expand: F,
) -> Result<CandidateList>
where
    F: FnMut(u32, &mut Vec<u32>),
{
    let n = index.len();
    if start.index() >= n {
        return Err(Error::TokenOutOfRange { id: start, len: n });
    }
    if l0 == 0 {
        return Err(Error::invalid("l0 must be >= 1"));
    }
    check_beta(beta)?;
    if q.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            actual: q.len(),
        });
    }
    let mut visited = vec![false; n];
    visited[start.index()] = true;
    let mut list = CandidateList::new(l0, start, dot(q, index.key(start.0)));
    let mut scratch = Vec::new();
    let mut cursor = 0;
    while cursor < list.capacity() {
        let current = list.entries[cursor].0;
        cursor += 1;
        scratch.clear();
        expand(current.0, &mut scratch);
        for &nb in &scratch {
            let slot = &mut visited[nb as usize];
            if *slot {
                continue;
            }
            *slot = true;
            let s = dot(q, index.key(nb));
            list.try_append(TokenId(nb), s, beta, window_max);
        }
    }
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::GraphIndex;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn keyed(rows: &[&[f32]]) -> Vec<(TokenId, Vec<f32>)> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| (TokenId::from(i), r.to_vec()))
            .collect()
    }

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn alpha_to_beta_examples() {
        assert_eq!(alpha_to_beta(1.0, 7).unwrap(), 0.0);
        assert!((alpha_to_beta((-2.0f64).exp(), 64).unwrap() - 16.0).abs() < 1e-12);
        // mpmath at 30 digits: -sqrt(128) * ln(0.5) = 7.84206514774837753...
        assert!((alpha_to_beta(0.5, 128).unwrap() - 7.842_065_147_748_377).abs() < 1e-6);
        assert!(alpha_to_beta(0.0, 4).is_err());
        assert!(alpha_to_beta(1.5, 4).is_err());
        assert!(alpha_to_beta(-0.1, 4).is_err());
    }

    #[test]
    fn threshold_round_trips() {
        let t = CriticalityThreshold::from_alpha(0.25, 64).unwrap();
        let u = CriticalityThreshold::from_beta(t.beta, 64).unwrap();
        assert!((u.alpha - 0.25).abs() < 1e-12);
        assert!(CriticalityThreshold::from_beta(-1.0, 4).is_err());
    }

    #[test]
    fn critical_by_attention() {
        assert!(is_critical_by_attention(0.4, 0.4, 0.9));
        assert!(!is_critical_by_attention(0.1, 0.4, 0.5));
        assert!(is_critical_by_attention(0.2, 0.4, 0.5));
    }

    #[test]
    fn bruteforce_examples() {
        let k = keyed(&[&[3.0, 0.0], &[2.5, 0.0], &[0.0, 1.0]]);
        let q = [1.0f32, 0.0];
        assert_eq!(dipr_bruteforce(&q, &k, 0.0).unwrap(), ids(&[0]));
        assert_eq!(dipr_bruteforce(&q, &k, 1.0).unwrap(), ids(&[0, 1]));
        assert_eq!(dipr_bruteforce(&q, &k, 3.0).unwrap(), ids(&[0, 1, 2]));
        let empty: Vec<(TokenId, Vec<f32>)> = vec![];
        assert!(dipr_bruteforce(&q, &empty, 1.0).is_err());
        assert!(dipr_bruteforce(&q, &k, -1.0).is_err());
    }

    #[test]
    fn critical_sets_trivial_cases() {
        let one = keyed(&[&[0.3, 0.1]]);
        assert!(theorem1_check(&[1.0, 1.0], &one, 0.5).unwrap());
        let dup = keyed(&[&[1.0, 2.0], &[1.0, 2.0], &[0.5, 0.0], &[1.0, 2.0]]);
        for alpha in [1.0, 0.9, 0.3, 0.01] {
            assert!(theorem1_check(&[0.7, -0.2], &dup, alpha).unwrap());
        }
    }

    #[test]
    fn candidate_list_phases() {
        let mut c = CandidateList::new(2, TokenId(0), 1.0);
        // Growth phase: accepted regardless of score.
        assert!(c.try_append(TokenId(1), -10.0, 0.5, None));
        assert!(c.try_append(TokenId(2), -10.0, 0.5, None));
        assert_eq!(c.capacity(), 3);
        // Pruning phase.
        assert!(!c.try_append(TokenId(3), 0.4, 0.5, None));
        assert!(c.try_append(TokenId(4), 0.6, 0.5, None));
        assert!(c.try_append(TokenId(5), 2.0, 0.5, None));
        assert_eq!(c.best(), (TokenId(5), 2.0));
        assert!(!c.try_append(TokenId(6), 1.4, 0.5, None));
        assert!(!c.try_append(TokenId(7), 1.6, 0.5, Some(3.0)));
        assert_eq!(c.finish(0.5, None), ids(&[5]));
        assert!(c.finish(2.5, None).contains(&TokenId(0)));
    }

    #[test]
    fn candidate_list_ties_prefer_smaller_id() {
        let mut c = CandidateList::new(4, TokenId(3), 1.0);
        c.try_append(TokenId(1), 1.0, 0.0, None);
        assert_eq!(c.best().0, TokenId(1));
        c.try_append(TokenId(2), 1.0, 0.0, None);
        assert_eq!(c.best().0, TokenId(1));
    }

    fn complete_graph(rows: Vec<Vec<f32>>) -> GraphIndex {
        let n = rows.len();
        let dim = rows[0].len();
        let keys = Arc::new(Matrix::from_rows(dim, &rows).unwrap());
        let adj = (0..n as u32)
            .map(|i| (0..n as u32).filter(|&j| j != i).collect())
            .collect();
        GraphIndex::from_parts(keys, adj, TokenId(0), n.max(2) - 1).unwrap()
    }

    #[test]
    fn diprs_on_complete_graph_equals_bruteforce() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.random_range(1..24);
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            let g = complete_graph(rows.clone());
            let q: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let beta = rng.random_range(0.0..1.5);
            let start = TokenId(rng.random_range(0..n as u32));
            let got = diprs(&g, &q, start, 32, beta, None).unwrap();
            let keyed: Vec<_> = rows.into_iter().enumerate().map(|(i, r)| (TokenId::from(i), r)).collect();
            assert_eq!(got, dipr_bruteforce(&q, &keyed, beta).unwrap());
        }
    }

    #[test]
    fn diprs_rejects_bad_start() {
        let g = complete_graph(vec![vec![1.0], vec![2.0]]);
        assert!(matches!(
            diprs(&g, &[1.0], TokenId(5), 4, 0.0, None),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(diprs(&g, &[1.0], TokenId(0), 0, 0.0, None).is_err());
    }

    #[test]
    fn beta_zero_exhaustive_is_mips() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32 * 0.1, 1.0 - i as f32 * 0.05]).collect();
        let g = complete_graph(rows.clone());
        let q = [1.0f32, 0.2];
        let got = diprs(&g, &q, TokenId(0), 16, 0.0, None).unwrap();
        let best = (0..10)
            .max_by(|&a, &b| dot(&q, &rows[a]).total_cmp(&dot(&q, &rows[b])))
            .unwrap();
        assert_eq!(got, vec![TokenId::from(best)]);
    }

    fn keys_strategy() -> impl Strategy<Value = (Vec<f32>, Vec<Vec<f32>>)> {
        (1usize..8, 1usize..40).prop_flat_map(|(d, n)| {
            (
                prop::collection::vec(-3.0f32..3.0, d),
                prop::collection::vec(prop::collection::vec(-3.0f32..3.0, d), n),
            )
        })
    }

    proptest! {
        #[test]
        fn bruteforce_monotone_in_beta((q, rows) in keys_strategy(), b1 in 0.0f64..5.0, extra in 0.0f64..5.0) {
            let k: Vec<_> = rows.into_iter().enumerate().map(|(i, r)| (TokenId::from(i), r)).collect();
            let small = dipr_bruteforce(&q, &k, b1).unwrap();
            let large = dipr_bruteforce(&q, &k, b1 + extra).unwrap();
            prop_assert!(small.iter().all(|t| large.contains(t)));
        }

        #[test]
        fn bruteforce_ignores_key_order((q, rows) in keys_strategy(), beta in 0.0f64..5.0, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut k: Vec<_> = rows.into_iter().enumerate().map(|(i, r)| (TokenId::from(i), r)).collect();
            let a = dipr_bruteforce(&q, &k, beta).unwrap();
            k.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, dipr_bruteforce(&q, &k, beta).unwrap());
        }

        #[test]
        fn critical_sets_agree((q, rows) in keys_strategy(), alpha in 0.001f64..=1.0) {
            let k: Vec<_> = rows.into_iter().enumerate().map(|(i, r)| (TokenId::from(i), r)).collect();
            prop_assert!(theorem1_check(&q, &k, alpha).unwrap());
        }
    }
}
