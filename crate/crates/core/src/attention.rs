//! Single-head attention kernels.
//!
//! Scores are `q·k/√d`; softmax subtracts the running maximum, and weights
//! that underflow `exp` to zero are simply dropped. [`PartialAttention`] is
//! the mergeable online-softmax state used to combine attention computed
//! separately over disjoint token sets (e.g. retrieved base tokens and the
//! session window).

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::vector::{dot, TokenId, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub o: Vector,
}

#[derive(Clone, Debug)]
struct PartialState {
    m: f64,
    l: f64,
    acc: Vec<f64>,
}

/// Running `(max, normalizer, weighted sum)` over the tokens absorbed so far.
///
/// The empty partial is the identity for [`PartialAttention::merge`].
#[derive(Clone, Debug)]
pub struct PartialAttention {
    dim: usize,
    state: Option<PartialState>,
}

impl PartialAttention {
    pub fn new(dim: usize) -> Self {
        PartialAttention { dim, state: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_none()
    }

    /// Largest scaled score absorbed so far.
    pub fn max_score(&self) -> Option<f64> {
        self.state.as_ref().map(|s| s.m)
    }

    pub fn normalizer(&self) -> Option<f64> {
        self.state.as_ref().map(|s| s.l)
    }

    fn check(&self, q: &[f32], k: &[f32], v: &[f32]) -> Result<()> {
        for len in [q.len(), k.len(), v.len()] {
            if len != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: len,
                });
            }
        }
        Ok(())
    }

    /// Absorbs one token with the online-softmax update.
    pub fn absorb(&mut self, q: &[f32], k: &[f32], v: &[f32]) -> Result<()> {
        self.check(q, k, v)?;
        let z = score(q, k);
        match &mut self.state {
            None => {
                self.state = Some(PartialState {
                    m: z,
                    l: 1.0,
                    acc: v.iter().map(|&x| x as f64).collect(),
                });
            }
            Some(s) if z > s.m => {
                let scale = (s.m - z).exp();
                s.l = s.l * scale + 1.0;
                for (a, &x) in s.acc.iter_mut().zip(v) {
                    *a = *a * scale + x as f64;
                }
                s.m = z;
            }
            Some(s) => {
                let w = (z - s.m).exp();
                s.l += w;
                for (a, &x) in s.acc.iter_mut().zip(v) {
                    *a += w * x as f64;
                }
            }
        }
        Ok(())
    }

    /// Absorbs a batch with a two-pass softmax, then merges it in.
    pub fn absorb_batch<'a, I>(&mut self, q: &[f32], tokens: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a [f32], &'a [f32])>,
    {
        let mut scored = Vec::new();
        let mut m = f64::NEG_INFINITY;
        for (k, v) in tokens {
            self.check(q, k, v)?;
            let z = score(q, k);
            m = m.max(z);
            scored.push((z, v));
        }
        if scored.is_empty() {
            return Ok(());
        }
        let mut l = 0.0;
        let mut acc = vec![0.0f64; self.dim];
        for (z, v) in scored {
            let w = (z - m).exp();
            l += w;
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += w * x as f64;
            }
        }
        let batch = PartialAttention {
            dim: self.dim,
            state: Some(PartialState { m, l, acc }),
        };
        let me = std::mem::replace(self, PartialAttention::new(self.dim));
        *self = me.merge(batch)?;
        Ok(())
    }

    pub fn merge(self, other: PartialAttention) -> Result<PartialAttention> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        let dim = self.dim;
        let state = match (self.state, other.state) {
            (None, s) | (s, None) => s,
            (Some(a), Some(b)) => {
                let m = a.m.max(b.m);
                let sa = (a.m - m).exp();
                let sb = (b.m - m).exp();
                let acc = a
                    .acc
                    .iter()
                    .zip(&b.acc)
                    .map(|(x, y)| x * sa + y * sb)
                    .collect();
                Some(PartialState {
                    m,
                    l: a.l * sa + b.l * sb,
                    acc,
                })
            }
        };
        Ok(PartialAttention { dim, state })
    }

    pub fn finalize(&self) -> Result<AttentionOutput> {
        let s = self.state.as_ref().ok_or(Error::EmptyPartial)?;
        let o = s.acc.iter().map(|a| (a / s.l) as f32).collect();
        Ok(AttentionOutput { o: Vector::new(o)? })
    }
}

#[inline]
fn score(q: &[f32], k: &[f32]) -> f64 {
    (dot(q, k) / (q.len() as f32).sqrt()) as f64
}

fn check_dims<K: AsRef<[f32]>>(q: &[f32], rows: &[K]) -> Result<()> {
    for r in rows {
        if r.as_ref().len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                actual: r.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// Exact softmax attention of `q` over all keys.
pub fn full_attention<K, V>(q: &[f32], keys: &[K], values: &[V]) -> Result<AttentionOutput>
where
    K: AsRef<[f32]>,
    V: AsRef<[f32]>,
{
    if keys.is_empty() {
        return Err(Error::Empty("key list"));
    }
    if keys.len() != values.len() {
        return Err(Error::LengthMismatch {
            what: "keys vs values",
            left: keys.len(),
            right: values.len(),
        });
    }
    check_dims(q, keys)?;
    check_dims(q, values)?;
    let z: Vec<f64> = keys.iter().map(|k| score(q, k.as_ref())).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut l = 0.0;
    let mut acc = vec![0.0f64; q.len()];
    for (zs, v) in z.iter().zip(values) {
        let w = (zs - m).exp();
        l += w;
        for (a, &x) in acc.iter_mut().zip(v.as_ref()) {
            *a += w * x as f64;
        }
    }
    let o = acc.iter().map(|a| (a / l) as f32).collect();
    Ok(AttentionOutput { o: Vector::new(o)? })
}

/// Attention restricted to the selected tokens, softmax renormalized over
/// the subset.
pub fn sparse_attention<K, V>(q: &[f32], selected: &[(TokenId, K, V)]) -> Result<AttentionOutput>
where
    K: AsRef<[f32]>,
    V: AsRef<[f32]>,
{
    if selected.is_empty() {
        return Err(Error::Empty("selection"));
    }
    let mut seen = HashSet::with_capacity(selected.len());
    for (id, _, _) in selected {
        if !seen.insert(*id) {
            return Err(Error::DuplicateToken(*id));
        }
    }
    let keys: Vec<&[f32]> = selected.iter().map(|(_, k, _)| k.as_ref()).collect();
    let values: Vec<&[f32]> = selected.iter().map(|(_, _, v)| v.as_ref()).collect();
    full_attention(q, &keys, &values)
}

/// Softmax weights of `q` over `keys`, in `f64`.
pub fn attention_weights<K: AsRef<[f32]>>(q: &[f32], keys: &[K]) -> Result<Vec<f64>> {
    check_dims(q, keys)?;
    let z: Vec<f64> = keys.iter().map(|k| score(q, k.as_ref())).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = z.iter().map(|zs| (zs - m).exp()).collect();
    let l: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= l);
    Ok(w)
}

/// Fraction of the total softmax mass held by `selected`.
///
/// Duplicate ids count once; an empty selection gives 0.
pub fn recovery_ratio<K: AsRef<[f32]>>(q: &[f32], all_keys: &[K], selected: &[TokenId]) -> Result<f64> {
    if selected.is_empty() || all_keys.is_empty() {
        return Ok(0.0);
    }
    let w = attention_weights(q, all_keys)?;
    let mut mask = vec![false; w.len()];
    for id in selected {
        if id.index() >= w.len() {
            return Err(Error::TokenOutOfRange {
                id: *id,
                len: w.len(),
            });
        }
        mask[id.index()] = true;
    }
    let r: f64 = w.iter().zip(&mask).filter(|(_, m)| **m).map(|(x, _)| x).sum();
    Ok(r.min(1.0))
}

/// Fewest tokens whose softmax mass reaches `target`: the heaviest first.
pub fn tokens_for_recovery<K: AsRef<[f32]>>(q: &[f32], keys: &[K], target: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::invalid(format!("recovery target {target} outside [0, 1]")));
    }
    if keys.is_empty() {
        return Err(Error::Empty("key list"));
    }
    let mut w = attention_weights(q, keys)?;
    w.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut mass = 0.0;
    for (i, x) in w.iter().enumerate() {
        mass += x;
        // Guards against a sum that rounds just below 1.
        if mass >= target - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(w.len())
}
