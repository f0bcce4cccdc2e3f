//! Vector types and the inner-product kernels every other module builds on.
//!
//! Elements are `f32` in memory. [`inner_product`] accumulates sequentially in
//! ascending index order, so results are bit-stable and symmetric. The
//! `*_fast` kernels split the sum over independent lanes and are only used
//! where a ranking is needed (index construction), never where a score is
//! compared against another code path.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty `f32` embedding.
#[derive(Clone, PartialEq)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyVector);
        }
        check_finite(&data)?;
        Ok(Vector(data))
    }

    pub fn from_slice(data: &[f32]) -> Result<Self> {
        Self::new(data.to_vec())
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn l2_norm(&self) -> f32 {
        norm(&self.0)
    }
}

impl Deref for Vector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl AsRef<[f32]> for Vector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl TryFrom<Vec<f32>> for Vector {
    type Error = Error;

    fn try_from(value: Vec<f32>) -> Result<Self> {
        Vector::new(value)
    }
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(position) => Err(Error::NonFinite {
            position,
            value: data[position],
        }),
        None => Ok(()),
    }
}

/// Dense row-major storage for a sequence of same-dimension vectors.
///
/// This is how K and V sequences are held by indexes and contexts; rows are
/// addressed by [`TokenId`].
#[derive(Clone, PartialEq, Default)]
pub struct Matrix {
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn with_dim(dim: usize) -> Self {
        Matrix {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyVector);
        }
        if data.len() % dim != 0 {
            return Err(Error::LengthMismatch {
                what: "flat buffer is not a multiple of dim",
                left: data.len(),
                right: dim,
            });
        }
        check_finite(&data)?;
        Ok(Matrix { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut m = Matrix::with_dim(dim);
        m.data.reserve(dim * rows.len());
        for r in rows {
            m.push(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        check_finite(row)?;
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn extend_from(&mut self, other: &Matrix) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Copy of the first `n` rows.
    pub fn prefix(&self, n: usize) -> Matrix {
        Matrix {
            dim: self.dim,
            data: self.data[..n * self.dim].to_vec(),
        }
    }

    pub fn vector(&self, i: usize) -> Vector {
        Vector(self.row(i).to_vec())
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn memory_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.len(), self.dim)
    }
}

/// 0-based position of a token inside one context sequence.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl From<usize> for TokenId {
    fn from(v: usize) -> Self {
        TokenId(u32::try_from(v).expect("token id exceeds u32"))
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub dim: usize,
}

impl ModelShape {
    pub fn new(n_layers: usize, n_query_heads: usize, n_kv_heads: usize, dim: usize) -> Result<Self> {
        let s = ModelShape {
            n_layers,
            n_query_heads,
            n_kv_heads,
            dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_query_heads == 0 || self.n_kv_heads == 0 || self.dim == 0 {
            return Err(Error::InvalidShape(format!("all extents must be positive: {self:?}")));
        }
        if self.n_query_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidShape(format!(
                "{} query heads is not a multiple of {} kv heads",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads per kv head.
    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }

    /// Number of (layer, kv_head) slots.
    pub fn kv_slots(&self) -> usize {
        self.n_layers * self.n_kv_heads
    }

    pub fn slot(&self, layer: usize, kv_head: usize) -> usize {
        layer * self.n_kv_heads + kv_head
    }

    pub fn address(&self, layer: usize, query_head: usize) -> Result<HeadAddress> {
        if layer >= self.n_layers {
            return Err(Error::invalid(format!("layer {layer} >= {}", self.n_layers)));
        }
        if query_head >= self.n_query_heads {
            return Err(Error::invalid(format!(
                "query head {query_head} >= {}",
                self.n_query_heads
            )));
        }
        Ok(HeadAddress {
            layer,
            kv_head: self.kv_head_of(query_head),
            query_head,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HeadAddress {
    pub layer: usize,
    pub kv_head: usize,
    pub query_head: usize,
}

/// Initial and most recent tokens that are always attended to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub initial: usize,
    pub last: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            initial: 32,
            last: 32,
        }
    }
}

impl WindowConfig {
    pub fn covers(&self, len: usize) -> bool {
        self.initial + self.last >= len
    }

    pub fn contains(&self, id: TokenId, len: usize) -> bool {
        let i = id.index();
        i < len && (i < self.initial || i + self.last >= len)
    }

    /// Window token ids of a sequence of `len` tokens, ascending.
    pub fn ids(&self, len: usize) -> Vec<TokenId> {
        if self.covers(len) {
            return (0..len).map(TokenId::from).collect();
        }
        (0..self.initial)
            .chain(len - self.last..len)
            .map(TokenId::from)
            .collect()
    }
}

/// Σ a[t]·b[t] accumulated in `f32`, index-ascending.
pub fn inner_product(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot(a, b))
}

/// `inner_product(q, k) / √d`.
pub fn scaled_score(q: &[f32], k: &[f32]) -> Result<f32> {
    let ip = inner_product(q, k)?;
    Ok(ip / (q.len() as f32).sqrt())
}

/// Unchecked sequential dot product. Callers guarantee equal lengths.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

const LANES: usize = 8;

/// Lane-split dot product. Not bit-compatible with [`dot`].
#[inline]
pub fn dot_fast(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f32>() + tail
}

/// Lane-split squared L2 distance.
#[inline]
pub fn l2_sq_fast(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    acc.iter().sum::<f32>() + tail
}

pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}
