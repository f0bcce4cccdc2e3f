use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{dot, norm, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockParams {
    pub block_size: usize,
    pub representatives: usize,
}

impl Default for BlockParams {
    fn default() -> Self {
        BlockParams {
            block_size: 128,
            representatives: 4,
        }
    }
}

/// A contiguous run of tokens and the vectors that stand in for it.
#[derive(Clone, Debug)]
pub struct Block {
    pub range: Range<u32>,
    pub representatives: Vec<Vector>,
}

impl Block {
    fn score(&self, q: &[f32]) -> f32 {
        self.representatives
            .iter()
            .map(|r| dot(q, r))
            .fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Coarse index: adjacent tokens grouped into fixed-size blocks.
///
/// A trailing block shorter than `representatives` keeps all of its keys.
#[derive(Clone, Debug)]
pub struct BlockIndex {
    params: BlockParams,
    blocks: Vec<Block>,
}

impl BlockIndex {
    pub fn build(keys: &Matrix, params: BlockParams) -> Result<Self> {
        if params.block_size == 0 || params.representatives == 0 {
            return Err(Error::invalid(format!("block parameters must be positive: {params:?}")));
        }
        if params.representatives > params.block_size {
            return Err(Error::invalid("more representatives than block size"));
        }
        let n = keys.len();
        let mut blocks = Vec::with_capacity(n.div_ceil(params.block_size));
        let mut start = 0;
        while start < n {
            let end = (start + params.block_size).min(n);
            let rows: Vec<&[f32]> = (start..end).map(|i| keys.row(i)).collect();
            let r = params.representatives.min(rows.len());
            blocks.push(Block {
                range: start as u32..end as u32,
                representatives: select_representatives(&rows, r)?,
            });
            start = end;
        }
        Ok(BlockIndex { params, blocks })
    }

    pub fn params(&self) -> BlockParams {
        self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn memory_bytes(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.representatives.iter().map(|r| r.dim() * 4).sum::<usize>() + 8)
            .sum()
    }

    /// The `k_blocks` blocks whose best representative scores highest.
    pub fn topk(&self, q: &[f32], k_blocks: usize) -> Result<Vec<Range<u32>>> {
        self.topk_prefix(q, k_blocks, u32::MAX as usize)
    }

    /// Like [`BlockIndex::topk`] but only over tokens `< prefix_len`; a block
    /// straddling the prefix boundary is clipped to it.
    pub fn topk_prefix(&self, q: &[f32], k_blocks: usize, prefix_len: usize) -> Result<Vec<Range<u32>>> {
        let eligible: Vec<&Block> = self
            .blocks
            .iter()
            .filter(|b| (b.range.start as usize) < prefix_len)
            .collect();
        if k_blocks > eligible.len() {
            return Err(Error::invalid(format!(
                "k_blocks={k_blocks} exceeds {} blocks",
                eligible.len()
            )));
        }
        if let Some(b) = eligible.first() {
            let d = b.representatives[0].dim();
            if d != q.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: q.len(),
                });
            }
        }
        let mut scored: Vec<(f32, &Block)> = eligible.into_iter().map(|b| (b.score(q), b)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.range.start.cmp(&b.1.range.start)));
        Ok(scored
            .into_iter()
            .take(k_blocks)
            .map(|(_, b)| b.range.start..b.range.end.min(prefix_len as u32))
            .collect())
    }
}

/// The `r` keys with the largest L2 norms, largest first, earlier position
/// on ties.
pub fn select_representatives<K: AsRef<[f32]>>(block_keys: &[K], r: usize) -> Result<Vec<Vector>> {
    if r > block_keys.len() {
        return Err(Error::invalid(format!(
            "{r} representatives from a block of {}",
            block_keys.len()
        )));
    }
    let mut order: Vec<(f32, usize)> = block_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (norm(k.as_ref()), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order
        .into_iter()
        .take(r)
        .map(|(_, i)| Vector::from_slice(block_keys[i].as_ref()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::FlatIndex;
    use crate::vector::TokenId;
    use std::sync::Arc;

    #[test]
    fn representatives_by_norm() {
        let keys = [vec![1.0f32, 0.0], vec![0.0, 3.0], vec![2.0, 0.0]];
        let r = select_representatives(&keys, 1).unwrap();
        assert_eq!(r[0].as_slice(), &[0.0, 3.0]);
        assert_eq!(select_representatives(&keys, 3).unwrap().len(), 3);
        assert!(select_representatives(&keys, 4).is_err());
        let again = select_representatives(&keys, 2).unwrap();
        assert_eq!(again, select_representatives(&keys, 2).unwrap());
        // Ties keep earlier positions.
        let tie = [vec![1.0f32], vec![-1.0], vec![1.0]];
        assert_eq!(select_representatives(&tie, 1).unwrap()[0].as_slice(), &[1.0]);
    }

    #[test]
    fn block_topk_examples() {
        let one = Matrix::from_rows(2, &[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
        let idx = BlockIndex::build(&one, BlockParams { block_size: 2, representatives: 1 }).unwrap();
        assert_eq!(idx.topk(&[1.0, 0.0], 1).unwrap(), vec![0..2]);

        let two = Matrix::from_rows(2, &[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
        let idx = BlockIndex::build(&two, BlockParams { block_size: 1, representatives: 1 }).unwrap();
        assert_eq!(idx.topk(&[1.0, 0.0], 1).unwrap(), vec![0..1]);
        assert!(idx.topk(&[1.0, 0.0], 3).is_err());

        // Four blocks of two keys, one representative each (the larger norm):
        // reps (0,2), (3,0), (1,1), (-5,0); q=(1,1) scores 2, 3, 2, -5.
        let rows = [
            vec![0.0f32, 2.0], vec![0.5, 0.5],
            vec![3.0, 0.0], vec![1.0, 0.0],
            vec![1.0, 1.0], vec![0.1, 0.0],
            vec![-5.0, 0.0], vec![0.0, 0.0],
        ];
        let m = Matrix::from_rows(2, &rows).unwrap();
        let idx = BlockIndex::build(&m, BlockParams { block_size: 2, representatives: 1 }).unwrap();
        assert_eq!(idx.topk(&[1.0, 1.0], 4).unwrap(), vec![2..4, 0..2, 4..6, 6..8]);
        assert_eq!(idx.topk_prefix(&[1.0, 1.0], 2, 3).unwrap(), vec![2..3, 0..2]);
    }

    #[test]
    fn unit_blocks_match_flat_topk() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f32>> = (0..64).map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let m = Matrix::from_rows(4, &rows).unwrap();
        let blocks = BlockIndex::build(&m, BlockParams { block_size: 1, representatives: 1 }).unwrap();
        let flat = FlatIndex::new(Arc::new(m));
        for _ in 0..10 {
            let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let b: Vec<TokenId> = blocks.topk(&q, 7).unwrap().into_iter().map(|r| TokenId(r.start)).collect();
            assert_eq!(b, flat.topk(&q, 7).unwrap());
        }
    }

    #[test]
    fn blocks_partition_tokens() {
        let m = Matrix::from_flat(1, (0..10).map(|i| i as f32).collect()).unwrap();
        let idx = BlockIndex::build(&m, BlockParams { block_size: 4, representatives: 3 }).unwrap();
        let ranges: Vec<_> = idx.blocks().iter().map(|b| b.range.clone()).collect();
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
        assert_eq!(idx.blocks()[2].representatives.len(), 2);
    }
}
