//! Graph construction.
//!
//! With sampled queries the build runs in two stages. First every query's
//! exact `knn_k` nearest keys (by inner product) are found by brute force,
//! and keys retrieved by the same query become neighbor candidates of each
//! other; each key keeps the candidates it was co-retrieved with most often.
//! Second, the slots left free are filled, in both directions, with the
//! edges of an insertion-built graph over the keys alone, which links the
//! regions the queries hit and reaches keys no sampled query retrieved.
//! Without queries the insertion build is used on its own. Both paths
//! finish by repairing reachability from the entry point (the key nearest
//! the centroid).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{beam_search, reachable_from, GraphIndex, Visited};
use crate::error::{Error, Result};
use crate::vector::{dot_fast, l2_sq_fast, Matrix, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub max_degree: usize,
    pub knn_k: usize,
    pub enhance_ef: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            max_degree: 32,
            knn_k: 32,
            enhance_ef: 64,
        }
    }
}

impl GraphParams {
    fn validate(&self) -> Result<()> {
        if self.max_degree == 0 || self.knn_k == 0 || self.enhance_ef == 0 {
            return Err(Error::invalid(format!("graph parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Slots per node kept free for the connectivity stage.
    fn reserve(&self) -> usize {
        (self.max_degree / 4).max(1).min(self.max_degree)
    }
}

pub fn build_graph(keys: Arc<Matrix>, sampled_queries: &Matrix, params: &GraphParams) -> Result<GraphIndex> {
    params.validate()?;
    let n = keys.len();
    if n == 0 {
        return Err(Error::Empty("key list"));
    }
    if !sampled_queries.is_empty() && sampled_queries.dim() != keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            actual: sampled_queries.dim(),
        });
    }
    let entry = nearest_to_centroid(&keys);
    if n == 1 {
        return GraphIndex::from_parts(keys, vec![Vec::new()], TokenId(0), params.max_degree);
    }
    let mut adjacency = if sampled_queries.is_empty() {
        incremental(&keys, params)
    } else {
        let projected = project_knn(&keys, sampled_queries, params);
        enhance(&keys, projected, params)
    };
    repair_reachability(&keys, &mut adjacency, entry, params.max_degree);
    GraphIndex::from_parts(keys, adjacency, TokenId(entry), params.max_degree)
}

/// One graph for a whole query group: `ceil(sample_ratio · |list|)` queries
/// are sampled from each head's list and the union drives [`build_graph`].
pub fn build_shared_graph(
    group_keys: Arc<Matrix>,
    per_query_head_queries: &[Matrix],
    sample_ratio: f64,
    params: &GraphParams,
) -> Result<GraphIndex> {
    if !(sample_ratio > 0.0 && sample_ratio <= 1.0) {
        return Err(Error::invalid(format!("sample ratio must lie in (0, 1], got {sample_ratio}")));
    }
    let mut merged = Matrix::with_dim(group_keys.dim());
    for head in per_query_head_queries {
        if head.is_empty() {
            continue;
        }
        merged.extend_from(&sample_queries(head, sample_ratio))?;
    }
    build_graph(group_keys, &merged, params)
}

/// Evenly strided sample of `ceil(ratio · len)` rows.
pub fn sample_queries(queries: &Matrix, ratio: f64) -> Matrix {
    let len = queries.len();
    let count = ((ratio * len as f64).ceil() as usize).min(len);
    let mut out = Matrix::with_dim(queries.dim());
    for j in 0..count {
        let i = j * len / count;
        out.extend_from(&Matrix::from_flat(queries.dim(), queries.row(i).to_vec()).expect("finite row"))
            .expect("same dim");
    }
    out
}

fn nearest_to_centroid(keys: &Matrix) -> u32 {
    let d = keys.dim();
    let mut centroid = vec![0.0f64; d];
    for r in keys.rows() {
        for (c, x) in centroid.iter_mut().zip(r) {
            *c += *x as f64;
        }
    }
    let n = keys.len() as f64;
    let centroid: Vec<f32> = centroid.iter().map(|c| (c / n) as f32).collect();
    let mut best = (f32::INFINITY, 0u32);
    for (i, r) in keys.rows().enumerate() {
        let dist = l2_sq_fast(&centroid, r);
        if dist < best.0 {
            best = (dist, i as u32);
        }
    }
    best.1
}

fn exact_topk(keys: &Matrix, q: &[f32], k: usize) -> Vec<u32> {
    let mut scored: Vec<(f32, u32)> = keys.rows().enumerate().map(|(i, r)| (dot_fast(q, r), i as u32)).collect();
    let cmp = |a: &(f32, u32), b: &(f32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Stage one: exact query-to-key kNN, projected onto key-key edges.
fn project_knn(keys: &Matrix, queries: &Matrix, params: &GraphParams) -> Vec<Vec<u32>> {
    let n = keys.len();
    let k = params.knn_k.min(n);
    let lists: Vec<Vec<u32>> = (0..queries.len())
        .into_par_iter()
        .map(|i| exact_topk(keys, queries.row(i), k))
        .collect();

    let mut co: Vec<Vec<u32>> = vec![Vec::new(); n];
    for list in &lists {
        for &a in list {
            let slot = &mut co[a as usize];
            slot.extend(list.iter().copied().filter(|&b| b != a));
        }
    }
    drop(lists);

    let keep = params.max_degree - params.reserve();
    co.into_par_iter()
        .enumerate()
        .map(|(a, mut cands)| {
            cands.sort_unstable();
            let mut counted: Vec<(u32, u32, f32)> = Vec::new();
            for chunk in cands.chunk_by(|x, y| x == y) {
                let b = chunk[0];
                counted.push((chunk.len() as u32, b, l2_sq_fast(keys.row(a), keys.row(b as usize))));
            }
            counted.sort_unstable_by(|x, y| y.0.cmp(&x.0).then(x.2.total_cmp(&y.2)).then(x.1.cmp(&y.1)));
            counted.into_iter().take(keep).map(|(_, b, _)| b).collect()
        })
        .collect()
}

/// Stage two: give every key up to `reserve` edges from an insertion-built
/// navigable graph over the keys, in both directions. Query-projected
/// edges stay inside the regions sampled queries hit; these edges connect
/// the regions, including keys no sampled query retrieved.
fn enhance(keys: &Matrix, mut adjacency: Vec<Vec<u32>>, params: &GraphParams) -> Vec<Vec<u32>> {
    let reserve = params.reserve();
    let nav = incremental(
        keys,
        &GraphParams {
            max_degree: 2 * reserve,
            ..*params
        },
    );
    for (u, links) in nav.into_iter().enumerate() {
        let mut added = 0;
        for v in links {
            if added == reserve {
                break;
            }
            let list = &mut adjacency[u];
            if list.len() >= params.max_degree || list.contains(&v) {
                continue;
            }
            list.push(v);
            added += 1;
            let back = &mut adjacency[v as usize];
            if back.len() < params.max_degree && !back.contains(&(u as u32)) {
                back.push(u as u32);
            }
        }
    }
    adjacency
}

/// Insertion build used when no queries are available.
fn incremental(keys: &Matrix, params: &GraphParams) -> Vec<Vec<u32>> {
    let n = keys.len();
    let links = (params.max_degree / 2).max(1);
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut visited = Visited::new(n);
    for i in 1..n as u32 {
        let ki = keys.row(i as usize);
        let found = beam_search(&adjacency, &[0], params.enhance_ef, &mut visited, |v| {
            -l2_sq_fast(ki, keys.row(v as usize))
        });
        for (v, _) in found.into_iter().filter(|&(v, _)| v != i).take(links) {
            adjacency[i as usize].push(v);
            let back = &mut adjacency[v as usize];
            back.push(i);
            if back.len() > params.max_degree {
                let kv = keys.row(v as usize);
                back.sort_by(|a, b| {
                    l2_sq_fast(kv, keys.row(*a as usize))
                        .total_cmp(&l2_sq_fast(kv, keys.row(*b as usize)))
                        .then(a.cmp(b))
                });
                back.truncate(params.max_degree);
            }
        }
    }
    adjacency
}

/// Links every node unreachable from `entry` to its nearest reachable node.
pub(crate) fn repair_reachability(keys: &Matrix, adjacency: &mut [Vec<u32>], entry: u32, max_degree: usize) {
    let n = adjacency.len();
    let mut reach = reachable_from(adjacency, entry);
    let mut u = 0;
    while u < n {
        if reach[u] {
            u += 1;
            continue;
        }
        let ku = keys.row(u);
        let nearest = |need_room: bool, adjacency: &[Vec<u32>], reach: &[bool]| {
            (0..n)
                .filter(|&r| reach[r] && (!need_room || adjacency[r].len() < max_degree))
                .min_by(|&a, &b| {
                    l2_sq_fast(ku, keys.row(a))
                        .total_cmp(&l2_sq_fast(ku, keys.row(b)))
                        .then(a.cmp(&b))
                })
        };
        let replaced = match nearest(true, adjacency, &reach) {
            Some(r) => {
                adjacency[r].push(u as u32);
                false
            }
            None => {
                let r = nearest(false, adjacency, &reach).expect("entry is reachable");
                adjacency[r].pop();
                adjacency[r].push(u as u32);
                true
            }
        };
        if replaced {
            reach = reachable_from(adjacency, entry);
            u = 0;
        } else {
            let sub = reachable_from(adjacency, u as u32);
            for (r, s) in reach.iter_mut().zip(sub) {
                *r |= s;
            }
        }
    }
}
