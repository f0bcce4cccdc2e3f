use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::vector::{dot, Matrix, TokenId};

/// Proximity graph over the keys of one kv head.
///
/// Node `i` is token `i`. Neighbor lists hold valid ids in ascending order,
/// no self loops, no duplicates, at most `max_degree` entries, and every
/// node is reachable from `entry_point`. Ascending order makes a prefix
/// predicate cut each list at one point.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    keys: Arc<Matrix>,
    adjacency: Vec<Vec<u32>>,
    entry_point: TokenId,
    max_degree: usize,
}

impl GraphIndex {
    /// Assembles a graph, sorting each neighbor list, and checks every
    /// structural invariant.
    pub fn from_parts(
        keys: Arc<Matrix>,
        mut adjacency: Vec<Vec<u32>>,
        entry_point: TokenId,
        max_degree: usize,
    ) -> Result<Self> {
        adjacency.iter_mut().for_each(|l| l.sort_unstable());
        let g = GraphIndex {
            keys,
            adjacency,
            entry_point,
            max_degree,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.keys.len();
        if self.adjacency.len() != n {
            return Err(Error::LengthMismatch {
                what: "adjacency vs keys",
                left: self.adjacency.len(),
                right: n,
            });
        }
        if n == 0 {
            return Err(Error::Empty("graph"));
        }
        if self.entry_point.index() >= n {
            return Err(Error::TokenOutOfRange {
                id: self.entry_point,
                len: n,
            });
        }
        for (i, list) in self.adjacency.iter().enumerate() {
            if list.len() > self.max_degree {
                return Err(Error::invalid(format!(
                    "node {i} has degree {} > {}",
                    list.len(),
                    self.max_degree
                )));
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::invalid(format!("node {i} has duplicate neighbors")));
            }
            if let Some(&bad) = list.iter().find(|&&j| j as usize >= n || j as usize == i) {
                return Err(Error::invalid(format!("node {i} has invalid neighbor {bad}")));
            }
        }
        let unreachable = self.unreachable();
        if !unreachable.is_empty() {
            return Err(Error::invalid(format!(
                "{} nodes unreachable from entry point",
                unreachable.len()
            )));
        }
        Ok(())
    }

    /// Nodes not reachable from the entry point.
    pub fn unreachable(&self) -> Vec<u32> {
        let reach = reachable_from(&self.adjacency, self.entry_point.0);
        (0..self.adjacency.len() as u32)
            .filter(|&i| !reach[i as usize])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    #[inline]
    pub fn key(&self, id: u32) -> &[f32] {
        self.keys.row(id as usize)
    }

    #[inline]
    pub fn neighbors(&self, id: u32) -> &[u32] {
        &self.adjacency[id as usize]
    }

    pub fn keys(&self) -> &Arc<Matrix> {
        &self.keys
    }

    pub fn adjacency(&self) -> &[Vec<u32>] {
        &self.adjacency
    }

    pub fn entry_point(&self) -> TokenId {
        self.entry_point
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Bytes of graph structure, as a compressed sparse row layout would
    /// hold it. Key vectors belong to the context and are not counted.
    pub fn memory_bytes(&self) -> usize {
        self.edge_count() * std::mem::size_of::<u32>() + (self.len() + 1) * std::mem::size_of::<u64>()
    }

    /// Approximate top-k by inner product with a best-first beam of width
    /// `max(ef, k)` from the entry point.
    pub fn search_topk(&self, q: &[f32], k: usize, ef: usize) -> Result<Vec<TokenId>> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: q.len(),
            });
        }
        let mut visited = Visited::new(self.len());
        let found = beam_search(
            &self.adjacency,
            &[self.entry_point.0],
            ef.max(k),
            &mut visited,
            |i| dot(q, self.key(i)),
        );
        Ok(found.into_iter().take(k).map(|(i, _)| TokenId(i)).collect())
    }
}

pub(crate) fn reachable_from(adjacency: &[Vec<u32>], entry: u32) -> Vec<bool> {
    let mut seen = vec![false; adjacency.len()];
    let mut queue = VecDeque::new();
    seen[entry as usize] = true;
    queue.push_back(entry);
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u as usize] {
            if !seen[v as usize] {
                seen[v as usize] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

/// Generation-stamped visited marks, reusable across searches.
pub(crate) struct Visited {
    stamp: u32,
    marks: Vec<u32>,
}

impl Visited {
    pub(crate) fn new(n: usize) -> Self {
        Visited {
            stamp: 1,
            marks: vec![0; n],
        }
    }

    pub(crate) fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
    }

    /// Marks `i`; returns false if it was already marked.
    #[inline]
    pub(crate) fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.stamp {
            false
        } else {
            *m = self.stamp;
            true
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) struct Scored(pub f32, pub u32);

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Best-first search maximizing `score`; returns up to `ef` nodes, best
/// first (smaller id on ties). `visited` must be sized for the graph.
pub(crate) fn beam_search<F>(
    adjacency: &[Vec<u32>],
    seeds: &[u32],
    ef: usize,
    visited: &mut Visited,
    mut score: F,
) -> Vec<(u32, f32)>
where
    F: FnMut(u32) -> f32,
{
    visited.reset(adjacency.len());
    let mut frontier: BinaryHeap<Scored> = BinaryHeap::new();
    let mut best: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
    for &s in seeds {
        if visited.insert(s) {
            let sc = Scored(score(s), s);
            frontier.push(sc);
            best.push(std::cmp::Reverse(sc));
        }
    }
    while best.len() > ef {
        best.pop();
    }
    while let Some(cur) = frontier.pop() {
        if best.len() >= ef {
            if let Some(std::cmp::Reverse(worst)) = best.peek() {
                if cur < *worst {
                    break;
                }
            }
        }
        for &nb in &adjacency[cur.1 as usize] {
            if !visited.insert(nb) {
                continue;
            }
            let sc = Scored(score(nb), nb);
            let admit = best.len() < ef || best.peek().is_some_and(|w| sc > w.0);
            if admit {
                frontier.push(sc);
                best.push(std::cmp::Reverse(sc));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
    }
    let mut out: Vec<(u32, f32)> = best.into_iter().map(|r| (r.0 .1, r.0 .0)).collect();
    out.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}
