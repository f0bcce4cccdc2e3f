//! DIPR search restricted to a reused prefix of a stored context.
//!
//! Tokens outside the prefix stay in the graph, so pruning them outright
//! would cut paths. Instead, when too few of a node's direct neighbors are
//! admitted, expansion also gathers the neighbors' neighbors; inadmissible
//! ids are dropped before the visited check and before any scoring.

use serde::{Deserialize, Serialize};

use crate::dipr::diprs_search;
use crate::error::{Error, Result};
use crate::index::GraphIndex;
use crate::vector::{l2_sq_fast, TokenId};

/// Admits token `t` iff `t < prefix_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefixPredicate {
    prefix_len: usize,
}

impl PrefixPredicate {
    pub fn new(prefix_len: usize, context_len: usize) -> Result<Self> {
        if prefix_len == 0 {
            return Err(Error::NoAdmittedNode);
        }
        if prefix_len > context_len {
            return Err(Error::invalid(format!(
                "prefix {prefix_len} longer than context {context_len}"
            )));
        }
        Ok(PrefixPredicate { prefix_len })
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    #[inline]
    pub fn admits(&self, t: u32) -> bool {
        (t as usize) < self.prefix_len
    }

    /// The admitted head of an ascending id list.
    #[inline]
    pub fn cut<'a>(&self, ascending: &'a [u32]) -> &'a [u32] {
        &ascending[..ascending.partition_point(|&t| self.admits(t))]
    }
}

/// When neighbors-of-neighbors are gathered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoHop {
    /// Only when the admitted fraction of the 1-hop list is below the value.
    Adaptive(f64),
    Always,
}

impl Default for TwoHop {
    fn default() -> Self {
        TwoHop::Adaptive(0.5)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FilterOptions {
    pub two_hop: TwoHop,
    pub window_max: Option<f32>,
}

/// Admitted node nearest the entry point among its 2-hop neighborhood;
/// token 0 if none.
fn remap_start(index: &GraphIndex, pred: &PrefixPredicate) -> TokenId {
    let entry = index.entry_point();
    if pred.admits(entry.0) {
        return entry;
    }
    let ke = index.key(entry.0);
    let mut best: Option<(f32, u32)> = None;
    let mut consider = |id: u32| {
        if pred.admits(id) {
            let d = l2_sq_fast(ke, index.key(id));
            if best.is_none_or(|(bd, bi)| d < bd || (d == bd && id < bi)) {
                best = Some((d, id));
            }
        }
    };
    for &a in index.neighbors(entry.0) {
        consider(a);
        for &b in index.neighbors(a) {
            consider(b);
        }
    }
    TokenId(best.map_or(0, |(_, id)| id))
}

pub fn filtered_diprs(
    index: &GraphIndex,
    q: &[f32],
    pred: &PrefixPredicate,
    l0: usize,
    beta: f64,
    opts: &FilterOptions,
) -> Result<Vec<TokenId>> {
    if pred.prefix_len() > index.len() {
        return Err(Error::invalid(format!(
            "prefix {} longer than index of {}",
            pred.prefix_len(),
            index.len()
        )));
    }
    let start = remap_start(index, pred);
    // Every offered id is marked visited, so a neighbor list already
    // offered once yields nothing new; `scanned` skips re-reading it.
    let mut scanned = vec![false; index.len()];
    let list = diprs_search(index, q, start, l0, beta, opts.window_max, |node, out| {
        let one_hop = index.neighbors(node);
        let admitted = pred.cut(one_hop).len();
        let expand_two = match opts.two_hop {
            TwoHop::Always => true,
            TwoHop::Adaptive(t) => !one_hop.is_empty() && (admitted as f64) < t * one_hop.len() as f64,
        };
        if !std::mem::replace(&mut scanned[node as usize], true) {
            out.extend_from_slice(pred.cut(one_hop));
        }
        if expand_two {
            for &a in one_hop {
                if !std::mem::replace(&mut scanned[a as usize], true) {
                    out.extend_from_slice(pred.cut(index.neighbors(a)));
                }
            }
        }
    })?;
    Ok(list.finish(beta, opts.window_max))
}
