//! Rule-based choice of (query type, index type) per layer.
//!
//! Short contexts get full attention. Otherwise a coarse block index with
//! top-k is used when its residency fits the memory budget; failing that,
//! DIPR runs over a flat scan for the designated first layers and over the
//! graph index elsewhere. A partially reused prefix wraps whichever sparse
//! query was picked in a prefix filter.

use serde::{Deserialize, Serialize};

use crate::vector::ModelShape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QueryKind {
    FullAttention,
    TopK { k: usize },
    Dipr { beta: f64 },
    FilteredTopK { k: usize, prefix_len: usize },
    FilteredDipr { beta: f64, prefix_len: usize },
}

impl QueryKind {
    pub fn prefix_len(&self) -> Option<usize> {
        match self {
            QueryKind::FilteredTopK { prefix_len, .. } | QueryKind::FilteredDipr { prefix_len, .. } => {
                Some(*prefix_len)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    None,
    Coarse,
    Fine,
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub query: QueryKind,
    pub index: IndexKind,
}

impl Plan {
    pub const FULL: Plan = Plan {
        query: QueryKind::FullAttention,
        index: IndexKind::None,
    };

    /// Whether the index type supports the query type.
    pub fn is_legal(&self) -> bool {
        use IndexKind as I;
        use QueryKind as Q;
        match self.query {
            Q::FullAttention => self.index == I::None,
            Q::TopK { .. } | Q::FilteredTopK { .. } => matches!(self.index, I::Coarse | I::Fine | I::Flat),
            Q::Dipr { .. } | Q::FilteredDipr { .. } => matches!(self.index, I::Fine | I::Flat),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanRequest {
    pub context_len: usize,
    pub reused_prefix_len: Option<usize>,
    pub memory_budget_bytes: u64,
    pub layer: usize,
    pub shape: ModelShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub short_context_threshold: usize,
    /// Layers served by a flat scan when the coarse index does not fit.
    pub flat_layers: Vec<usize>,
    /// Fraction of a context's K and V the coarse index keeps resident.
    pub resident_fraction: f64,
    pub memory_budget_bytes: u64,
    pub top_k: usize,
    pub dipr_beta: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            short_context_threshold: 1024,
            flat_layers: vec![0],
            resident_fraction: 1.0,
            memory_budget_bytes: 0,
            top_k: 1024,
            dipr_beta: 110.0,
        }
    }
}

impl PlannerConfig {
    /// Bytes the coarse index needs resident: `len · 2 · dim · 4 · fraction`.
    pub fn coarse_residency_bytes(&self, context_len: usize, dim: usize) -> f64 {
        context_len as f64 * 2.0 * dim as f64 * 4.0 * self.resident_fraction
    }
}

pub fn plan(req: &PlanRequest, cfg: &PlannerConfig) -> Plan {
    if req.context_len <= cfg.short_context_threshold {
        return Plan::FULL;
    }
    let prefix = req.reused_prefix_len.filter(|&p| p < req.context_len);
    let (query, index) = if req.memory_budget_bytes as f64 >= cfg.coarse_residency_bytes(req.context_len, req.shape.dim) {
        let q = match prefix {
            Some(prefix_len) => QueryKind::FilteredTopK {
                k: cfg.top_k,
                prefix_len,
            },
            None => QueryKind::TopK { k: cfg.top_k },
        };
        (q, IndexKind::Coarse)
    } else {
        let q = match prefix {
            Some(prefix_len) => QueryKind::FilteredDipr {
                beta: cfg.dipr_beta,
                prefix_len,
            },
            None => QueryKind::Dipr { beta: cfg.dipr_beta },
        };
        let index = if cfg.flat_layers.contains(&req.layer) {
            IndexKind::Flat
        } else {
            IndexKind::Fine
        };
        (q, index)
    };
    Plan { query, index }
}
