//! Engine configuration: one declarative document covering the window,
//! planner, index construction, search and storage parameters. Every
//! field has a default, so a partial document is valid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::TwoHop;
use crate::index::{BlockParams, GraphParams};
use crate::planner::PlannerConfig;
use crate::vector::WindowConfig;
use crate::vfs::ElementWidth;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub window: WindowConfig,
    pub planner: PlannerConfig,
    pub graph: GraphParams,
    pub block: BlockParams,
    pub search: SearchConfig,
    pub storage: StorageConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Candidate list size explored without pruning.
    pub l0: usize,
    pub two_hop: TwoHop,
    /// Fraction of each query head's sample used to build a shared graph.
    pub sample_ratio: f64,
    /// Beam width of graph top-k search.
    pub topk_ef: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            l0: 1024,
            two_hop: TwoHop::default(),
            sample_ratio: 0.4,
            topk_ef: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    pub element_width: ElementWidth,
    pub pool_blocks: usize,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            element_width: ElementWidth::F32,
            pool_blocks: 4096,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search.l0 == 0 {
            return Err(Error::invalid("search.l0 must be positive"));
        }
        if !(self.search.sample_ratio > 0.0 && self.search.sample_ratio <= 1.0) {
            return Err(Error::invalid("search.sample_ratio must lie in (0, 1]"));
        }
        if let TwoHop::Adaptive(t) = self.search.two_hop {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid("two_hop threshold must lie in [0, 1]"));
            }
        }
        if self.storage.pool_blocks == 0 {
            return Err(Error::invalid("storage.pool_blocks must be positive"));
        }
        if self.graph.max_degree == 0 || self.graph.knn_k == 0 || self.graph.enhance_ef == 0 {
            return Err(Error::invalid("graph parameters must be positive"));
        }
        if self.block.block_size == 0 || self.block.representatives == 0 || self.block.representatives > self.block.block_size {
            return Err(Error::invalid("block parameters must satisfy 0 < representatives <= block_size"));
        }
        if !(self.planner.resident_fraction >= 0.0) || !(self.planner.dipr_beta >= 0.0) || self.planner.top_k == 0 {
            return Err(Error::invalid("planner parameters out of range"));
        }
        Ok(())
    }
}
