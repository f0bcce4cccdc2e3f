//! Index families: exhaustive flat scan, fine-grained proximity graph, and
//! coarse block index.

mod block;
mod build;
mod flat;
mod graph;

pub use block::{select_representatives, Block, BlockIndex, BlockParams};
pub use build::{build_graph, build_shared_graph, sample_queries, GraphParams};
pub use flat::FlatIndex;
pub use graph::GraphIndex;

