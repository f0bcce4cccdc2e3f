//! Block-structured vector files and the buffer pool that serves them.
//!
//! One file holds the vectors of one (layer, kv head, K or V) slot in
//! 4096-byte blocks: a header, data blocks with raw vectors, index blocks
//! with graph adjacency (linked in order), and a trailing directory chain.
//! The byte layout is documented in `docs/FORMAT.md`.

mod file;
pub mod format;
mod pool;

pub use file::{file_name, write_context_file, DataRun, FileMeta, GraphLayout, StoredGraph, VectorFile};
pub use format::{BlockKind, DirEntry, ElementWidth, FileHeader, VectorKind, BLOCK_SIZE};
pub use pool::{BlockKey, BlockSource, BufferPool, PinnedBlock, PoolStats, Tier};
