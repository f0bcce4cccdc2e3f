//! Retrieval and sparse attention over per-layer, per-head KV caches.
//!
//! The crate stores long contexts (prompt token ids plus K/V for every
//! layer and kv head), indexes their keys, and answers attention for new
//! decode steps by retrieving only the critical tokens of a stored prefix.
//!
//! * [`vector`]: embeddings, shapes and the inner-product kernels.
//! * [`attention`]: full, sparse and partial (mergeable) attention.
//! * [`dipr`]: criticality thresholds, exact DIPR and the graph search.
//! * [`index`]: flat, graph and block indexes.
//! * [`filter`]: prefix-restricted graph search for partial reuse.
//! * [`planner`]: per-layer query and index selection.
//! * [`store`]: the context database and decode sessions.
//! * [`vfs`]: block-structured vector files and the buffer pool.
//! * [`workload`] and [`bench`]: synthetic corpora and benchmark reports.

pub mod attention;
pub mod bench;
pub mod config;
pub mod dipr;
pub mod error;
pub mod filter;
pub mod index;
pub mod planner;
pub mod store;
pub mod vfs;
pub mod vector;
pub mod workload;

pub use error::{Error, Result};
pub use vector::{inner_product, scaled_score, HeadAddress, Matrix, ModelShape, TokenId, Vector, WindowConfig};
