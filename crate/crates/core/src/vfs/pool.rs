//! Block cache shared by all open vector files.
//!
//! Frames are keyed by (file, block). Data blocks are the first victims:
//! the least recently used unpinned data frame is evicted, and an index
//! (or header/directory) frame only when no unpinned data frame remains.
//! File reads happen outside the lock, so misses on distinct blocks
//! proceed in parallel; the lock covers only map bookkeeping.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use super::format::BlockKind;
use crate::error::{Error, Result};

/// Anything that can serve raw blocks to the pool.
pub trait BlockSource {
    /// Identity of the file, unique among live sources.
    fn source_id(&self) -> u64;
    fn block_kind(&self, block: u64) -> Result<BlockKind>;
    fn read_raw(&self, block: u64) -> Result<Vec<u8>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub file: u64,
    pub block: u64,
}

/// Eviction class of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    Data,
    Index,
}

impl From<BlockKind> for Tier {
    fn from(k: BlockKind) -> Self {
        match k {
            BlockKind::Data => Tier::Data,
            BlockKind::Index | BlockKind::Header | BlockKind::Directory => Tier::Index,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub reads: u64,
    pub hits: u64,
    pub evictions: u64,
}

struct Frame {
    data: Arc<[u8]>,
    tier: Tier,
    pins: u32,
    last_use: u64,
    generation: u64,
}

#[derive(Default)]
struct State {
    frames: HashMap<BlockKey, Frame>,
    tick: u64,
    generation: u64,
}

impl State {
    fn touch(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn victim(&self) -> Option<BlockKey> {
        let lru = |tier: Tier| {
            self.frames
                .iter()
                .filter(|(_, f)| f.pins == 0 && f.tier == tier)
                .min_by_key(|(k, f)| (f.last_use, **k))
                .map(|(k, _)| *k)
        };
        lru(Tier::Data).or_else(|| lru(Tier::Index))
    }
}

pub struct BufferPool {
    capacity: usize,
    state: Mutex<State>,
    reads: AtomicU64,
    hits: AtomicU64,
    evictions: AtomicU64,
}

/// A resident block, pinned until dropped.
pub struct PinnedBlock<'a> {
    pool: &'a BufferPool,
    key: BlockKey,
    generation: u64,
    data: Arc<[u8]>,
}

impl PinnedBlock<'_> {
    pub fn key(&self) -> BlockKey {
        self.key
    }

    /// The bytes, detached from the pin.
    pub fn shared(&self) -> Arc<[u8]> {
        self.data.clone()
    }
}

impl std::ops::Deref for PinnedBlock<'_> {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        &self.data
    }
}

impl Drop for PinnedBlock<'_> {
    fn drop(&mut self) {
        let mut st = self.pool.state.lock();
        if let Some(f) = st.frames.get_mut(&self.key) {
            if f.generation == self.generation {
                f.pins -= 1;
            }
        }
    }
}

impl BufferPool {
    pub fn new(capacity_blocks: usize) -> Result<Self> {
        if capacity_blocks == 0 {
            return Err(Error::invalid("buffer pool capacity must be positive"));
        }
        Ok(BufferPool {
            capacity: capacity_blocks,
            state: Mutex::new(State::default()),
            reads: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            reads: self.reads.load(Ordering::Relaxed),
            hits: self.hits.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
        }
    }

    pub fn resident(&self) -> Vec<BlockKey> {
        let mut keys: Vec<BlockKey> = self.state.lock().frames.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.state.lock().frames.contains_key(&key)
    }

    /// Returns the block pinned, reading it from `src` on a miss.
    pub fn get<S: BlockSource + ?Sized>(&self, src: &S, block: u64) -> Result<PinnedBlock<'_>> {
        let key = BlockKey {
            file: src.source_id(),
            block,
        };
        if let Some(p) = self.pin_resident(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(p);
        }
        let tier = Tier::from(src.block_kind(block)?);
        let bytes: Arc<[u8]> = src.read_raw(block)?.into();
        self.reads.fetch_add(1, Ordering::Relaxed);

        let mut st = self.state.lock();
        let now = st.touch();
        if let Some(f) = st.frames.get_mut(&key) {
            // Another reader loaded it meanwhile.
            f.pins += 1;
            f.last_use = now;
            return Ok(PinnedBlock {
                pool: self,
                key,
                generation: f.generation,
                data: f.data.clone(),
            });
        }
        if st.frames.len() >= self.capacity {
            let victim = st.victim().ok_or(Error::PoolExhausted(self.capacity))?;
            st.frames.remove(&victim);
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
        st.generation += 1;
        let generation = st.generation;
        st.frames.insert(
            key,
            Frame {
                data: bytes.clone(),
                tier,
                pins: 1,
                last_use: now,
                generation,
            },
        );
        Ok(PinnedBlock {
            pool: self,
            key,
            generation,
            data: bytes,
        })
    }

    fn pin_resident(&self, key: BlockKey) -> Option<PinnedBlock<'_>> {
        let mut st = self.state.lock();
        let now = st.touch();
        let f = st.frames.get_mut(&key)?;
        f.pins += 1;
        f.last_use = now;
        Some(PinnedBlock {
            pool: self,
            key,
            generation: f.generation,
            data: f.data.clone(),
        })
    }

    /// Drops a frame whose on-disk bytes changed. Outstanding pins keep
    /// their (old) bytes alive.
    pub fn invalidate(&self, key: BlockKey) {
        self.state.lock().frames.remove(&key);
    }

    /// Drops every frame of one file.
    pub fn invalidate_file(&self, file: u64) {
        self.state.lock().frames.retain(|k, _| k.file != file);
    }
}
