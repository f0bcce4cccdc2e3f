//! Byte layout of vector files. All integers are little-endian; every block
//! is `BLOCK_SIZE` bytes and zero padded.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOCK_SIZE: usize = 4096;
pub const MAGIC: [u8; 4] = *b"AVDB";
pub const VERSION: u32 = 1;
/// Stored in `entry_point` when the file carries no graph.
pub const NO_ENTRY: u32 = u32::MAX;

pub const DATA_HEADER: usize = 16;
pub const INDEX_HEADER: usize = 24;
pub const DIR_HEADER: usize = 16;
pub const DIR_ENTRY: usize = 16;
pub const DIR_CAPACITY: usize = (BLOCK_SIZE - DIR_HEADER) / DIR_ENTRY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
#[repr(u32)]
pub enum BlockKind {
    Header = 0,
    Data = 1,
    Index = 2,
    Directory = 3,
}

impl BlockKind {
    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(BlockKind::Header),
            1 => Some(BlockKind::Data),
            2 => Some(BlockKind::Index),
            3 => Some(BlockKind::Directory),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
#[repr(u16)]
pub enum VectorKind {
    Keys = 0,
    Values = 1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementWidth {
    F16,
    #[default]
    F32,
}

impl ElementWidth {
    pub fn bits(self) -> u16 {
        match self {
            ElementWidth::F16 => 16,
            ElementWidth::F32 => 32,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    fn from_bits(bits: u16) -> Option<Self> {
        match bits {
            16 => Some(ElementWidth::F16),
            32 => Some(ElementWidth::F32),
            _ => None,
        }
    }
}

/// Contents of block 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FileHeader {
    pub dim: u32,
    pub n_vectors: u64,
    pub width: ElementWidth,
    pub kind: VectorKind,
    pub max_degree: u32,
    pub entry_point: u32,
    pub layer: u32,
    pub kv_head: u32,
    pub directory_head: u64,
    pub n_blocks: u64,
    pub n_index_nodes: u64,
}

impl FileHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; BLOCK_SIZE];
        b[0..4].copy_from_slice(&MAGIC);
        put_u32(&mut b, 4, VERSION);
        put_u32(&mut b, 8, BLOCK_SIZE as u32);
        put_u32(&mut b, 12, self.dim);
        put_u64(&mut b, 16, self.n_vectors);
        put_u16(&mut b, 24, self.width.bits());
        put_u16(&mut b, 26, self.kind as u16);
        put_u32(&mut b, 28, self.max_degree);
        put_u32(&mut b, 32, self.entry_point);
        put_u32(&mut b, 36, self.layer);
        put_u32(&mut b, 40, self.kv_head);
        put_u64(&mut b, 48, self.directory_head);
        put_u64(&mut b, 56, self.n_blocks);
        put_u64(&mut b, 64, self.n_index_nodes);
        b
    }

    pub fn decode(b: &[u8]) -> std::result::Result<Self, String> {
        if b.len() < BLOCK_SIZE {
            return Err(format!("header block has {} bytes", b.len()));
        }
        if b[0..4] != MAGIC {
            return Err("bad magic".into());
        }
        let version = get_u32(b, 4);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let bs = get_u32(b, 8);
        if bs as usize != BLOCK_SIZE {
            return Err(format!("unsupported block size {bs}"));
        }
        let bits = get_u16(b, 24);
        let width = ElementWidth::from_bits(bits).ok_or_else(|| format!("unsupported element width {bits}"))?;
        let kind = match get_u16(b, 26) {
            0 => VectorKind::Keys,
            1 => VectorKind::Values,
            k => return Err(format!("unknown vector kind {k}")),
        };
        let dim = get_u32(b, 12);
        if dim == 0 {
            return Err("zero dimension".into());
        }
        Ok(FileHeader {
            dim,
            n_vectors: get_u64(b, 16),
            width,
            kind,
            max_degree: get_u32(b, 28),
            entry_point: get_u32(b, 32),
            layer: get_u32(b, 36),
            kv_head: get_u32(b, 40),
            directory_head: get_u64(b, 48),
            n_blocks: get_u64(b, 56),
            n_index_nodes: get_u64(b, 64),
        })
    }

    pub fn vector_bytes(&self) -> usize {
        self.dim as usize * self.width.bytes()
    }
}

/// Vectors per data block: the largest `c` with
/// `16 + ceil(c / 8) + c · vector_bytes <= BLOCK_SIZE`.
pub fn data_capacity(vector_bytes: usize) -> usize {
    let room = BLOCK_SIZE - DATA_HEADER;
    let mut c = (room * 8) / (8 * vector_bytes + 1);
    while c > 0 && c.div_ceil(8) + c * vector_bytes > room {
        c -= 1;
    }
    c
}

pub fn bitmap_len(capacity: usize) -> usize {
    capacity.div_ceil(8)
}

/// Graph records per index block.
pub fn index_capacity(max_degree: usize) -> usize {
    (BLOCK_SIZE - INDEX_HEADER) / (4 * (1 + max_degree))
}

pub fn encode_elements(v: &[f32], width: ElementWidth, out: &mut Vec<u8>) -> Result<()> {
    match width {
        ElementWidth::F32 => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        ElementWidth::F16 => {
            for (i, x) in v.iter().enumerate() {
                let h = f16::from_f32(*x);
                if h.is_infinite() && x.is_finite() {
                    return Err(Error::invalid(format!(
                        "element {i} = {x} overflows half precision"
                    )));
                }
                out.extend_from_slice(&h.to_bits().to_le_bytes());
            }
        }
    }
    Ok(())
}

pub fn decode_elements(b: &[u8], width: ElementWidth, out: &mut Vec<f32>) {
    match width {
        ElementWidth::F32 => out.extend(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()))),
        ElementWidth::F16 => out.extend(
            b.chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().unwrap())).to_f32()),
        ),
    }
}

/// Data block: `[tag=1, count, first_id]`, tombstone bitmap, payload.
pub fn encode_data_block(first_id: u64, payload: &[u8], count: usize, capacity: usize) -> Vec<u8> {
    let mut b = vec![0u8; BLOCK_SIZE];
    put_u32(&mut b, 0, BlockKind::Data as u32);
    put_u32(&mut b, 4, count as u32);
    put_u64(&mut b, 8, first_id);
    let start = DATA_HEADER + bitmap_len(capacity);
    b[start..start + payload.len()].copy_from_slice(payload);
    b
}

/// Index block: `[tag=2, count, first_node, next_block]` then `count`
/// records of `degree` followed by `max_degree` ids (unused slots zero).
pub fn encode_index_block(first_node: u64, next_block: u64, lists: &[Vec<u32>], max_degree: usize) -> Vec<u8> {
    let mut b = vec![0u8; BLOCK_SIZE];
    put_u32(&mut b, 0, BlockKind::Index as u32);
    put_u32(&mut b, 4, lists.len() as u32);
    put_u64(&mut b, 8, first_node);
    put_u64(&mut b, 16, next_block);
    let rec = 4 * (1 + max_degree);
    for (i, list) in lists.iter().enumerate() {
        let at = INDEX_HEADER + i * rec;
        put_u32(&mut b, at, list.len() as u32);
        for (j, &v) in list.iter().enumerate() {
            put_u32(&mut b, at + 4 + 4 * j, v);
        }
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DirEntry {
    pub block: u32,
    pub kind: BlockKind,
    pub offset: u64,
}

/// Directory block: `[tag=3, count, next]` then `(block u32, kind u32,
/// offset u64)` entries.
pub fn encode_dir_block(entries: &[DirEntry], next: u64) -> Vec<u8> {
    let mut b = vec![0u8; BLOCK_SIZE];
    put_u32(&mut b, 0, BlockKind::Directory as u32);
    put_u32(&mut b, 4, entries.len() as u32);
    put_u64(&mut b, 8, next);
    for (i, e) in entries.iter().enumerate() {
        let at = DIR_HEADER + i * DIR_ENTRY;
        put_u32(&mut b, at, e.block);
        put_u32(&mut b, at + 4, e.kind as u32);
        put_u64(&mut b, at + 8, e.offset);
    }
    b
}

pub fn decode_dir_block(b: &[u8]) -> std::result::Result<(Vec<DirEntry>, u64), String> {
    if get_u32(b, 0) != BlockKind::Directory as u32 {
        return Err("expected a directory block".into());
    }
    let count = get_u32(b, 4) as usize;
    if count > DIR_CAPACITY {
        return Err(format!("directory block claims {count} entries"));
    }
    let next = get_u64(b, 8);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let at = DIR_HEADER + i * DIR_ENTRY;
        let kind = get_u32(b, at + 4);
        out.push(DirEntry {
            block: get_u32(b, at),
            kind: BlockKind::from_u32(kind).ok_or_else(|| format!("unknown block kind {kind}"))?,
            offset: get_u64(b, at + 8),
        });
    }
    Ok((out, next))
}

pub fn put_u16(b: &mut [u8], at: usize, v: u16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

pub fn put_u32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

pub fn put_u64(b: &mut [u8], at: usize, v: u64) {
    b[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

pub fn get_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

pub fn get_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn get_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}
