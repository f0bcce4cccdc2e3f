use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::format::*;
use super::pool::{BlockKey, BlockSource, BufferPool};
use crate::error::{Error, Result};
use crate::vector::Matrix;

static NEXT_FILE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a vector file within a context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FileMeta {
    pub layer: u32,
    pub kv_head: u32,
    pub kind: VectorKind,
    pub width: ElementWidth,
}

/// Graph adjacency to serialize into index blocks.
#[derive(Clone, Copy, Debug)]
pub struct GraphLayout<'a> {
    pub adjacency: &'a [Vec<u32>],
    pub entry_point: u32,
    pub max_degree: usize,
}

/// Graph adjacency read back from a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredGraph {
    pub adjacency: Vec<Vec<u32>>,
    pub entry_point: u32,
    pub max_degree: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataRun {
    pub block: u64,
    pub first_id: u64,
    pub count: u32,
}

/// An open vector file. Reads go through the attached buffer pool when
/// there is one.
pub struct VectorFile {
    path: PathBuf,
    file: File,
    id: u64,
    header: FileHeader,
    directory: Vec<DirEntry>,
    runs: Vec<DataRun>,
    pool: Option<Arc<BufferPool>>,
}

impl std::fmt::Debug for VectorFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorFile")
            .field("path", &self.path)
            .field("header", &self.header)
            .finish_non_exhaustive()
    }
}

fn write_at(file: &File, path: &Path, block: u64, bytes: &[u8]) -> Result<()> {
    debug_assert_eq!(bytes.len(), BLOCK_SIZE);
    let offset = block * BLOCK_SIZE as u64;
    file.write_all_at(bytes, offset).map_err(|e| Error::io(path, offset, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Encodes `vectors` into data blocks numbered from `first_block`.
fn data_blocks(vectors: &Matrix, first_id: u64, first_block: u64, width: ElementWidth) -> Result<Vec<(u64, Vec<u8>)>> {
    let vb = vectors.dim() * width.bytes();
    let cap = data_capacity(vb);
    if cap == 0 {
        return Err(Error::invalid(format!("a {vb}-byte vector does not fit in a block")));
    }
    let mut out = Vec::new();
    let mut payload = Vec::with_capacity(cap * vb);
    let mut start = 0;
    while start < vectors.len() {
        let end = (start + cap).min(vectors.len());
        payload.clear();
        for i in start..end {
            encode_elements(vectors.row(i), width, &mut payload)?;
        }
        let block = first_block + out.len() as u64;
        out.push((block, encode_data_block(first_id + start as u64, &payload, end - start, cap)));
        start = end;
    }
    Ok(out)
}

fn directory_blocks(entries: &[DirEntry], first_block: u64) -> Vec<(u64, Vec<u8>)> {
    let chunks: Vec<&[DirEntry]> = if entries.is_empty() {
        vec![&[]]
    } else {
        entries.chunks(DIR_CAPACITY).collect()
    };
    let n = chunks.len() as u64;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let block = first_block + i as u64;
            let next = if (i as u64) + 1 < n { block + 1 } else { 0 };
            (block, encode_dir_block(c, next))
        })
        .collect()
}

fn entry(block: u64, kind: BlockKind) -> DirEntry {
    DirEntry {
        block: block as u32,
        kind,
        offset: block * BLOCK_SIZE as u64,
    }
}

impl VectorFile {
    /// Writes a new file, replacing any file at `path`.
    pub fn create(path: impl AsRef<Path>, meta: FileMeta, vectors: &Matrix, graph: Option<GraphLayout<'_>>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(g) = &graph {
            if g.adjacency.len() > vectors.len() {
                return Err(Error::LengthMismatch {
                    what: "graph nodes vs vectors",
                    left: g.adjacency.len(),
                    right: vectors.len(),
                });
            }
            if let Some(bad) = g.adjacency.iter().flatten().find(|&&v| v as usize >= vectors.len()) {
                return Err(Error::invalid(format!("graph references missing vector {bad}")));
            }
            if g.adjacency.iter().any(|l| l.len() > g.max_degree) {
                return Err(Error::invalid("graph list longer than max_degree"));
            }
            if index_capacity(g.max_degree) == 0 {
                return Err(Error::invalid(format!("max_degree {} too large for a block", g.max_degree)));
            }
        }
        let mut blocks: Vec<(u64, Vec<u8>)> = Vec::new();
        let mut entries = Vec::new();
        let data = data_blocks(vectors, 0, 1, meta.width)?;
        entries.extend(data.iter().map(|(b, _)| entry(*b, BlockKind::Data)));
        blocks.extend(data);

        let (mut max_degree, mut entry_point, mut n_index_nodes) = (0, NO_ENTRY, 0);
        if let Some(g) = graph.filter(|g| !g.adjacency.is_empty()) {
            let per = index_capacity(g.max_degree);
            let chunks: Vec<&[Vec<u32>]> = g.adjacency.chunks(per).collect();
            let first = blocks.len() as u64 + 1;
            for (i, c) in chunks.iter().enumerate() {
                let block = first + i as u64;
                let next = if i + 1 < chunks.len() { block + 1 } else { 0 };
                blocks.push((block, encode_index_block((i * per) as u64, next, c, g.max_degree)));
                entries.push(entry(block, BlockKind::Index));
            }
            max_degree = g.max_degree as u32;
            entry_point = g.entry_point;
            n_index_nodes = g.adjacency.len() as u64;
        }
        let dir_head = blocks.len() as u64 + 1;
        let dir = directory_blocks(&entries, dir_head);
        let n_blocks = dir_head + dir.len() as u64;
        blocks.extend(dir);

        let header = FileHeader {
            dim: vectors.dim() as u32,
            n_vectors: vectors.len() as u64,
            width: meta.width,
            kind: meta.kind,
            max_degree,
            entry_point,
            layer: meta.layer,
            kv_head: meta.kv_head,
            directory_head: dir_head,
            n_blocks,
            n_index_nodes,
        };
        {
            let file = File::create(path).map_err(|e| Error::io(path, 0, e))?;
            let mut bytes = Vec::with_capacity(n_blocks as usize * BLOCK_SIZE);
            bytes.extend_from_slice(&header.encode());
            for (_, b) in &blocks {
                bytes.extend_from_slice(b);
            }
            file.write_all_at(&bytes, 0).map_err(|e| Error::io(path, 0, e))?;
        }
        Self::open(path)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, 0, e))?;
        let mut block = vec![0u8; BLOCK_SIZE];
        file.read_exact_at(&mut block, 0).map_err(|e| Error::io(&path, 0, e))?;
        let header = FileHeader::decode(&block).map_err(|r| corrupt(&path, r))?;
        let len = file.metadata().map_err(|e| Error::io(&path, 0, e))?.len();
        if len != header.n_blocks * BLOCK_SIZE as u64 {
            return Err(corrupt(&path, format!("file has {len} bytes, header says {} blocks", header.n_blocks)));
        }
        let mut vf = VectorFile {
            path,
            file,
            id: NEXT_FILE_ID.fetch_add(1, Ordering::Relaxed),
            header,
            directory: Vec::new(),
            runs: Vec::new(),
            pool: None,
        };
        vf.load_directory()?;
        Ok(vf)
    }

    fn load_directory(&mut self) -> Result<()> {
        let mut entries = Vec::new();
        let mut next = self.header.directory_head;
        let mut hops = 0;
        while next != 0 {
            hops += 1;
            if next >= self.header.n_blocks || hops > self.header.n_blocks {
                return Err(corrupt(&self.path, format!("directory chain reaches block {next}")));
            }
            let b = self.read_raw(next)?;
            let (mut e, n) = decode_dir_block(&b).map_err(|r| corrupt(&self.path, r))?;
            entries.append(&mut e);
            next = n;
        }
        let mut runs = Vec::new();
        let mut expected_id = 0u64;
        let mut head = [0u8; DATA_HEADER];
        for e in &entries {
            if e.block as u64 >= self.header.n_blocks || e.block == 0 || e.offset != e.block as u64 * BLOCK_SIZE as u64 {
                return Err(corrupt(&self.path, format!("bad directory entry {e:?}")));
            }
            if e.kind == BlockKind::Data {
                self.file
                    .read_exact_at(&mut head, e.offset)
                    .map_err(|err| Error::io(&self.path, e.offset, err))?;
                let (tag, count, first) = (get_u32(&head, 0), get_u32(&head, 4), get_u64(&head, 8));
                if tag != BlockKind::Data as u32 || first != expected_id {
                    return Err(corrupt(&self.path, format!("data block {} out of sequence", e.block)));
                }
                expected_id += count as u64;
                runs.push(DataRun {
                    block: e.block as u64,
                    first_id: first,
                    count,
                });
            }
        }
        if expected_id != self.header.n_vectors {
            return Err(corrupt(
                &self.path,
                format!("data blocks hold {expected_id} vectors, header says {}", self.header.n_vectors),
            ));
        }
        self.directory = entries;
        self.runs = runs;
        Ok(())
    }

    /// Routes block reads through `pool`.
    pub fn with_pool(mut self, pool: Arc<BufferPool>) -> Self {
        self.pool = Some(pool);
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &FileHeader {
        &self.header
    }

    pub fn directory(&self) -> &[DirEntry] {
        &self.directory
    }

    pub fn data_runs(&self) -> &[DataRun] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.header.n_vectors as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.n_vectors == 0
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    /// One block's bytes, from the pool when attached.
    pub fn read_block(&self, block: u64) -> Result<Arc<[u8]>> {
        match &self.pool {
            Some(pool) => Ok(pool.get(self, block)?.shared()),
            None => Ok(self.read_raw(block)?.into()),
        }
    }

    fn run_of(&self, id: u64) -> Result<(&DataRun, usize)> {
        if id >= self.header.n_vectors {
            return Err(Error::TokenOutOfRange {
                id: crate::vector::TokenId(id as u32),
                len: self.len(),
            });
        }
        let i = self.runs.partition_point(|r| r.first_id + r.count as u64 <= id);
        let r = &self.runs[i];
        Ok((r, (id - r.first_id) as usize))
    }

    fn payload_start(&self) -> usize {
        DATA_HEADER + bitmap_len(data_capacity(self.header.vector_bytes()))
    }

    pub fn read_vectors(&self) -> Result<Matrix> {
        let vb = self.header.vector_bytes();
        let start = self.payload_start();
        let mut data = Vec::with_capacity(self.len() * self.dim());
        for r in &self.runs {
            let b = self.read_block(r.block)?;
            decode_elements(&b[start..start + r.count as usize * vb], self.header.width, &mut data);
        }
        Matrix::from_flat(self.dim(), data).map_err(|e| corrupt(&self.path, e.to_string()))
    }

    pub fn read_vector(&self, id: u64) -> Result<Vec<f32>> {
        let (r, slot) = self.run_of(id)?;
        let vb = self.header.vector_bytes();
        let at = self.payload_start() + slot * vb;
        let b = self.read_block(r.block)?;
        let mut out = Vec::with_capacity(self.dim());
        decode_elements(&b[at..at + vb], self.header.width, &mut out);
        Ok(out)
    }

    pub fn read_adjacency(&self) -> Result<Option<StoredGraph>> {
        let n = self.header.n_index_nodes as usize;
        if n == 0 {
            return Ok(None);
        }
        let md = self.header.max_degree as usize;
        let rec = 4 * (1 + md);
        let mut adjacency = Vec::with_capacity(n);
        let mut next = self
            .directory
            .iter()
            .find(|e| e.kind == BlockKind::Index)
            .map(|e| e.block as u64)
            .ok_or_else(|| corrupt(&self.path, "graph declared but no index block"))?;
        while next != 0 && adjacency.len() < n {
            let b = self.read_block(next)?;
            if get_u32(&b, 0) != BlockKind::Index as u32 || get_u64(&b, 8) != adjacency.len() as u64 {
                return Err(corrupt(&self.path, format!("index block {next} out of sequence")));
            }
            let count = get_u32(&b, 4) as usize;
            if count > index_capacity(md) {
                return Err(corrupt(&self.path, format!("index block {next} claims {count} records")));
            }
            for i in 0..count {
                let at = INDEX_HEADER + i * rec;
                let deg = get_u32(&b, at) as usize;
                if deg > md {
                    return Err(corrupt(&self.path, format!("node degree {deg} > {md}")));
                }
                let list: Vec<u32> = (0..deg).map(|j| get_u32(&b, at + 4 + 4 * j)).collect();
                if let Some(bad) = list.iter().find(|&&v| v as u64 >= self.header.n_vectors) {
                    return Err(corrupt(&self.path, format!("edge to missing vector {bad}")));
                }
                adjacency.push(list);
            }
            next = get_u64(&b, 16);
        }
        if adjacency.len() != n {
            return Err(corrupt(&self.path, format!("index chain holds {} of {n} nodes", adjacency.len())));
        }
        Ok(Some(StoredGraph {
            adjacency,
            entry_point: self.header.entry_point,
            max_degree: md,
        }))
    }

    fn writer(&self) -> Result<File> {
        OpenOptions::new()
            .write(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, 0, e))
    }

    /// Adds vectors after the existing ones. Existing data and index
    /// blocks are left untouched: new data blocks and a new directory go
    /// at the end of the file and only the header block is rewritten.
    pub fn append(&mut self, vectors: &Matrix) -> Result<()> {
        if vectors.is_empty() {
            return Ok(());
        }
        if vectors.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: vectors.dim(),
            });
        }
        let first_block = self.header.n_blocks;
        let data = data_blocks(vectors, self.header.n_vectors, first_block, self.header.width)?;
        let mut entries = self.directory.clone();
        entries.extend(data.iter().map(|(b, _)| entry(*b, BlockKind::Data)));
        let dir_head = first_block + data.len() as u64;
        let dir = directory_blocks(&entries, dir_head);
        let mut header = self.header;
        header.n_vectors += vectors.len() as u64;
        header.directory_head = dir_head;
        header.n_blocks = dir_head + dir.len() as u64;

        let w = self.writer()?;
        for (b, bytes) in data.iter().chain(dir.iter()) {
            write_at(&w, &self.path, *b, bytes)?;
        }
        write_at(&w, &self.path, 0, &header.encode())?;
        drop(w);
        if let Some(pool) = &self.pool {
            pool.invalidate(BlockKey { file: self.id, block: 0 });
        }
        self.header = header;
        self.load_directory()
    }

    /// Marks a vector deleted by setting its tombstone bit.
    pub fn delete(&mut self, id: u64) -> Result<()> {
        let (run, slot) = self.run_of(id)?;
        let block = run.block;
        let mut bytes = self.read_raw(block)?;
        bytes[DATA_HEADER + slot / 8] |= 1 << (slot % 8);
        let w = self.writer()?;
        write_at(&w, &self.path, block, &bytes)?;
        if let Some(pool) = &self.pool {
            pool.invalidate(BlockKey { file: self.id, block });
        }
        Ok(())
    }

    pub fn is_deleted(&self, id: u64) -> Result<bool> {
        let (run, slot) = self.run_of(id)?;
        let b = self.read_block(run.block)?;
        Ok(b[DATA_HEADER + slot / 8] & (1 << (slot % 8)) != 0)
    }

    pub fn deleted_ids(&self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for r in &self.runs {
            let b = self.read_block(r.block)?;
            for slot in 0..r.count as usize {
                if b[DATA_HEADER + slot / 8] & (1 << (slot % 8)) != 0 {
                    out.push(r.first_id + slot as u64);
                }
            }
        }
        Ok(out)
    }
}

impl BlockSource for VectorFile {
    fn source_id(&self) -> u64 {
        self.id
    }

    fn block_kind(&self, block: u64) -> Result<BlockKind> {
        if block == 0 {
            return Ok(BlockKind::Header);
        }
        if let Some(e) = self.directory.iter().find(|e| e.block as u64 == block) {
            return Ok(e.kind);
        }
        if block < self.header.n_blocks {
            return Ok(BlockKind::Directory);
        }
        Err(Error::UnknownBlock {
            path: self.path.clone(),
            block,
        })
    }

    fn read_raw(&self, block: u64) -> Result<Vec<u8>> {
        if block >= self.header.n_blocks {
            return Err(Error::UnknownBlock {
                path: self.path.clone(),
                block,
            });
        }
        let offset = block * BLOCK_SIZE as u64;
        let mut buf = vec![0u8; BLOCK_SIZE];
        self.file
            .read_exact_at(&mut buf, offset)
            .map_err(|e| Error::io(&self.path, offset, e))?;
        Ok(buf)
    }
}

/// File name of one (layer, kv head, K|V) file.
pub fn file_name(layer: usize, kv_head: usize, kind: VectorKind) -> String {
    let t = match kind {
        VectorKind::Keys => 'k',
        VectorKind::Values => 'v',
    };
    format!("l{layer:03}_h{kv_head:03}_{t}.avdb")
}

/// Writes the K file (with the graph, if any) and the V file of one slot
/// into `dir`; returns their paths.
pub fn write_context_file(
    dir: impl AsRef<Path>,
    layer: usize,
    kv_head: usize,
    keys: &Matrix,
    values: &Matrix,
    graph: Option<GraphLayout<'_>>,
    width: ElementWidth,
) -> Result<(PathBuf, PathBuf)> {
    if keys.len() != values.len() {
        return Err(Error::LengthMismatch {
            what: "keys vs values",
            left: keys.len(),
            right: values.len(),
        });
    }
    let dir = dir.as_ref();
    let meta = |kind| FileMeta {
        layer: layer as u32,
        kv_head: kv_head as u32,
        kind,
        width,
    };
    let kp = dir.join(file_name(layer, kv_head, VectorKind::Keys));
    let vp = dir.join(file_name(layer, kv_head, VectorKind::Values));
    VectorFile::create(&kp, meta(VectorKind::Keys), keys, graph)?;
    VectorFile::create(&vp, meta(VectorKind::Values), values, None)?;
    Ok((kp, vp))
}
