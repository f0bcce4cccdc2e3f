//! Context database and decode sessions.
//!
//! A [`Db`] owns stored contexts: prompt token ids, K and V for every
//! (layer, kv head) slot and the indexes the planner asked for. Contexts
//! are immutable once imported. A [`Session`] reuses the longest stored
//! prefix of a new prompt and keeps every token it appends in a local
//! window, which is attended to in full and never written into the base
//! context's index; [`Db::store`] materializes prefix plus window into a
//! new context.
//!
//! Attention for a query head combines two partial results: one over the
//! base tokens retrieved for the layer's plan, one over the window (the
//! base prefix's initial and last tokens plus all local tokens).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOutput, PartialAttention};
use crate::config::{EngineConfig, SearchConfig};
use crate::dipr::diprs;
use crate::error::{Error, Result};
use crate::filter::{filtered_diprs, FilterOptions, PrefixPredicate};
use crate::index::{build_graph, build_shared_graph, BlockIndex, FlatIndex, GraphIndex};
use crate::planner::{plan, IndexKind, Plan, PlanRequest, QueryKind};
use crate::vector::{dot, Matrix, ModelShape, TokenId, WindowConfig};
use crate::vfs::format::{decode_elements, encode_elements};
use crate::vfs::{file_name, write_context_file, BufferPool, ElementWidth, GraphLayout, VectorFile, VectorKind};

const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextId(pub u64);

impl std::fmt::Display for ContextId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Indexes of one (layer, kv head) slot. The flat scan needs no structure
/// beyond the keys and is always available.
#[derive(Clone, Debug, Default)]
pub struct SlotIndexes {
    pub graph: Option<Arc<GraphIndex>>,
    pub blocks: Option<Arc<BlockIndex>>,
}

#[derive(Debug)]
pub struct ContextRecord {
    id: ContextId,
    seq: u64,
    token_ids: Vec<u32>,
    shape: ModelShape,
    keys: Vec<Arc<Matrix>>,
    values: Vec<Arc<Matrix>>,
    indexes: Vec<SlotIndexes>,
    index_kinds: Vec<IndexKind>,
    dir: PathBuf,
}

impl ContextRecord {
    pub fn id(&self) -> ContextId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    /// Directory holding the context's vector files.
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn keys(&self, layer: usize, kv_head: usize) -> &Arc<Matrix> {
        &self.keys[self.shape.slot(layer, kv_head)]
    }

    pub fn values(&self, layer: usize, kv_head: usize) -> &Arc<Matrix> {
        &self.values[self.shape.slot(layer, kv_head)]
    }

    pub fn indexes(&self, layer: usize, kv_head: usize) -> &SlotIndexes {
        &self.indexes[self.shape.slot(layer, kv_head)]
    }

    /// Index family built for a layer.
    pub fn index_kind(&self, layer: usize) -> IndexKind {
        self.index_kinds[layer]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        let slots = self.shape.kv_slots();
        if self.keys.len() != slots || self.values.len() != slots || self.indexes.len() != slots {
            return Err(Error::LengthMismatch {
                what: "slots vs shape",
                left: self.keys.len(),
                right: slots,
            });
        }
        for s in 0..slots {
            for (what, m) in [("keys vs tokens", &self.keys[s]), ("values vs tokens", &self.values[s])] {
                if m.len() != n {
                    return Err(Error::LengthMismatch { what, left: m.len(), right: n });
                }
                if m.dim() != self.shape.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.shape.dim,
                        actual: m.dim(),
                    });
                }
            }
            if let Some(g) = &self.indexes[s].graph {
                if g.len() != n {
                    return Err(Error::LengthMismatch {
                        what: "graph nodes vs tokens",
                        left: g.len(),
                        right: n,
                    });
                }
                g.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: ContextId,
    seq: u64,
    shape: ModelShape,
    width: ElementWidth,
    index_kinds: Vec<IndexKind>,
    token_ids: Vec<u32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    next_id: u64,
    contexts: Vec<ManifestEntry>,
}

pub struct Db {
    root: PathBuf,
    cfg: EngineConfig,
    pool: Arc<BufferPool>,
    contexts: RwLock<Vec<Arc<ContextRecord>>>,
    writer: Mutex<Manifest>,
}

fn narrow(m: Matrix, width: ElementWidth) -> Result<Matrix> {
    if width == ElementWidth::F32 {
        return Ok(m);
    }
    let mut bytes = Vec::with_capacity(m.as_flat().len() * 2);
    encode_elements(m.as_flat(), width, &mut bytes)?;
    let mut back = Vec::with_capacity(m.as_flat().len());
    decode_elements(&bytes, width, &mut back);
    Matrix::from_flat(m.dim(), back)
}

fn common_prefix(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl Db {
    /// Opens (creating if needed) the database rooted at `root` and loads
    /// every stored context through the buffer pool.
    pub fn open(root: impl AsRef<Path>, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, 0, e))?;
        let pool = Arc::new(BufferPool::new(cfg.storage.pool_blocks)?);
        let mpath = root.join(MANIFEST);
        let manifest = if mpath.exists() {
            let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, 0, e))?;
            let m: Manifest = serde_json::from_slice(&text)?;
            if m.version != MANIFEST_VERSION {
                return Err(Error::Corrupt {
                    path: mpath,
                    reason: format!("manifest version {}", m.version),
                });
            }
            m
        } else {
            Manifest {
                version: MANIFEST_VERSION,
                next_id: 1,
                contexts: Vec::new(),
            }
        };
        let db = Db {
            root,
            cfg,
            pool,
            contexts: RwLock::new(Vec::new()),
            writer: Mutex::new(Manifest::default()),
        };
        let loaded = manifest
            .contexts
            .iter()
            .map(|e| db.load(e))
            .collect::<Result<Vec<_>>>()?;
        *db.contexts.write() = loaded;
        *db.writer.lock() = manifest;
        Ok(db)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &Arc<BufferPool> {
        &self.pool
    }

    fn context_dir(&self, id: ContextId) -> PathBuf {
        self.root.join(format!("ctx-{:06}", id.0))
    }

    fn load(&self, e: &ManifestEntry) -> Result<Arc<ContextRecord>> {
        let dir = self.context_dir(e.id);
        let shape = e.shape;
        if e.index_kinds.len() != shape.n_layers {
            return Err(Error::Corrupt {
                path: self.root.join(MANIFEST),
                reason: format!("context {} lists {} layer plans", e.id, e.index_kinds.len()),
            });
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut indexes = Vec::new();
        for layer in 0..shape.n_layers {
            for h in 0..shape.n_kv_heads {
                let kf = VectorFile::open(dir.join(file_name(layer, h, VectorKind::Keys)))?.with_pool(self.pool.clone());
                let vf = VectorFile::open(dir.join(file_name(layer, h, VectorKind::Values)))?.with_pool(self.pool.clone());
                let k = Arc::new(kf.read_vectors()?);
                let v = Arc::new(vf.read_vectors()?);
                let mut slot = SlotIndexes::default();
                match e.index_kinds[layer] {
                    IndexKind::Fine => {
                        let g = kf.read_adjacency()?.ok_or_else(|| Error::Corrupt {
                            path: kf.path().to_path_buf(),
                            reason: "graph index missing".into(),
                        })?;
                        slot.graph = Some(Arc::new(GraphIndex::from_parts(
                            k.clone(),
                            g.adjacency,
                            TokenId(g.entry_point),
                            g.max_degree,
                        )?));
                    }
                    IndexKind::Coarse => slot.blocks = Some(Arc::new(BlockIndex::build(&k, self.cfg.block)?)),
                    IndexKind::Flat | IndexKind::None => {}
                }
                keys.push(k);
                values.push(v);
                indexes.push(slot);
            }
        }
        let rec = ContextRecord {
            id: e.id,
            seq: e.seq,
            token_ids: e.token_ids.clone(),
            shape,
            keys,
            values,
            indexes,
            index_kinds: e.index_kinds.clone(),
            dir,
        };
        rec.validate()?;
        Ok(Arc::new(rec))
    }

    pub fn contexts(&self) -> Vec<Arc<ContextRecord>> {
        self.contexts.read().clone()
    }

    pub fn get(&self, id: ContextId) -> Result<Arc<ContextRecord>> {
        self.contexts
            .read()
            .iter()
            .find(|c| c.id == id)
            .cloned()
            .ok_or(Error::UnknownContext(id.0))
    }

    /// Stores a context given K/V per (layer, kv head) in slot order.
    /// Graph indexes are built without query samples.
    pub fn import(&self, token_ids: &[u32], kv: Vec<(Matrix, Matrix)>, shape: ModelShape) -> Result<ContextId> {
        self.import_inner(token_ids, kv, shape, None)
    }

    /// Like [`Db::import`], with sampled queries per (layer, query head)
    /// (index `layer · n_query_heads + head`) guiding the graph builds; the
    /// query heads of a group share one graph.
    pub fn import_with_queries(
        &self,
        token_ids: &[u32],
        kv: Vec<(Matrix, Matrix)>,
        shape: ModelShape,
        queries: &[Matrix],
    ) -> Result<ContextId> {
        if queries.len() != shape.n_layers * shape.n_query_heads {
            return Err(Error::LengthMismatch {
                what: "query samples vs query heads",
                left: queries.len(),
                right: shape.n_layers * shape.n_query_heads,
            });
        }
        self.import_inner(token_ids, kv, shape, Some(queries))
    }

    fn import_inner(
        &self,
        token_ids: &[u32],
        kv: Vec<(Matrix, Matrix)>,
        shape: ModelShape,
        queries: Option<&[Matrix]>,
    ) -> Result<ContextId> {
        shape.validate()?;
        if token_ids.is_empty() {
            return Err(Error::Empty("context tokens"));
        }
        if kv.len() != shape.kv_slots() {
            return Err(Error::LengthMismatch {
                what: "kv slots vs shape",
                left: kv.len(),
                right: shape.kv_slots(),
            });
        }
        for (k, v) in &kv {
            for m in [k, v] {
                if m.dim() != shape.dim {
                    return Err(Error::DimensionMismatch {
                        expected: shape.dim,
                        actual: m.dim(),
                    });
                }
                if m.len() != token_ids.len() {
                    return Err(Error::LengthMismatch {
                        what: "kv length vs tokens",
                        left: m.len(),
                        right: token_ids.len(),
                    });
                }
            }
        }
        if let Some(q) = queries {
            if let Some(bad) = q.iter().find(|m| !m.is_empty() && m.dim() != shape.dim) {
                return Err(Error::DimensionMismatch {
                    expected: shape.dim,
                    actual: bad.dim(),
                });
            }
        }

        let mut manifest = self.writer.lock();
        if let Some(existing) = self
            .contexts
            .read()
            .iter()
            .find(|c| c.token_ids == token_ids && c.shape == shape)
        {
            return Ok(existing.id);
        }

        let width = self.cfg.storage.element_width;
        let n = token_ids.len();
        let index_kinds: Vec<IndexKind> = (0..shape.n_layers)
            .map(|layer| {
                plan(
                    &PlanRequest {
                        context_len: n,
                        reused_prefix_len: None,
                        memory_budget_bytes: self.cfg.planner.memory_budget_bytes,
                        layer,
                        shape,
                    },
                    &self.cfg.planner,
                )
                .index
            })
            .collect();

        let narrowed: Vec<(Arc<Matrix>, Arc<Matrix>)> = kv
            .into_iter()
            .map(|(k, v)| Ok((Arc::new(narrow(k, width)?), Arc::new(narrow(v, width)?))))
            .collect::<Result<_>>()?;
        let group = shape.group_size();
        let indexes: Vec<SlotIndexes> = (0..shape.kv_slots())
            .into_par_iter()
            .map(|slot| {
                let (layer, h) = (slot / shape.n_kv_heads, slot % shape.n_kv_heads);
                let keys = &narrowed[slot].0;
                let mut out = SlotIndexes::default();
                match index_kinds[layer] {
                    IndexKind::Fine => {
                        let g = match queries {
                            Some(q) => {
                                let base = layer * shape.n_query_heads + h * group;
                                build_shared_graph(keys.clone(), &q[base..base + group], self.cfg.search.sample_ratio, &self.cfg.graph)?
                            }
                            None => build_graph(keys.clone(), &Matrix::with_dim(shape.dim), &self.cfg.graph)?,
                        };
                        out.graph = Some(Arc::new(g));
                    }
                    IndexKind::Coarse => out.blocks = Some(Arc::new(BlockIndex::build(keys, self.cfg.block)?)),
                    IndexKind::Flat | IndexKind::None => {}
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let id = ContextId(manifest.next_id);
        let seq = manifest.contexts.iter().map(|c| c.seq + 1).max().unwrap_or(0);
        let dir = self.context_dir(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, 0, e))?;
        for slot in 0..shape.kv_slots() {
            let (layer, h) = (slot / shape.n_kv_heads, slot % shape.n_kv_heads);
            let layout = indexes[slot].graph.as_ref().map(|g| GraphLayout {
                adjacency: g.adjacency(),
                entry_point: g.entry_point().0,
                max_degree: g.max_degree(),
            });
            write_context_file(&dir, layer, h, &narrowed[slot].0, &narrowed[slot].1, layout, width)?;
        }

        let rec = ContextRecord {
            id,
            seq,
            token_ids: token_ids.to_vec(),
            shape,
            keys: narrowed.iter().map(|(k, _)| k.clone()).collect(),
            values: narrowed.iter().map(|(_, v)| v.clone()).collect(),
            indexes,
            index_kinds: index_kinds.clone(),
            dir,
        };
        rec.validate()?;

        let mut next = manifest.clone();
        next.next_id += 1;
        next.contexts.push(ManifestEntry {
            id,
            seq,
            shape,
            width,
            index_kinds,
            token_ids: token_ids.to_vec(),
        });
        self.write_manifest(&next)?;
        *manifest = next;
        self.contexts.write().push(Arc::new(rec));
        tracing::debug!(context = id.0, tokens = n, "imported context");
        Ok(id)
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        let bytes = serde_json::to_vec(m)?;
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, 0, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, 0, e))
    }

    /// A session over the stored context sharing the longest prefix with
    /// `token_ids` (most recently stored wins ties; only contexts of the
    /// same shape qualify), plus the tokens that prefix does not cover.
    pub fn create_session(&self, token_ids: &[u32], shape: ModelShape) -> Result<(Session, Vec<u32>)> {
        shape.validate()?;
        let best = self
            .contexts
            .read()
            .iter()
            .filter(|c| c.shape == shape)
            .map(|c| (common_prefix(&c.token_ids, token_ids), c.seq, c.clone()))
            .max_by_key(|(p, seq, _)| (*p, *seq));
        let (base, prefix_len) = match best {
            Some((p, _, c)) if p > 0 => (Some(c), p),
            _ => (None, 0),
        };
        let session = Session::new(base, prefix_len, shape, &self.cfg);
        Ok((session, token_ids[prefix_len..].to_vec()))
    }

    /// Materializes the session's base prefix and local tokens into a new
    /// context with fresh indexes. Every slot must hold exactly one local
    /// K/V row per generated token id.
    pub fn store(&self, s: &Session) -> Result<ContextId> {
        let total = s.prefix_len + s.generated_token_ids.len();
        if total == 0 {
            return Err(Error::EmptySession);
        }
        for local in &s.local_keys {
            if local.len() != s.generated_token_ids.len() {
                return Err(Error::LengthMismatch {
                    what: "local kv vs generated token ids",
                    left: local.len(),
                    right: s.generated_token_ids.len(),
                });
            }
        }
        let mut tokens = Vec::with_capacity(total);
        let mut kv = Vec::with_capacity(s.shape.kv_slots());
        if let Some(b) = &s.base {
            tokens.extend_from_slice(&b.token_ids[..s.prefix_len]);
        }
        tokens.extend_from_slice(&s.generated_token_ids);
        for slot in 0..s.shape.kv_slots() {
            let (layer, h) = (slot / s.shape.n_kv_heads, slot % s.shape.n_kv_heads);
            kv.push(s.view(layer, h).to_matrices());
        }
        self.import(&tokens, kv, s.shape)
    }
}

/// The logical K/V sequence of one slot: the reused base prefix followed by
/// the session's local tokens.
#[derive(Clone, Copy, Debug)]
pub struct KvView<'a> {
    dim: usize,
    base_keys: &'a [f32],
    base_values: &'a [f32],
    local_keys: &'a Matrix,
    local_values: &'a Matrix,
}

impl<'a> KvView<'a> {
    pub fn prefix_len(&self) -> usize {
        self.base_keys.len() / self.dim
    }

    pub fn local_len(&self) -> usize {
        self.local_keys.len()
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + self.local_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key(&self, i: usize) -> &'a [f32] {
        let p = self.prefix_len();
        if i < p {
            &self.base_keys[i * self.dim..(i + 1) * self.dim]
        } else {
            self.local_keys.row(i - p)
        }
    }

    pub fn value(&self, i: usize) -> &'a [f32] {
        let p = self.prefix_len();
        if i < p {
            &self.base_values[i * self.dim..(i + 1) * self.dim]
        } else {
            self.local_values.row(i - p)
        }
    }

    /// Contiguous copies of the logical keys and values.
    pub fn to_matrices(&self) -> (Matrix, Matrix) {
        let mut k = self.base_keys.to_vec();
        k.extend_from_slice(self.local_keys.as_flat());
        let mut v = self.base_values.to_vec();
        v.extend_from_slice(self.local_values.as_flat());
        (
            Matrix::from_flat(self.dim, k).expect("stored rows are finite"),
            Matrix::from_flat(self.dim, v).expect("stored rows are finite"),
        )
    }
}

/// Tokens one query head attended to, in logical ids (base prefix first,
/// then local tokens).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HeadTrace {
    pub query_head: usize,
    /// Base tokens selected by the plan's retrieval, window tokens excluded.
    pub retrieved: Vec<TokenId>,
    /// Window tokens: the base prefix's initial and last tokens and every
    /// local token.
    pub window: Vec<TokenId>,
}

impl HeadTrace {
    /// All attended ids, ascending.
    pub fn selection(&self) -> Vec<TokenId> {
        let mut all: Vec<TokenId> = self.retrieved.iter().chain(&self.window).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

#[derive(Clone, Debug)]
pub struct Session {
    base: Option<Arc<ContextRecord>>,
    prefix_len: usize,
    shape: ModelShape,
    window: WindowConfig,
    search: SearchConfig,
    local_keys: Vec<Matrix>,
    local_values: Vec<Matrix>,
    generated_token_ids: Vec<u32>,
    plans: Vec<Plan>,
}

impl Session {
    fn new(base: Option<Arc<ContextRecord>>, prefix_len: usize, shape: ModelShape, cfg: &EngineConfig) -> Self {
        let plans = (0..shape.n_layers)
            .map(|layer| match &base {
                None => Plan::FULL,
                Some(b) => {
                    let p = plan(
                        &PlanRequest {
                            context_len: b.len(),
                            reused_prefix_len: Some(prefix_len),
                            memory_budget_bytes: cfg.planner.memory_budget_bytes,
                            layer,
                            shape,
                        },
                        &cfg.planner,
                    );
                    reconcile(p, b, layer)
                }
            })
            .collect();
        Session {
            base,
            prefix_len,
            shape,
            window: cfg.window,
            search: cfg.search,
            local_keys: vec![Matrix::with_dim(shape.dim); shape.kv_slots()],
            local_values: vec![Matrix::with_dim(shape.dim); shape.kv_slots()],
            generated_token_ids: Vec::new(),
            plans,
        }
    }

    pub fn base(&self) -> Option<&Arc<ContextRecord>> {
        self.base.as_ref()
    }

    pub fn base_id(&self) -> Option<ContextId> {
        self.base.as_ref().map(|b| b.id)
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn plan(&self, layer: usize) -> Result<Plan> {
        self.plans
            .get(layer)
            .copied()
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))
    }

    /// Replaces a layer's plan. The index it names must exist for the base.
    pub fn force_plan(&mut self, layer: usize, p: Plan) -> Result<()> {
        self.check_layer(layer)?;
        if !p.is_legal() {
            return Err(Error::invalid(format!("illegal plan {p:?}")));
        }
        if let Some(prefix_len) = p.query.prefix_len() {
            if prefix_len != self.prefix_len {
                return Err(Error::invalid(format!(
                    "plan filters to {prefix_len} tokens, session reuses {}",
                    self.prefix_len
                )));
            }
        }
        if let Some(b) = &self.base {
            for h in 0..self.shape.n_kv_heads {
                let idx = b.indexes(layer, h);
                match p.index {
                    IndexKind::Fine if idx.graph.is_none() => return Err(Error::IndexMissing("graph")),
                    IndexKind::Coarse if idx.blocks.is_none() => return Err(Error::IndexMissing("block")),
                    _ => {}
                }
            }
        }
        self.plans[layer] = p;
        Ok(())
    }

    pub fn generated_token_ids(&self) -> &[u32] {
        &self.generated_token_ids
    }

    /// Records vocabulary ids of tokens whose K/V are (or will be) appended.
    pub fn push_token_ids(&mut self, ids: &[u32]) {
        self.generated_token_ids.extend_from_slice(ids);
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.shape.n_layers {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for {} layers",
                self.shape.n_layers
            )));
        }
        Ok(())
    }

    pub fn view(&self, layer: usize, kv_head: usize) -> KvView<'_> {
        let slot = self.shape.slot(layer, kv_head);
        let d = self.shape.dim;
        let (bk, bv): (&[f32], &[f32]) = match &self.base {
            Some(b) => (
                &b.keys[slot].as_flat()[..self.prefix_len * d],
                &b.values[slot].as_flat()[..self.prefix_len * d],
            ),
            None => (&[], &[]),
        };
        KvView {
            dim: d,
            base_keys: bk,
            base_values: bv,
            local_keys: &self.local_keys[slot],
            local_values: &self.local_values[slot],
        }
    }

    /// Appends one token's K and V (one row per kv head) to the layer's
    /// window and returns the layer's logical K/V views.
    pub fn update(&mut self, layer: usize, k: &Matrix, v: &Matrix) -> Result<Vec<KvView<'_>>> {
        self.check_layer(layer)?;
        for m in [k, v] {
            if m.len() != self.shape.n_kv_heads {
                return Err(Error::LengthMismatch {
                    what: "rows vs kv heads",
                    left: m.len(),
                    right: self.shape.n_kv_heads,
                });
            }
            if m.dim() != self.shape.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.shape.dim,
                    actual: m.dim(),
                });
            }
        }
        for h in 0..self.shape.n_kv_heads {
            let slot = self.shape.slot(layer, h);
            self.local_keys[slot].push(k.row(h))?;
            self.local_values[slot].push(v.row(h))?;
        }
        Ok((0..self.shape.n_kv_heads).map(|h| self.view(layer, h)).collect())
    }

    /// Attention output per query head; `queries` holds one row per head.
    pub fn attention(&self, layer: usize, queries: &Matrix) -> Result<Vec<AttentionOutput>> {
        Ok(self.attention_traced(layer, queries)?.into_iter().map(|(o, _)| o).collect())
    }

    pub fn attention_traced(&self, layer: usize, queries: &Matrix) -> Result<Vec<(AttentionOutput, HeadTrace)>> {
        self.check_layer(layer)?;
        if queries.len() != self.shape.n_query_heads {
            return Err(Error::LengthMismatch {
                what: "queries vs query heads",
                left: queries.len(),
                right: self.shape.n_query_heads,
            });
        }
        if queries.dim() != self.shape.dim {
            return Err(Error::DimensionMismatch {
                expected: self.shape.dim,
                actual: queries.dim(),
            });
        }
        (0..self.shape.n_query_heads)
            .into_par_iter()
            .map(|h| self.head_attention(layer, h, queries.row(h)))
            .collect()
    }

    fn head_attention(&self, layer: usize, h: usize, q: &[f32]) -> Result<(AttentionOutput, HeadTrace)> {
        let kv = self.shape.kv_head_of(h);
        let view = self.view(layer, kv);
        if view.is_empty() {
            return Err(Error::EmptySession);
        }
        let p = self.prefix_len;
        let plan = self.plans[layer];

        let window: Vec<usize> = if plan.query == QueryKind::FullAttention {
            (0..view.len()).collect()
        } else {
            self.window
                .ids(p)
                .into_iter()
                .map(TokenId::index)
                .chain(p..view.len())
                .collect()
        };
        let mut win = PartialAttention::new(self.shape.dim);
        win.absorb_batch(q, window.iter().map(|&i| (view.key(i), view.value(i))))?;
        let retrieved = if plan.query == QueryKind::FullAttention || self.window.covers(p) {
            Vec::new()
        } else {
            let window_max = window
                .iter()
                .map(|&i| dot(q, view.key(i)))
                .fold(f32::NEG_INFINITY, f32::max);
            let base = self.base.as_ref().expect("a sparse plan implies a base");
            let found = self.retrieve(base, layer, kv, q, plan, window_max)?;
            found
                .into_iter()
                .filter(|t| !self.window.contains(*t, p))
                .collect::<Vec<TokenId>>()
        };
        let mut part = PartialAttention::new(self.shape.dim);
        part.absorb_batch(q, retrieved.iter().map(|t| (view.key(t.index()), view.value(t.index()))))?;
        let out = win.merge(part)?.finalize()?;
        Ok((
            out,
            HeadTrace {
                query_head: h,
                retrieved,
                window: window.into_iter().map(TokenId::from).collect(),
            },
        ))
    }

    /// Base tokens `< prefix_len` selected by `plan`, ascending and unique.
    fn retrieve(
        &self,
        base: &ContextRecord,
        layer: usize,
        kv: usize,
        q: &[f32],
        plan: Plan,
        window_max: f32,
    ) -> Result<Vec<TokenId>> {
        let p = self.prefix_len;
        let n = base.len();
        let idx = base.indexes(layer, kv);
        let keys = base.keys(layer, kv);
        let mut out = match (plan.query, plan.index) {
            (QueryKind::Dipr { beta } | QueryKind::FilteredDipr { beta, .. }, IndexKind::Flat) => {
                FlatIndex::new(keys.clone()).dipr_window(q, beta, p, Some(window_max))?
            }
            (QueryKind::Dipr { beta } | QueryKind::FilteredDipr { beta, .. }, IndexKind::Fine) => {
                let g = idx.graph.as_ref().ok_or(Error::IndexMissing("graph"))?;
                if p == n {
                    diprs(g, q, g.entry_point(), self.search.l0, beta, Some(window_max))?
                } else {
                    let pred = PrefixPredicate::new(p, n)?;
                    let opts = FilterOptions {
                        two_hop: self.search.two_hop,
                        window_max: Some(window_max),
                    };
                    filtered_diprs(g, q, &pred, self.search.l0, beta, &opts)?
                }
            }
            (QueryKind::TopK { k } | QueryKind::FilteredTopK { k, .. }, IndexKind::Coarse) => {
                let b = idx.blocks.as_ref().ok_or(Error::IndexMissing("block"))?;
                let bs = b.params().block_size;
                let k_blocks = k.div_ceil(bs).min(p.div_ceil(bs));
                b.topk_prefix(q, k_blocks, p)?
                    .into_iter()
                    .flatten()
                    .map(TokenId)
                    .collect()
            }
            (QueryKind::TopK { k } | QueryKind::FilteredTopK { k, .. }, IndexKind::Flat) => {
                FlatIndex::new(keys.clone()).topk_prefix(q, k.min(p), p)?
            }
            (QueryKind::TopK { k } | QueryKind::FilteredTopK { k, .. }, IndexKind::Fine) => {
                let g = idx.graph.as_ref().ok_or(Error::IndexMissing("graph"))?;
                let ef = self.search.topk_ef.max(k);
                g.search_topk(q, k.min(n), ef)?
                    .into_iter()
                    .filter(|t| t.index() < p)
                    .collect()
            }
            (query, index) => {
                return Err(Error::invalid(format!("plan {query:?} over {index:?} cannot retrieve")));
            }
        };
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Substitutes the always-available flat scan when the planned index was
/// not built for the base (the configuration changed since import).
fn reconcile(p: Plan, base: &ContextRecord, layer: usize) -> Plan {
    let built = base.index_kind(layer);
    match p.index {
        IndexKind::Fine | IndexKind::Coarse if p.index != built => Plan {
            query: p.query,
            index: IndexKind::Flat,
        },
        _ => p,
    }
}
