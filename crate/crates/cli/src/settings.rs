//! Configuration resolution. Precedence, highest first: command-line
//! flags, the file named by `--config` (or `SPARSEKV_CONFIG`), built-in
//! defaults. The file is one TOML document: engine tables at the top level
//! plus an optional `[workload]` table.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;
use sparsekv::config::EngineConfig;
use sparsekv::vfs::ElementWidth;
use sparsekv::workload::{Distribution, QueryModel, WorkloadSpec};
use sparsekv::ModelShape;

#[derive(Debug, Default, Deserialize)]
struct FileDoc {
    #[serde(flatten)]
    engine: EngineConfig,
    workload: Option<WorkloadSpec>,
}

pub struct Settings {
    pub engine: EngineConfig,
    pub workload: WorkloadSpec,
}

pub fn default_workload() -> WorkloadSpec {
    let shape = ModelShape {
        n_layers: 2,
        n_query_heads: 8,
        n_kv_heads: 2,
        dim: 64,
    };
    WorkloadSpec::clustered(10_000, shape, 64, 7)
}

pub fn load(path: Option<&Path>) -> Result<Settings> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<FileDoc>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => FileDoc::default(),
    };
    doc.engine.validate()?;
    if let Some(w) = &doc.workload {
        w.validate()?;
    }
    Ok(Settings {
        engine: doc.engine,
        workload: doc.workload.unwrap_or_else(default_workload),
    })
}

#[derive(Args, Clone, Debug, Default)]
pub struct EngineFlags {
    /// Unpruned candidate list size of graph search.
    #[arg(long)]
    pub l0: Option<usize>,
    #[arg(long)]
    pub max_degree: Option<usize>,
    #[arg(long)]
    pub knn_k: Option<usize>,
    #[arg(long, value_parser = parse_width)]
    pub element_width: Option<ElementWidth>,
    #[arg(long)]
    pub pool_blocks: Option<usize>,
}

fn parse_width(s: &str) -> Result<ElementWidth, String> {
    match s {
        "f16" => Ok(ElementWidth::F16),
        "f32" => Ok(ElementWidth::F32),
        _ => Err(format!("unknown element width {s:?}, expected f16 or f32")),
    }
}

impl EngineFlags {
    pub fn apply(&self, c: &mut EngineConfig) -> Result<()> {
        if let Some(v) = self.l0 {
            c.search.l0 = v;
        }
        if let Some(v) = self.max_degree {
            c.graph.max_degree = v;
        }
        if let Some(v) = self.knn_k {
            c.graph.knn_k = v;
        }
        if let Some(v) = self.element_width {
            c.storage.element_width = v;
        }
        if let Some(v) = self.pool_blocks {
            c.storage.pool_blocks = v;
        }
        c.validate()?;
        Ok(())
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct WorkloadFlags {
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub query_heads: Option<usize>,
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Gaussian clusters per (layer, kv head).
    #[arg(long, conflicts_with = "uniform")]
    pub clusters: Option<usize>,
    #[arg(long, conflicts_with = "uniform")]
    pub spread: Option<f32>,
    /// Keys uniform on the unit sphere instead of clustered.
    #[arg(long)]
    pub uniform: bool,
    /// Out-of-distribution query offset norm; 0 keeps queries in distribution.
    #[arg(long)]
    pub shift: Option<f32>,
    /// Query norm before head and query spreads.
    #[arg(long)]
    pub sharpness: Option<f32>,
    #[arg(long)]
    pub head_spread: Option<f32>,
    #[arg(long)]
    pub query_spread: Option<f32>,
    #[arg(long)]
    pub query_noise: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl WorkloadFlags {
    pub fn apply(&self, w: &mut WorkloadSpec) -> Result<()> {
        let s = &mut w.shape;
        for (flag, field) in [
            (self.layers, &mut s.n_layers),
            (self.query_heads, &mut s.n_query_heads),
            (self.kv_heads, &mut s.n_kv_heads),
            (self.dim, &mut s.dim),
            (self.tokens, &mut w.n_tokens),
        ] {
            if let Some(v) = flag {
                *field = v;
            }
        }
        if self.uniform {
            w.distribution = Distribution::UniformSphere;
        } else if self.clusters.is_some() || self.spread.is_some() {
            let (c0, s0) = match w.distribution {
                Distribution::GaussianClusters { clusters, spread } => (clusters, spread),
                Distribution::UniformSphere => (64, 0.5),
            };
            w.distribution = Distribution::GaussianClusters {
                clusters: self.clusters.unwrap_or(c0),
                spread: self.spread.unwrap_or(s0),
            };
        }
        if let Some(o) = self.shift {
            w.query_model = if o == 0.0 {
                QueryModel::InDistribution
            } else {
                QueryModel::Shifted { offset: o }
            };
        }
        let h = &mut w.sharpness;
        for (flag, field) in [
            (self.sharpness, &mut h.base),
            (self.head_spread, &mut h.head_spread),
            (self.query_spread, &mut h.query_spread),
            (self.query_noise, &mut h.query_noise),
        ] {
            if let Some(v) = flag {
                *field = v;
            }
        }
        if let Some(v) = self.seed {
            w.seed = v;
        }
        w.validate()?;
        Ok(())
    }
}
