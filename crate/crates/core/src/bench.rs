//! Benchmarks behind the command-line reports.
//!
//! Every metric comes from the library oracles (`recovery_ratio`, exact
//! DIPR and top-k scans, full attention). Wall-clock fields are `None`
//! when timing is disabled, which makes a report a pure function of its
//! inputs.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{full_attention, recovery_ratio, tokens_for_recovery};
use crate::error::{Error, Result};
use crate::index::{build_graph, build_shared_graph, sample_queries, FlatIndex, GraphIndex, GraphParams};
use crate::planner::{IndexKind, Plan, QueryKind};
use crate::store::Db;
use crate::vector::{Matrix, TokenId};
use crate::workload::Workload;

/// The TPOT service-level objective, in seconds.
pub const TPOT_SLO_SECONDS: f64 = 0.24;

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs.iter().copied()), mean(ys.iter().copied()));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles.
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_unstable_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Some(Percentiles {
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            mean: mean(s.iter().copied()),
        })
    }
}

fn rows(m: &Matrix) -> Vec<&[f32]> {
    m.rows().collect()
}

// ---------------------------------------------------------------- dipr

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiprBenchConfig {
    pub layer: usize,
    pub query_head: usize,
    pub n_queries: usize,
    pub betas: Vec<f64>,
    pub ks: Vec<usize>,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub query: &'static str,
    pub param: f64,
    pub mean_count: f64,
    pub mean_recovery: f64,
}

/// DIPR at one slack against top-k with `k` set to DIPR's mean count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchedPoint {
    pub beta: f64,
    pub mean_count: f64,
    pub k: usize,
    pub dipr_recovery: f64,
    pub topk_recovery: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiprReport {
    pub n_tokens: usize,
    pub n_queries: usize,
    pub points: Vec<FrontierPoint>,
    pub matched: Vec<MatchedPoint>,
    /// Matched points where DIPR recovers at least as much mass.
    pub dipr_at_least_topk: usize,
}

/// Exact DIPR and exact top-k over one head: count against recovery.
pub fn bench_dipr(w: &Workload, cfg: &DiprBenchConfig) -> Result<DiprReport> {
    let shape = w.spec().shape;
    let kv = shape.address(cfg.layer, cfg.query_head)?.kv_head;
    let keys = Arc::new(w.keys(cfg.layer, kv));
    let flat = FlatIndex::new(keys.clone());
    let all = rows(&keys);
    let qs = w.queries(cfg.layer, cfg.query_head, cfg.n_queries, cfg.stream);
    if qs.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let n = keys.len();
    let dipr_at = |beta: f64| -> Result<(f64, f64)> {
        let mut counts = Vec::new();
        let mut rec = Vec::new();
        for q in qs.rows() {
            let sel = flat.dipr(q, beta)?;
            counts.push(sel.len() as f64);
            rec.push(recovery_ratio(q, &all, &sel)?);
        }
        Ok((mean(counts), mean(rec)))
    };
    let topk_at = |k: usize| -> Result<f64> {
        let k = k.clamp(1, n);
        let mut rec = Vec::new();
        for q in qs.rows() {
            rec.push(recovery_ratio(q, &all, &flat.topk(q, k)?)?);
        }
        Ok(mean(rec))
    };

    let mut points = Vec::new();
    let mut matched = Vec::new();
    for &beta in &cfg.betas {
        let (count, recovery) = dipr_at(beta)?;
        points.push(FrontierPoint {
            query: "dipr",
            param: beta,
            mean_count: count,
            mean_recovery: recovery,
        });
        let k = (count.round() as usize).clamp(1, n);
        matched.push(MatchedPoint {
            beta,
            mean_count: count,
            k,
            dipr_recovery: recovery,
            topk_recovery: topk_at(k)?,
        });
    }
    for &k in &cfg.ks {
        points.push(FrontierPoint {
            query: "topk",
            param: k as f64,
            mean_count: k.clamp(1, n) as f64,
            mean_recovery: topk_at(k)?,
        });
    }
    let wins = matched.iter().filter(|m| m.dipr_recovery >= m.topk_recovery).count();
    Ok(DiprReport {
        n_tokens: n,
        n_queries: qs.len(),
        points,
        matched,
        dipr_at_least_topk: wins,
    })
}

// --------------------------------------------------------------- heads

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsBenchConfig {
    pub beta: f64,
    pub target_recovery: f64,
    pub n_queries: usize,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadRow {
    pub layer: usize,
    pub query_head: usize,
    pub kv_head: usize,
    pub head_scale: f64,
    /// Mean fewest tokens reaching the target recovery.
    pub oracle_count: f64,
    pub dipr_count: f64,
    pub dipr_recovery: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadsReport {
    pub beta: f64,
    pub target_recovery: f64,
    pub rows: Vec<HeadRow>,
    pub correlation: f64,
    pub min_oracle_count: f64,
    pub max_oracle_count: f64,
}

/// Per head: tokens needed for the target recovery against what exact
/// DIPR at a fixed slack retrieves.
pub fn bench_heads(w: &Workload, cfg: &HeadsBenchConfig) -> Result<HeadsReport> {
    let shape = w.spec().shape;
    let mut out = Vec::new();
    for layer in 0..shape.n_layers {
        for kv in 0..shape.n_kv_heads {
            let keys = Arc::new(w.keys(layer, kv));
            let flat = FlatIndex::new(keys.clone());
            let all = rows(&keys);
            for h in (0..shape.n_query_heads).filter(|&h| shape.kv_head_of(h) == kv) {
                let qs = w.queries(layer, h, cfg.n_queries, cfg.stream);
                let mut oracle = Vec::new();
                let mut count = Vec::new();
                let mut rec = Vec::new();
                for q in qs.rows() {
                    oracle.push(tokens_for_recovery(q, &all, cfg.target_recovery)? as f64);
                    let sel = flat.dipr(q, cfg.beta)?;
                    count.push(sel.len() as f64);
                    rec.push(recovery_ratio(q, &all, &sel)?);
                }
                out.push(HeadRow {
                    layer,
                    query_head: h,
                    kv_head: kv,
                    head_scale: w.head_scale(layer, h) as f64,
                    oracle_count: mean(oracle),
                    dipr_count: mean(count),
                    dipr_recovery: mean(rec),
                });
            }
        }
    }
    out.sort_by_key(|r| (r.layer, r.query_head));
    let xs: Vec<f64> = out.iter().map(|r| r.dipr_count).collect();
    let ys: Vec<f64> = out.iter().map(|r| r.oracle_count).collect();
    Ok(HeadsReport {
        beta: cfg.beta,
        target_recovery: cfg.target_recovery,
        correlation: pearson(&xs, &ys),
        min_oracle_count: ys.iter().copied().fold(f64::INFINITY, f64::min),
        max_oracle_count: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rows: out,
    })
}

// -------------------------------------------------------------- replay

/// Plan applied to every layer of a replay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanOverride {
    /// Whatever the planner chose.
    Auto,
    Full,
    Dipr { beta: f64 },
    TopK { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub steps: usize,
    pub plan: PlanOverride,
    /// Query samples per query head used to build graph indexes.
    pub build_queries: usize,
    pub timing: bool,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub tpot_seconds: Option<f64>,
    pub mean_selected: f64,
    pub mean_recovery: f64,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayReport {
    pub n_tokens: usize,
    pub steps: usize,
    pub plans: Vec<Plan>,
    pub tpot: Option<Percentiles>,
    pub slo_seconds: f64,
    pub slo_violations: Option<usize>,
    pub mean_recovery: f64,
    pub mean_deviation: f64,
    pub max_deviation: f64,
    pub records: Vec<StepRecord>,
}

fn override_plan(o: PlanOverride, auto: Plan, built: IndexKind, prefix: Option<usize>) -> Plan {
    let index_for = |dipr: bool| match built {
        IndexKind::Fine => IndexKind::Fine,
        IndexKind::Coarse if !dipr => IndexKind::Coarse,
        _ => IndexKind::Flat,
    };
    match (o, prefix) {
        (PlanOverride::Auto, _) => auto,
        (PlanOverride::Full, _) => Plan::FULL,
        (PlanOverride::Dipr { beta }, None) => Plan {
            query: QueryKind::Dipr { beta },
            index: index_for(true),
        },
        (PlanOverride::Dipr { beta }, Some(prefix_len)) => Plan {
            query: QueryKind::FilteredDipr { beta, prefix_len },
            index: index_for(true),
        },
        (PlanOverride::TopK { k }, None) => Plan {
            query: QueryKind::TopK { k },
            index: index_for(false),
        },
        (PlanOverride::TopK { k }, Some(prefix_len)) => Plan {
            query: QueryKind::FilteredTopK { k, prefix_len },
            index: index_for(false),
        },
    }
}

/// Imports the workload's context into `db`, then decodes `steps` tokens:
/// per layer, one `update` with the next synthetic K/V and one `attention`
/// for all query heads. TPOT covers those calls only; quality is measured
/// afterwards against full attention over the same logical K/V.
pub fn decode_replay(db: &Db, w: &Workload, cfg: &ReplayConfig) -> Result<ReplayReport> {
    let shape = w.spec().shape;
    let n = w.spec().n_tokens;
    let tokens = w.token_ids();
    let samples: Vec<Matrix> = (0..shape.n_layers)
        .flat_map(|l| (0..shape.n_query_heads).map(move |h| (l, h)))
        .map(|(l, h)| w.queries(l, h, cfg.build_queries, cfg.stream ^ 0x5eed))
        .collect();
    let id = db.import_with_queries(&tokens, w.kv(), shape, &samples)?;
    let (mut session, rest) = db.create_session(&tokens, shape)?;
    if !rest.is_empty() || session.base_id() != Some(id) {
        return Err(Error::invalid("replay context was not fully reused"));
    }
    let base = db.get(id)?;
    let mut plans = Vec::with_capacity(shape.n_layers);
    for layer in 0..shape.n_layers {
        let p = override_plan(cfg.plan, session.plan(layer)?, base.index_kind(layer), None);
        session.force_plan(layer, p)?;
        plans.push(p);
    }

    let step_keys: Vec<(Matrix, Matrix)> = w
        .kv()
        .into_iter()
        .enumerate()
        .map(|(slot, _)| {
            let (l, h) = (slot / shape.n_kv_heads, slot % shape.n_kv_heads);
            let k = w.keys_n(l, h, n + cfg.steps);
            let v = w.values_n(l, h, n + cfg.steps);
            (k, v)
        })
        .collect();
    let step_queries: Vec<Matrix> = (0..shape.n_layers)
        .flat_map(|l| (0..shape.n_query_heads).map(move |h| (l, h)))
        .map(|(l, h)| w.queries(l, h, cfg.steps, cfg.stream))
        .collect();
    let gather = |layer: usize, step: usize| -> Result<(Matrix, Matrix, Matrix)> {
        let mut q = Matrix::with_dim(shape.dim);
        for h in 0..shape.n_query_heads {
            q.push(step_queries[layer * shape.n_query_heads + h].row(step))?;
        }
        let mut k = Matrix::with_dim(shape.dim);
        let mut v = Matrix::with_dim(shape.dim);
        for h in 0..shape.n_kv_heads {
            let (kk, vv) = &step_keys[shape.slot(layer, h)];
            k.push(kk.row(n + step))?;
            v.push(vv.row(n + step))?;
        }
        Ok((q, k, v))
    };

    let mut records = Vec::with_capacity(cfg.steps);
    let mut tpots = Vec::new();
    for step in 0..cfg.steps {
        let inputs: Vec<(Matrix, Matrix, Matrix)> = (0..shape.n_layers).map(|l| gather(l, step)).collect::<Result<_>>()?;
        let start = Instant::now();
        let mut traces = Vec::with_capacity(shape.n_layers);
        for (layer, (q, k, v)) in inputs.iter().enumerate() {
            session.update(layer, k, v)?;
            traces.push(session.attention_traced(layer, q)?);
        }
        let elapsed = start.elapsed().as_secs_f64();
        session.push_token_ids(&[u32::MAX - step as u32]);

        let mut recs = Vec::new();
        let mut selected = Vec::new();
        let mut max_dev = 0.0f64;
        for (layer, outs) in traces.iter().enumerate() {
            let q = &inputs[layer].0;
            for (out, trace) in outs {
                let h = trace.query_head;
                let (keys, values) = session.view(layer, shape.kv_head_of(h)).to_matrices();
                let (kr, vr) = (rows(&keys), rows(&values));
                let sel: Vec<TokenId> = trace.selection();
                selected.push(sel.len() as f64);
                recs.push(recovery_ratio(q.row(h), &kr, &sel)?);
                let exact = full_attention(q.row(h), &kr, &vr)?;
                let dev = out
                    .o
                    .iter()
                    .zip(exact.o.iter())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                max_dev = max_dev.max(dev);
            }
        }
        if cfg.timing {
            tpots.push(elapsed);
        }
        records.push(StepRecord {
            step,
            tpot_seconds: cfg.timing.then_some(elapsed),
            mean_selected: mean(selected),
            mean_recovery: mean(recs),
            max_deviation: max_dev,
        });
    }
    Ok(ReplayReport {
        n_tokens: n,
        steps: cfg.steps,
        plans,
        tpot: if cfg.timing { Percentiles::of(&tpots) } else { None },
        slo_seconds: TPOT_SLO_SECONDS,
        slo_violations: cfg.timing.then(|| tpots.iter().filter(|&&t| t > TPOT_SLO_SECONDS).count()),
        mean_recovery: mean(records.iter().map(|r| r.mean_recovery)),
        mean_deviation: mean(records.iter().map(|r| r.max_deviation)),
        max_deviation: records.iter().map(|r| r.max_deviation).fold(0.0, f64::max),
        records,
    })
}

// --------------------------------------------------------------- build

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildBenchConfig {
    pub layer: usize,
    pub kv_head: usize,
    /// Query samples per query head before `sample_ratio` is applied.
    pub train_queries: usize,
    pub sample_ratio: f64,
    pub test_queries: usize,
    pub recall_k: usize,
    pub search_ef: usize,
    pub graph: GraphParams,
    pub timing: bool,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BuildRow {
    pub sharing: &'static str,
    pub knn: &'static str,
    pub n_indexes: usize,
    pub memory_bytes: usize,
    pub build_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BuildReport {
    pub n_tokens: usize,
    pub group_size: usize,
    pub threads: usize,
    pub rows: Vec<BuildRow>,
    /// Shared index memory over the per-head indexes' total.
    pub memory_ratio: f64,
    pub recall_per_head: f64,
    pub recall_shared: f64,
    /// Serial over parallel build time of the per-head indexes.
    pub parallel_speedup: Option<f64>,
}

fn topk_recall(g: &GraphIndex, flat: &FlatIndex, qs: &Matrix, k: usize, ef: usize) -> Result<f64> {
    let mut r = Vec::new();
    for q in qs.rows() {
        let mut truth = flat.topk(q, k)?;
        truth.sort_unstable();
        let got = g.search_topk(q, k, ef)?;
        r.push(got.iter().filter(|t| truth.binary_search(t).is_ok()).count() as f64 / k as f64);
    }
    Ok(mean(r))
}

/// Builds one kv head's graphs per query head and once for the whole
/// group, with the kNN stage on one thread and on the ambient pool.
pub fn build_bench(w: &Workload, cfg: &BuildBenchConfig) -> Result<BuildReport> {
    let shape = w.spec().shape;
    if cfg.layer >= shape.n_layers || cfg.kv_head >= shape.n_kv_heads {
        return Err(Error::invalid("build bench slot out of range"));
    }
    let keys = Arc::new(w.keys(cfg.layer, cfg.kv_head));
    let heads: Vec<usize> = (0..shape.n_query_heads)
        .filter(|&h| shape.kv_head_of(h) == cfg.kv_head)
        .collect();
    let train: Vec<Matrix> = heads
        .iter()
        .map(|&h| w.queries(cfg.layer, h, cfg.train_queries, cfg.stream))
        .collect();

    let per_head = || -> Result<Vec<GraphIndex>> {
        train
            .iter()
            .map(|q| build_graph(keys.clone(), &sample_queries(q, cfg.sample_ratio), &cfg.graph))
            .collect()
    };
    let shared = || build_shared_graph(keys.clone(), &train, cfg.sample_ratio, &cfg.graph);
    let serial_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let run = |serial: bool, f: &(dyn Fn() -> Result<Vec<GraphIndex>> + Sync)| -> Result<(Vec<GraphIndex>, Option<f64>)> {
        let t = Instant::now();
        let out = if serial { serial_pool.install(f)? } else { f()? };
        Ok((out, cfg.timing.then(|| t.elapsed().as_secs_f64())))
    };
    let shared_vec = || shared().map(|g| vec![g]);
    let mut graphs_per_head = Vec::new();
    let mut graph_shared = Vec::new();
    let mut rows = Vec::new();
    for (knn, serial) in [("serial", true), ("parallel", false)] {
        let (ph, t_ph) = run(serial, &per_head)?;
        let (sh, t_sh) = run(serial, &shared_vec)?;
        rows.push(BuildRow {
            sharing: "per_head",
            knn,
            n_indexes: ph.len(),
            memory_bytes: ph.iter().map(GraphIndex::memory_bytes).sum(),
            build_seconds: t_ph,
        });
        rows.push(BuildRow {
            sharing: "shared",
            knn,
            n_indexes: 1,
            memory_bytes: sh.iter().map(GraphIndex::memory_bytes).sum(),
            build_seconds: t_sh,
        });
        graphs_per_head = ph;
        graph_shared = sh;
    }
    let shared_graph = graph_shared.pop().expect("built above");

    let flat = FlatIndex::new(keys.clone());
    let mut rec_ph = Vec::new();
    let mut rec_sh = Vec::new();
    for (i, &h) in heads.iter().enumerate() {
        let test = w.queries(cfg.layer, h, cfg.test_queries, cfg.stream ^ 0x7e57);
        rec_ph.push(topk_recall(&graphs_per_head[i], &flat, &test, cfg.recall_k, cfg.search_ef)?);
        rec_sh.push(topk_recall(&shared_graph, &flat, &test, cfg.recall_k, cfg.search_ef)?);
    }
    let per_head_mem: usize = graphs_per_head.iter().map(GraphIndex::memory_bytes).sum();
    let speedup = match (rows[0].build_seconds, rows[2].build_seconds) {
        (Some(s), Some(p)) if p > 0.0 => Some(s / p),
        _ => None,
    };
    Ok(BuildReport {
        n_tokens: keys.len(),
        group_size: heads.len(),
        threads: rayon::current_num_threads(),
        memory_ratio: shared_graph.memory_bytes() as f64 / per_head_mem as f64,
        recall_per_head: mean(rec_ph),
        recall_shared: mean(rec_sh),
        parallel_speedup: speedup,
        rows,
    })
}
