mod render;
mod settings;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sparsekv::bench::{
    bench_dipr, bench_heads, build_bench, decode_replay, BuildBenchConfig, DiprBenchConfig, HeadsBenchConfig,
    PlanOverride, ReplayConfig,
};
use sparsekv::planner::IndexKind;
use sparsekv::store::{ContextId, Db};
use sparsekv::vfs::{DirEntry, FileHeader, VectorFile};
use sparsekv::workload::{Workload, WorkloadSpec};
use sparsekv::Matrix;

use render::Format;
use settings::{EngineFlags, WorkloadFlags};

#[derive(Parser, Debug)]
#[command(name = "sparsekv", version, about = "Workloads, benchmarks and storage tools for the sparsekv engine")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "SPARSEKV_CONFIG")]
    config: Option<PathBuf>,
    /// One worker thread and no wall-clock fields, so output is byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads outside deterministic mode (default: all cores).
    #[arg(long, global = true, conflicts_with = "deterministic")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "table")]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Retrieved-token count against recovery ratio for DIPR and top-k.
    BenchDipr(BenchDiprArgs),
    /// Per-head tokens needed for a target recovery against DIPR counts.
    BenchHeads(BenchHeadsArgs),
    /// Import a context and replay decode steps; latency and quality.
    DecodeReplay(ReplayArgs),
    /// Index build time and memory, per-head against group-shared.
    BuildBench(BuildArgs),
    /// Generate a workload context and import it into a database.
    Import(ImportArgs),
    /// Reuse a stored context, decode a few tokens and store the result.
    Store(StoreArgs),
    /// Print vector file headers and directories.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct BenchDiprArgs {
    #[command(flatten)]
    workload: WorkloadFlags,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    query_head: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10,20")]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,256")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    stream: u64,
}

#[derive(Args, Debug)]
struct BenchHeadsArgs {
    #[command(flatten)]
    workload: WorkloadFlags,
    #[arg(long, default_value_t = 5.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.9)]
    target: f64,
    #[arg(long, default_value_t = 50)]
    queries: usize,
    #[arg(long, default_value_t = 1)]
    stream: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PlanArg {
    Auto,
    Full,
    Dipr,
    Topk,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[command(flatten)]
    workload: WorkloadFlags,
    #[command(flatten)]
    engine: EngineFlags,
    /// Database directory (created if absent).
    #[arg(long)]
    db: PathBuf,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, value_enum, default_value = "auto")]
    plan: PlanArg,
    /// Slack for `--plan dipr` (default: planner.dipr_beta).
    #[arg(long)]
    beta: Option<f64>,
    /// k for `--plan topk` (default: planner.top_k).
    #[arg(long)]
    k: Option<usize>,
    /// Sampled queries per query head for graph construction.
    #[arg(long, default_value_t = 1000)]
    build_queries: usize,
    #[arg(long, default_value_t = 1)]
    stream: u64,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[command(flatten)]
    workload: WorkloadFlags,
    #[command(flatten)]
    engine: EngineFlags,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    kv_head: usize,
    #[arg(long, default_value_t = 2000)]
    train_queries: usize,
    #[arg(long, default_value_t = 100)]
    test_queries: usize,
    #[arg(long, default_value_t = 10)]
    recall_k: usize,
    /// Beam width of the top-k recall probe (default: search.topk_ef).
    #[arg(long)]
    ef: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stream: u64,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[command(flatten)]
    workload: WorkloadFlags,
    #[command(flatten)]
    engine: EngineFlags,
    #[arg(long)]
    db: PathBuf,
    #[arg(long, default_value_t = 1000)]
    build_queries: usize,
    #[arg(long, default_value_t = 1)]
    stream: u64,
}

#[derive(Args, Debug)]
struct StoreArgs {
    #[command(flatten)]
    engine: EngineFlags,
    #[arg(long)]
    db: PathBuf,
    /// Id of the context to reuse.
    #[arg(long)]
    context: u64,
    /// Reused prefix length (default: the whole context).
    #[arg(long)]
    prefix: Option<usize>,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Seed of the synthetic decode inputs.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// A vector file, a context directory or a database root.
    path: PathBuf,
    /// Omit directory entries.
    #[arg(long)]
    headers_only: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    let mut s = settings::load(cli.config.as_deref())?;
    let timing = !cli.deterministic;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let f = cli.format;

    match cli.cmd {
        Cmd::BenchDipr(a) => {
            a.workload.apply(&mut s.workload)?;
            let w = Workload::new(s.workload)?;
            let cfg = DiprBenchConfig {
                layer: a.layer,
                query_head: a.query_head,
                n_queries: a.queries,
                betas: a.betas,
                ks: a.ks,
                stream: a.stream,
            };
            render::emit(&mut out, f, "bench-dipr", &bench_dipr(&w, &cfg)?)?;
        }
        Cmd::BenchHeads(a) => {
            a.workload.apply(&mut s.workload)?;
            if s.workload.sharpness.head_spread == 0.0 {
                eprintln!("note: head_spread is 0, so all heads share one sharpness; try --head-spread 1");
            }
            let w = Workload::new(s.workload)?;
            let cfg = HeadsBenchConfig {
                beta: a.beta,
                target_recovery: a.target,
                n_queries: a.queries,
                stream: a.stream,
            };
            render::emit(&mut out, f, "bench-heads", &bench_heads(&w, &cfg)?)?;
        }
        Cmd::DecodeReplay(a) => {
            a.workload.apply(&mut s.workload)?;
            a.engine.apply(&mut s.engine)?;
            let plan = match a.plan {
                PlanArg::Auto => PlanOverride::Auto,
                PlanArg::Full => PlanOverride::Full,
                PlanArg::Dipr => PlanOverride::Dipr {
                    beta: a.beta.unwrap_or(s.engine.planner.dipr_beta),
                },
                PlanArg::Topk => PlanOverride::TopK {
                    k: a.k.unwrap_or(s.engine.planner.top_k),
                },
            };
            let db = Db::open(&a.db, s.engine)?;
            let w = Workload::new(s.workload)?;
            let cfg = ReplayConfig {
                steps: a.steps,
                plan,
                build_queries: a.build_queries,
                timing,
                stream: a.stream,
            };
            render::emit(&mut out, f, "decode-replay", &decode_replay(&db, &w, &cfg)?)?;
        }
        Cmd::BuildBench(a) => {
            a.workload.apply(&mut s.workload)?;
            a.engine.apply(&mut s.engine)?;
            let w = Workload::new(s.workload)?;
            let cfg = BuildBenchConfig {
                layer: a.layer,
                kv_head: a.kv_head,
                train_queries: a.train_queries,
                sample_ratio: s.engine.search.sample_ratio,
                test_queries: a.test_queries,
                recall_k: a.recall_k,
                search_ef: a.ef.unwrap_or(s.engine.search.topk_ef),
                graph: s.engine.graph,
                timing,
                stream: a.stream,
            };
            render::emit(&mut out, f, "build-bench", &build_bench(&w, &cfg)?)?;
        }
        Cmd::Import(a) => {
            a.workload.apply(&mut s.workload)?;
            a.engine.apply(&mut s.engine)?;
            let db = Db::open(&a.db, s.engine)?;
            let report = import(&db, &Workload::new(s.workload)?, a.build_queries, a.stream)?;
            render::emit(&mut out, f, "import", &report)?;
        }
        Cmd::Store(a) => {
            a.engine.apply(&mut s.engine)?;
            let db = Db::open(&a.db, s.engine)?;
            render::emit(&mut out, f, "store", &store(&db, &a)?)?;
        }
        Cmd::Inspect(a) => {
            render::emit(&mut out, f, "inspect", &inspect(&a.path, a.headers_only)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ImportReport {
    context: ContextId,
    /// Relative to the database root.
    dir: PathBuf,
    n_tokens: usize,
    index_kinds: Vec<IndexKind>,
}

fn import(db: &Db, w: &Workload, build_queries: usize, stream: u64) -> Result<ImportReport> {
    let shape = w.spec().shape;
    let samples: Vec<Matrix> = (0..shape.n_layers)
        .flat_map(|l| (0..shape.n_query_heads).map(move |h| (l, h)))
        .map(|(l, h)| w.queries(l, h, build_queries, stream))
        .collect();
    let id = db.import_with_queries(&w.token_ids(), w.kv(), shape, &samples)?;
    let rec = db.get(id)?;
    Ok(ImportReport {
        context: id,
        dir: rec.dir().strip_prefix(db.root()).unwrap_or(rec.dir()).to_path_buf(),
        n_tokens: rec.len(),
        index_kinds: (0..shape.n_layers).map(|l| rec.index_kind(l)).collect(),
    })
}

#[derive(Serialize)]
struct StoreReport {
    base: ContextId,
    prefix_len: usize,
    steps: usize,
    context: ContextId,
    n_tokens: usize,
}

fn store(db: &Db, a: &StoreArgs) -> Result<StoreReport> {
    let base = db.get(ContextId(a.context))?;
    let p = a.prefix.unwrap_or(base.len());
    if p == 0 || p > base.len() {
        bail!("prefix {p} outside 1..={} for context {}", base.len(), base.id());
    }
    let shape = base.shape();
    let (mut session, rest) = db.create_session(&base.token_ids()[..p], shape)?;
    if !rest.is_empty() {
        bail!("context {} prefix was not reused", base.id());
    }
    let w = Workload::new(WorkloadSpec::clustered(p + a.steps, shape, 16, a.seed))?;
    let ids = w.token_ids();
    let slots: Vec<(Matrix, Matrix)> = (0..shape.n_layers)
        .flat_map(|l| (0..shape.n_kv_heads).map(move |h| (l, h)))
        .map(|(l, h)| (w.keys_n(l, h, p + a.steps), w.values_n(l, h, p + a.steps)))
        .collect();
    let queries: Vec<Matrix> = (0..shape.n_layers)
        .flat_map(|l| (0..shape.n_query_heads).map(move |h| (l, h)))
        .map(|(l, h)| w.queries(l, h, a.steps, a.seed))
        .collect();
    for step in 0..a.steps {
        for layer in 0..shape.n_layers {
            let mut k = Matrix::with_dim(shape.dim);
            let mut v = Matrix::with_dim(shape.dim);
            for h in 0..shape.n_kv_heads {
                let (kk, vv) = &slots[layer * shape.n_kv_heads + h];
                k.push(kk.row(p + step))?;
                v.push(vv.row(p + step))?;
            }
            session.update(layer, &k, &v)?;
            let mut q = Matrix::with_dim(shape.dim);
            for h in 0..shape.n_query_heads {
                q.push(queries[layer * shape.n_query_heads + h].row(step))?;
            }
            session.attention(layer, &q)?;
        }
        session.push_token_ids(&[ids[p + step]]);
    }
    let id = db.store(&session)?;
    Ok(StoreReport {
        base: base.id(),
        prefix_len: p,
        steps: a.steps,
        context: id,
        n_tokens: db.get(id)?.len(),
    })
}

#[derive(Serialize)]
struct FileRow {
    /// Relative to the inspected path.
    path: String,
    #[serde(flatten)]
    header: FileHeader,
    directory_entries: usize,
}

#[derive(Serialize)]
struct DirRow {
    path: String,
    #[serde(flatten)]
    entry: DirEntry,
}

#[derive(Serialize)]
struct InspectReport {
    n_files: usize,
    files: Vec<FileRow>,
    directory: Vec<DirRow>,
}

fn vector_files(path: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    if depth == 0 {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() || p.extension().is_some_and(|x| x == "avdb") {
            vector_files(&p, depth - 1, out)?;
        }
    }
    Ok(())
}

fn inspect(path: &Path, headers_only: bool) -> Result<InspectReport> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    let mut paths = Vec::new();
    vector_files(path, 2, &mut paths)?;
    let mut files = Vec::new();
    let mut directory = Vec::new();
    for p in paths {
        let vf = VectorFile::open(&p)?;
        let rel = match p.strip_prefix(path) {
            Ok(r) if !r.as_os_str().is_empty() => r,
            _ => Path::new(p.file_name().unwrap_or_default()),
        };
        let name = rel.display().to_string();
        files.push(FileRow {
            path: name.clone(),
            header: *vf.header(),
            directory_entries: vf.directory().len(),
        });
        if !headers_only {
            directory.extend(vf.directory().iter().map(|&entry| DirRow {
                path: name.clone(),
                entry,
            }));
        }
    }
    Ok(InspectReport {
        n_files: files.len(),
        files,
        directory,
    })
}
