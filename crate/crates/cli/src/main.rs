use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ngdb_core::bench::{operator_microbench, throughput_bench, BenchConfig, Mixture, Workload};
use ngdb_core::config::RunConfig;
use ngdb_core::eval::{evaluate, one_hop_records, EvalOptions};
use ngdb_core::kernels::Backbone;
use ngdb_core::kg::{load_graph, GraphSplit};
use ngdb_core::query::{read_query_records, write_query_records, OpKind, QueryPattern};
use ngdb_core::trainer::{load_checkpoint, load_configured_store, peek_checkpoint, Trainer, TrainOutputs};
use ngdb_core::{gradcheck, sampler, semantic, synth, Error, Precision, Result, Scalar};

const DATA_ENV: &str = "NGDBZOO_DATA_DIR";

/// Operator-level batched training for knowledge-graph query embeddings.
#[derive(Parser, Debug)]
#[command(name = "ngdbzoo", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Thread budget; 1 selects single-threaded, bitwise-reproducible mode
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Floating-point precision of parameters and kernels
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Write the scheduler execution trace of the last step as JSON
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// TOML config file with [train] and [data] sections
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing checkpoints and a metrics log
    Train(TrainArgs),
    /// Filtered ranking evaluation of a checkpoint
    Eval(EvalArgs),
    /// Operator-level vs query-level executor throughput
    Bench(BenchArgs),
    /// Write a frozen JSON-lines query set
    Sample(SampleArgs),
    /// Convert raw little-endian f32 rows into an NGSE semantic store
    ImportEmbeddings(ImportArgs),
    /// Finite-difference check of every kernel
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory (entities.dict, relations.dict, train/valid/test.txt)
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// gqe, q2b or betae
    #[arg(long)]
    backbone: Option<Backbone>,
    /// Optimizer steps
    #[arg(long)]
    steps: Option<u64>,
    /// Comma-separated pattern tags, e.g. 1p,2p,2in
    #[arg(long, value_delimiter = ',')]
    patterns: Option<Vec<QueryPattern>>,
    /// Enable difficulty-adaptive pattern sampling
    #[arg(long)]
    adaptive: bool,
    /// NGSE semantic store to fuse with entity embeddings
    #[arg(long)]
    semantic_store: Option<PathBuf>,
    /// Output directory for checkpoints and metrics
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines query file; 1p queries over the test edges when omitted
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Report path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// uniform, single:<pattern>, or a JSON file of pattern weights
    #[arg(long, default_value = "uniform")]
    mixture: String,
    /// Batches per timed repetition
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// gqe, q2b or betae
    #[arg(long)]
    backbone: Option<Backbone>,
    /// Queries per batch
    #[arg(long, default_value_t = 512)]
    batch: usize,
    /// Timed repetitions; the median is reported
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Time the forward pass only
    #[arg(long)]
    forward_only: bool,
    /// Also run the set-operator microbenchmarks (n=1024, k=2, d=400)
    #[arg(long)]
    micro: bool,
    /// Report path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Comma-separated pattern tags; all fourteen when omitted
    #[arg(long, value_delimiter = ',')]
    patterns: Option<Vec<QueryPattern>>,
    /// Number of queries
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// JSON-lines output; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct ImportArgs {
    /// Headerless row-major little-endian f32 file
    #[arg(long = "in")]
    input: PathBuf,
    /// Floats per row
    #[arg(long)]
    dim: usize,
    /// NGSE output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per kernel
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let kind = match e.kind() {
                K::InvalidSubcommand | K::MissingSubcommand => "unknown_subcommand",
                _ => "usage",
            };
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": kind, "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Config { field, .. } = &e {
                line["field"] = json!(field);
            }
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut rc = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    if let Some(s) = g.seed {
        rc.train.seed = s;
    }
    if let Some(p) = &g.precision {
        rc.train.precision = p.parse().map_err(|_| Error::config("precision", format!("expected f32 or f64, got `{p}`")))?;
    }
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        rc.train.workers = n - 1;
        // a second build_global in one process is the only failure mode
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.cmd {
        Command::Train(a) => {
            if let Some(b) = a.backbone {
                rc.train.backbone = b;
            }
            if let Some(s) = a.steps {
                rc.train.steps = s;
            }
            if let Some(p) = a.patterns {
                rc.train.patterns = p;
            }
            if a.adaptive {
                rc.train.adaptive = true;
            }
            if a.semantic_store.is_some() {
                rc.train.semantic_store = a.semantic_store;
            }
            if a.out.is_some() {
                rc.data.out = a.out;
            }
            if a.data.data_dir.is_some() {
                rc.data.dir = a.data.data_dir;
            }
            rc.train.validate()?;
            let split = load_split(&rc)?;
            match rc.train.precision {
                Precision::F32 => train::<f32>(&rc, &split, g.trace.clone()),
                Precision::F64 => train::<f64>(&rc, &split, g.trace.clone()),
            }
        }
        Command::Eval(a) => {
            if a.data.data_dir.is_some() {
                rc.data.dir = a.data.data_dir.clone();
            }
            let header = peek_checkpoint(&a.checkpoint)?;
            if let Some(path) = &g.config {
                if config_names_backbone(path)? && rc.train.backbone != header.backbone {
                    return Err(Error::BackboneMismatch { checkpoint: header.backbone.to_string(), config: rc.train.backbone.to_string() });
                }
            }
            // the checkpoint's own precision wins unless one was asked for explicitly
            let precision = if g.precision.is_some() { rc.train.precision } else { header.precision };
            let split = load_split(&rc)?;
            let report = match precision {
                Precision::F32 => eval::<f32>(&a, &split)?,
                Precision::F64 => eval::<f64>(&a, &split)?,
            };
            emit(a.out.as_deref(), &report)
        }
        Command::Bench(a) => {
            if let Some(b) = a.backbone {
                rc.train.backbone = b;
            }
            if a.data.data_dir.is_some() {
                rc.data.dir = a.data.data_dir.clone();
            }
            let split = load_split(&rc)?;
            let report = match rc.train.precision {
                Precision::F32 => bench::<f32>(&a, &rc, &split)?,
                Precision::F64 => bench::<f64>(&a, &rc, &split)?,
            };
            if let Some(t) = &g.trace {
                write_bench_trace(&a, &rc, &split, t)?;
            }
            emit(a.out.as_deref(), &report)
        }
        Command::Sample(a) => {
            if a.data.data_dir.is_some() {
                rc.data.dir = a.data.data_dir;
            }
            let split = load_split(&rc)?;
            let patterns = a.patterns.unwrap_or_else(|| rc.train.patterns.clone());
            let records = sampler::sample_records(&split, &patterns, a.count, rc.train.seed)?;
            match &a.out {
                Some(p) => {
                    write_query_records(std::io::BufWriter::new(std::fs::File::create(p)?), &records)?;
                    write_meta(p, &rc, json!({ "count": records.len(), "seed": rc.train.seed, "patterns": patterns }))
                }
                None => write_query_records(std::io::stdout().lock(), &records),
            }
        }
        Command::ImportEmbeddings(a) => {
            let rows = semantic::import_raw_f32(&a.input, a.dim, &a.out)?;
            write_meta(&a.out, &rc, json!({ "rows": rows, "dim": a.dim, "source": a.input }))?;
            println!("{}", json!({ "rows": rows, "dim": a.dim, "out": a.out }));
            Ok(())
        }
        Command::Gradcheck(a) => {
            let results = gradcheck::run_suite(a.instances.max(1), rc.train.seed);
            println!("config_hash {}", rc.train.hash_hex());
            print!("{}", gradcheck::format_table(&results));
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::NonFinite("finite-difference check failed"));
            }
            Ok(())
        }
    }
}

/// Flag, then config file, then the environment, then the bundled synthetic graph.
fn load_split(rc: &RunConfig) -> Result<GraphSplit> {
    let dir = rc.data.dir.clone().or_else(|| std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    match dir {
        Some(d) => load_graph(d),
        None => Ok(synth::bundled_graph()),
    }
}

fn emit<S: serde::Serialize>(out: Option<&Path>, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

/// Sidecar `<file>.meta.json` for artifacts whose format has no header room.
fn write_meta(artifact: &Path, rc: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".meta.json");
    let meta = json!({ "config_hash": rc.train.hash_hex(), "config": rc, "details": extra });
    std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn train<T: Scalar>(rc: &RunConfig, split: &GraphSplit, trace: Option<PathBuf>) -> Result<()> {
    let store = load_configured_store::<T>(&rc.train, split.n_entities())?;
    let mut trainer = Trainer::<T>::new(rc.train.clone(), split, store)?;
    let dir = rc.data.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    trainer.train(&TrainOutputs { dir: Some(dir.clone()), trace })?;
    let last = trainer.metrics.last();
    println!(
        "{}",
        json!({
            "config_hash": trainer.config_hash(),
            "steps": trainer.step,
            "loss": last.map(|m| m.loss),
            "checkpoint": dir.join("last.ngck"),
            "metrics": dir.join("metrics.jsonl"),
        })
    );
    Ok(())
}

/// Whether the config file sets `train.backbone` itself rather than inheriting the default.
fn config_names_backbone(path: &Path) -> Result<bool> {
    let v: toml::Table = std::fs::read_to_string(path)?.parse().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
    Ok(v.get("train").and_then(|t| t.get("backbone")).is_some())
}

fn eval<T: Scalar>(a: &EvalArgs, split: &GraphSplit) -> Result<ngdb_core::eval::EvalReport> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let cfg = &ck.header.config;
    if ck.params.n_entities() != split.n_entities() {
        return Err(Error::CountMismatch { expected: split.n_entities(), found: ck.params.n_entities() });
    }
    let store = load_configured_store::<T>(cfg, split.n_entities())?;
    let (records, name) = match &a.queries {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
            (read_query_records(std::io::BufReader::new(std::fs::File::open(p)?))?, p.display().to_string())
        }
        None => (one_hop_records(split, &split.test_edges)?, "test-1p".to_string()),
    };
    let opts = EvalOptions { gamma: cfg.gamma, alpha_box: cfg.alpha_box, b_max: cfg.b_max, ..Default::default() };
    let mut report = evaluate(&ck.params, store.as_ref(), &records, &name, &opts)?;
    report.config_hash = Some(ck.header.config_hash);
    Ok(report)
}

fn bench_config(a: &BenchArgs, rc: &RunConfig) -> BenchConfig {
    BenchConfig {
        backbone: rc.train.backbone,
        dim: rc.train.dim,
        hidden: rc.train.hidden,
        n_neg: rc.train.n_neg,
        b_max: rc.train.b_max,
        steps: a.steps.max(1),
        reps: a.reps.max(1),
        training: !a.forward_only,
        seed: rc.train.seed,
        ..Default::default()
    }
}

fn bench<T: Scalar>(a: &BenchArgs, rc: &RunConfig, split: &GraphSplit) -> Result<ngdb_core::bench::BenchReport> {
    let cfg = bench_config(a, rc);
    let workload = Workload::new(&Mixture::parse(&a.mixture)?, a.batch, cfg.seed)?;
    let mut report = throughput_bench::<T>(split, &workload, &cfg)?;
    if a.micro {
        for op in [OpKind::Intersect, OpKind::UnionScore] {
            report.micro.push(operator_microbench::<T>(cfg.backbone, op, 1024, 2, 400, cfg.reps, cfg.seed)?);
        }
    }
    report.config_hash = Some(rc.train.hash_hex());
    Ok(report)
}

fn write_bench_trace(a: &BenchArgs, rc: &RunConfig, split: &GraphSplit, path: &Path) -> Result<()> {
    use rand::SeedableRng;
    let cfg = bench_config(a, rc);
    let workload = Workload::new(&Mixture::parse(&a.mixture)?, a.batch, cfg.seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let (qs, cands) = workload.sample(split, cfg.n_neg, &mut rng)?;
    let dims = ngdb_core::kernels::ModelDims {
        n_entities: split.n_entities(),
        n_relations: split.n_relations(),
        dim: cfg.dim,
        hidden: cfg.hidden,
        sem_dim: None,
    };
    let params = ngdb_core::Params32::init(cfg.backbone, dims, rc.train.gamma, &mut rng);
    let registry = ngdb_core::kernels::KernelRegistry::new(cfg.backbone);
    let mut arena = ngdb_core::arena::Arena::default();
    let (trace, _) = ngdb_core::bench::execute_batch(
        ngdb_core::bench::Executor::Operator,
        &params,
        &registry,
        &qs,
        &cands,
        cfg.b_max,
        cfg.training,
        &mut arena,
    )?;
    trace.write_json(path)
}
