//! Query-level baseline executor and the throughput / invocation / per-operator
//! benchmark harness that compares it with the operator-level scheduler.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arena::{Arena, IndexPlan, TensorHandle};
use crate::error::{Error, Result};
use crate::exec::{compile_batch, release_sinks, ExecState, Step};
use crate::kernels::{Backbone, Batch, EntityView, Env, Hyper, KernelRegistry, ModelDims, ModelParams};
use crate::kg::{EntityId, GraphSplit};
use crate::query::{Dag, DagOptions, NodeId, OpKind, OperatorType, QueryInstance, QueryPattern};
use crate::sampler::QuerySampler;
use crate::scalar::Scalar;
use crate::scheduler::{ExecutionTrace, Scheduler, SchedulerConfig, TraceStep, DEFAULT_B_MAX};
use crate::trainer::negative_sample;

/// Baseline: queries grouped by pattern, each group run position by position
/// (one kernel call per node position of the pattern), groups in sequence.
pub fn run_query_level<T: Scalar>(
    step: &mut Step<'_, T>,
    arena: &mut Arena<T>,
    dag: &Dag,
    plan: &IndexPlan,
    b_max: usize,
) -> Result<(Vec<(NodeId, TensorHandle)>, ExecutionTrace)> {
    for op in dag.type_histogram().keys() {
        step.registry.get(*op)?;
    }
    let b_max = b_max.max(1);
    let mut groups: BTreeMap<QueryPattern, Vec<usize>> = BTreeMap::new();
    for (i, q) in dag.queries().iter().enumerate() {
        groups.entry(q.pattern).or_default().push(i);
    }
    let mut trace = ExecutionTrace { b_max, n_nodes: dag.len(), ..Default::default() };
    let mut st = ExecState::new(dag, plan);
    for members in groups.values() {
        let width = dag.queries()[members[0]].nodes.len();
        for pos in 0..width {
            let nodes: Vec<NodeId> = members.iter().map(|&q| dag.queries()[q].nodes[pos]).collect();
            for chunk in nodes.chunks(b_max) {
                let op = dag.node(chunk[0]).op;
                if chunk.iter().any(|&id| !st.is_ready(id)) {
                    return Err(Error::Stalled { pending: dag.len() - st.n_executed });
                }
                let done = st.execute(step, arena, chunk)?;
                trace.steps.push(TraceStep {
                    step: trace.steps.len(),
                    op,
                    selection: None,
                    batch_size: chunk.len(),
                    classes: vec![(dag.node(chunk[0]).cardinality(), chunk.len())],
                    nodes: chunk.to_vec(),
                    bytes_reclaimed: done.bytes,
                    reclaimed: done.reclaimed,
                    live_bytes: arena.current_bytes(),
                    concurrent: false,
                });
            }
        }
    }
    if st.n_executed != dag.len() {
        return Err(Error::Stalled { pending: dag.len() - st.n_executed });
    }
    arena.flush_deferred();
    trace.kernel_calls = st.kernel_calls;
    trace.peak_bytes = arena.peak_bytes();
    Ok((st.sinks(), trace))
}

/// Pattern mixture of a benchmark workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixture {
    Uniform,
    Single(QueryPattern),
    Custom(BTreeMap<QueryPattern, f64>),
}

impl Mixture {
    /// `uniform`, `single:<pattern>`, or a path to a JSON object of pattern weights.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(Mixture::Uniform);
        }
        if let Some(p) = s.strip_prefix("single:") {
            return p.parse().map(Mixture::Single).map_err(|e: Error| Error::config("mixture", e.to_string()));
        }
        let path = Path::new(s);
        if !path.is_file() {
            return Err(Error::config("mixture", format!("expected uniform, single:<pattern> or a JSON file, got `{s}`")));
        }
        let w: BTreeMap<QueryPattern, f64> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Mixture::Custom(w))
    }

    fn weights(&self) -> Vec<(QueryPattern, f64)> {
        match self {
            Mixture::Uniform => QueryPattern::ALL.iter().map(|&p| (p, 1.0)).collect(),
            Mixture::Single(p) => vec![(*p, 1.0)],
            Mixture::Custom(w) => w.iter().map(|(&p, &c)| (p, c)).collect(),
        }
    }
}

/// Exact per-pattern query counts for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub counts: BTreeMap<QueryPattern, usize>,
    pub total: usize,
    pub seed: u64,
}

impl Workload {
    /// Largest-remainder apportionment of `total` over the mixture.
    pub fn new(mixture: &Mixture, total: usize, seed: u64) -> Result<Self> {
        let w = mixture.weights();
        let sum: f64 = w.iter().map(|x| x.1).sum();
        if total == 0 || !(sum > 0.0) || w.iter().any(|x| !(x.1 >= 0.0)) {
            return Err(Error::config("mixture", "needs a positive total and nonnegative weights"));
        }
        let quotas: Vec<f64> = w.iter().map(|x| x.1 / sum * total as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
        let short = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        Ok(Workload { counts: w.iter().zip(counts).filter(|(_, c)| *c > 0).map(|(x, c)| (x.0, c)).collect(), total, seed })
    }

    /// Queries in shuffled order, positive-first candidate lists.
    pub fn sample(&self, split: &GraphSplit, n_neg: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<QueryInstance>, Vec<Arc<[EntityId]>>)> {
        let sampler = QuerySampler::new(&split.train);
        let mut qs = Vec::with_capacity(self.total);
        for (&p, &c) in &self.counts {
            for _ in 0..c {
                qs.push(sampler.sample_query(p, rng)?);
            }
        }
        qs.shuffle(rng);
        let mut cands = Vec::with_capacity(qs.len());
        for q in &qs {
            let a = crate::kg::predictive_answers(split, q)?;
            let mut c = vec![a.observed[rng.random_range(0..a.observed.len())]];
            c.extend(negative_sample(split.n_entities(), &a.all(), n_neg, rng)?);
            cands.push(c.into());
        }
        Ok((qs, cands))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub backbone: Backbone,
    pub dim: usize,
    pub hidden: usize,
    pub n_neg: usize,
    pub b_max: usize,
    /// Batches per timed repetition.
    pub steps: usize,
    pub warmups: usize,
    pub reps: usize,
    /// Forward plus backward when set, forward only otherwise.
    pub training: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            backbone: Backbone::Gqe,
            dim: 400,
            hidden: 400,
            n_neg: 128,
            b_max: DEFAULT_B_MAX,
            steps: 50,
            warmups: 2,
            reps: 5,
            training: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutorStats {
    /// Including the median sampling time of the same batches.
    pub qps: f64,
    pub qps_excl_sampling: f64,
    /// Median wall time of one repetition.
    pub wall_secs: f64,
    /// Kernel invocations per batch, from the execution trace.
    pub kernel_calls: u64,
    pub peak_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroResult {
    pub op: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub loop_secs: f64,
    pub batched_secs: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: Workload,
    pub backbone: Backbone,
    pub precision: crate::Precision,
    pub training: bool,
    pub steps: usize,
    pub reps: usize,
    pub operator: ExecutorStats,
    pub query_level: ExecutorStats,
    /// `operator.qps / query_level.qps`
    pub speedup: f64,
    /// `query_level.kernel_calls / operator.kernel_calls`
    pub invocation_ratio: f64,
    pub micro: Vec<MicroResult>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Executor {
    Operator,
    QueryLevel,
}

/// Runs one batch with the chosen executor; returns its trace.
pub fn execute_batch<T: Scalar>(
    executor: Executor,
    params: &ModelParams<T>,
    registry: &KernelRegistry<T>,
    qs: &[QueryInstance],
    cands: &[Arc<[EntityId]>],
    b_max: usize,
    training: bool,
    arena: &mut Arena<T>,
) -> Result<(ExecutionTrace, Option<ModelParams<T>>)> {
    let (dag, plan) = compile_batch(qs, cands, params.backbone, DagOptions::default(), training, params.n_entities())?;
    let mut step = Step::new(registry, params, None, Hyper::new(12.0, 0.02, qs.len()), &dag, &plan)?;
    arena.reset_peak();
    let (sinks, trace) = match executor {
        Executor::Operator => {
            let mut s = Scheduler::new(SchedulerConfig { b_max, dual_pool: false });
            let sinks = s.run(&mut step, arena, &dag, &plan)?;
            (sinks, s.take_trace())
        }
        Executor::QueryLevel => run_query_level(&mut step, arena, &dag, &plan, b_max)?,
    };
    release_sinks(arena, &sinks)?;
    arena.flush_deferred();
    Ok((trace, step.finish()?.grads))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times both executors on the same pre-sampled batches.
pub fn throughput_bench<T: Scalar>(split: &GraphSplit, workload: &Workload, cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = ModelDims { n_entities: split.n_entities(), n_relations: split.n_relations(), dim: cfg.dim, hidden: cfg.hidden, sem_dim: None };
    let params = ModelParams::<T>::init(cfg.backbone, dims, 12.0, &mut rng);
    let registry = KernelRegistry::new(cfg.backbone);
    let steps = cfg.steps.max(1);
    let mut batches = Vec::with_capacity(steps);
    let mut sample_secs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t0 = Instant::now();
        batches.push(workload.sample(split, cfg.n_neg, &mut rng)?);
        sample_secs.push(t0.elapsed().as_secs_f64());
    }
    let sampling: f64 = sample_secs.iter().sum();
    let n_queries = (steps * workload.total) as f64;
    let mut stats = [ExecutorStats::default(), ExecutorStats::default()];
    for (slot, ex) in [Executor::Operator, Executor::QueryLevel].into_iter().enumerate() {
        let mut arena = Arena::default();
        let mut times = Vec::with_capacity(cfg.reps);
        let mut calls = 0;
        let mut peak = 0;
        for rep in 0..cfg.warmups + cfg.reps.max(1) {
            let t0 = Instant::now();
            for (qs, cands) in &batches {
                let (trace, _) = execute_batch(ex, &params, &registry, qs, cands, cfg.b_max, cfg.training, &mut arena)?;
                calls = trace.kernel_calls;
                peak = peak.max(trace.peak_bytes);
            }
            if rep >= cfg.warmups {
                times.push(t0.elapsed().as_secs_f64());
            }
        }
        let wall = median(times);
        stats[slot] = ExecutorStats {
            qps: n_queries / (wall + sampling),
            qps_excl_sampling: n_queries / wall,
            wall_secs: wall,
            kernel_calls: calls,
            peak_bytes: peak,
        };
    }
    let [operator, query_level] = stats;
    Ok(BenchReport {
        workload: workload.clone(),
        backbone: cfg.backbone,
        precision: T::PRECISION,
        training: cfg.training,
        steps,
        reps: cfg.reps,
        speedup: operator.qps_excl_sampling / query_level.qps_excl_sampling,
        invocation_ratio: query_level.kernel_calls as f64 / operator.kernel_calls as f64,
        operator,
        query_level,
        micro: Vec::new(),
        config_hash: None,
    })
}

/// One kernel call per operator instance against one stacked call, on
/// identical random inputs of width `d`. `op` is `Intersect` or `UnionScore`.
pub fn operator_microbench<T: Scalar>(backbone: Backbone, op: OpKind, n: usize, k: usize, d: usize, reps: usize, seed: u64) -> Result<MicroResult> {
    if !matches!(op, OpKind::Intersect | OpKind::UnionScore) {
        return Err(Error::config("op", "microbench covers intersect and union_score"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims { n_entities: 2, n_relations: 1, dim: d, hidden: d, sem_dim: None };
    let params = ModelParams::<T>::init(backbone, dims, 12.0, &mut rng);
    let registry = KernelRegistry::<T>::new(backbone);
    let kernel = registry.get(OperatorType::fwd(op))?;
    let view = EntityView::build(&params, None, Vec::new(), false)?;
    let env = Env { params: &params, semantic: None, view: &view, hyper: Hyper::new(12.0, 0.02, n) };
    let width = if op == OpKind::UnionScore { d } else { params.state_width() };
    let (lo, hi) = if backbone == Backbone::BetaE && op == OpKind::Intersect { (0.05, 3.0) } else { (-1.0, 1.0) };
    let inputs: Vec<Array2<T>> = (0..k).map(|_| Array2::from_shape_simple_fn((n, width), || T::lit(rng.random_range(lo..hi)))).collect();
    let ids: Vec<NodeId> = (0..n as NodeId).collect();
    let stacked = Batch { nodes: &ids, inputs: inputs.clone(), ids: Vec::new(), rows: Vec::new(), origins: vec![0; n] };
    let singles: Vec<Batch<'_, T>> = (0..n)
        .map(|i| Batch {
            nodes: &ids[i..i + 1],
            inputs: inputs.iter().map(|a| a.slice(ndarray::s![i..i + 1, ..]).to_owned()).collect(),
            ids: Vec::new(),
            rows: Vec::new(),
            origins: vec![0],
        })
        .collect();
    let batched = kernel.forward(&stacked, &env)?;
    let mut diff = 0.0f64;
    for (i, b) in singles.iter().enumerate() {
        let one = kernel.forward(b, &env)?;
        for (x, y) in one.iter().zip(batched.row(i)) {
            diff = diff.max((x.as_f64() - y.as_f64()).abs());
        }
    }
    if diff > 1e-12 * if T::PRECISION == crate::Precision::F32 { 1e5 } else { 1.0 } {
        return Err(Error::NonFinite("loop and stacked outputs differ"));
    }
    let mut loop_t = Vec::new();
    let mut batch_t = Vec::new();
    for _ in 0..reps.max(1) + 1 {
        let t0 = Instant::now();
        for b in &singles {
            std::hint::black_box(kernel.forward(b, &env)?);
        }
        loop_t.push(t0.elapsed().as_secs_f64());
        let t0 = Instant::now();
        std::hint::black_box(kernel.forward(&stacked, &env)?);
        batch_t.push(t0.elapsed().as_secs_f64());
    }
    // first pass warms caches
    let (l, b) = (median(loop_t[1..].to_vec()), median(batch_t[1..].to_vec()));
    Ok(MicroResult { op: OperatorType::fwd(op).to_string(), n, k, d, loop_secs: l, batched_secs: b, speedup: l / b, max_abs_diff: diff })
}
