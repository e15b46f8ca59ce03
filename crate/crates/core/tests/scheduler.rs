use std::sync::Arc;

use ndarray::Array2;
use ngdb_core::arena::{Arena, ReclaimPolicy};
use ngdb_core::exec::{compile_batch, run_sequential, take_query_scores, Step, StepResult};
use ngdb_core::kernels::{Backbone, Hyper, KernelRegistry, ModelDims, ModelParams};
use ngdb_core::kg::EntityId;
use ngdb_core::query::{DagOptions, QueryInstance, QueryPattern};
use ngdb_core::sampler::QuerySampler;
use ngdb_core::scheduler::{select_from, Scheduler, SchedulerConfig};
use ngdb_core::semantic::SemanticStore;
use ngdb_core::synth::random_graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_ENT: usize = 100;

fn workload(n: usize, seed: u64) -> (Vec<QueryInstance>, Vec<Arc<[EntityId]>>) {
    let g = random_graph(N_ENT, 6, 900, 0.0, 11).unwrap();
    let s = QuerySampler::new(&g.train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qs = Vec::new();
    let mut cands = Vec::new();
    for i in 0..n {
        let q = s.sample_query(QueryPattern::ALL[i % 14], &mut rng).unwrap();
        let mut c: Vec<EntityId> = (0..6).map(|_| rng.random_range(0..N_ENT as u32)).collect();
        c[0] = ngdb_core::kg::answer_query(&g.train, &q).unwrap()[0];
        qs.push(q);
        cands.push(c.into());
    }
    (qs, cands)
}

fn dims(fused: bool) -> ModelDims {
    ModelDims { n_entities: N_ENT, n_relations: 6, dim: 6, hidden: 5, sem_dim: fused.then_some(4) }
}

fn semantic(rng: &mut ChaCha8Rng) -> SemanticStore<f64> {
    SemanticStore::new(Array2::from_shape_fn((N_ENT, 4), |_| rng.random_range(-1.0..1.0)), "test")
}

enum Exec {
    Sequential,
    Scheduled(SchedulerConfig),
}

fn run(
    exec: &Exec,
    params: &ModelParams<f64>,
    sem: Option<&SemanticStore<f64>>,
    qs: &[QueryInstance],
    cands: &[Arc<[EntityId]>],
    training: bool,
) -> (StepResult<f64>, Vec<Vec<f64>>) {
    let reg = KernelRegistry::new(params.backbone);
    let opts = DagOptions { semantic: sem.is_some() };
    let (dag, plan) = compile_batch(qs, cands, params.backbone, opts, training, N_ENT).unwrap();
    let mut step = Step::new(&reg, params, sem, Hyper::new(12.0, 0.02, qs.len()), &dag, &plan).unwrap();
    let mut arena = Arena::new(ReclaimPolicy::Eager);
    let sinks = match exec {
        Exec::Sequential => run_sequential(&mut step, &mut arena, &dag, &plan).unwrap(),
        Exec::Scheduled(cfg) => {
            let mut s = Scheduler::new(*cfg);
            let sinks = s.run(&mut step, &mut arena, &dag, &plan).unwrap();
            let trace = s.take_trace();
            assert_eq!(trace.total_batch(), dag.len());
            sinks
        }
    };
    let scores = take_query_scores(&mut arena, &dag, &sinks).unwrap();
    assert_eq!(arena.live_tensors(), 0);
    (step.finish().unwrap(), scores)
}

#[test]
fn scheduled_matches_sequential_all_backbones() {
    let (qs, cands) = workload(200, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for b in Backbone::ALL {
        for fused in [false, true] {
            let params = ModelParams::<f64>::init(b, dims(fused), 12.0, &mut rng);
            let sem = fused.then(|| semantic(&mut rng));
            for cfg in [SchedulerConfig::default(), SchedulerConfig { b_max: 7, dual_pool: true }] {
                let (seq, seq_scores) = run(&Exec::Sequential, &params, sem.as_ref(), &qs, &cands, false);
                let (sch, sch_scores) = run(&Exec::Scheduled(cfg), &params, sem.as_ref(), &qs, &cands, false);
                assert!(seq.grads.is_none() && sch.grads.is_none());
                for (a, b) in seq_scores.iter().zip(&sch_scores) {
                    assert_eq!(a.len(), 6);
                    for (x, y) in a.iter().zip(b) {
                        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
                    }
                }
                let (seq, _) = run(&Exec::Sequential, &params, sem.as_ref(), &qs, &cands, true);
                let (sch, _) = run(&Exec::Scheduled(cfg), &params, sem.as_ref(), &qs, &cands, true);
                let d = seq.grads.as_ref().unwrap().max_abs_diff(sch.grads.as_ref().unwrap());
                assert!(d < 1e-10, "{b} fused={fused}: grad diff {d}");
                assert!(seq.grads.unwrap().iter().any(|(_, t)| t.iter().any(|&v| v != 0.0)));
                for (x, y) in seq.losses.iter().zip(&sch.losses) {
                    assert!(x.is_finite() && (x - y).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn trace_replays_selection_rule() {
    let (qs, cands) = workload(140, 6);
    let params = ModelParams::<f64>::init(Backbone::Q2b, dims(false), 12.0, &mut ChaCha8Rng::seed_from_u64(1));
    let reg = KernelRegistry::new(Backbone::Q2b);
    let (dag, plan) = compile_batch(&qs, &cands, Backbone::Q2b, DagOptions::default(), true, N_ENT).unwrap();
    let mut step = Step::new(&reg, &params, None, Hyper::new(12.0, 0.02, qs.len()), &dag, &plan).unwrap();
    let mut arena = Arena::new(ReclaimPolicy::Eager);
    let mut s = Scheduler::new(SchedulerConfig { b_max: 16, dual_pool: false });
    s.run(&mut step, &mut arena, &dag, &plan).unwrap();
    let trace = s.take_trace();
    let mut drained = 0;
    let mut expected = 0;
    for st in &trace.steps {
        if let Some(sel) = &st.selection {
            assert_eq!(drained, expected);
            assert_eq!(select_from(sel, None).unwrap(), st.op);
            expected = sel.iter().find(|p| p.op == st.op).unwrap().len;
            drained = 0;
        }
        assert!(st.batch_size <= 16);
        drained += st.batch_size;
    }
    let mut pos = vec![0usize; dag.len()];
    for (i, id) in trace.order().into_iter().enumerate() {
        pos[id as usize] = i;
    }
    for n in dag.nodes() {
        for inp in &n.inputs {
            assert!(pos[inp.node as usize] < pos[n.id as usize]);
        }
    }
}

#[test]
fn homogeneous_1p_uses_three_calls() {
    let g = random_graph(N_ENT, 6, 900, 0.0, 11).unwrap();
    let s = QuerySampler::new(&g.train);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qs: Vec<_> = (0..512).map(|_| s.sample_query(QueryPattern::P1, &mut rng).unwrap()).collect();
    let cands: Vec<Arc<[EntityId]>> = (0..512).map(|_| vec![0, 1, 2].into()).collect();
    let params = ModelParams::<f64>::init(Backbone::Gqe, dims(false), 12.0, &mut rng);
    let reg = KernelRegistry::new(Backbone::Gqe);
    let (dag, plan) = compile_batch(&qs, &cands, Backbone::Gqe, DagOptions::default(), false, N_ENT).unwrap();
    let mut step = Step::new(&reg, &params, None, Hyper::new(12.0, 0.02, 512), &dag, &plan).unwrap();
    let mut arena = Arena::new(ReclaimPolicy::Eager);
    let mut sch = Scheduler::new(SchedulerConfig::default());
    let sinks = sch.run(&mut step, &mut arena, &dag, &plan).unwrap();
    assert_eq!(sinks.len(), 512);
    assert_eq!(sch.trace().kernel_calls, 3);
    assert_eq!(sch.trace().steps.len(), 3);
}
