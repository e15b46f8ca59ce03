use std::sync::Arc;

use ngdb_core::arena::Arena;
use ngdb_core::bench::{execute_batch, operator_microbench, throughput_bench, BenchConfig, Executor, Mixture, Workload};
use ngdb_core::exec::{compile_batch, take_query_scores, Step};
use ngdb_core::kernels::{Backbone, Hyper, KernelRegistry, ModelDims, ModelParams};
use ngdb_core::kg::EntityId;
use ngdb_core::query::{DagOptions, OpKind, QueryInstance, QueryPattern};
use ngdb_core::synth::random_graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> ModelDims {
    ModelDims { n_entities: 100, n_relations: 6, dim: 6, hidden: 5, sem_dim: None }
}

fn batch(mixture: &Mixture, total: usize, seed: u64) -> (Vec<QueryInstance>, Vec<Arc<[EntityId]>>) {
    let g = random_graph(100, 6, 900, 0.1, 11).unwrap();
    let w = Workload::new(mixture, total, seed).unwrap();
    w.sample(&g, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn scores(ex: Executor, params: &ModelParams<f64>, qs: &[QueryInstance], cands: &[Arc<[EntityId]>]) -> Vec<Vec<f64>> {
    let reg = KernelRegistry::new(params.backbone);
    let (dag, plan) = compile_batch(qs, cands, params.backbone, DagOptions::default(), false, 100).unwrap();
    let mut step = Step::new(&reg, params, None, Hyper::new(12.0, 0.02, qs.len()), &dag, &plan).unwrap();
    let mut arena = Arena::default();
    let sinks = match ex {
        Executor::Operator => ngdb_core::scheduler::Scheduler::new(Default::default()).run(&mut step, &mut arena, &dag, &plan).unwrap(),
        Executor::QueryLevel => ngdb_core::bench::run_query_level(&mut step, &mut arena, &dag, &plan, 512).unwrap().0,
    };
    take_query_scores(&mut arena, &dag, &sinks).unwrap()
}

#[test]
fn executors_agree() {
    let (qs, cands) = batch(&Mixture::Uniform, 140, 3);
    for b in Backbone::ALL {
        let params = ModelParams::<f64>::init(b, dims(), 12.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (a, c) = (scores(Executor::Operator, &params, &qs, &cands), scores(Executor::QueryLevel, &params, &qs, &cands));
        for (x, y) in a.iter().flatten().zip(c.iter().flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
        let reg = KernelRegistry::new(b);
        let mut arena = Arena::default();
        let (_, ga) = execute_batch(Executor::Operator, &params, &reg, &qs, &cands, 512, true, &mut arena).unwrap();
        let (_, gb) = execute_batch(Executor::QueryLevel, &params, &reg, &qs, &cands, 512, true, &mut arena).unwrap();
        assert!(ga.unwrap().max_abs_diff(&gb.unwrap()) < 1e-10);
        assert_eq!(arena.live_tensors(), 0);
    }
}

#[test]
fn invocation_counts() {
    let params = ModelParams::<f64>::init(Backbone::Gqe, dims(), 12.0, &mut ChaCha8Rng::seed_from_u64(1));
    let reg = KernelRegistry::new(Backbone::Gqe);
    let mut arena = Arena::default();
    let (qs, cands) = batch(&Mixture::Single(QueryPattern::P1), 512, 4);
    for ex in [Executor::Operator, Executor::QueryLevel] {
        let (t, _) = execute_batch(ex, &params, &reg, &qs, &cands, 512, false, &mut arena).unwrap();
        assert_eq!(t.kernel_calls, 3);
    }
    let (qs, cands) = batch(&Mixture::Uniform, 14 * 8, 5);
    let (t, _) = execute_batch(Executor::QueryLevel, &params, &reg, &qs, &cands, 512, false, &mut arena).unwrap();
    let expected: usize = QueryPattern::ALL.iter().map(|p| p.arity().nodes).sum();
    assert_eq!(t.kernel_calls, expected as u64);
    let (t, _) = execute_batch(Executor::QueryLevel, &params, &reg, &qs, &cands, 512, true, &mut arena).unwrap();
    assert_eq!(t.kernel_calls, 2 * expected as u64);
}

#[test]
fn workload_apportionment() {
    let w = Workload::new(&Mixture::Uniform, 512, 0).unwrap();
    assert_eq!(w.counts.len(), 14);
    assert_eq!(w.counts.values().sum::<usize>(), 512);
    assert!(w.counts.values().all(|&c| c == 36 || c == 37));
    assert_eq!(Mixture::parse("single:2in").unwrap(), Mixture::Single(QueryPattern::In2));
    assert!(Mixture::parse("bogus").is_err());
}

#[test]
fn small_bench_reports() {
    let g = random_graph(100, 6, 900, 0.1, 11).unwrap();
    let cfg = BenchConfig { dim: 8, hidden: 8, n_neg: 4, steps: 2, warmups: 1, reps: 3, ..Default::default() };
    let w = Workload::new(&Mixture::Uniform, 128, 0).unwrap();
    let r = throughput_bench::<f32>(&g, &w, &cfg).unwrap();
    assert!(r.speedup > 0.0 && r.operator.qps > 0.0 && r.query_level.qps > 0.0);
    assert!(r.invocation_ratio >= 3.0, "{}", r.invocation_ratio);
    for op in [OpKind::Intersect, OpKind::UnionScore] {
        let m = operator_microbench::<f64>(Backbone::Gqe, op, 64, 2, 16, 3, 1).unwrap();
        assert!(m.max_abs_diff <= 1e-12 && m.loop_secs > 0.0 && m.batched_secs > 0.0);
    }
}
