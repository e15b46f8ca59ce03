//! Central finite-difference checks of every backward kernel, plus an
//! end-to-end check of a scheduled training step.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arena::{Arena, ReclaimPolicy};
use crate::error::Result;
use crate::exec::{compile_batch, run_sequential, take_query_scores, Step};
use crate::kernels::beta::{self, BetaStats};
use crate::kernels::fusion::{self, FusionWeights};
use crate::kernels::loss::{margin_loss_rows, union_score, union_score_backward};
use crate::kernels::{gqe, q2b, Backbone, Hyper, KernelRegistry, ModelDims, ModelParams};
use crate::kg::EntityId;
use crate::query::{DagOptions, QueryInstance, QueryPattern};
use crate::scheduler::{Scheduler, SchedulerConfig};
use crate::semantic::SemanticStore;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub kernel: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Tensors = Vec<Array2<f64>>;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both
/// gradients vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares `grad(x, g)` with central differences of `Σ g ⊙ f(x)` for every
/// input tensor that has an analytic gradient.
fn check_fd(x: Tensors, f: &dyn Fn(&[Array2<f64>]) -> Array2<f64>, grad: &dyn Fn(&[Array2<f64>], &Array2<f64>) -> Vec<Option<Array2<f64>>>, rng: &mut ChaCha8Rng) -> f64 {
    let x: Tensors = x.into_iter().map(|a| a.as_standard_layout().into_owned()).collect();
    let out = f(&x);
    let g = Array2::from_shape_fn(out.dim(), |_| rng.random_range(-1.0..1.0));
    let analytic = grad(&x, &g);
    let objective = |x: &[Array2<f64>]| (&f(x) * &g).sum();
    let mut worst = 0.0f64;
    let mut x = x;
    for (i, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        let mut num = Vec::with_capacity(a.len());
        for j in 0..x[i].len() {
            let orig = x[i].as_slice().unwrap()[j];
            x[i].as_slice_mut().unwrap()[j] = orig + STEP;
            let up = objective(&x);
            x[i].as_slice_mut().unwrap()[j] = orig - STEP;
            let down = objective(&x);
            x[i].as_slice_mut().unwrap()[j] = orig;
            num.push((up - down) / (2.0 * STEP));
        }
        let a: Vec<f64> = a.iter().copied().collect();
        worst = worst.max(rel_err(&a, &num));
    }
    worst
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

fn views(x: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
    x.iter().map(|a| a.view()).collect()
}

const N: usize = 3;
const D: usize = 4;
const H: usize = 5;

fn gqe_project(rng: &mut ChaCha8Rng) -> f64 {
    let x = vec![rand_mat(rng, N, D, -1.0, 1.0), rand_mat(rng, N, D, -1.0, 1.0)];
    check_fd(x, &|x| gqe::project(x[0].view(), x[1].view()).unwrap(), &|_, g| vec![Some(g.clone()), Some(g.clone())], rng)
}

fn gqe_intersect(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..=3);
    let mut x: Tensors = (0..k).map(|_| rand_mat(rng, N, D, -1.0, 1.0)).collect();
    x.push(rand_mat(rng, D, D, -1.0, 1.0));
    x.push(rand_mat(rng, D, D, -1.0, 1.0));
    check_fd(
        x,
        &|x| gqe::intersect(&views(&x[..k]), &x[k], &x[k + 1]).unwrap(),
        &|x, g| {
            let (mut g1, mut g2) = (Array2::zeros((D, D)), Array2::zeros((D, D)));
            let dx = gqe::intersect_backward(&views(&x[..k]), &x[k], &x[k + 1], g.view(), &mut g1, &mut g2).unwrap();
            dx.into_iter().map(Some).chain([Some(g1), Some(g2)]).collect()
        },
        rng,
    )
}

fn gqe_distance(rng: &mut ChaCha8Rng) -> f64 {
    let cands: Vec<Vec<u32>> = (0..N).map(|_| (0..4).map(|_| rng.random_range(0..6)).collect()).collect();
    let x = loop {
        let (q, v) = (rand_mat(rng, N, D, -1.0, 1.0), rand_mat(rng, 6, D, -1.0, 1.0));
        let clear = cands.iter().enumerate().all(|(i, cs)| cs.iter().all(|&e| (0..D).all(|j| (v[(e as usize, j)] - q[(i, j)]).abs() > 1e-3)));
        if clear {
            break vec![q, v];
        }
    };
    let c: Vec<&[u32]> = cands.iter().map(|c| c.as_slice()).collect();
    check_fd(
        x,
        &|x| gqe::distance(x[0].view(), x[1].view(), &c).unwrap(),
        &|x, g| {
            let mut vg = Array2::zeros(x[1].dim());
            let dq = gqe::distance_backward(x[0].view(), x[1].view(), &c, g.view(), &mut vg).unwrap();
            vec![Some(dq), Some(vg)]
        },
        rng,
    )
}

fn boxes(rng: &mut ChaCha8Rng) -> Array2<f64> {
    let c = rand_mat(rng, N, D, -1.0, 1.0);
    let o = rand_mat(rng, N, D, 0.1, 1.0);
    ndarray::concatenate![ndarray::Axis(1), c, o]
}

fn q2b_project(rng: &mut ChaCha8Rng) -> f64 {
    let x = vec![boxes(rng), rand_mat(rng, N, D, -1.0, 1.0), rand_mat(rng, N, D, -1.0, 1.0)];
    check_fd(
        x,
        &|x| q2b::project(x[0].view(), x[1].view(), x[2].view()).unwrap(),
        &|x, g| {
            let (dx, drc, dro) = q2b::project_backward(x[0].view(), x[2].view(), g.view());
            vec![Some(dx), Some(drc), Some(dro)]
        },
        rng,
    )
}

fn q2b_intersect(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..=3);
    let mut x: Tensors = (0..k).map(|_| boxes(rng)).collect();
    for _ in 0..4 {
        x.push(rand_mat(rng, D, D, -1.0, 1.0));
    }
    let w = |x: &[Array2<f64>]| -> [Array2<f64>; 4] { [x[k].clone(), x[k + 1].clone(), x[k + 2].clone(), x[k + 3].clone()] };
    check_fd(
        x,
        &|x| {
            let [a1, a2, o1, o2] = w(x);
            q2b::intersect(&views(&x[..k]), &q2b::Weights { att1: &a1, att2: &a2, off1: &o1, off2: &o2 }).unwrap()
        },
        &|x, g| {
            let [a1, a2, o1, o2] = w(x);
            let mut gs: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((D, D)));
            let [g1, g2, g3, g4] = &mut gs;
            let grads = q2b::WeightGrads { att1: g1, att2: g2, off1: g3, off2: g4 };
            let dx = q2b::intersect_backward(&views(&x[..k]), &q2b::Weights { att1: &a1, att2: &a2, off1: &o1, off2: &o2 }, g.view(), grads).unwrap();
            dx.into_iter().map(Some).chain(gs.into_iter().map(Some)).collect()
        },
        rng,
    )
}

fn q2b_distance(rng: &mut ChaCha8Rng) -> f64 {
    let cands: Vec<Vec<u32>> = (0..N).map(|_| (0..4).map(|_| rng.random_range(0..6)).collect()).collect();
    // redraw until no |v - c| sits within 1e-3 of 0 or of the offset
    let x = loop {
        let (q, v) = (boxes(rng), rand_mat(rng, 6, D, -1.5, 1.5));
        let clear = cands.iter().enumerate().all(|(i, cs)| {
            cs.iter().all(|&e| (0..D).all(|j| {
                let delta = (v[(e as usize, j)] - q[(i, j)]).abs();
                delta > 1e-3 && (delta - q[(i, D + j)]).abs() > 1e-3
            }))
        });
        if clear {
            break vec![q, v];
        }
    };
    let c: Vec<&[u32]> = cands.iter().map(|c| c.as_slice()).collect();
    check_fd(
        x,
        &|x| q2b::distance(x[0].view(), x[1].view(), &c, 0.02).unwrap(),
        &|x, g| {
            let mut vg = Array2::zeros(x[1].dim());
            let dq = q2b::distance_backward(x[0].view(), x[1].view(), &c, 0.02, g.view(), &mut vg).unwrap();
            vec![Some(dq), Some(vg)]
        },
        rng,
    )
}

fn beta_params(rng: &mut ChaCha8Rng, rows: usize) -> Array2<f64> {
    rand_mat(rng, rows, 2 * D, 0.3, 3.0)
}

fn beta_project(rng: &mut ChaCha8Rng) -> f64 {
    let x = vec![beta_params(rng, N), rand_mat(rng, N, D, -1.0, 1.0), rand_mat(rng, H, 3 * D, -0.5, 0.5), rand_mat(rng, 2 * D, H, -0.5, 0.5)];
    check_fd(
        x,
        &|x| beta::project(x[0].view(), x[1].view(), &x[2], &x[3]).unwrap(),
        &|x, g| {
            let (mut g1, mut g2) = (Array2::zeros(x[2].dim()), Array2::zeros(x[3].dim()));
            let (dx, dr) = beta::project_backward(x[0].view(), x[1].view(), &x[2], &x[3], g.view(), &mut g1, &mut g2);
            vec![Some(dx), Some(dr), Some(g1), Some(g2)]
        },
        rng,
    )
}

fn beta_intersect(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..=3);
    let mut x: Tensors = (0..k).map(|_| beta_params(rng, N)).collect();
    x.push(rand_mat(rng, H, 2 * D, -0.5, 0.5));
    x.push(rand_mat(rng, 2 * D, H, -0.5, 0.5));
    check_fd(
        x,
        &|x| beta::intersect(&views(&x[..k]), &x[k], &x[k + 1]).unwrap(),
        &|x, g| {
            let (mut g1, mut g2) = (Array2::zeros(x[k].dim()), Array2::zeros(x[k + 1].dim()));
            let dx = beta::intersect_backward(&views(&x[..k]), &x[k], &x[k + 1], g.view(), &mut g1, &mut g2).unwrap();
            dx.into_iter().map(Some).chain([Some(g1), Some(g2)]).collect()
        },
        rng,
    )
}

fn beta_negate(rng: &mut ChaCha8Rng) -> f64 {
    let x = vec![beta_params(rng, N)];
    check_fd(x, &|x| beta::negate(x[0].view()).unwrap(), &|x, g| vec![Some(beta::negate_backward(x[0].view(), g.view()))], rng)
}

fn beta_distance(rng: &mut ChaCha8Rng) -> f64 {
    let x = vec![beta_params(rng, N), beta_params(rng, 6)];
    let cands: Vec<Vec<u32>> = (0..N).map(|_| (0..4).map(|_| rng.random_range(0..6)).collect()).collect();
    let c: Vec<&[u32]> = cands.iter().map(|c| c.as_slice()).collect();
    check_fd(
        x,
        &|x| beta::distance(x[0].view(), &BetaStats::new(x[1].view(), false).unwrap(), &c).unwrap(),
        &|x, g| {
            let stats = BetaStats::new(x[1].view(), true).unwrap();
            let mut vg = Array2::zeros(x[1].dim());
            let dq = beta::distance_backward(x[0].view(), x[1].view(), &stats, &c, g.view(), &mut vg).unwrap();
            vec![Some(dq), Some(vg)]
        },
        rng,
    )
}

fn union(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..=3);
    // well-separated values keep every point away from ties
    let mut x: Tensors = vec![Array2::zeros((N, 4)); k];
    for e in 0..N * 4 {
        for (b, v) in rand::seq::index::sample(rng, 1000, k).into_iter().enumerate() {
            x[b][(e / 4, e % 4)] = v as f64 * 0.01 + rng.random_range(0.0..0.005);
        }
    }
    check_fd(
        x,
        &|x| union_score(&views(x)).unwrap(),
        &|x, g| union_score_backward(&views(x), g.view()).unwrap().into_iter().map(Some).collect(),
        rng,
    )
}

fn fuse(rng: &mut ChaCha8Rng) -> f64 {
    let dl = 3;
    let sem = rand_mat(rng, N, dl, -1.0, 1.0);
    let x = vec![rand_mat(rng, N, D, -1.0, 1.0), rand_mat(rng, D, dl, -1.0, 1.0), rand_mat(rng, D, 2 * D, -1.0, 1.0), rand_mat(rng, 1, D, -1.0, 1.0)];
    let sem2 = sem.clone();
    check_fd(
        x,
        &move |x| fusion::fuse_semantic(x[0].view(), sem.view(), &FusionWeights { f: &x[1], w: &x[2], b: &x[3] }).unwrap(),
        &move |x, g| {
            let fg = fusion::fuse_semantic_backward(x[0].view(), sem2.view(), &FusionWeights { f: &x[1], w: &x[2], b: &x[3] }, g.view()).unwrap();
            vec![Some(fg.h), Some(fg.f), Some(fg.w), Some(fg.b)]
        },
        rng,
    )
}

fn loss(rng: &mut ChaCha8Rng) -> f64 {
    let x = vec![rand_mat(rng, N, 5, 6.0, 18.0)];
    check_fd(
        x,
        &|x| Array2::from_shape_vec((N, 1), margin_loss_rows(x[0].view(), 12.0, 1.0).unwrap().0).unwrap(),
        &|x, g| {
            let (_, grad) = margin_loss_rows(x[0].view(), 12.0, 1.0).unwrap();
            vec![Some(&grad * &g.column(0).insert_axis(ndarray::Axis(1)))]
        },
        rng,
    )
}

/// Mean per-query margin loss of a forward pass.
/// Margin for the end-to-end checks; small distances at init would
/// saturate the loss at the training default.
const E2E_GAMMA: f64 = 1.0;
const ROUNDOFF_FLOOR: f64 = 1e-6;

fn objective(params: &ModelParams<f64>, sem: Option<&SemanticStore<f64>>, qs: &[QueryInstance], cands: &[Arc<[EntityId]>]) -> Result<f64> {
    let reg = KernelRegistry::new(params.backbone);
    let opts = DagOptions { semantic: sem.is_some() };
    let (dag, plan) = compile_batch(qs, cands, params.backbone, opts, false, params.n_entities())?;
    let mut step = Step::new(&reg, params, sem, Hyper::new(E2E_GAMMA, 0.02, qs.len()), &dag, &plan)?;
    let mut arena = Arena::new(ReclaimPolicy::Eager);
    let sinks = run_sequential(&mut step, &mut arena, &dag, &plan)?;
    let scores = take_query_scores(&mut arena, &dag, &sinks)?;
    let mut total = 0.0;
    for s in &scores {
        let row = Array2::from_shape_vec((1, s.len()), s.clone()).expect("row");
        total += margin_loss_rows(row.view(), E2E_GAMMA, 1.0)?.0[0];
    }
    Ok(total / qs.len() as f64)
}

/// Scheduled training-step gradients against finite differences of the
/// forward objective, on a handful of coordinates per tensor.
fn end_to_end(backbone: Backbone, fused: bool, rng: &mut ChaCha8Rng) -> f64 {
    let ne = 12;
    let dims = ModelDims { n_entities: ne, n_relations: 3, dim: 3, hidden: 4, sem_dim: fused.then_some(2) };
    // small magnitudes keep distances near the margin so the loss is not saturated
    let params = ModelParams::<f64>::init(backbone, dims, 0.5, rng);
    let sem = fused.then(|| SemanticStore::new(rand_mat(rng, ne, 2, -1.0, 1.0), "fd"));
    let qs: Vec<QueryInstance> = (0..4)
        .map(|_| {
            let p = QueryPattern::ALL[rng.random_range(0..14)];
            let a = p.arity();
            QueryInstance::new(p, (0..a.anchors).map(|_| rng.random_range(0..ne as u32)).collect(), (0..a.relations).map(|_| rng.random_range(0..3)).collect())
        })
        .collect();
    let cands: Vec<Arc<[EntityId]>> = (0..qs.len()).map(|_| (0..4).map(|_| rng.random_range(0..ne as u32)).collect::<Vec<_>>().into()).collect();
    let reg = KernelRegistry::new(backbone);
    let (dag, plan) = compile_batch(&qs, &cands, backbone, DagOptions { semantic: fused }, true, ne).unwrap();
    let hyper = Hyper::new(E2E_GAMMA, 0.02, qs.len());
    let mut step = Step::new(&reg, &params, sem.as_ref(), hyper, &dag, &plan).unwrap();
    let mut arena = Arena::new(ReclaimPolicy::Eager);
    Scheduler::new(SchedulerConfig { b_max: 3, dual_pool: false }).run(&mut step, &mut arena, &dag, &plan).unwrap();
    let grads = step.finish().unwrap().grads.unwrap();
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for ((which, g), (_, t)) in grads.iter().zip(params.iter()) {
        let mut idx: Vec<usize> = (0..t.len()).filter(|&i| g.as_slice().unwrap()[i] != 0.0).collect();
        idx.extend((0..2).map(|_| rng.random_range(0..t.len())));
        idx.sort_unstable();
        idx.dedup();
        idx.truncate(12);
        let mut a = Vec::new();
        let mut n = Vec::new();
        let central = |p: &mut ModelParams<f64>, i: usize, orig: f64, h: f64| {
            p.get_mut(which).as_slice_mut().unwrap()[i] = orig + h;
            let up = objective(p, sem.as_ref(), &qs, &cands).unwrap();
            p.get_mut(which).as_slice_mut().unwrap()[i] = orig - h;
            let down = objective(p, sem.as_ref(), &qs, &cands).unwrap();
            p.get_mut(which).as_slice_mut().unwrap()[i] = orig;
            (up - down) / (2.0 * h)
        };
        for i in idx {
            let orig = t.as_slice().unwrap()[i];
            let wide = central(&mut p, i, orig, STEP);
            let narrow = central(&mut p, i, orig, STEP / 10.0);
            // a ReLU corner or union tie inside the stencil: no derivative to compare
            if (wide - narrow).abs() > 1e-6 * wide.abs() + 1e-8 {
                continue;
            }
            a.push(g.as_slice().unwrap()[i]);
            n.push(wide);
        }
        // gradients below the roundoff of a central difference carry no signal
        a.push(ROUNDOFF_FLOOR);
        n.push(ROUNDOFF_FLOOR);
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

type Check = (&'static str, fn(&mut ChaCha8Rng) -> f64);

pub const KERNEL_CHECKS: [Check; 13] = [
    ("gqe.project", gqe_project),
    ("gqe.intersect", gqe_intersect),
    ("gqe.distance", gqe_distance),
    ("q2b.project", q2b_project),
    ("q2b.intersect", q2b_intersect),
    ("q2b.distance", q2b_distance),
    ("betae.project", beta_project),
    ("betae.intersect", beta_intersect),
    ("betae.negate", beta_negate),
    ("betae.kl_distance", beta_distance),
    ("union_score", union),
    ("fuse_semantic", fuse),
    ("loss", loss),
];

/// Runs every kernel check on `instances` random inputs, then the
/// end-to-end step check per backbone with and without fusion.
pub fn run_suite(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: String, errs: Vec<f64>| {
        let max = errs.iter().cloned().fold(0.0, f64::max);
        out.push(CheckResult { kernel: name, instances: errs.len(), max_rel_err: max, passed: errs.iter().all(|e| *e < TOLERANCE) });
    };
    for (name, f) in KERNEL_CHECKS {
        push(name.to_string(), (0..instances).map(|_| f(&mut rng)).collect());
    }
    for b in Backbone::ALL {
        for fused in [false, true] {
            let name = format!("step.{b}{}", if fused { "+fusion" } else { "" });
            push(name, (0..instances.div_ceil(4)).map(|_| end_to_end(b, fused, &mut rng)).collect());
        }
    }
    out
}

/// Plain-text pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<24} {:>9} {:>12}  result\n", "kernel", "instances", "max rel err");
    for r in results {
        s += &format!("{:<24} {:>9} {:>12.3e}  {}\n", r.kernel, r.instances, r.max_rel_err, if r.passed { "pass" } else { "FAIL" });
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(4, 1);
        assert!(results.iter().all(|r| r.passed), "{}", format_table(&results));
    }
}
