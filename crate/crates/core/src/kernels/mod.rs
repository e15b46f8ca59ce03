//! Batched forward/backward kernels for every operator type, per backbone.

pub mod beta;
pub mod fusion;
pub mod gqe;
pub mod linalg;
pub mod loss;
mod params;
pub mod q2b;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};

pub use loss::{compute_loss, union_score, union_score_backward};
pub use params::{Backbone, ModelDims, ModelParams, Param};

use crate::arena::{gather, scatter_add};
use crate::error::{Error, Result};
use crate::query::{NodeId, OpKind, OperatorType};
use crate::scalar::Scalar;
use crate::semantic::SemanticStore;
use beta::BetaStats;
use fusion::FusionWeights;
use linalg::{acc_weight_grad, concat_cols, matmul_t};

/// Scalars shared by all kernels of one run.
#[derive(Debug, Clone, Copy)]
pub struct Hyper<T> {
    pub gamma: T,
    pub alpha_box: T,
    /// Multiplier on each query's loss gradient (1 / queries in the batch).
    pub loss_scale: T,
}

impl<T: Scalar> Hyper<T> {
    pub fn new(gamma: f64, alpha_box: f64, n_queries: usize) -> Self {
        Hyper { gamma: T::lit(gamma), alpha_box: T::lit(alpha_box), loss_scale: T::one() / T::lit(n_queries.max(1) as f64) }
    }
}

fn fusion_weights<T: Scalar>(params: &ModelParams<T>) -> Result<FusionWeights<'_, T>> {
    Ok(FusionWeights { f: params.try_get(Param::FuseF)?, w: params.try_get(Param::FuseW)?, b: params.try_get(Param::FuseB)? })
}

fn semantic_rows<'s, T: Scalar>(sem: Option<&'s SemanticStore<T>>) -> Result<ArrayView2<'s, T>> {
    sem.map(|s| s.rows()).ok_or_else(|| Error::config("semantic_store", "fusion requires a semantic store"))
}

/// Entity representations in distance-kernel layout (`view_width` columns),
/// optionally routed through semantic fusion.
pub fn entity_rows<T: Scalar>(params: &ModelParams<T>, sem: Option<&SemanticStore<T>>, ids: &[u32], fused: bool) -> Result<Array2<T>> {
    let h = gather(params.get(Param::Entity).view(), ids)?;
    if !fused {
        return Ok(match params.backbone {
            Backbone::BetaE => beta::embed(h.view()),
            _ => h,
        });
    }
    let s = gather(semantic_rows(sem)?, ids)?;
    let f = fusion::fuse_semantic(h.view(), s.view(), &fusion_weights(params)?)?;
    Ok(match params.backbone {
        Backbone::BetaE => matmul_t(f.view(), params.try_get(Param::FusePsi)?).mapv(beta::positive),
        _ => f,
    })
}

pub fn entity_rows_backward<T: Scalar>(
    params: &ModelParams<T>,
    sem: Option<&SemanticStore<T>>,
    grads: &mut ModelParams<T>,
    ids: &[u32],
    fused: bool,
    g: ArrayView2<'_, T>,
) -> Result<()> {
    let h = gather(params.get(Param::Entity).view(), ids)?;
    if !fused {
        let dh = match params.backbone {
            Backbone::BetaE => ndarray::Zip::from(&g).and(&h).map_collect(|&g, &x| g * beta::positive_grad(x)),
            _ => g.to_owned(),
        };
        return scatter_add(grads.get_mut(Param::Entity), ids, dh.view());
    }
    let s = gather(semantic_rows(sem)?, ids)?;
    let fw = fusion_weights(params)?;
    let df = match params.backbone {
        Backbone::BetaE => {
            let psi = params.try_get(Param::FusePsi)?;
            let f = fusion::fuse_semantic(h.view(), s.view(), &fw)?;
            let pre = matmul_t(f.view(), psi);
            let dpre = ndarray::Zip::from(&g).and(&pre).map_collect(|&g, &p| g * beta::positive_grad(p));
            acc_weight_grad(grads.get_mut(Param::FusePsi), dpre.view(), f.view());
            dpre.dot(psi)
        }
        _ => g.to_owned(),
    };
    let fg = fusion::fuse_semantic_backward(h.view(), s.view(), &fw, df.view())?;
    *grads.get_mut(Param::FuseF) += &fg.f;
    *grads.get_mut(Param::FuseW) += &fg.w;
    *grads.get_mut(Param::FuseB) += &fg.b;
    scatter_add(grads.get_mut(Param::Entity), ids, fg.h.view())
}

/// Per-step entity table restricted to the batch's candidate entities.
#[derive(Debug, Clone)]
pub struct EntityView<T> {
    pub entities: Vec<u32>,
    pub rows: Array2<T>,
    pub beta: Option<BetaStats<T>>,
    pub fused: bool,
}

impl<T: Scalar> EntityView<T> {
    pub fn build(params: &ModelParams<T>, sem: Option<&SemanticStore<T>>, entities: Vec<u32>, training: bool) -> Result<Self> {
        let fused = params.fused();
        let rows = entity_rows(params, sem, &entities, fused)?;
        let beta = match params.backbone {
            Backbone::BetaE => Some(BetaStats::new(rows.view(), training)?),
            _ => None,
        };
        Ok(EntityView { entities, rows, beta, fused })
    }

    /// Pushes accumulated view gradients back into the parameter gradients.
    pub fn backward(&self, params: &ModelParams<T>, sem: Option<&SemanticStore<T>>, view_grad: &Array2<T>, grads: &mut ModelParams<T>) -> Result<()> {
        entity_rows_backward(params, sem, grads, &self.entities, self.fused, view_grad.view())
    }
}

/// Read-only inputs of a kernel call.
pub struct Env<'a, T> {
    pub params: &'a ModelParams<T>,
    pub semantic: Option<&'a SemanticStore<T>>,
    pub view: &'a EntityView<T>,
    pub hyper: Hyper<T>,
}

/// Gradient sinks of a backward kernel call.
pub struct Grads<'a, T> {
    pub params: &'a mut ModelParams<T>,
    pub view: &'a mut Array2<T>,
    /// Per-query loss, indexed by node origin.
    pub losses: &'a mut [T],
}

/// Stacked inputs for one kernel call over `nodes`.
pub struct Batch<'a, T> {
    pub nodes: &'a [NodeId],
    /// One `[nodes.len(), width]` matrix per input position.
    pub inputs: Vec<Array2<T>>,
    /// Anchor entity or relation id per node, when the operator has one.
    pub ids: Vec<u32>,
    /// Candidate view rows per node, for scoring operators.
    pub rows: Vec<&'a [u32]>,
    pub origins: Vec<u32>,
}

impl<T> Batch<'_, T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn input(&self, i: usize) -> Result<ArrayView2<'_, T>> {
        self.inputs.get(i).map(|a| a.view()).ok_or_else(|| Error::shape(format!("missing input {i}")))
    }

    fn views(&self, from: usize) -> Vec<ArrayView2<'_, T>> {
        self.inputs[from..].iter().map(|a| a.view()).collect()
    }
}

/// A batched operator implementation.
pub trait OpKernel<T: Scalar>: Send + Sync {
    fn forward(&self, b: &Batch<'_, T>, env: &Env<'_, T>) -> Result<Array2<T>>;

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the forward inputs (column blocks, one per input), if any.
    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>>;
}

struct AnchorKernel {
    fused: bool,
}

impl<T: Scalar> OpKernel<T> for AnchorKernel {
    fn forward(&self, b: &Batch<'_, T>, env: &Env<'_, T>) -> Result<Array2<T>> {
        let rows = entity_rows(env.params, env.semantic, &b.ids, self.fused)?;
        Ok(match env.params.backbone {
            Backbone::Q2b => q2b::embed(rows.view()),
            _ => rows,
        })
    }

    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>> {
        let up = b.input(0)?;
        let up = match env.params.backbone {
            Backbone::Q2b => up.slice_move(s![.., ..env.params.dims.dim]),
            _ => up,
        };
        entity_rows_backward(env.params, env.semantic, g.params, &b.ids, self.fused, up)?;
        Ok(None)
    }
}

struct ProjectKernel;

impl<T: Scalar> OpKernel<T> for ProjectKernel {
    fn forward(&self, b: &Batch<'_, T>, env: &Env<'_, T>) -> Result<Array2<T>> {
        let p = env.params;
        let x = b.input(0)?;
        let rel = gather(p.get(Param::Relation).view(), &b.ids)?;
        match p.backbone {
            Backbone::Gqe => gqe::project(x, rel.view()),
            Backbone::Q2b => q2b::project(x, rel.view(), gather(p.get(Param::RelationOffset).view(), &b.ids)?.view()),
            Backbone::BetaE => beta::project(x, rel.view(), p.get(Param::W1), p.get(Param::W2)),
        }
    }

    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>> {
        let p = env.params;
        let up = b.input(0)?;
        match p.backbone {
            Backbone::Gqe => {
                scatter_add(g.params.get_mut(Param::Relation), &b.ids, up)?;
                Ok(Some(up.to_owned()))
            }
            Backbone::Q2b => {
                let ro = gather(p.get(Param::RelationOffset).view(), &b.ids)?;
                let (dx, drc, dro) = q2b::project_backward(b.input(1)?, ro.view(), up);
                scatter_add(g.params.get_mut(Param::Relation), &b.ids, drc.view())?;
                scatter_add(g.params.get_mut(Param::RelationOffset), &b.ids, dro.view())?;
                Ok(Some(dx))
            }
            Backbone::BetaE => {
                let rel = gather(p.get(Param::Relation).view(), &b.ids)?;
                let [gw1, gw2] = g.params.disjoint_mut([Param::W1, Param::W2]);
                let (dx, drel) = beta::project_backward(b.input(1)?, rel.view(), p.get(Param::W1), p.get(Param::W2), up, gw1, gw2);
                scatter_add(g.params.get_mut(Param::Relation), &b.ids, drel.view())?;
                Ok(Some(dx))
            }
        }
    }
}

fn q2b_weights<T: Scalar>(p: &ModelParams<T>) -> q2b::Weights<'_, T> {
    q2b::Weights { att1: p.get(Param::W1), att2: p.get(Param::W2), off1: p.get(Param::W3), off2: p.get(Param::W4) }
}

struct IntersectKernel;

impl<T: Scalar> OpKernel<T> for IntersectKernel {
    fn forward(&self, b: &Batch<'_, T>, env: &Env<'_, T>) -> Result<Array2<T>> {
        let p = env.params;
        let xs = b.views(0);
        match p.backbone {
            Backbone::Gqe => gqe::intersect(&xs, p.get(Param::W1), p.get(Param::W2)),
            Backbone::Q2b => q2b::intersect(&xs, &q2b_weights(p)),
            Backbone::BetaE => beta::intersect(&xs, p.get(Param::W3), p.get(Param::W4)),
        }
    }

    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>> {
        let p = env.params;
        let up = b.input(0)?;
        let xs = b.views(1);
        let dxs = match p.backbone {
            Backbone::Gqe => {
                let [g1, g2] = g.params.disjoint_mut([Param::W1, Param::W2]);
                gqe::intersect_backward(&xs, p.get(Param::W1), p.get(Param::W2), up, g1, g2)?
            }
            Backbone::Q2b => {
                let [att1, att2, off1, off2] = g.params.disjoint_mut([Param::W1, Param::W2, Param::W3, Param::W4]);
                q2b::intersect_backward(&xs, &q2b_weights(p), up, q2b::WeightGrads { att1, att2, off1, off2 })?
            }
            Backbone::BetaE => {
                let [g3, g4] = g.params.disjoint_mut([Param::W3, Param::W4]);
                beta::intersect_backward(&xs, p.get(Param::W3), p.get(Param::W4), up, g3, g4)?
            }
        };
        let views: Vec<_> = dxs.iter().map(|a| a.view()).collect();
        Ok(Some(concat_cols(&views)))
    }
}

struct NegateKernel;

impl<T: Scalar> OpKernel<T> for NegateKernel {
    fn forward(&self, b: &Batch<'_, T>, env: &Env<'_, T>) -> Result<Array2<T>> {
        let x = b.input(0)?;
        match env.params.backbone {
            Backbone::Gqe => Ok(gqe::negate(x)),
            Backbone::Q2b => Ok(q2b::negate(x)),
            Backbone::BetaE => beta::negate(x),
        }
    }

    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, _g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>> {
        let up = b.input(0)?;
        Ok(Some(match env.params.backbone {
            Backbone::Gqe => gqe::negate(up),
            // [−c ‖ o] is its own adjoint
            Backbone::Q2b => q2b::negate(up),
            Backbone::BetaE => beta::negate_backward(b.input(1)?, up),
        }))
    }
}

fn distance<T: Scalar>(env: &Env<'_, T>, q: ArrayView2<'_, T>, rows: &[&[u32]]) -> Result<Array2<T>> {
    let v = env.view;
    match env.params.backbone {
        Backbone::Gqe => gqe::distance(q, v.rows.view(), rows),
        Backbone::Q2b => q2b::distance(q, v.rows.view(), rows, env.hyper.alpha_box),
        Backbone::BetaE => beta::distance(q, v.beta.as_ref().expect("beta view stats"), rows),
    }
}

fn distance_backward<T: Scalar>(env: &Env<'_, T>, q: ArrayView2<'_, T>, rows: &[&[u32]], up: ArrayView2<'_, T>, view_grad: &mut Array2<T>) -> Result<Array2<T>> {
    let v = env.view;
    match env.params.backbone {
        Backbone::Gqe => gqe::distance_backward(q, v.rows.view(), rows, up, view_grad),
        Backbone::Q2b => q2b::distance_backward(q, v.rows.view(), rows, env.hyper.alpha_box, up, view_grad),
        Backbone::BetaE => beta::distance_backward(q, v.rows.view(), v.beta.as_ref().expect("beta view stats"), rows, up, view_grad),
    }
}

fn record_losses<T: Scalar>(g: &mut Grads<'_, T>, origins: &[u32], losses: &[T]) {
    for (&o, &l) in origins.iter().zip(losses) {
        g.losses[o as usize] = l;
    }
}

/// Candidate distances; backward of a union branch.
struct ScoreKernel;

impl<T: Scalar> OpKernel<T> for ScoreKernel {
    fn forward(&self, b: &Batch<'_, T>, env: &Env<'_, T>) -> Result<Array2<T>> {
        distance(env, b.input(0)?, &b.rows)
    }

    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>> {
        distance_backward(env, b.input(1)?, &b.rows, b.input(0)?, g.view).map(Some)
    }
}

/// Backward mirror of a terminal score: margin loss, then distance backward.
struct LossKernel;

impl<T: Scalar> OpKernel<T> for LossKernel {
    fn forward(&self, _b: &Batch<'_, T>, _env: &Env<'_, T>) -> Result<Array2<T>> {
        Err(Error::MissingKernel(OperatorType::fwd(OpKind::Loss)))
    }

    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>> {
        let (losses, dd) = loss::margin_loss_rows(b.input(0)?, env.hyper.gamma, env.hyper.loss_scale)?;
        record_losses(g, &b.origins, &losses);
        distance_backward(env, b.input(1)?, &b.rows, dd.view(), g.view).map(Some)
    }
}

/// Min over branch distances; its backward mirror also evaluates the loss.
struct UnionKernel;

impl<T: Scalar> OpKernel<T> for UnionKernel {
    fn forward(&self, b: &Batch<'_, T>, _env: &Env<'_, T>) -> Result<Array2<T>> {
        loss::union_distance(&b.views(0))
    }

    fn backward(&self, b: &Batch<'_, T>, env: &Env<'_, T>, g: &mut Grads<'_, T>) -> Result<Option<Array2<T>>> {
        let (losses, dd) = loss::margin_loss_rows(b.input(0)?, env.hyper.gamma, env.hyper.loss_scale)?;
        record_losses(g, &b.origins, &losses);
        let parts = loss::union_distance_backward(&b.views(1), dd.view())?;
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        Ok(Some(concat_cols(&views)))
    }
}

/// Operator type → kernel, for one backbone.
pub struct KernelRegistry<T> {
    backbone: Backbone,
    kernels: BTreeMap<OperatorType, Arc<dyn OpKernel<T>>>,
}

impl<T: Scalar> KernelRegistry<T> {
    pub fn new(backbone: Backbone) -> Self {
        let mut kernels: BTreeMap<OperatorType, Arc<dyn OpKernel<T>>> = BTreeMap::new();
        let pairs: [(OpKind, Arc<dyn OpKernel<T>>); 7] = [
            (OpKind::EmbedAnchor, Arc::new(AnchorKernel { fused: false })),
            (OpKind::FuseSemantic, Arc::new(AnchorKernel { fused: true })),
            (OpKind::Project, Arc::new(ProjectKernel)),
            (OpKind::Intersect, Arc::new(IntersectKernel)),
            (OpKind::Negate, Arc::new(NegateKernel)),
            (OpKind::Score, Arc::new(ScoreKernel)),
            (OpKind::UnionScore, Arc::new(UnionKernel)),
        ];
        for (kind, k) in pairs {
            kernels.insert(OperatorType::fwd(kind), k.clone());
            kernels.insert(OperatorType::bwd(kind), k);
        }
        kernels.insert(OperatorType::bwd(OpKind::Loss), Arc::new(LossKernel));
        KernelRegistry { backbone, kernels }
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn get(&self, op: OperatorType) -> Result<&dyn OpKernel<T>> {
        self.kernels.get(&op).map(|k| k.as_ref()).ok_or(Error::MissingKernel(op))
    }

    pub fn contains(&self, op: OperatorType) -> bool {
        self.kernels.contains_key(&op)
    }

    pub fn remove(&mut self, op: OperatorType) {
        self.kernels.remove(&op);
    }

    pub fn types(&self) -> impl Iterator<Item = OperatorType> + '_ {
        self.kernels.keys().copied()
    }
}
