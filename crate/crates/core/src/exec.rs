//! Execution machinery shared by the operator-level scheduler, the query-level
//! baseline and the sequential reference executor.

use std::sync::Arc;

use ndarray::Array2;

use crate::arena::{build_index_plan, Arena, IndexPlan, TensorHandle};
use crate::error::{Error, Result};
use crate::kernels::{Backbone, Batch, EntityView, Env, Grads, Hyper, KernelRegistry, ModelParams};
use crate::kg::EntityId;
use crate::query::{add_gradient_nodes_with, Dag, DagOptions, Direction, NodeId, OpKind, OperatorType, Payload, QueryInstance};
use crate::scalar::Scalar;
use crate::semantic::SemanticStore;

/// Builds the fused DAG of a batch, attaches each query's candidate list,
/// adds backward nodes when training, and plans the entity lookups.
pub fn compile_batch(
    queries: &[QueryInstance],
    candidates: &[Arc<[EntityId]>],
    backbone: Backbone,
    opts: DagOptions,
    training: bool,
    n_entities: usize,
) -> Result<(Dag, IndexPlan)> {
    if candidates.len() != queries.len() {
        return Err(Error::shape(format!("{} candidate lists for {} queries", candidates.len(), queries.len())));
    }
    let mut dag = Dag::from_queries(queries, opts)?;
    for (i, c) in candidates.iter().enumerate() {
        dag.set_candidates(i, c.clone());
    }
    if training {
        dag = add_gradient_nodes_with(&dag, |k| backbone.backward_reads_inputs(k))?;
    }
    let plan = build_index_plan(&dag, n_entities)?;
    Ok((dag, plan))
}

/// Everything a DAG execution reads or accumulates besides the arena.
pub struct Step<'a, T: Scalar> {
    pub registry: &'a KernelRegistry<T>,
    pub params: &'a ModelParams<T>,
    pub semantic: Option<&'a SemanticStore<T>>,
    pub hyper: Hyper<T>,
    pub view: EntityView<T>,
    grads: Option<ModelParams<T>>,
    view_grad: Array2<T>,
    losses: Vec<T>,
}

/// Gradients and per-query losses of a training execution.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub grads: Option<ModelParams<T>>,
    pub losses: Vec<T>,
}

impl<'a, T: Scalar> Step<'a, T> {
    pub fn new(
        registry: &'a KernelRegistry<T>,
        params: &'a ModelParams<T>,
        semantic: Option<&'a SemanticStore<T>>,
        hyper: Hyper<T>,
        dag: &Dag,
        plan: &IndexPlan,
    ) -> Result<Self> {
        if registry.backbone() != params.backbone {
            return Err(Error::BackboneMismatch { checkpoint: params.backbone.to_string(), config: registry.backbone().to_string() });
        }
        let training = dag.is_training();
        let view = EntityView::build(params, semantic, plan.view_entities.clone(), training)?;
        let view_grad = if training { Array2::zeros(view.rows.dim()) } else { Array2::zeros((0, 0)) };
        Ok(Step {
            registry,
            params,
            semantic,
            hyper,
            view,
            grads: training.then(|| params.zeros_like()),
            view_grad,
            losses: vec![T::zero(); dag.n_queries()],
        })
    }

    pub fn env(&self) -> Env<'_, T> {
        Env { params: self.params, semantic: self.semantic, view: &self.view, hyper: self.hyper }
    }

    /// Runs one forward kernel call; needs only shared access.
    pub fn forward(&self, op: OperatorType, batch: &Batch<'_, T>) -> Result<Array2<T>> {
        self.registry.get(op)?.forward(batch, &self.env())
    }

    pub fn call(&mut self, op: OperatorType, batch: &Batch<'_, T>) -> Result<Option<Array2<T>>> {
        match op.dir {
            Direction::Fwd => self.forward(op, batch).map(Some),
            Direction::Bwd => {
                let kernel = self.registry.get(op)?;
                let env = Env { params: self.params, semantic: self.semantic, view: &self.view, hyper: self.hyper };
                let grads = self.grads.as_mut().ok_or_else(|| Error::shape("backward node in a forward-only execution"))?;
                let mut g = Grads { params: grads, view: &mut self.view_grad, losses: &mut self.losses };
                kernel.backward(batch, &env, &mut g)
            }
        }
    }

    /// Folds candidate-view gradients into the parameter gradients.
    pub fn finish(mut self) -> Result<StepResult<T>> {
        if let Some(g) = self.grads.as_mut() {
            self.view.backward(self.params, self.semantic, &self.view_grad, g)?;
        }
        Ok(StepResult { grads: self.grads, losses: self.losses })
    }
}

/// Number of column blocks in a node's output tensor.
pub fn output_slots(dag: &Dag, id: NodeId) -> usize {
    let n = dag.node(id);
    match (n.op.dir, n.op.kind) {
        (Direction::Bwd, OpKind::Intersect | OpKind::UnionScore) => n.cardinality(),
        _ => 1,
    }
}

/// Bookkeeping returned when a node is marked executed.
#[derive(Debug, Default, Clone)]
pub struct Retired {
    pub bytes: u64,
    /// Producers whose tensors were reclaimed by this call.
    pub reclaimed: Vec<NodeId>,
    /// Consumers that became ready.
    pub ready: Vec<NodeId>,
}

/// Per-run node state: output handles and unresolved producer counts.
pub struct ExecState<'d> {
    pub dag: &'d Dag,
    pub plan: &'d IndexPlan,
    pub outputs: Vec<Option<TensorHandle>>,
    pending: Vec<usize>,
    executed: Vec<bool>,
    pub n_executed: usize,
    pub kernel_calls: u64,
}

impl<'d> ExecState<'d> {
    pub fn new(dag: &'d Dag, plan: &'d IndexPlan) -> Self {
        let pending = (0..dag.len() as NodeId).map(|i| dag.indegree(i)).collect();
        ExecState { dag, plan, outputs: vec![None; dag.len()], pending, executed: vec![false; dag.len()], n_executed: 0, kernel_calls: 0 }
    }

    pub fn is_executed(&self, id: NodeId) -> bool {
        self.executed[id as usize]
    }

    pub fn is_ready(&self, id: NodeId) -> bool {
        !self.executed[id as usize] && self.pending[id as usize] == 0
    }

    /// Stacks the inputs of `nodes` (one operator type, one cardinality).
    pub fn prepare<'b, T: Scalar>(&self, arena: &Arena<T>, nodes: &'b [NodeId]) -> Result<Batch<'b, T>>
    where
        'd: 'b,
    {
        let dag = self.dag;
        let first = dag.node(nodes[0]);
        let n_in = first.inputs.len();
        let mut inputs = Vec::with_capacity(n_in);
        for p in 0..n_in {
            let mut mat: Option<Array2<T>> = None;
            for (r, &id) in nodes.iter().enumerate() {
                let node = dag.node(id);
                if node.op != first.op || node.inputs.len() != n_in {
                    return Err(Error::shape(format!("batch mixes node {} ({}) with {}", id, node.op, first.op)));
                }
                let inp = node.inputs[p];
                let h = self.outputs[inp.node as usize].ok_or_else(|| Error::shape(format!("input {} of node {id} has no tensor", inp.node)))?;
                let data = arena.data(h)?;
                let slots = output_slots(dag, inp.node);
                let w = data.len() / slots;
                let src = &data[inp.slot as usize * w..(inp.slot as usize + 1) * w];
                let m = mat.get_or_insert_with(|| Array2::zeros((nodes.len(), w)));
                if m.ncols() != w {
                    return Err(Error::shape(format!("input width {w} vs {} within one batch", m.ncols())));
                }
                m.row_mut(r).as_slice_mut().expect("row-major").copy_from_slice(src);
            }
            inputs.push(mat.expect("non-empty batch"));
        }
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        match first.op.kind {
            OpKind::EmbedAnchor | OpKind::FuseSemantic => ids = self.plan.coalesce(nodes),
            OpKind::Project => {
                for &id in nodes {
                    match dag.node(id).payload {
                        Payload::Relation(r) => ids.push(r),
                        _ => return Err(Error::shape(format!("project node {id} lacks a relation"))),
                    }
                }
            }
            OpKind::Score | OpKind::Loss => {
                for &id in nodes {
                    if self.plan.entry(id).is_none() {
                        return Err(Error::shape(format!("score node {id} has no candidates")));
                    }
                    rows.push(self.plan.rows(id));
                }
            }
            _ => {}
        }
        let origins = nodes.iter().map(|&id| dag.node(id).origin).collect();
        Ok(Batch { nodes, inputs, ids, rows, origins })
    }

    /// Stores one output row per node. Tensors without consumers are held
    /// (refcount 1) for the caller.
    pub fn commit<T: Scalar>(&mut self, arena: &mut Arena<T>, nodes: &[NodeId], out: Option<Array2<T>>) -> Result<()> {
        let Some(out) = out else { return Ok(()) };
        if out.nrows() != nodes.len() {
            return Err(Error::shape(format!("kernel returned {} rows for {} nodes", out.nrows(), nodes.len())));
        }
        for (row, &id) in out.rows().into_iter().zip(nodes) {
            let refs = self.dag.consumers(id).len().max(1) as u32;
            let h = arena.alloc([1, row.len()], refs)?;
            arena.view_mut(h)?.row_mut(0).assign(&row);
            self.outputs[id as usize] = Some(h);
        }
        Ok(())
    }

    /// Marks `id` executed: releases one reference on each distinct producer
    /// tensor and unlocks consumers whose producers are all done.
    pub fn retire<T: Scalar>(&mut self, arena: &mut Arena<T>, id: NodeId) -> Result<Retired> {
        if std::mem::replace(&mut self.executed[id as usize], true) {
            return Err(Error::shape(format!("node {id} executed twice")));
        }
        self.n_executed += 1;
        let mut out = Retired::default();
        let mut producers: Vec<NodeId> = self.dag.node(id).inputs.iter().map(|i| i.node).collect();
        producers.sort_unstable();
        producers.dedup();
        for p in producers {
            if let Some(h) = self.outputs[p as usize] {
                let b = arena.release(h)?;
                if b > 0 || !arena.is_live(h) {
                    out.bytes += b;
                    out.reclaimed.push(p);
                }
            }
        }
        for &c in self.dag.consumers(id) {
            self.pending[c as usize] -= 1;
            if self.pending[c as usize] == 0 {
                out.ready.push(c);
            }
        }
        Ok(out)
    }

    /// Executes one kernel call over `nodes` and retires them.
    pub fn execute<T: Scalar>(&mut self, step: &mut Step<'_, T>, arena: &mut Arena<T>, nodes: &[NodeId]) -> Result<Retired> {
        let op = self.dag.node(nodes[0]).op;
        let batch = self.prepare(arena, nodes)?;
        let out = step.call(op, &batch)?;
        drop(batch);
        self.kernel_calls += 1;
        self.commit(arena, nodes, out)?;
        self.retire_all(arena, nodes)
    }

    pub fn retire_all<T: Scalar>(&mut self, arena: &mut Arena<T>, nodes: &[NodeId]) -> Result<Retired> {
        let mut total = Retired::default();
        for &id in nodes {
            let r = self.retire(arena, id)?;
            total.bytes += r.bytes;
            total.reclaimed.extend(r.reclaimed);
            total.ready.extend(r.ready);
        }
        Ok(total)
    }

    /// Output tensors nobody consumed, in node order.
    pub fn sinks(&self) -> Vec<(NodeId, TensorHandle)> {
        (0..self.dag.len() as NodeId)
            .filter(|&i| self.dag.consumers(i).is_empty())
            .filter_map(|i| self.outputs[i as usize].map(|h| (i, h)))
            .collect()
    }
}

/// Per-query terminal scores (distances) read from sink tensors, which are
/// then released.
pub fn take_query_scores<T: Scalar>(arena: &mut Arena<T>, dag: &Dag, sinks: &[(NodeId, TensorHandle)]) -> Result<Vec<Vec<T>>> {
    let mut out = vec![Vec::new(); dag.n_queries()];
    for &(id, h) in sinks {
        let n = dag.node(id);
        if n.op.dir == Direction::Fwd && dag.queries()[n.origin as usize].terminal == id {
            out[n.origin as usize] = arena.data(h)?.to_vec();
        }
        arena.release(h)?;
    }
    Ok(out)
}

/// Releases sink tensors without reading them.
pub fn release_sinks<T: Scalar>(arena: &mut Arena<T>, sinks: &[(NodeId, TensorHandle)]) -> Result<()> {
    for &(_, h) in sinks {
        arena.release(h)?;
    }
    Ok(())
}

/// Reference executor: every node alone, in Kahn order.
pub fn run_sequential<T: Scalar>(step: &mut Step<'_, T>, arena: &mut Arena<T>, dag: &Dag, plan: &IndexPlan) -> Result<Vec<(NodeId, TensorHandle)>> {
    let order = dag.topo_order()?;
    let mut st = ExecState::new(dag, plan);
    for id in &order {
        st.execute(step, arena, std::slice::from_ref(id))?;
    }
    arena.flush_deferred();
    Ok(st.sinks())
}
