//! Operator-level dynamic scheduling: ready nodes wait in one pool per
//! operator type, the fullest pool runs as stacked kernel calls, and
//! intermediate tensors are reclaimed as soon as their last consumer ran.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arena::{Arena, IndexPlan, TensorHandle};
use crate::error::{Error, Result};
use crate::exec::{ExecState, Retired, Step};
use crate::query::{Dag, Direction, NodeId, OperatorType};
use crate::scalar::Scalar;

pub const DEFAULT_B_MAX: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub b_max: usize,
    /// Run the two fullest forward pools concurrently.
    pub dual_pool: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { b_max: DEFAULT_B_MAX, dual_pool: false }
    }
}

/// FIFO of ready nodes of one operator type, with the cycle each was admitted.
#[derive(Debug, Clone)]
pub struct OperatorPool {
    pub op: OperatorType,
    pub queue: VecDeque<(NodeId, u64)>,
}

impl OperatorPool {
    pub fn head_ts(&self) -> Option<u64> {
        self.queue.front().map(|&(_, ts)| ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub op: OperatorType,
    pub len: usize,
    pub head_ts: u64,
}

#[derive(Debug, Default)]
pub struct SchedulerState {
    pub pools: BTreeMap<OperatorType, OperatorPool>,
    /// Selection cycle counter.
    pub t: u64,
    pub b_max: usize,
    staged: Vec<NodeId>,
}

impl SchedulerState {
    pub fn new(b_max: usize) -> Self {
        SchedulerState { b_max: b_max.max(1), ..Default::default() }
    }

    pub fn push(&mut self, op: OperatorType, id: NodeId, ts: u64) {
        self.pools.entry(op).or_insert_with(|| OperatorPool { op, queue: VecDeque::new() }).queue.push_back((id, ts));
    }

    pub fn pooled(&self) -> usize {
        self.pools.values().map(|p| p.queue.len()).sum()
    }

    /// Fillness `|pool| / B_max` of every nonempty pool.
    pub fn fillness(&self) -> BTreeMap<OperatorType, f64> {
        self.pools
            .values()
            .filter(|p| !p.queue.is_empty())
            .map(|p| (p.op, p.queue.len() as f64 / self.b_max as f64))
            .collect()
    }

    pub fn snapshot(&self) -> Vec<PoolSnapshot> {
        self.pools
            .values()
            .filter_map(|p| p.head_ts().map(|head_ts| PoolSnapshot { op: p.op, len: p.queue.len(), head_ts }))
            .collect()
    }

    /// Fullest pool; ties go to the oldest head, then to the type order.
    pub fn select_pool(&self) -> Result<OperatorType> {
        select_from(&self.snapshot(), None)
    }

    fn select_second(&self, first: OperatorType) -> Option<OperatorType> {
        select_from(&self.snapshot(), Some(first)).ok()
    }

    fn admit(&mut self, dag: &Dag) {
        let ts = self.t;
        for id in std::mem::take(&mut self.staged) {
            self.push(dag.node(id).op, id, ts);
        }
    }
}

/// Reference rule over a recorded pool snapshot.
pub fn select_from(snapshot: &[PoolSnapshot], exclude: Option<OperatorType>) -> Result<OperatorType> {
    let mut best: Option<&PoolSnapshot> = None;
    for p in snapshot.iter().filter(|p| p.len > 0 && Some(p.op) != exclude) {
        best = match best {
            None => Some(p),
            Some(b) if p.len > b.len || (p.len == b.len && (p.head_ts, p.op) < (b.head_ts, b.op)) => Some(p),
            keep => keep,
        };
    }
    best.map(|p| p.op).ok_or(Error::AllPoolsEmpty)
}

/// Splits a drained chunk by input cardinality, smallest `k` first, keeping
/// FIFO order inside each class.
pub fn pop_cardinality_classes(dag: &Dag, chunk: &[NodeId]) -> Vec<(usize, Vec<NodeId>)> {
    let mut classes: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for &id in chunk {
        classes.entry(dag.node(id).cardinality()).or_default().push(id);
    }
    classes.into_iter().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub op: OperatorType,
    /// Pool sizes seen by the selection that started this drain; absent on
    /// continuation chunks and on the second pool of a concurrent pair.
    pub selection: Option<Vec<PoolSnapshot>>,
    pub batch_size: usize,
    /// `(k, n_k)` per kernel call.
    pub classes: Vec<(usize, usize)>,
    pub nodes: Vec<NodeId>,
    pub bytes_reclaimed: u64,
    /// Producers whose tensors were freed by this step.
    pub reclaimed: Vec<NodeId>,
    pub live_bytes: u64,
    #[serde(default)]
    pub concurrent: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub b_max: usize,
    pub n_nodes: usize,
    pub steps: Vec<TraceStep>,
    pub kernel_calls: u64,
    pub peak_bytes: u64,
}

impl ExecutionTrace {
    pub fn total_batch(&self) -> usize {
        self.steps.iter().map(|s| s.batch_size).sum()
    }

    /// Node ids in execution order.
    pub fn order(&self) -> Vec<NodeId> {
        self.steps.iter().flat_map(|s| s.nodes.iter().copied()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

pub struct Scheduler {
    pub config: SchedulerConfig,
    trace: ExecutionTrace,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Scheduler { config, trace: ExecutionTrace::default() }
    }

    /// Trace of the last run, partial if the run failed.
    pub fn trace(&self) -> &ExecutionTrace {
        &self.trace
    }

    pub fn take_trace(&mut self) -> ExecutionTrace {
        std::mem::take(&mut self.trace)
    }

    /// Executes every node of `dag` once. Returns the tensors of nodes
    /// without consumers; the caller releases them.
    pub fn run<T: Scalar>(
        &mut self,
        step: &mut Step<'_, T>,
        arena: &mut Arena<T>,
        dag: &Dag,
        plan: &IndexPlan,
    ) -> Result<Vec<(NodeId, TensorHandle)>> {
        for op in dag.type_histogram().keys() {
            step.registry.get(*op)?;
        }
        let b_max = self.config.b_max.max(1);
        self.trace = ExecutionTrace { b_max, n_nodes: dag.len(), ..Default::default() };
        let mut st = ExecState::new(dag, plan);
        let mut s = SchedulerState::new(b_max);
        s.staged = dag.sources();
        while st.n_executed < dag.len() {
            s.admit(dag);
            let snap = s.snapshot();
            let op = select_from(&snap, None)?;
            let second = if self.config.dual_pool && op.dir == Direction::Fwd {
                s.select_second(op).filter(|o| o.dir == Direction::Fwd)
            } else {
                None
            };
            let drain: Vec<NodeId> = s.pools.get_mut(&op).expect("selected").queue.drain(..).map(|(id, _)| id).collect();
            match second {
                None => {
                    for (i, chunk) in drain.chunks(b_max).enumerate() {
                        let selection = (i == 0).then(|| snap.clone());
                        self.run_chunk(step, arena, &mut st, &mut s, op, chunk, selection)?;
                    }
                }
                Some(op2) => {
                    let drain2: Vec<NodeId> = s.pools.get_mut(&op2).expect("selected").queue.drain(..).map(|(id, _)| id).collect();
                    let (a, b): (Vec<_>, Vec<_>) = (drain.chunks(b_max).collect(), drain2.chunks(b_max).collect());
                    for i in 0..a.len().max(b.len()) {
                        let selection = (i == 0).then(|| snap.clone());
                        match (a.get(i), b.get(i)) {
                            (Some(ca), Some(cb)) => self.run_pair(step, arena, &mut st, &mut s, [(op, ca), (op2, cb)], selection)?,
                            (Some(ca), None) => self.run_chunk(step, arena, &mut st, &mut s, op, ca, selection)?,
                            (None, Some(cb)) => self.run_chunk(step, arena, &mut st, &mut s, op2, cb, None)?,
                            (None, None) => unreachable!(),
                        }
                    }
                }
            }
            s.t += 1;
        }
        arena.flush_deferred();
        self.trace.kernel_calls = st.kernel_calls;
        self.trace.peak_bytes = arena.peak_bytes();
        Ok(st.sinks())
    }

    #[allow(clippy::too_many_arguments)]
    fn run_chunk<T: Scalar>(
        &mut self,
        step: &mut Step<'_, T>,
        arena: &mut Arena<T>,
        st: &mut ExecState<'_>,
        s: &mut SchedulerState,
        op: OperatorType,
        chunk: &[NodeId],
        selection: Option<Vec<PoolSnapshot>>,
    ) -> Result<()> {
        let classes = pop_cardinality_classes(st.dag, chunk);
        let mut done = Retired::default();
        let mut nodes = Vec::with_capacity(chunk.len());
        for (_, class) in &classes {
            let r = st.execute(step, arena, class)?;
            nodes.extend_from_slice(class);
            merge(&mut done, r);
        }
        self.record(arena, st, s, op, selection, &classes, nodes, done, false);
        Ok(())
    }

    /// Two forward chunks whose kernels run concurrently; bookkeeping stays serial.
    fn run_pair<T: Scalar>(
        &mut self,
        step: &mut Step<'_, T>,
        arena: &mut Arena<T>,
        st: &mut ExecState<'_>,
        s: &mut SchedulerState,
        pair: [(OperatorType, &&[NodeId]); 2],
        selection: Option<Vec<PoolSnapshot>>,
    ) -> Result<()> {
        let classes: Vec<Vec<(usize, Vec<NodeId>)>> = pair.iter().map(|(_, c)| pop_cardinality_classes(st.dag, c)).collect();
        let outs = {
            let mut prepared = Vec::with_capacity(2);
            for cls in &classes {
                prepared.push(cls.iter().map(|(_, c)| st.prepare(arena, c)).collect::<Result<Vec<_>>>()?);
            }
            let (ba, bb) = (&prepared[0], &prepared[1]);
            let shared: &Step<'_, T> = step;
            let (oa, ob) = rayon::join(
                || ba.iter().map(|b| shared.forward(pair[0].0, b)).collect::<Result<Vec<_>>>(),
                || bb.iter().map(|b| shared.forward(pair[1].0, b)).collect::<Result<Vec<_>>>(),
            );
            [oa?, ob?]
        };
        for (i, out) in outs.into_iter().enumerate() {
            let mut done = Retired::default();
            let mut nodes = Vec::new();
            for ((_, class), o) in classes[i].iter().zip(out) {
                st.kernel_calls += 1;
                st.commit(arena, class, Some(o))?;
                nodes.extend_from_slice(class);
            }
            for (_, class) in &classes[i] {
                merge(&mut done, st.retire_all(arena, class)?);
            }
            let sel = if i == 0 { selection.clone() } else { None };
            self.record(arena, st, s, pair[i].0, sel, &classes[i], nodes, done, true);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn record<T: Scalar>(
        &mut self,
        arena: &Arena<T>,
        st: &ExecState<'_>,
        s: &mut SchedulerState,
        op: OperatorType,
        selection: Option<Vec<PoolSnapshot>>,
        classes: &[(usize, Vec<NodeId>)],
        nodes: Vec<NodeId>,
        done: Retired,
        concurrent: bool,
    ) {
        s.staged.extend(done.ready.iter().copied());
        self.trace.kernel_calls = st.kernel_calls;
        self.trace.steps.push(TraceStep {
            step: self.trace.steps.len(),
            op,
            selection,
            batch_size: nodes.len(),
            classes: classes.iter().map(|(k, c)| (*k, c.len())).collect(),
            nodes,
            bytes_reclaimed: done.bytes,
            reclaimed: done.reclaimed,
            live_bytes: arena.current_bytes(),
            concurrent,
        });
    }
}

fn merge(into: &mut Retired, r: Retired) {
    into.bytes += r.bytes;
    into.reclaimed.extend(r.reclaimed);
    into.ready.extend(r.ready);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::OpKind;

    fn snap(op: OpKind, len: usize, head_ts: u64) -> PoolSnapshot {
        PoolSnapshot { op: OperatorType::fwd(op), len, head_ts }
    }

    #[test]
    fn fullest_pool_wins() {
        let s = [snap(OpKind::Project, 300, 0), snap(OpKind::Intersect, 40, 0), snap(OpKind::EmbedAnchor, 500, 0)];
        assert_eq!(select_from(&s, None).unwrap(), OperatorType::fwd(OpKind::EmbedAnchor));
        let mut st = SchedulerState::new(512);
        for (i, p) in s.iter().enumerate() {
            for j in 0..p.len {
                st.push(p.op, (i * 1000 + j) as NodeId, 0);
            }
        }
        let rho = st.fillness();
        assert!((rho[&OperatorType::fwd(OpKind::Project)] - 0.586).abs() < 1e-3);
        assert!((rho[&OperatorType::fwd(OpKind::Intersect)] - 0.078).abs() < 1e-3);
        assert!((rho[&OperatorType::fwd(OpKind::EmbedAnchor)] - 0.977).abs() < 1e-3);
        assert_eq!(st.select_pool().unwrap(), OperatorType::fwd(OpKind::EmbedAnchor));
    }

    #[test]
    fn ties_prefer_oldest_head_then_type_order() {
        let s = [snap(OpKind::Project, 512, 3), snap(OpKind::Negate, 512, 1)];
        assert_eq!(select_from(&s, None).unwrap(), OperatorType::fwd(OpKind::Negate));
        let s = [snap(OpKind::Negate, 7, 2), snap(OpKind::Project, 7, 2)];
        assert_eq!(select_from(&s, None).unwrap(), OperatorType::fwd(OpKind::Project));
    }

    #[test]
    fn empty_pools_error() {
        assert!(matches!(SchedulerState::new(4).select_pool(), Err(Error::AllPoolsEmpty)));
        assert!(matches!(select_from(&[snap(OpKind::Project, 0, 0)], None), Err(Error::AllPoolsEmpty)));
    }
}
