//! Reference-counted tensor storage with eager reclamation, plus the
//! precomputed gather/scatter index plan.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::query::{FusedDag, NodeId, OpKind, Payload};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorHandle(pub u32);

/// When a tensor whose refcount hits zero gives its buffer back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReclaimPolicy {
    /// Immediately, in the scheduling step of the last consumer.
    #[default]
    Eager,
    /// Only when the whole DAG has finished.
    EndOfDag,
}

#[derive(Debug)]
struct Slot<T> {
    rows: usize,
    cols: usize,
    refcount: u32,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub peak_bytes: u64,
    pub current_bytes: u64,
    pub free_list_hits: u64,
    pub free_list_misses: u64,
}

/// Live tensors plus a size-class free list.
///
/// Size classes are `(next_power_of_two(rows), cols)`; a freed buffer is kept
/// with its full class capacity and handed to the next allocation of the class.
#[derive(Debug)]
pub struct Arena<T> {
    slots: Vec<Option<Slot<T>>>,
    free: BTreeMap<(usize, usize), Vec<Vec<T>>>,
    deferred: Vec<u32>,
    policy: ReclaimPolicy,
    live: usize,
    current_bytes: u64,
    peak_bytes: u64,
    hits: u64,
    misses: u64,
}

impl<T: Scalar> Default for Arena<T> {
    fn default() -> Self {
        Arena::new(ReclaimPolicy::Eager)
    }
}

fn class_of(rows: usize, cols: usize) -> (usize, usize) {
    (rows.max(1).next_power_of_two(), cols)
}

impl<T: Scalar> Arena<T> {
    pub fn new(policy: ReclaimPolicy) -> Self {
        Arena {
            slots: Vec::new(),
            free: BTreeMap::new(),
            deferred: Vec::new(),
            policy,
            live: 0,
            current_bytes: 0,
            peak_bytes: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn policy(&self) -> ReclaimPolicy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: ReclaimPolicy) {
        self.policy = policy;
    }

    fn bytes(rows: usize, cols: usize) -> u64 {
        (rows * cols * std::mem::size_of::<T>()) as u64
    }

    /// Zero-initialised `[rows, cols]` tensor with `refcount` pending consumers.
    pub fn alloc(&mut self, shape: [usize; 2], refcount: u32) -> Result<TensorHandle> {
        if refcount == 0 {
            return Err(Error::ZeroRefcount);
        }
        let [rows, cols] = shape;
        let class = class_of(rows, cols);
        let len = rows * cols;
        let data = match self.free.get_mut(&class).and_then(Vec::pop) {
            Some(mut buf) => {
                self.hits += 1;
                buf.clear();
                buf.resize(len, T::zero());
                buf
            }
            None => {
                self.misses += 1;
                let mut buf = Vec::with_capacity(class.0 * class.1);
                buf.resize(len, T::zero());
                buf
            }
        };
        if self.live == 0 && self.deferred.is_empty() {
            // No handle can be outstanding, so ids restart.
            self.slots.clear();
        }
        let id = self.slots.len() as u32;
        self.slots.push(Some(Slot { rows, cols, refcount, data }));
        self.live += 1;
        self.current_bytes += Self::bytes(rows, cols);
        self.peak_bytes = self.peak_bytes.max(self.current_bytes);
        Ok(TensorHandle(id))
    }

    fn slot(&self, h: TensorHandle) -> Result<&Slot<T>> {
        match self.slots.get(h.0 as usize) {
            Some(Some(s)) if s.refcount > 0 => Ok(s),
            _ => Err(Error::UseAfterFree(h.0)),
        }
    }

    pub fn shape(&self, h: TensorHandle) -> Result<[usize; 2]> {
        self.slot(h).map(|s| [s.rows, s.cols])
    }

    pub fn refcount(&self, h: TensorHandle) -> u32 {
        match self.slots.get(h.0 as usize) {
            Some(Some(s)) => s.refcount,
            _ => 0,
        }
    }

    pub fn is_live(&self, h: TensorHandle) -> bool {
        self.refcount(h) > 0
    }

    /// Read access; fails once the tensor has been released by every consumer.
    pub fn data(&self, h: TensorHandle) -> Result<&[T]> {
        self.slot(h).map(|s| s.data.as_slice())
    }

    pub fn view(&self, h: TensorHandle) -> Result<ArrayView2<'_, T>> {
        let s = self.slot(h)?;
        Ok(ArrayView2::from_shape((s.rows, s.cols), &s.data).expect("slot shape"))
    }

    pub fn view_mut(&mut self, h: TensorHandle) -> Result<ArrayViewMut2<'_, T>> {
        match self.slots.get_mut(h.0 as usize) {
            Some(Some(s)) if s.refcount > 0 => Ok(ArrayViewMut2::from_shape((s.rows, s.cols), &mut s.data).expect("slot shape")),
            _ => Err(Error::UseAfterFree(h.0)),
        }
    }

    /// Adds `n` consumers (used to pin sink outputs for the caller).
    pub fn retain(&mut self, h: TensorHandle, n: u32) -> Result<()> {
        match self.slots.get_mut(h.0 as usize) {
            Some(Some(s)) if s.refcount > 0 => {
                s.refcount += n;
                Ok(())
            }
            _ => Err(Error::UseAfterFree(h.0)),
        }
    }

    /// One consumer is done with `h`. Returns the bytes reclaimed by this call
    /// (zero unless the count reached zero under the eager policy).
    pub fn release(&mut self, h: TensorHandle) -> Result<u64> {
        let slot = match self.slots.get_mut(h.0 as usize) {
            Some(Some(s)) if s.refcount > 0 => s,
            _ => return Err(Error::DoubleRelease(h.0)),
        };
        slot.refcount -= 1;
        if slot.refcount > 0 {
            return Ok(0);
        }
        match self.policy {
            ReclaimPolicy::Eager => Ok(self.reclaim(h.0)),
            ReclaimPolicy::EndOfDag => {
                self.deferred.push(h.0);
                Ok(0)
            }
        }
    }

    fn reclaim(&mut self, id: u32) -> u64 {
        let slot = self.slots[id as usize].take().expect("reclaim of empty slot");
        let bytes = Self::bytes(slot.rows, slot.cols);
        self.current_bytes -= bytes;
        self.live -= 1;
        self.free.entry(class_of(slot.rows, slot.cols)).or_default().push(slot.data);
        bytes
    }

    /// Frees everything deferred by [`ReclaimPolicy::EndOfDag`].
    pub fn flush_deferred(&mut self) -> u64 {
        let ids = std::mem::take(&mut self.deferred);
        ids.into_iter().map(|id| self.reclaim(id)).sum()
    }

    pub fn live_tensors(&self) -> usize {
        self.live
    }

    pub fn current_bytes(&self) -> u64 {
        self.current_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    /// Starts a new high-water-mark window at the current usage.
    pub fn reset_peak(&mut self) {
        self.peak_bytes = self.current_bytes;
    }

    pub fn free_list_hits(&self) -> u64 {
        self.hits
    }

    pub fn report(&self) -> MemoryReport {
        MemoryReport {
            peak_bytes: self.peak_bytes,
            current_bytes: self.current_bytes,
            free_list_hits: self.hits,
            free_list_misses: self.misses,
        }
    }
}

/// Stacks `table[indices[i]]` into an `[indices.len(), cols]` matrix.
pub fn gather<T: Scalar>(table: ArrayView2<'_, T>, indices: &[u32]) -> Result<Array2<T>> {
    let rows = table.nrows();
    let mut out = Array2::zeros((indices.len(), table.ncols()));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
        if i as usize >= rows {
            return Err(Error::IndexOutOfRange { index: i as usize, rows });
        }
        dst.assign(&table.row(i as usize));
    }
    Ok(out)
}

/// `table[indices[i]] += rows[i]`; duplicate indices accumulate.
pub fn scatter_add<T: Scalar>(table: &mut Array2<T>, indices: &[u32], rows: ArrayView2<'_, T>) -> Result<()> {
    if rows.nrows() != indices.len() || rows.ncols() != table.ncols() {
        return Err(Error::shape(format!(
            "scatter_add of {:?} rows into table {:?} with {} indices",
            rows.dim(),
            table.dim(),
            indices.len()
        )));
    }
    let n = table.nrows();
    for (src, &i) in rows.rows().into_iter().zip(indices) {
        if i as usize >= n {
            return Err(Error::IndexOutOfRange { index: i as usize, rows: n });
        }
        let mut dst = table.row_mut(i as usize);
        dst += &src;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableId {
    /// Entity parameter table (anchor lookups).
    Entity,
    /// Per-step entity view over the batch's candidate set.
    View,
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub table: TableId,
    pub rows: Arc<[u32]>,
}

/// Row offsets for every lookup in a fused DAG, resolved once before execution.
#[derive(Debug, Clone, Default)]
pub struct IndexPlan {
    /// Entities materialised in the candidate view, ascending; view row `i`
    /// holds entity `view_entities[i]`.
    pub view_entities: Vec<EntityId>,
    entries: Vec<Option<IndexEntry>>,
}

impl IndexPlan {
    pub fn entry(&self, node: NodeId) -> Option<&IndexEntry> {
        self.entries.get(node as usize).and_then(Option::as_ref)
    }

    pub fn rows(&self, node: NodeId) -> &[u32] {
        self.entry(node).map(|e| &e.rows[..]).unwrap_or(&[])
    }

    /// One coalesced row list for a pool execution.
    pub fn coalesce(&self, nodes: &[NodeId]) -> Vec<u32> {
        nodes.iter().flat_map(|&n| self.rows(n).iter().copied()).collect()
    }

    /// Number of nodes carrying an entry.
    pub fn len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves anchor rows (entity table) and candidate rows (view) for `f`.
pub fn build_index_plan(f: &FusedDag, n_entities: usize) -> Result<IndexPlan> {
    let check = |e: EntityId| {
        if (e as usize) < n_entities {
            Ok(e)
        } else {
            Err(Error::IndexOutOfRange { index: e as usize, rows: n_entities })
        }
    };
    let mut seen = vec![false; n_entities];
    for n in f.nodes() {
        if let Payload::Candidates(c) = &n.payload {
            for &e in c.iter() {
                seen[check(e)? as usize] = true;
            }
        }
    }
    let view_entities: Vec<EntityId> = (0..n_entities as EntityId).filter(|&e| seen[e as usize]).collect();
    let identity = view_entities.len() == n_entities;
    let mut entries = Vec::with_capacity(f.len());
    for n in f.nodes() {
        let entry = match (&n.payload, n.op.kind) {
            (Payload::Anchor(e), OpKind::EmbedAnchor | OpKind::FuseSemantic) => {
                Some(IndexEntry { table: TableId::Entity, rows: Arc::from(vec![check(*e)?]) })
            }
            (Payload::Candidates(c), _) => {
                let rows: Arc<[u32]> = if identity {
                    c.clone()
                } else {
                    c.iter().map(|e| view_entities.binary_search(e).expect("candidate in view") as u32).collect()
                };
                Some(IndexEntry { table: TableId::View, rows })
            }
            _ => None,
        };
        entries.push(entry);
    }
    Ok(IndexPlan { view_entities, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{Dag, DagOptions, QueryInstance, QueryPattern};
    use ndarray::array;

    #[test]
    fn alloc_accounts_bytes() {
        let mut a = Arena::<f32>::default();
        let h = a.alloc([4, 400], 2).unwrap();
        assert_eq!(a.current_bytes(), 4 * 400 * 4);
        assert_eq!(a.release(h).unwrap(), 0);
        assert!(a.is_live(h));
        assert_eq!(a.release(h).unwrap(), 4 * 400 * 4);
        assert_eq!(a.current_bytes(), 0);
        assert!(matches!(a.release(h), Err(Error::DoubleRelease(_))));
        assert!(matches!(a.data(h), Err(Error::UseAfterFree(_))));
        assert!(matches!(a.alloc([1, 1], 0), Err(Error::ZeroRefcount)));
    }

    #[test]
    fn free_list_reuse() {
        let mut a = Arena::<f64>::default();
        let h = a.alloc([3, 8], 1).unwrap();
        a.view_mut(h).unwrap().fill(7.0);
        a.release(h).unwrap();
        let hits = a.free_list_hits();
        let h2 = a.alloc([3, 8], 1).unwrap();
        assert_eq!(a.free_list_hits(), hits + 1);
        assert!(a.data(h2).unwrap().iter().all(|&x| x == 0.0));
        // same class (4 rows) also reuses
        a.release(h2).unwrap();
        a.alloc([4, 8], 1).unwrap();
        assert_eq!(a.free_list_hits(), hits + 2);
    }

    #[test]
    fn end_of_dag_defers() {
        let mut a = Arena::<f64>::new(ReclaimPolicy::EndOfDag);
        let h = a.alloc([2, 2], 1).unwrap();
        a.release(h).unwrap();
        assert_eq!(a.current_bytes(), 32);
        assert_eq!(a.flush_deferred(), 32);
        assert_eq!(a.current_bytes(), 0);
    }

    #[test]
    fn gather_scatter_basics() {
        let eye = Array2::<f64>::eye(3);
        let g = gather(eye.view(), &[2, 0]).unwrap();
        assert_eq!(g, array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(gather(eye.view(), &[3]), Err(Error::IndexOutOfRange { .. })));
        let mut t = Array2::<f64>::zeros((3, 2));
        scatter_add(&mut t, &[1, 1], array![[1.0, 2.0], [3.0, 4.0]].view()).unwrap();
        assert_eq!(t.row(1).to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn plan_coalesces_anchor_rows() {
        let qs = vec![
            QueryInstance::new(QueryPattern::P1, vec![3], vec![0]),
            QueryInstance::new(QueryPattern::P1, vec![7], vec![0]),
            QueryInstance::new(QueryPattern::P1, vec![3], vec![0]),
        ];
        let mut dag = Dag::from_queries(&qs, DagOptions::default()).unwrap();
        for q in 0..3 {
            dag.set_candidates(q, Arc::from(vec![1u32, 5]));
        }
        let plan = build_index_plan(&dag, 10).unwrap();
        let anchors: Vec<NodeId> = dag.nodes().iter().filter(|n| n.op.kind == OpKind::EmbedAnchor).map(|n| n.id).collect();
        assert_eq!(plan.coalesce(&anchors[..2]), vec![3, 7]);
        assert_eq!(plan.coalesce(&[anchors[0], anchors[2]]), vec![3, 3]);
        assert_eq!(plan.view_entities, vec![1, 5]);
        let score = dag.nodes().iter().find(|n| n.op.kind == OpKind::Score).unwrap().id;
        assert_eq!(plan.rows(score), &[0, 1]);
        assert!(matches!(build_index_plan(&dag, 6), Err(Error::IndexOutOfRange { .. })));
    }
}
