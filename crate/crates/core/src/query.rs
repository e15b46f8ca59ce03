//! The fourteen query patterns, their operator DAGs, batch fusion and the
//! backward-node mirror used for training.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, PredictiveAnswers, RelationId};

/// One of the fourteen admissible query shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueryPattern {
    #[serde(rename = "1p")]
    P1,
    #[serde(rename = "2p")]
    P2,
    #[serde(rename = "3p")]
    P3,
    #[serde(rename = "2i")]
    I2,
    #[serde(rename = "3i")]
    I3,
    #[serde(rename = "pi")]
    Pi,
    #[serde(rename = "ip")]
    Ip,
    #[serde(rename = "2u")]
    U2,
    #[serde(rename = "up")]
    Up,
    #[serde(rename = "2in")]
    In2,
    #[serde(rename = "3in")]
    In3,
    #[serde(rename = "inp")]
    Inp,
    #[serde(rename = "pin")]
    Pin,
    #[serde(rename = "pni")]
    Pni,
}

/// Fixed `(anchors, relations, forward node count)` per pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternArity {
    pub anchors: usize,
    pub relations: usize,
    pub nodes: usize,
}

impl QueryPattern {
    pub const ALL: [QueryPattern; 14] = [
        QueryPattern::P1,
        QueryPattern::P2,
        QueryPattern::P3,
        QueryPattern::I2,
        QueryPattern::I3,
        QueryPattern::Pi,
        QueryPattern::Ip,
        QueryPattern::U2,
        QueryPattern::Up,
        QueryPattern::In2,
        QueryPattern::In3,
        QueryPattern::Inp,
        QueryPattern::Pin,
        QueryPattern::Pni,
    ];

    pub fn tag(self) -> &'static str {
        use QueryPattern::*;
        match self {
            P1 => "1p",
            P2 => "2p",
            P3 => "3p",
            I2 => "2i",
            I3 => "3i",
            Pi => "pi",
            Ip => "ip",
            U2 => "2u",
            Up => "up",
            In2 => "2in",
            In3 => "3in",
            Inp => "inp",
            Pin => "pin",
            Pni => "pni",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn arity(self) -> PatternArity {
        use QueryPattern::*;
        let (anchors, relations, nodes) = match self {
            P1 => (1, 1, 3),
            P2 => (1, 2, 4),
            P3 => (1, 3, 5),
            I2 => (2, 2, 6),
            I3 => (3, 3, 8),
            Pi => (2, 3, 7),
            Ip => (2, 3, 7),
            U2 => (2, 2, 7),
            Up => (2, 3, 9),
            In2 => (2, 2, 7),
            In3 => (3, 3, 9),
            Inp => (2, 3, 8),
            Pin => (2, 3, 8),
            Pni => (2, 3, 8),
        };
        PatternArity { anchors, relations, nodes }
    }

    pub fn is_union(self) -> bool {
        matches!(self, QueryPattern::U2 | QueryPattern::Up)
    }

    pub fn has_negation(self) -> bool {
        use QueryPattern::*;
        matches!(self, In2 | In3 | Inp | Pin | Pni)
    }
}

impl fmt::Display for QueryPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for QueryPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryPattern::ALL
            .iter()
            .copied()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::UnsupportedPattern(s.to_string()))
    }
}

/// A grounded query: pattern plus anchor entities and relations in the
/// pattern's canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryInstance {
    pub pattern: QueryPattern,
    pub anchors: Vec<EntityId>,
    pub relations: Vec<RelationId>,
}

impl QueryInstance {
    pub fn new(pattern: QueryPattern, anchors: Vec<EntityId>, relations: Vec<RelationId>) -> Self {
        QueryInstance { pattern, anchors, relations }
    }

    pub fn check_arity(&self) -> Result<()> {
        let a = self.pattern.arity();
        if a.anchors != self.anchors.len() || a.relations != self.relations.len() {
            return Err(Error::ArityMismatch {
                pattern: self.pattern,
                expected_anchors: a.anchors,
                expected_relations: a.relations,
                anchors: self.anchors.len(),
                relations: self.relations.len(),
            });
        }
        Ok(())
    }
}

/// Lifts a union query into its union-free branches (projection distributed
/// over the union).
pub fn dnf_rewrite(q: &QueryInstance) -> Result<Vec<QueryInstance>> {
    q.check_arity()?;
    let (a, r) = (&q.anchors, &q.relations);
    match q.pattern {
        QueryPattern::U2 => Ok(vec![
            QueryInstance::new(QueryPattern::P1, vec![a[0]], vec![r[0]]),
            QueryInstance::new(QueryPattern::P1, vec![a[1]], vec![r[1]]),
        ]),
        QueryPattern::Up => Ok(vec![
            QueryInstance::new(QueryPattern::P2, vec![a[0]], vec![r[0], r[2]]),
            QueryInstance::new(QueryPattern::P2, vec![a[1]], vec![r[1], r[2]]),
        ]),
        p => Err(Error::NotAUnionPattern(p)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    EmbedAnchor,
    FuseSemantic,
    Project,
    Intersect,
    Negate,
    Score,
    UnionScore,
    /// Backward-only: mirror of a query's terminal `Score`; evaluates the
    /// margin loss and seeds the backward pass.
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Fwd,
    Bwd,
}

/// Pool key. The derived ordering is the fixed tie-break order of the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OperatorType {
    pub kind: OpKind,
    pub dir: Direction,
}

impl OperatorType {
    pub const fn fwd(kind: OpKind) -> Self {
        OperatorType { kind, dir: Direction::Fwd }
    }

    pub const fn bwd(kind: OpKind) -> Self {
        OperatorType { kind, dir: Direction::Bwd }
    }

    /// Intersect and UnionScore take a variable number of inputs and are
    /// executed per cardinality class.
    pub fn is_set_operator(self) -> bool {
        matches!(self.kind, OpKind::Intersect | OpKind::UnionScore)
    }
}

impl fmt::Display for OperatorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{:?}", self.kind, self.dir)
    }
}

pub type NodeId = u32;

/// Reference to row-block `slot` of another node's output tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeInput {
    pub node: NodeId,
    pub slot: u16,
}

impl NodeInput {
    pub fn of(node: NodeId) -> Self {
        NodeInput { node, slot: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    None,
    Anchor(EntityId),
    Relation(RelationId),
    /// Candidate entities scored by a Score node; index 0 is the positive
    /// answer during training.
    Candidates(Arc<[EntityId]>),
}

#[derive(Debug, Clone)]
pub struct OperatorNode {
    pub id: NodeId,
    pub op: OperatorType,
    pub inputs: Vec<NodeInput>,
    pub payload: Payload,
    /// Query this node was built from.
    pub origin: u32,
    /// Position inside its query's node list (forward nodes first).
    pub local: u16,
    /// The forward node a backward node mirrors.
    pub mirror: Option<NodeId>,
}

impl OperatorNode {
    /// Input arity `k` of set operators, 1 for everything else.
    pub fn cardinality(&self) -> usize {
        match (self.op.kind, self.op.dir) {
            (OpKind::Intersect | OpKind::UnionScore, Direction::Fwd) => self.inputs.len(),
            (OpKind::Intersect | OpKind::UnionScore, Direction::Bwd) => self.inputs.len() - 1,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuerySlot {
    pub pattern: QueryPattern,
    /// Node ids in local order: forward nodes, then backward nodes.
    pub nodes: Vec<NodeId>,
    pub n_forward: usize,
    pub terminal: NodeId,
}

/// Operator DAG of one query or of a fused batch of queries.
#[derive(Debug, Clone, Default)]
pub struct Dag {
    nodes: Vec<OperatorNode>,
    queries: Vec<QuerySlot>,
    consumers: Vec<Vec<NodeId>>,
    training: bool,
}

pub type QueryDag = Dag;
pub type FusedDag = Dag;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagOptions {
    /// Anchors are looked up through the semantic fusion operator.
    pub semantic: bool,
}

struct Builder<'a> {
    nodes: &'a mut Vec<OperatorNode>,
    origin: u32,
    first: usize,
    anchor_kind: OpKind,
}

impl Builder<'_> {
    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, payload: Payload) -> NodeId {
        let id = self.nodes.len() as NodeId;
        self.nodes.push(OperatorNode {
            id,
            op: OperatorType::fwd(kind),
            inputs: inputs.into_iter().map(NodeInput::of).collect(),
            payload,
            origin: self.origin,
            local: (self.nodes.len() - self.first) as u16,
            mirror: None,
        });
        id
    }

    fn anchor(&mut self, e: EntityId) -> NodeId {
        self.push(self.anchor_kind, vec![], Payload::Anchor(e))
    }

    fn project(&mut self, x: NodeId, r: RelationId) -> NodeId {
        self.push(OpKind::Project, vec![x], Payload::Relation(r))
    }

    fn path(&mut self, e: EntityId, rels: &[RelationId]) -> NodeId {
        let mut x = self.anchor(e);
        for &r in rels {
            x = self.project(x, r);
        }
        x
    }

    fn intersect(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(OpKind::Intersect, xs, Payload::None)
    }

    fn negate(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Negate, vec![x], Payload::None)
    }

    fn score(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Score, vec![x], Payload::None)
    }

    /// Query-embedding subgraph of a union-free pattern.
    fn embedding(&mut self, q: &QueryInstance) -> Result<NodeId> {
        let (a, r) = (&q.anchors, &q.relations);
        use QueryPattern::*;
        Ok(match q.pattern {
            P1 => self.path(a[0], &r[..1]),
            P2 => self.path(a[0], &r[..2]),
            P3 => self.path(a[0], &r[..3]),
            I2 => {
                let x = self.path(a[0], &r[..1]);
                let y = self.path(a[1], &r[1..2]);
                self.intersect(vec![x, y])
            }
            I3 => {
                let x = self.path(a[0], &r[..1]);
                let y = self.path(a[1], &r[1..2]);
                let z = self.path(a[2], &r[2..3]);
                self.intersect(vec![x, y, z])
            }
            Pi => {
                let x = self.path(a[0], &r[..2]);
                let y = self.path(a[1], &r[2..3]);
                self.intersect(vec![x, y])
            }
            Ip => {
                let x = self.path(a[0], &r[..1]);
                let y = self.path(a[1], &r[1..2]);
                let i = self.intersect(vec![x, y]);
                self.project(i, r[2])
            }
            In2 => {
                let x = self.path(a[0], &r[..1]);
                let y = self.path(a[1], &r[1..2]);
                let n = self.negate(y);
                self.intersect(vec![x, n])
            }
            In3 => {
                let x = self.path(a[0], &r[..1]);
                let y = self.path(a[1], &r[1..2]);
                let z = self.path(a[2], &r[2..3]);
                let n = self.negate(z);
                self.intersect(vec![x, y, n])
            }
            Inp => {
                let x = self.path(a[0], &r[..1]);
                let y = self.path(a[1], &r[1..2]);
                let n = self.negate(y);
                let i = self.intersect(vec![x, n]);
                self.project(i, r[2])
            }
            Pin => {
                let x = self.path(a[0], &r[..2]);
                let y = self.path(a[1], &r[2..3]);
                let n = self.negate(y);
                self.intersect(vec![x, n])
            }
            Pni => {
                let x = self.path(a[0], &r[..2]);
                let n = self.negate(x);
                let y = self.path(a[1], &r[2..3]);
                self.intersect(vec![n, y])
            }
            U2 | Up => return Err(Error::UnsupportedPattern(format!("{} must be rewritten to DNF first", q.pattern))),
        })
    }
}

/// Forward DAG of a single query.
pub fn build_dag(q: &QueryInstance) -> Result<QueryDag> {
    build_dag_with(q, DagOptions::default())
}

pub fn build_dag_with(q: &QueryInstance, opts: DagOptions) -> Result<QueryDag> {
    let mut dag = Dag::default();
    dag.push_query(q, opts)?;
    dag.rebuild_consumers();
    Ok(dag)
}

impl Dag {
    fn push_query(&mut self, q: &QueryInstance, opts: DagOptions) -> Result<()> {
        q.check_arity()?;
        let origin = self.queries.len() as u32;
        let first = self.nodes.len();
        let mut b = Builder {
            nodes: &mut self.nodes,
            origin,
            first,
            anchor_kind: if opts.semantic { OpKind::FuseSemantic } else { OpKind::EmbedAnchor },
        };
        let terminal = if q.pattern.is_union() {
            let mut scores = Vec::new();
            for branch in dnf_rewrite(q)? {
                let x = b.embedding(&branch)?;
                scores.push(b.score(x));
            }
            b.push(OpKind::UnionScore, scores, Payload::None)
        } else {
            let x = b.embedding(q)?;
            b.score(x)
        };
        let nodes: Vec<NodeId> = (first as NodeId..self.nodes.len() as NodeId).collect();
        debug_assert_eq!(nodes.len(), q.pattern.arity().nodes);
        self.queries.push(QuerySlot { pattern: q.pattern, n_forward: nodes.len(), nodes, terminal });
        Ok(())
    }

    /// Builds the fused forward DAG of a batch directly.
    pub fn from_queries(queries: &[QueryInstance], opts: DagOptions) -> Result<FusedDag> {
        let mut dag = Dag::default();
        for q in queries {
            dag.push_query(q, opts)?;
        }
        dag.rebuild_consumers();
        Ok(dag)
    }

    fn rebuild_consumers(&mut self) {
        let mut consumers = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for inp in &n.inputs {
                let c: &mut Vec<NodeId> = &mut consumers[inp.node as usize];
                if c.last() != Some(&n.id) {
                    c.push(n.id);
                }
            }
        }
        self.consumers = consumers;
    }

    pub fn nodes(&self) -> &[OperatorNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &OperatorNode {
        &self.nodes[id as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn queries(&self) -> &[QuerySlot] {
        &self.queries
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Nodes that read this node's output tensor.
    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id as usize]
    }

    /// Distinct `(producer, consumer)` dependency pairs.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (p, cs) in self.consumers.iter().enumerate() {
            for &c in cs {
                out.push((p as NodeId, c));
            }
        }
        out
    }

    /// Nodes without consumers.
    pub fn sinks(&self) -> Vec<NodeId> {
        (0..self.nodes.len() as NodeId).filter(|&i| self.consumers[i as usize].is_empty()).collect()
    }

    /// Nodes with no producers (the initial ready set).
    pub fn sources(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.inputs.is_empty()).map(|n| n.id).collect()
    }

    /// Number of distinct producer nodes of `id`.
    pub fn indegree(&self, id: NodeId) -> usize {
        let mut ps: Vec<NodeId> = self.nodes[id as usize].inputs.iter().map(|i| i.node).collect();
        ps.sort_unstable();
        ps.dedup();
        ps.len()
    }

    /// Kahn topological order; fails on a cycle.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let mut indeg: Vec<usize> = (0..self.nodes.len() as NodeId).map(|i| self.indegree(i)).collect();
        let mut queue: VecDeque<NodeId> = (0..self.nodes.len() as NodeId).filter(|&i| indeg[i as usize] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &c in &self.consumers[v as usize] {
                indeg[c as usize] -= 1;
                if indeg[c as usize] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if order.len() == self.nodes.len() {
            Ok(order)
        } else {
            Err(Error::Cyclic)
        }
    }

    /// Attaches the candidate list to every Score-type node of `query`.
    pub fn set_candidates(&mut self, query: usize, candidates: Arc<[EntityId]>) {
        let ids = self.queries[query].nodes.clone();
        for id in ids {
            let n = &mut self.nodes[id as usize];
            if matches!(n.op.kind, OpKind::Score | OpKind::Loss) {
                n.payload = Payload::Candidates(candidates.clone());
            }
        }
    }

    /// Number of nodes per operator type.
    pub fn type_histogram(&self) -> std::collections::BTreeMap<OperatorType, usize> {
        let mut h = std::collections::BTreeMap::new();
        for n in &self.nodes {
            *h.entry(n.op).or_insert(0) += 1;
        }
        h
    }
}

/// Disjoint union of per-query DAGs; node ids are shifted, origins renumbered.
pub fn fuse(batch: &[QueryDag]) -> FusedDag {
    let mut out = Dag::default();
    for dag in batch {
        let shift = out.nodes.len() as NodeId;
        let qshift = out.queries.len() as u32;
        for n in &dag.nodes {
            let mut n = n.clone();
            n.id += shift;
            n.origin += qshift;
            n.mirror = n.mirror.map(|m| m + shift);
            for i in &mut n.inputs {
                i.node += shift;
            }
            out.nodes.push(n);
        }
        for q in &dag.queries {
            let mut q = q.clone();
            q.terminal += shift;
            for id in &mut q.nodes {
                *id += shift;
            }
            out.queries.push(q);
        }
        out.training |= dag.training;
    }
    out.rebuild_consumers();
    out
}

/// Appends one backward node per forward node.
///
/// The backward node of `v` reads the gradient of `v`'s output (from its
/// consumer's backward node, or `v`'s own output when `v` is the query's
/// terminal) followed by `v`'s forward inputs, which keeps those activations
/// referenced until the backward pass has used them.
pub fn add_gradient_nodes(f: &FusedDag) -> Result<FusedDag> {
    add_gradient_nodes_with(f, |_| true)
}

/// Like [`add_gradient_nodes`], but a backward node only references its
/// forward inputs when `reads_inputs(kind)` says its kernel needs them, so
/// activations the backward pass never reads are released after the forward
/// consumer runs.
pub fn add_gradient_nodes_with(f: &FusedDag, reads_inputs: impl Fn(OpKind) -> bool) -> Result<FusedDag> {
    if f.training {
        return Err(Error::shape("DAG already contains backward nodes"));
    }
    let mut out = f.clone();
    out.training = true;
    let mut mirror_of = vec![NodeId::MAX; f.nodes.len()];
    for qi in 0..f.queries.len() {
        let slot = &f.queries[qi];
        let n_fwd = slot.n_forward;
        for &v in slot.nodes.iter().rev() {
            let fwd = &f.nodes[v as usize];
            let consumers = &f.consumers[v as usize];
            let is_terminal = v == slot.terminal;
            let upstream = if is_terminal {
                NodeInput::of(v)
            } else {
                let [c] = consumers.as_slice() else {
                    return Err(Error::shape(format!("forward node {v} must have exactly one consumer")));
                };
                let pos = f.nodes[*c as usize]
                    .inputs
                    .iter()
                    .position(|i| i.node == v)
                    .expect("consumer lists producer");
                NodeInput { node: mirror_of[*c as usize], slot: pos as u16 }
            };
            let kind = match fwd.op.kind {
                OpKind::Score if is_terminal => OpKind::Loss,
                k => k,
            };
            let mut inputs = vec![upstream];
            if reads_inputs(kind) {
                inputs.extend(fwd.inputs.iter().copied());
            }
            let id = out.nodes.len() as NodeId;
            out.nodes.push(OperatorNode {
                id,
                op: OperatorType::bwd(kind),
                inputs,
                payload: fwd.payload.clone(),
                origin: fwd.origin,
                local: (n_fwd + (n_fwd - 1 - fwd.local as usize)) as u16,
                mirror: Some(v),
            });
            mirror_of[v as usize] = id;
            out.queries[qi].nodes.push(id);
        }
    }
    out.rebuild_consumers();
    Ok(out)
}

/// One line of a frozen query file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub pattern: QueryPattern,
    pub anchors: Vec<EntityId>,
    pub relations: Vec<RelationId>,
    pub answers_obs: Vec<EntityId>,
    pub answers_miss: Vec<EntityId>,
}

impl QueryRecord {
    pub fn new(q: &QueryInstance, answers: &PredictiveAnswers) -> Self {
        QueryRecord {
            pattern: q.pattern,
            anchors: q.anchors.clone(),
            relations: q.relations.clone(),
            answers_obs: answers.observed.clone(),
            answers_miss: answers.missing.clone(),
        }
    }

    pub fn instance(&self) -> QueryInstance {
        QueryInstance::new(self.pattern, self.anchors.clone(), self.relations.clone())
    }

    pub fn answers(&self) -> PredictiveAnswers {
        PredictiveAnswers { observed: self.answers_obs.clone(), missing: self.answers_miss.clone() }
    }
}

pub fn write_query_records<W: Write>(mut w: W, records: &[QueryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_query_records<R: BufRead>(r: R) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line)?;
        rec.instance().check_arity()?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(p: QueryPattern) -> QueryInstance {
        let a = p.arity();
        QueryInstance::new(p, (0..a.anchors as u32).collect(), (0..a.relations as u32).collect())
    }

    #[test]
    fn arity_table_matches_built_dags() {
        for p in QueryPattern::ALL {
            let dag = build_dag(&inst(p)).unwrap();
            assert_eq!(dag.len(), p.arity().nodes, "{p}");
            assert_eq!(dag.sinks().len(), 1);
            dag.topo_order().unwrap();
        }
    }

    #[test]
    fn small_dag_shapes() {
        let d = build_dag(&inst(QueryPattern::P1)).unwrap();
        let kinds: Vec<OpKind> = d.nodes().iter().map(|n| n.op.kind).collect();
        assert_eq!(kinds, vec![OpKind::EmbedAnchor, OpKind::Project, OpKind::Score]);

        let d = build_dag(&inst(QueryPattern::I3)).unwrap();
        let h = d.type_histogram();
        assert_eq!(h[&OperatorType::fwd(OpKind::EmbedAnchor)], 3);
        assert_eq!(h[&OperatorType::fwd(OpKind::Project)], 3);
        let inter = d.nodes().iter().find(|n| n.op.kind == OpKind::Intersect).unwrap();
        assert_eq!(inter.cardinality(), 3);

        let d = build_dag(&inst(QueryPattern::Pni)).unwrap();
        let kinds: Vec<OpKind> = d.nodes().iter().map(|n| n.op.kind).collect();
        use OpKind::*;
        assert_eq!(kinds, vec![EmbedAnchor, Project, Project, Negate, EmbedAnchor, Project, Intersect, Score]);
    }

    #[test]
    fn arity_mismatch() {
        let q = QueryInstance::new(QueryPattern::I2, vec![1], vec![0, 1]);
        assert!(matches!(build_dag(&q), Err(Error::ArityMismatch { .. })));
    }

    #[test]
    fn dnf_rules() {
        let q = QueryInstance::new(QueryPattern::U2, vec![5, 6], vec![1, 2]);
        let b = dnf_rewrite(&q).unwrap();
        assert_eq!(b[0], QueryInstance::new(QueryPattern::P1, vec![5], vec![1]));
        assert_eq!(b[1], QueryInstance::new(QueryPattern::P1, vec![6], vec![2]));
        let q = QueryInstance::new(QueryPattern::Up, vec![5, 6], vec![1, 2, 3]);
        let b = dnf_rewrite(&q).unwrap();
        assert_eq!(b[0], QueryInstance::new(QueryPattern::P2, vec![5], vec![1, 3]));
        assert_eq!(b[1], QueryInstance::new(QueryPattern::P2, vec![6], vec![2, 3]));
        assert!(matches!(dnf_rewrite(&inst(QueryPattern::P2)), Err(Error::NotAUnionPattern(_))));
    }

    #[test]
    fn fuse_counts() {
        let a = build_dag(&inst(QueryPattern::P1)).unwrap();
        let f = fuse(&[a.clone(), a.clone()]);
        assert_eq!(f.len(), 6);
        assert_eq!(f.sinks().len(), 2);
        assert_eq!(f.sources().len(), 2);
        let b = build_dag(&inst(QueryPattern::I2)).unwrap();
        assert_eq!(fuse(&[a, b]).len(), 3 + 6);
    }

    #[test]
    fn gradient_mirror_1p() {
        let f = add_gradient_nodes(&build_dag(&inst(QueryPattern::P1)).unwrap()).unwrap();
        assert_eq!(f.len(), 6);
        let bwd: Vec<&OperatorNode> = f.nodes().iter().filter(|n| n.op.dir == Direction::Bwd).collect();
        assert_eq!(bwd[0].op, OperatorType::bwd(OpKind::Loss));
        assert_eq!(bwd[1].op, OperatorType::bwd(OpKind::Project));
        // upstream from LossBwd, then the Project's forward input.
        assert_eq!(bwd[1].inputs, vec![NodeInput::of(bwd[0].id), NodeInput::of(0)]);
        assert!(f.consumers(2).contains(&bwd[0].id));
        f.topo_order().unwrap();
        assert!(add_gradient_nodes(&f).is_err());
    }

    #[test]
    fn mirror_keeps_activations_referenced() {
        for p in QueryPattern::ALL {
            let fwd = build_dag(&inst(p)).unwrap();
            let t = add_gradient_nodes(&fwd).unwrap();
            let n_fwd = t.nodes().iter().filter(|n| n.op.dir == Direction::Fwd).count();
            assert_eq!(t.len(), 2 * n_fwd);
            for n in t.nodes().iter().filter(|n| n.op.dir == Direction::Fwd) {
                assert!(t.consumers(n.id).iter().any(|&c| t.node(c).op.dir == Direction::Bwd), "{p}: node {} has no backward consumer", n.id);
            }
            t.topo_order().unwrap();
        }
    }

    #[test]
    fn records_round_trip() {
        let q = QueryInstance::new(QueryPattern::In2, vec![3, 9], vec![1, 4]);
        let r = QueryRecord::new(&q, &PredictiveAnswers { observed: vec![1], missing: vec![2, 7] });
        let mut buf = Vec::new();
        write_query_records(&mut buf, std::slice::from_ref(&r)).unwrap();
        let s = String::from_utf8(buf.clone()).unwrap();
        assert!(s.starts_with(r#"{"pattern":"2in","anchors":[3,9],"relations":[1,4],"answers_obs":[1],"answers_miss":[2,7]}"#));
        assert_eq!(read_query_records(&buf[..]).unwrap(), vec![r]);
    }
}
