//! Triple store with forward/inverse adjacency, the dataset loader, and the
//! symbolic query evaluator used as answer oracle.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query::{QueryInstance, QueryPattern};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple { head, relation, tail }
    }
}

/// Compressed adjacency: for each entity, its `(relation, neighbor)` pairs sorted
/// ascending, so `(entity, relation)` lookups are a binary search.
#[derive(Debug, Clone)]
struct Adjacency {
    offsets: Vec<usize>,
    relations: Vec<RelationId>,
    neighbors: Vec<EntityId>,
}

impl Adjacency {
    fn build(n_entities: usize, pairs: impl Iterator<Item = (EntityId, RelationId, EntityId)>) -> Self {
        let mut rows: Vec<(EntityId, RelationId, EntityId)> = pairs.collect();
        rows.sort_unstable();
        let mut offsets = vec![0usize; n_entities + 1];
        for &(e, _, _) in &rows {
            offsets[e as usize + 1] += 1;
        }
        for i in 0..n_entities {
            offsets[i + 1] += offsets[i];
        }
        Adjacency {
            offsets,
            relations: rows.iter().map(|r| r.1).collect(),
            neighbors: rows.iter().map(|r| r.2).collect(),
        }
    }

    fn edges(&self, e: EntityId) -> (&[RelationId], &[EntityId]) {
        let (lo, hi) = (self.offsets[e as usize], self.offsets[e as usize + 1]);
        (&self.relations[lo..hi], &self.neighbors[lo..hi])
    }

    fn lookup(&self, e: EntityId, r: RelationId) -> &[EntityId] {
        let (rels, nbrs) = self.edges(e);
        let lo = rels.partition_point(|&x| x < r);
        let hi = rels.partition_point(|&x| x <= r);
        &nbrs[lo..hi]
    }
}

/// Immutable knowledge graph `(ℰ, ℛ, 𝒯)`.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    n_entities: usize,
    n_relations: usize,
    triples: Vec<Triple>,
    adj_out: Adjacency,
    adj_in: Adjacency,
}

impl KnowledgeGraph {
    /// Validates, deduplicates and indexes `triples`.
    pub fn from_triples(n_entities: usize, n_relations: usize, mut triples: Vec<Triple>) -> Result<Self> {
        for t in &triples {
            if t.head as usize >= n_entities {
                return Err(Error::IdOutOfRange { token: t.head.to_string(), bound: n_entities });
            }
            if t.tail as usize >= n_entities {
                return Err(Error::IdOutOfRange { token: t.tail.to_string(), bound: n_entities });
            }
            if t.relation as usize >= n_relations {
                return Err(Error::IdOutOfRange { token: t.relation.to_string(), bound: n_relations });
            }
        }
        triples.sort_unstable();
        triples.dedup();
        let adj_out = Adjacency::build(n_entities, triples.iter().map(|t| (t.head, t.relation, t.tail)));
        let adj_in = Adjacency::build(n_entities, triples.iter().map(|t| (t.tail, t.relation, t.head)));
        Ok(KnowledgeGraph { n_entities, n_relations, triples, adj_out, adj_in })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    /// Sorted, deduplicated triples.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.binary_search(t).is_ok()
    }

    /// Tails `t` with `(e, r, t) ∈ 𝒯`, ascending.
    pub fn neighbors(&self, e: EntityId, r: RelationId) -> &[EntityId] {
        self.adj_out.lookup(e, r)
    }

    /// Heads `h` with `(h, r, e) ∈ 𝒯`, ascending.
    pub fn inverse_neighbors(&self, e: EntityId, r: RelationId) -> &[EntityId] {
        self.adj_in.lookup(e, r)
    }

    /// All incoming edges of `e` as parallel `(relation, head)` slices.
    pub fn in_edges(&self, e: EntityId) -> (&[RelationId], &[EntityId]) {
        self.adj_in.edges(e)
    }

    pub fn out_edges(&self, e: EntityId) -> (&[RelationId], &[EntityId]) {
        self.adj_out.edges(e)
    }

    /// Image of a sorted entity set under relation `r`.
    pub fn project(&self, from: &[EntityId], r: RelationId) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = from.iter().flat_map(|&e| self.neighbors(e, r).iter().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Train graph plus held-out edges and the full graph they form together.
#[derive(Debug, Clone)]
pub struct GraphSplit {
    pub train: KnowledgeGraph,
    pub valid_edges: Vec<Triple>,
    pub test_edges: Vec<Triple>,
    pub full: KnowledgeGraph,
}

impl GraphSplit {
    /// Assembles a split; held-out edges already present in `train` are dropped.
    pub fn new(n_entities: usize, n_relations: usize, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Result<Self> {
        let train = KnowledgeGraph::from_triples(n_entities, n_relations, train)?;
        let held_out = |mut edges: Vec<Triple>| {
            edges.sort_unstable();
            edges.dedup();
            edges.retain(|t| !train.contains(t));
            edges
        };
        let valid_edges = held_out(valid);
        let test_edges = held_out(test);
        let mut all = train.triples().to_vec();
        all.extend_from_slice(&valid_edges);
        all.extend_from_slice(&test_edges);
        let full = KnowledgeGraph::from_triples(n_entities, n_relations, all)?;
        Ok(GraphSplit { train, valid_edges, test_edges, full })
    }

    pub fn n_entities(&self) -> usize {
        self.train.n_entities()
    }

    pub fn n_relations(&self) -> usize {
        self.train.n_relations()
    }
}

fn read_required(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_id(token: &str, bound: usize, file: &Path, line: usize) -> Result<u32> {
    let id: u64 = token
        .trim()
        .parse()
        .map_err(|_| Error::MalformedLine { file: file.to_path_buf(), line })?;
    if id as usize >= bound || id > u32::MAX as u64 {
        return Err(Error::IdOutOfRange { token: token.trim().to_string(), bound });
    }
    Ok(id as u32)
}

/// Counts a `<id>\t<label>` vocabulary, checking ids are dense from 0.
fn read_vocab(path: &Path) -> Result<usize> {
    let text = read_required(path)?;
    let mut count = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let id_tok = line.split('\t').next().unwrap_or_default();
        let id: usize = id_tok
            .trim()
            .parse()
            .map_err(|_| Error::MalformedLine { file: path.to_path_buf(), line: i + 1 })?;
        if id != count {
            return Err(Error::MalformedLine { file: path.to_path_buf(), line: i + 1 });
        }
        count += 1;
    }
    Ok(count)
}

/// Parses `<head>\t<relation>\t<tail>` lines.
pub fn read_triples(path: &Path, n_entities: usize, n_relations: usize) -> Result<Vec<Triple>> {
    let text = read_required(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split('\t').collect();
        if toks.len() != 3 {
            return Err(Error::MalformedLine { file: path.to_path_buf(), line: i + 1 });
        }
        let head = parse_id(toks[0], n_entities, path, i + 1)?;
        let relation = parse_id(toks[1], n_relations, path, i + 1)?;
        let tail = parse_id(toks[2], n_entities, path, i + 1)?;
        out.push(Triple { head, relation, tail });
    }
    Ok(out)
}

/// Loads `entities.dict`, `relations.dict` and the three triple files from `dir`.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<GraphSplit> {
    let dir = dir.as_ref();
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let n_entities = read_vocab(&p("entities.dict"))?;
    let n_relations = read_vocab(&p("relations.dict"))?;
    let train = read_triples(&p("train.txt"), n_entities, n_relations)?;
    let valid = read_triples(&p("valid.txt"), n_entities, n_relations)?;
    let test = read_triples(&p("test.txt"), n_entities, n_relations)?;
    GraphSplit::new(n_entities, n_relations, train, valid, test)
}

/// Writes a split in the directory layout [`load_graph`] reads.
pub fn write_graph(dir: impl AsRef<Path>, split: &GraphSplit) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let vocab = |n: usize, prefix: &str| (0..n).map(|i| format!("{i}\t{prefix}{i}\n")).collect::<String>();
    fs::write(dir.join("entities.dict"), vocab(split.n_entities(), "e"))?;
    fs::write(dir.join("relations.dict"), vocab(split.n_relations(), "r"))?;
    let lines = |ts: &[Triple]| ts.iter().map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail)).collect::<String>();
    fs::write(dir.join("train.txt"), lines(split.train.triples()))?;
    fs::write(dir.join("valid.txt"), lines(&split.valid_edges))?;
    fs::write(dir.join("test.txt"), lines(&split.test_edges))?;
    Ok(())
}

fn intersect_sorted(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn subtract_sorted(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    a.iter().copied().filter(|x| b.binary_search(x).is_err()).collect()
}

fn union_sorted(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let mut out: Vec<EntityId> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Exact denotation set `𝒜_q` of `q` on `g`, ascending.
///
/// Negated branches are subtracted inside their enclosing intersection; no
/// standalone complement set is ever built.
pub fn answer_query(g: &KnowledgeGraph, q: &QueryInstance) -> Result<Vec<EntityId>> {
    q.check_arity()?;
    let (a, r) = (&q.anchors, &q.relations);
    for &e in a {
        if e as usize >= g.n_entities() {
            return Err(Error::IdOutOfRange { token: e.to_string(), bound: g.n_entities() });
        }
    }
    for &rel in r {
        if rel as usize >= g.n_relations() {
            return Err(Error::IdOutOfRange { token: rel.to_string(), bound: g.n_relations() });
        }
    }
    let p = |e: EntityId, rel: RelationId| g.neighbors(e, rel).to_vec();
    let chain = |start: Vec<EntityId>, rels: &[RelationId]| rels.iter().fold(start, |s, &rel| g.project(&s, rel));
    use QueryPattern::*;
    Ok(match q.pattern {
        P1 => p(a[0], r[0]),
        P2 => chain(p(a[0], r[0]), &r[1..2]),
        P3 => chain(p(a[0], r[0]), &r[1..3]),
        I2 => intersect_sorted(&p(a[0], r[0]), &p(a[1], r[1])),
        I3 => intersect_sorted(&intersect_sorted(&p(a[0], r[0]), &p(a[1], r[1])), &p(a[2], r[2])),
        Pi => intersect_sorted(&chain(p(a[0], r[0]), &r[1..2]), &p(a[1], r[2])),
        Ip => g.project(&intersect_sorted(&p(a[0], r[0]), &p(a[1], r[1])), r[2]),
        U2 => union_sorted(&p(a[0], r[0]), &p(a[1], r[1])),
        Up => g.project(&union_sorted(&p(a[0], r[0]), &p(a[1], r[1])), r[2]),
        In2 => subtract_sorted(&p(a[0], r[0]), &p(a[1], r[1])),
        In3 => subtract_sorted(&intersect_sorted(&p(a[0], r[0]), &p(a[1], r[1])), &p(a[2], r[2])),
        Inp => g.project(&subtract_sorted(&p(a[0], r[0]), &p(a[1], r[1])), r[2]),
        Pin => subtract_sorted(&chain(p(a[0], r[0]), &r[1..2]), &p(a[1], r[2])),
        Pni => subtract_sorted(&p(a[1], r[2]), &chain(p(a[0], r[0]), &r[1..2])),
    })
}

/// Answers reachable on the training graph, and the extra answers only the
/// full graph yields.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictiveAnswers {
    pub observed: Vec<EntityId>,
    pub missing: Vec<EntityId>,
}

impl PredictiveAnswers {
    /// `obs ∪ miss`, ascending.
    pub fn all(&self) -> Vec<EntityId> {
        union_sorted(&self.observed, &self.missing)
    }
}

pub fn predictive_answers(split: &GraphSplit, q: &QueryInstance) -> Result<PredictiveAnswers> {
    let observed = answer_query(&split.train, q)?;
    let full = answer_query(&split.full, q)?;
    let missing = subtract_sorted(&full, &observed);
    Ok(PredictiveAnswers { observed, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: usize, nr: usize, ts: &[(u32, u32, u32)]) -> KnowledgeGraph {
        KnowledgeGraph::from_triples(n, nr, ts.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect()).unwrap()
    }

    #[test]
    fn neighbors_basic() {
        let kg = g(3, 1, &[(0, 0, 1), (0, 0, 2)]);
        assert_eq!(kg.neighbors(0, 0), &[1, 2]);
        assert!(kg.neighbors(1, 0).is_empty());
        assert_eq!(kg.inverse_neighbors(2, 0), &[0]);
    }

    #[test]
    fn dedup_and_range() {
        let kg = g(3, 2, &[(0, 0, 1), (0, 0, 1), (1, 1, 2)]);
        assert_eq!(kg.triples().len(), 2);
        let bad = KnowledgeGraph::from_triples(3, 2, vec![Triple::new(3, 0, 0)]);
        assert!(matches!(bad, Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn load_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("entities.dict"), "0\ta\n1\tb\n2\tc\n").unwrap();
        fs::write(d.join("relations.dict"), "0\tr\n1\ts\n").unwrap();
        fs::write(d.join("train.txt"), "0\t0\t1\n1\t1\t2\n0\t0\t1\n").unwrap();
        fs::write(d.join("valid.txt"), "").unwrap();
        fs::write(d.join("test.txt"), "2\t0\t0\n").unwrap();
        let split = load_graph(d).unwrap();
        assert_eq!(split.train.triples().len(), 2);
        assert_eq!(split.train.neighbors(0, 0), &[1]);
        assert_eq!(split.full.triples().len(), 3);

        fs::write(d.join("test.txt"), "3\t0\t0\n").unwrap();
        assert!(matches!(load_graph(d), Err(Error::IdOutOfRange { .. })));
        fs::write(d.join("test.txt"), "1\t0\n").unwrap();
        assert!(matches!(load_graph(d), Err(Error::MalformedLine { line: 1, .. })));
        fs::remove_file(d.join("valid.txt")).unwrap();
        assert!(matches!(load_graph(d), Err(Error::MissingFile(_))));
    }

    #[test]
    fn answers_small() {
        // a=0, b=1, c=2, d=3
        let kg = g(4, 2, &[(0, 0, 1), (2, 1, 1), (2, 1, 3)]);
        let q = |p, a: Vec<u32>, r: Vec<u32>| QueryInstance::new(p, a, r);
        assert_eq!(answer_query(&kg, &q(QueryPattern::P1, vec![0], vec![0])).unwrap(), vec![1]);
        assert_eq!(answer_query(&kg, &q(QueryPattern::I2, vec![0, 2], vec![0, 1])).unwrap(), vec![1]);
        assert!(answer_query(&kg, &q(QueryPattern::In2, vec![0, 2], vec![0, 1])).unwrap().is_empty());
        assert_eq!(answer_query(&kg, &q(QueryPattern::U2, vec![0, 2], vec![0, 1])).unwrap(), vec![1, 3]);
    }

    #[test]
    fn predictive_partition_for_test_only_edge() {
        let split = GraphSplit::new(3, 1, vec![Triple::new(0, 0, 1)], vec![], vec![Triple::new(1, 0, 2)]).unwrap();
        let q = QueryInstance::new(QueryPattern::P1, vec![1], vec![0]);
        let pa = predictive_answers(&split, &q).unwrap();
        assert!(pa.observed.is_empty());
        assert_eq!(pa.missing, vec![2]);
    }
}
