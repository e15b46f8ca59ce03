//! Generated graphs and semantic stores for tests, benchmarks and the CLI
//! when no dataset directory is given.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, GraphSplit, Triple};
use crate::scalar::Scalar;
use crate::semantic::SemanticStore;

/// Entities on a `width × height` grid; relation `i` moves by `moves[i]`.
/// The first `n_base` moves are primitive, the rest are sums of them, so
/// each later relation is a composition of earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub moves: Vec<(i32, i32)>,
    pub n_base: usize,
    /// Share of composite edges held out (half valid, half test).
    pub holdout: f64,
    /// Share of entities whose edges are all held out.
    pub sparse: f64,
    /// Side of the square blocks that share a semantic vector.
    pub block: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            width: 20,
            height: 10,
            moves: vec![(1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1)],
            n_base: 2,
            holdout: 0.3,
            sparse: 0.0,
            block: 2,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn n_entities(&self) -> usize {
        self.width * self.height
    }

    pub fn coords(&self, e: EntityId) -> (usize, usize) {
        (e as usize % self.width, e as usize / self.width)
    }

    pub fn entity(&self, x: usize, y: usize) -> EntityId {
        (y * self.width + x) as EntityId
    }

    pub fn cluster(&self, e: EntityId) -> usize {
        let (x, y) = self.coords(e);
        let bw = self.width.div_ceil(self.block);
        (y / self.block) * bw + x / self.block
    }

    pub fn n_clusters(&self) -> usize {
        self.width.div_ceil(self.block) * self.height.div_ceil(self.block)
    }

    /// Entities whose edges are all held out.
    pub fn sparse_entities(&self) -> Vec<EntityId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut all: Vec<EntityId> = (0..self.n_entities() as EntityId).collect();
        all.shuffle(&mut rng);
        let mut out: Vec<EntityId> = all[..(self.sparse * self.n_entities() as f64).round() as usize].to_vec();
        out.sort_unstable();
        out
    }
}

pub fn grid_graph(cfg: &GridConfig) -> Result<GraphSplit> {
    if cfg.width == 0 || cfg.height == 0 || cfg.moves.is_empty() || cfg.block == 0 {
        return Err(Error::config("grid", "empty grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sparse = cfg.sparse_entities();
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for e in 0..cfg.n_entities() as EntityId {
        let (x, y) = cfg.coords(e);
        for (r, &(dx, dy)) in cfg.moves.iter().enumerate() {
            let (tx, ty) = (x as i64 + dx as i64, y as i64 + dy as i64);
            if tx < 0 || ty < 0 || tx >= cfg.width as i64 || ty >= cfg.height as i64 {
                continue;
            }
            let t = Triple::new(e, r as u32, cfg.entity(tx as usize, ty as usize));
            let held = sparse.binary_search(&t.head).is_ok() || sparse.binary_search(&t.tail).is_ok();
            if held || (r >= cfg.n_base && rng.random::<f64>() < cfg.holdout) {
                if rng.random::<bool>() {
                    valid.push(t)
                } else {
                    test.push(t)
                }
            } else {
                train.push(t);
            }
        }
    }
    GraphSplit::new(cfg.n_entities(), cfg.moves.len(), train, valid, test)
}

/// One random code per grid block plus small per-entity noise.
pub fn cluster_semantic_store<T: Scalar>(cfg: &GridConfig, dim: usize, noise: f64, seed: u64) -> SemanticStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<Vec<f64>> = (0..cfg.n_clusters()).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut rows = Array2::zeros((cfg.n_entities(), dim));
    for (e, mut row) in rows.rows_mut().into_iter().enumerate() {
        let code = &codes[cfg.cluster(e as EntityId)];
        for (v, &c) in row.iter_mut().zip(code) {
            *v = T::lit(c + noise * rng.random_range(-1.0..1.0));
        }
    }
    SemanticStore::new(rows, "cluster-id")
}

/// Sum of a random code for the entity's column and one for its row, plus
/// per-entity noise. Since every relation is a fixed move on the grid, these
/// vectors determine each entity's tails.
pub fn axis_semantic_store<T: Scalar>(cfg: &GridConfig, dim: usize, noise: f64, seed: u64) -> SemanticStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut code = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let (cols, rows_) = (code(cfg.width), code(cfg.height));
    let mut rows = Array2::zeros((cfg.n_entities(), dim));
    for (e, mut row) in rows.rows_mut().into_iter().enumerate() {
        let (x, y) = cfg.coords(e as EntityId);
        for (j, v) in row.iter_mut().enumerate() {
            *v = T::lit(cols[x][j] + rows_[y][j] + noise * rng.random_range(-1.0..1.0));
        }
    }
    SemanticStore::new(rows, "grid-axes")
}

/// Uniformly random triples; `holdout` of them split between valid and test.
pub fn random_graph(n_entities: usize, n_relations: usize, n_triples: usize, holdout: f64, seed: u64) -> Result<GraphSplit> {
    if n_entities < 2 || n_relations == 0 {
        return Err(Error::config("graph", "need at least two entities and one relation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_triples {
        let t = Triple::new(
            rng.random_range(0..n_entities as u32),
            rng.random_range(0..n_relations as u32),
            rng.random_range(0..n_entities as u32),
        );
        let u: f64 = rng.random();
        if u < holdout / 2.0 {
            valid.push(t);
        } else if u < holdout {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    GraphSplit::new(n_entities, n_relations, train, valid, test)
}

/// Graph used when no dataset directory is configured.
pub fn bundled_graph() -> GraphSplit {
    random_graph(1000, 24, 12_000, 0.1, 237).expect("valid constants")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_edges_compose() {
        let cfg = GridConfig { holdout: 0.0, ..Default::default() };
        let g = grid_graph(&cfg).unwrap();
        assert_eq!(g.n_entities(), 200);
        let e = cfg.entity(3, 4);
        let via = g.train.project(&g.train.project(&[e], 0), 1);
        assert_eq!(g.train.neighbors(e, 2), via.as_slice());
        assert!(g.test_edges.is_empty());
    }

    #[test]
    fn sparse_entities_have_no_train_edges() {
        let cfg = GridConfig { sparse: 0.1, ..Default::default() };
        let g = grid_graph(&cfg).unwrap();
        let s = cfg.sparse_entities();
        assert_eq!(s.len(), 20);
        for &e in &s {
            assert!(g.train.out_edges(e).0.is_empty() && g.train.in_edges(e).0.is_empty());
        }
    }

    #[test]
    fn cluster_codes_shared_within_block() {
        let cfg = GridConfig::default();
        let s = cluster_semantic_store::<f64>(&cfg, 8, 0.0, 1);
        assert_eq!(s.rows().row(cfg.entity(0, 0) as usize), s.rows().row(cfg.entity(1, 1) as usize));
        assert_ne!(s.rows().row(cfg.entity(0, 0) as usize), s.rows().row(cfg.entity(2, 0) as usize));
    }

    #[test]
    fn bundled_is_deterministic() {
        assert_eq!(bundled_graph().train.triples(), bundled_graph().train.triples());
    }
}
