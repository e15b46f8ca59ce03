//! Online query sampling by answer-first instantiation, and the
//! difficulty-adaptive pattern distribution.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{answer_query, predictive_answers, EntityId, GraphSplit, KnowledgeGraph, PredictiveAnswers, RelationId};
use crate::query::{QueryInstance, QueryPattern};

pub const N_PATTERNS: usize = 14;
pub const DEFAULT_RETRIES: usize = 64;
pub const DEFAULT_FLOOR: f64 = 0.01;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_ETA: f64 = 1.0;

/// Instantiates patterns on one graph.
pub struct QuerySampler<'g> {
    g: &'g KnowledgeGraph,
    /// Entities with at least one incoming edge.
    targets: Vec<EntityId>,
    pub retries: usize,
}

impl<'g> QuerySampler<'g> {
    pub fn new(g: &'g KnowledgeGraph) -> Self {
        let targets = (0..g.n_entities() as EntityId).filter(|&e| !g.in_edges(e).0.is_empty()).collect();
        QuerySampler { g, targets, retries: DEFAULT_RETRIES }
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.g
    }

    /// A valid instance of `p` with a non-empty answer set on the graph.
    pub fn sample_query<R: Rng + ?Sized>(&self, p: QueryPattern, rng: &mut R) -> Result<QueryInstance> {
        if self.targets.is_empty() {
            return Err(Error::ExhaustedRetries { pattern: p, limit: 0 });
        }
        for _ in 0..self.retries.max(1) {
            let Some(q) = self.try_instantiate(p, rng) else { continue };
            if !answer_query(self.g, &q)?.is_empty() {
                return Ok(q);
            }
        }
        Err(Error::ExhaustedRetries { pattern: p, limit: self.retries })
    }

    fn in_edge<R: Rng + ?Sized>(&self, e: EntityId, rng: &mut R) -> Option<(RelationId, EntityId)> {
        let (rels, heads) = self.g.in_edges(e);
        if rels.is_empty() {
            return None;
        }
        let i = rng.random_range(0..rels.len());
        Some((rels[i], heads[i]))
    }

    /// Walks `len` edges backward from `t`; returns the anchor and the
    /// relations in forward order.
    fn path_to<R: Rng + ?Sized>(&self, t: EntityId, len: usize, rng: &mut R) -> Option<(EntityId, Vec<RelationId>)> {
        let mut rels = Vec::with_capacity(len);
        let mut cur = t;
        for _ in 0..len {
            let (r, h) = self.in_edge(cur, rng)?;
            rels.push(r);
            cur = h;
        }
        rels.reverse();
        Some((cur, rels))
    }

    /// Any edge of the graph; used for negated atoms.
    fn any_edge<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(EntityId, RelationId)> {
        let ts = self.g.triples();
        if ts.is_empty() {
            return None;
        }
        let t = ts[rng.random_range(0..ts.len())];
        Some((t.head, t.relation))
    }

    /// Any two-hop walk; used for the negated chain of `pni`.
    fn any_path2<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(EntityId, RelationId, RelationId)> {
        let ts = self.g.triples();
        let t = ts[rng.random_range(0..ts.len())];
        let (rels, _) = self.g.out_edges(t.tail);
        if rels.is_empty() {
            return None;
        }
        Some((t.head, t.relation, rels[rng.random_range(0..rels.len())]))
    }

    fn try_instantiate<R: Rng + ?Sized>(&self, p: QueryPattern, rng: &mut R) -> Option<QueryInstance> {
        use QueryPattern::*;
        let t = self.targets[rng.random_range(0..self.targets.len())];
        let (anchors, relations) = match p {
            P1 | P2 | P3 => {
                let len = match p {
                    P1 => 1,
                    P2 => 2,
                    _ => 3,
                };
                let (a, rels) = self.path_to(t, len, rng)?;
                (vec![a], rels)
            }
            I2 | I3 => {
                let k = if p == I2 { 2 } else { 3 };
                let mut a = Vec::with_capacity(k);
                let mut r = Vec::with_capacity(k);
                for _ in 0..k {
                    let (rel, h) = self.in_edge(t, rng)?;
                    a.push(h);
                    r.push(rel);
                }
                (a, r)
            }
            Pi => {
                let (a0, rels) = self.path_to(t, 2, rng)?;
                let (r2, a1) = self.in_edge(t, rng)?;
                (vec![a0, a1], vec![rels[0], rels[1], r2])
            }
            Ip | Up => {
                let (r2, m) = self.in_edge(t, rng)?;
                let (r0, a0) = self.in_edge(m, rng)?;
                let (r1, a1) = self.in_edge(m, rng)?;
                (vec![a0, a1], vec![r0, r1, r2])
            }
            U2 => {
                let (r0, a0) = self.in_edge(t, rng)?;
                let (r1, a1) = self.in_edge(t, rng)?;
                (vec![a0, a1], vec![r0, r1])
            }
            In2 => {
                let (r0, a0) = self.in_edge(t, rng)?;
                let (a1, r1) = self.any_edge(rng)?;
                (vec![a0, a1], vec![r0, r1])
            }
            In3 => {
                let (r0, a0) = self.in_edge(t, rng)?;
                let (r1, a1) = self.in_edge(t, rng)?;
                let (a2, r2) = self.any_edge(rng)?;
                (vec![a0, a1, a2], vec![r0, r1, r2])
            }
            Inp => {
                let (r2, m) = self.in_edge(t, rng)?;
                let (r0, a0) = self.in_edge(m, rng)?;
                let (a1, r1) = self.any_edge(rng)?;
                (vec![a0, a1], vec![r0, r1, r2])
            }
            Pin => {
                let (a0, rels) = self.path_to(t, 2, rng)?;
                let (a1, r2) = self.any_edge(rng)?;
                (vec![a0, a1], vec![rels[0], rels[1], r2])
            }
            Pni => {
                let (a0, r0, r1) = self.any_path2(rng)?;
                let (r2, a1) = self.in_edge(t, rng)?;
                (vec![a0, a1], vec![r0, r1, r2])
            }
        };
        Some(QueryInstance::new(p, anchors, relations))
    }
}

/// Probability per pattern, indexed by [`QueryPattern::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    pub weights: [f64; N_PATTERNS],
    pub floor: f64,
}

impl SamplingDistribution {
    pub fn uniform() -> Self {
        SamplingDistribution { weights: [1.0 / N_PATTERNS as f64; N_PATTERNS], floor: DEFAULT_FLOOR }
    }

    /// Normalized `weights`; patterns not listed get zero.
    pub fn from_counts(counts: &[(QueryPattern, f64)]) -> Result<Self> {
        let mut w = [0.0; N_PATTERNS];
        for &(p, c) in counts {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config("mixture", format!("weight of {p} must be finite and ≥ 0")));
            }
            w[p.index()] += c;
        }
        let s: f64 = w.iter().sum();
        if s <= 0.0 {
            return Err(Error::config("mixture", "all pattern weights are zero"));
        }
        w.iter_mut().for_each(|x| *x /= s);
        Ok(SamplingDistribution { weights: w, floor: 0.0 })
    }

    pub fn point_mass(p: QueryPattern) -> Self {
        Self::from_counts(&[(p, 1.0)]).expect("nonzero")
    }

    pub fn weight(&self, p: QueryPattern) -> f64 {
        self.weights[p.index()]
    }

    pub fn argmax(&self) -> QueryPattern {
        let mut best = 0;
        for i in 1..N_PATTERNS {
            if self.weights[i] > self.weights[best] {
                best = i;
            }
        }
        QueryPattern::ALL[best]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QueryPattern {
        let idx = WeightedIndex::new(self.weights).expect("valid distribution");
        QueryPattern::ALL[idx.sample(rng)]
    }
}

/// Exponential moving average of per-pattern training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTracker {
    pub ema_loss: [f64; N_PATTERNS],
    pub observations: [u64; N_PATTERNS],
    pub decay: f64,
    pub eta: f64,
}

impl Default for DifficultyTracker {
    fn default() -> Self {
        Self::new(DEFAULT_DECAY, DEFAULT_ETA)
    }
}

impl DifficultyTracker {
    pub fn new(decay: f64, eta: f64) -> Self {
        DifficultyTracker { ema_loss: [0.0; N_PATTERNS], observations: [0; N_PATTERNS], decay, eta }
    }

    pub fn record(&mut self, p: QueryPattern, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::NonFiniteLoss { pattern: p, value: loss });
        }
        let i = p.index();
        self.ema_loss[i] = self.decay * self.ema_loss[i] + (1.0 - self.decay) * loss;
        self.observations[i] += 1;
        Ok(())
    }

    pub fn warm(&self) -> bool {
        self.observations.iter().all(|&n| n > 0)
    }
}

/// `π(p) ∝ exp(η·ema(p))`, then raised to at least `floor` with the excess
/// taken proportionally from the rest so the weights still sum to one.
pub fn update_distribution(t: &DifficultyTracker, floor: f64) -> SamplingDistribution {
    if !t.warm() {
        return SamplingDistribution { floor, ..SamplingDistribution::uniform() };
    }
    let m = t.ema_loss.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = t.ema_loss.map(|l| (t.eta * (l - m)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    SamplingDistribution { weights: apply_floor(w, floor), floor }
}

/// Smallest proportional rescaling of the unclipped weights that keeps every
/// weight ≥ `floor` and the total at one.
pub fn apply_floor(w: [f64; N_PATTERNS], floor: f64) -> [f64; N_PATTERNS] {
    if floor <= 0.0 {
        return w;
    }
    let floor = floor.min(1.0 / N_PATTERNS as f64);
    let mut clipped = [false; N_PATTERNS];
    loop {
        let n_clipped = clipped.iter().filter(|&&c| c).count();
        let free: f64 = (0..N_PATTERNS).filter(|&i| !clipped[i]).map(|i| w[i]).sum();
        let scale = if free > 0.0 { (1.0 - floor * n_clipped as f64) / free } else { 0.0 };
        let mut changed = false;
        for i in 0..N_PATTERNS {
            if !clipped[i] && w[i] * scale < floor {
                clipped[i] = true;
                changed = true;
            }
        }
        if !changed {
            let mut out = [0.0; N_PATTERNS];
            for i in 0..N_PATTERNS {
                out[i] = if clipped[i] { floor } else { w[i] * scale };
            }
            return out;
        }
    }
}

/// Sampled queries with their observed and missing answers.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub queries: Vec<QueryInstance>,
    pub answers: Vec<PredictiveAnswers>,
    pub step: u64,
}

/// `b` queries with patterns drawn i.i.d. from `pi`, instantiated on the
/// training graph of `split`.
pub fn sample_batch<R: Rng + ?Sized>(
    sampler: &QuerySampler<'_>,
    split: &GraphSplit,
    pi: &SamplingDistribution,
    b: usize,
    step: u64,
    rng: &mut R,
) -> Result<SampleBatch> {
    let mut queries = Vec::with_capacity(b);
    let mut answers = Vec::with_capacity(b);
    for _ in 0..b {
        let q = sampler.sample_query(pi.sample(rng), rng)?;
        answers.push(predictive_answers(split, &q)?);
        queries.push(q);
    }
    Ok(SampleBatch { queries, answers, step })
}

/// `count` frozen records over `patterns` (all fourteen when empty), seeded.
pub fn sample_records(split: &GraphSplit, patterns: &[QueryPattern], count: usize, seed: u64) -> Result<Vec<crate::query::QueryRecord>> {
    use rand::SeedableRng;
    let pi = if patterns.is_empty() {
        SamplingDistribution::uniform()
    } else {
        SamplingDistribution::from_counts(&patterns.iter().map(|&p| (p, 1.0)).collect::<Vec<_>>())?
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let b = sample_batch(&QuerySampler::new(&split.train), split, &pi, count, 0, &mut rng)?;
    Ok(b.queries.iter().zip(&b.answers).map(|(q, a)| crate::query::QueryRecord::new(q, a)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unique_walk_on_path_graph() {
        let g = KnowledgeGraph::from_triples(3, 2, vec![Triple::new(0, 0, 1), Triple::new(1, 1, 2)]).unwrap();
        let s = QuerySampler::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = s.sample_query(QueryPattern::P2, &mut rng).unwrap();
            assert_eq!((q.anchors.as_slice(), q.relations.as_slice()), (&[0][..], &[0, 1][..]));
            assert_eq!(answer_query(&g, &q).unwrap(), vec![2]);
        }
    }

    #[test]
    fn negation_covering_everything_exhausts() {
        // every edge ends at entity 2, so any negated atom removes the only answer
        let g = KnowledgeGraph::from_triples(3, 2, vec![Triple::new(0, 0, 2), Triple::new(1, 1, 2)]).unwrap();
        let s = QuerySampler::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = s.sample_query(QueryPattern::In2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::ExhaustedRetries { limit: 64, .. }));
    }

    #[test]
    fn ema_examples() {
        let mut t = DifficultyTracker::new(0.9, 1.0);
        t.ema_loss[0] = 1.0;
        t.record(QueryPattern::P1, 2.0).unwrap();
        assert!((t.ema_loss[0] - 1.1).abs() < 1e-12);
        for _ in 0..500 {
            t.record(QueryPattern::P1, 3.0).unwrap();
        }
        assert!((t.ema_loss[0] - 3.0).abs() < 1e-12);
        assert!(t.record(QueryPattern::P1, f64::NAN).is_err());
    }

    #[test]
    fn step_response_bound() {
        let decay: f64 = 0.9;
        let n = (0.05f64.ln() / decay.ln()).ceil() as usize;
        let mut t = DifficultyTracker::new(decay, 1.0);
        for _ in 0..n {
            t.record(QueryPattern::P3, 1.0).unwrap();
        }
        assert!(t.ema_loss[2] >= 0.95);
        let mut t = DifficultyTracker::new(decay, 1.0);
        for _ in 0..n - 1 {
            t.record(QueryPattern::P3, 1.0).unwrap();
        }
        assert!(t.ema_loss[2] < 0.95);
    }

    #[test]
    fn distribution_rule() {
        let mut t = DifficultyTracker::new(0.9, 1.0);
        t.observations = [1; N_PATTERNS];
        t.ema_loss = [0.7; N_PATTERNS];
        let d = update_distribution(&t, 0.01);
        assert!(d.weights.iter().all(|w| (w - 1.0 / 14.0).abs() < 1e-15));

        t.ema_loss = [0.0; N_PATTERNS];
        t.ema_loss[0] = 1.0;
        let d = update_distribution(&t, 0.0);
        assert!((d.weights[0] / d.weights[1] - std::f64::consts::E).abs() < 1e-12);

        t.ema_loss[0] = 50.0;
        let d = update_distribution(&t, 0.01);
        let min = d.weights.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((min - 0.01).abs() < 1e-15);
        assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d.argmax(), QueryPattern::P1);
    }

    #[test]
    fn cold_start_is_uniform() {
        let t = DifficultyTracker::default();
        assert_eq!(update_distribution(&t, 0.01).weights, SamplingDistribution::uniform().weights);
    }
}
