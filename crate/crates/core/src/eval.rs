//! Filtered ranking evaluation on predictive (missing) answers.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arena::Arena;
use crate::error::{Error, Result};
use crate::exec::{compile_batch, take_query_scores, Step};
use crate::kernels::{Hyper, KernelRegistry, ModelParams};
use crate::kg::{predictive_answers, EntityId, GraphSplit, Triple};
use crate::query::{DagOptions, QueryInstance, QueryPattern, QueryRecord};
use crate::scalar::Scalar;
use crate::scheduler::{Scheduler, SchedulerConfig};
use crate::semantic::SemanticStore;

/// `1 + better + ⌊ties/2⌋` over entities outside `filter` (sorted) other
/// than `target`. Higher scores rank first.
pub fn filtered_rank<T: Scalar>(scores: &[T], target: EntityId, filter: &[EntityId]) -> Result<usize> {
    if filter.binary_search(&target).is_ok() {
        return Err(Error::TargetFiltered(target));
    }
    let t = *scores.get(target as usize).ok_or_else(|| Error::IdOutOfRange { token: target.to_string(), bound: scores.len() })?;
    let (mut better, mut ties) = (0usize, 0usize);
    let mut f = filter.iter().peekable();
    for (e, &s) in scores.iter().enumerate() {
        let e = e as EntityId;
        while f.peek().is_some_and(|&&x| x < e) {
            f.next();
        }
        if e == target || f.peek() == Some(&&e) {
            continue;
        }
        if s > t {
            better += 1;
        } else if s == t {
            ties += 1;
        }
    }
    Ok(1 + better + ties / 2)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub patterns: usize,
}

impl Aggregate {
    fn of<'a>(it: impl Iterator<Item = &'a PatternMetrics>) -> Self {
        let mut a = Aggregate::default();
        for m in it {
            a.mrr += m.mrr;
            a.hits1 += m.hits1;
            a.hits3 += m.hits3;
            a.hits10 += m.hits10;
            a.patterns += 1;
        }
        if a.patterns > 0 {
            let n = a.patterns as f64;
            a.mrr /= n;
            a.hits1 /= n;
            a.hits3 /= n;
            a.hits10 /= n;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub per_pattern: BTreeMap<QueryPattern, PatternMetrics>,
    /// Macro average over every pattern present.
    pub all: Aggregate,
    /// Macro average over patterns without negation.
    pub positive: Aggregate,
    /// Queries without missing answers, which are skipped.
    pub skipped: usize,
    pub config_hash: Option<String>,
}

/// Per-query metrics are averaged over that query's missing answers, then
/// over queries of the same pattern.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    sums: BTreeMap<QueryPattern, PatternMetrics>,
    skipped: usize,
}

impl Accumulator {
    pub fn add_query(&mut self, p: QueryPattern, ranks: &[usize]) {
        if ranks.is_empty() {
            self.skipped += 1;
            return;
        }
        let n = ranks.len() as f64;
        let s = self.sums.entry(p).or_default();
        s.mrr += ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        s.hits1 += ranks.iter().filter(|&&r| r <= 1).count() as f64 / n;
        s.hits3 += ranks.iter().filter(|&&r| r <= 3).count() as f64 / n;
        s.hits10 += ranks.iter().filter(|&&r| r <= 10).count() as f64 / n;
        s.queries += 1;
    }

    pub fn merge(&mut self, other: Accumulator) {
        for (p, m) in other.sums {
            let s = self.sums.entry(p).or_default();
            s.mrr += m.mrr;
            s.hits1 += m.hits1;
            s.hits3 += m.hits3;
            s.hits10 += m.hits10;
            s.queries += m.queries;
        }
        self.skipped += other.skipped;
    }

    pub fn report(&self, split: impl Into<String>) -> EvalReport {
        let per_pattern: BTreeMap<QueryPattern, PatternMetrics> = self
            .sums
            .iter()
            .map(|(&p, s)| {
                let n = s.queries as f64;
                (p, PatternMetrics { mrr: s.mrr / n, hits1: s.hits1 / n, hits3: s.hits3 / n, hits10: s.hits10 / n, queries: s.queries })
            })
            .collect();
        EvalReport {
            split: split.into(),
            all: Aggregate::of(per_pattern.values()),
            positive: Aggregate::of(per_pattern.iter().filter(|(p, _)| !p.has_negation()).map(|(_, m)| m)),
            per_pattern,
            skipped: self.skipped,
            config_hash: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub gamma: f64,
    pub alpha_box: f64,
    /// Queries scored against all entities per executed DAG.
    pub chunk: usize,
    pub b_max: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { gamma: 12.0, alpha_box: 0.02, chunk: 64, b_max: crate::scheduler::DEFAULT_B_MAX }
    }
}

/// Scores (negated distances) of every entity for each query.
pub fn score_all<T: Scalar>(
    params: &ModelParams<T>,
    semantic: Option<&SemanticStore<T>>,
    records: &[QueryRecord],
    opts: &EvalOptions,
) -> Result<Vec<Vec<T>>> {
    let n = params.n_entities();
    let all: Arc<[EntityId]> = (0..n as EntityId).collect::<Vec<_>>().into();
    let registry = KernelRegistry::new(params.backbone);
    let mut arena = Arena::default();
    let mut scheduler = Scheduler::new(SchedulerConfig { b_max: opts.b_max, dual_pool: false });
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(opts.chunk.max(1)) {
        let queries: Vec<_> = chunk.iter().map(|r| r.instance()).collect();
        let cands = vec![all.clone(); queries.len()];
        let (dag, plan) = compile_batch(&queries, &cands, params.backbone, DagOptions { semantic: semantic.is_some() }, false, n)?;
        let mut step = Step::new(&registry, params, semantic, Hyper::new(opts.gamma, opts.alpha_box, queries.len()), &dag, &plan)?;
        let sinks = scheduler.run(&mut step, &mut arena, &dag, &plan)?;
        for d in take_query_scores(&mut arena, &dag, &sinks)? {
            out.push(d.into_iter().map(|x| -x).collect());
        }
        arena.flush_deferred();
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    semantic: Option<&SemanticStore<T>>,
    records: &[QueryRecord],
    split: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut acc = Accumulator::default();
    let scored: Vec<&QueryRecord> = records.iter().filter(|r| !r.answers_miss.is_empty()).collect();
    acc.skipped = records.len() - scored.len();
    let owned: Vec<QueryRecord> = scored.iter().map(|&r| r.clone()).collect();
    let scores = score_all(params, semantic, &owned, opts)?;
    for (r, s) in owned.iter().zip(&scores) {
        let mut known: Vec<EntityId> = r.answers_obs.iter().chain(&r.answers_miss).copied().collect();
        known.sort_unstable();
        known.dedup();
        let mut ranks = Vec::with_capacity(r.answers_miss.len());
        for &t in &r.answers_miss {
            let i = known.binary_search(&t).expect("target is a known answer");
            let mut filter = known.clone();
            filter.remove(i);
            ranks.push(filtered_rank(s, t, &filter)?);
        }
        acc.add_query(r.pattern, &ranks);
    }
    Ok(acc.report(split))
}

/// One 1p record per distinct `(head, relation)` among `edges`.
pub fn one_hop_records(split: &GraphSplit, edges: &[Triple]) -> Result<Vec<QueryRecord>> {
    let mut keys: Vec<(EntityId, u32)> = edges.iter().map(|t| (t.head, t.relation)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(h, r)| {
            let q = QueryInstance::new(QueryPattern::P1, vec![h], vec![r]);
            Ok(QueryRecord::new(&q, &predictive_answers(split, &q)?))
        })
        .collect()
}

/// `E[1/rank]` when the target's rank is uniform over `1..=n`.
pub fn uniform_mrr(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(filtered_rank(&[1.0, 9.0, 3.0], 1, &[]).unwrap(), 1);
        assert_eq!(filtered_rank(&[5.0, 4.0, 3.0, 2.0], 2, &[0]).unwrap(), 2);
        assert_eq!(filtered_rank(&[1.0, 1.0, 1.0, 1.0, 1.0], 0, &[]).unwrap(), 3);
        assert!(matches!(filtered_rank(&[1.0, 2.0], 1, &[1]), Err(Error::TargetFiltered(1))));
    }

    #[test]
    fn rank_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(5..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) * 0.5).collect();
            let target = rng.random_range(0..n) as u32;
            let mut filter: Vec<u32> = (0..n as u32).filter(|&e| e != target && rng.random_bool(0.3)).collect();
            filter.sort_unstable();
            let mut kept: Vec<(f64, u32)> = (0..n as u32).filter(|e| filter.binary_search(e).is_err()).map(|e| (scores[e as usize], e)).collect();
            kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let first = kept.iter().position(|&(s, _)| s == scores[target as usize]).unwrap();
            let ties = kept.iter().filter(|&&(s, e)| s == scores[target as usize] && e != target).count();
            assert_eq!(filtered_rank(&scores, target, &filter).unwrap(), first + 1 + ties / 2);
        }
    }

    #[test]
    fn mrr_arithmetic_and_ordering() {
        let mut acc = Accumulator::default();
        acc.add_query(QueryPattern::P1, &[1, 2, 4]);
        acc.add_query(QueryPattern::P2, &[]);
        let r = acc.report("test");
        let m = r.per_pattern[&QueryPattern::P1];
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
        assert_eq!((m.hits1, m.hits10), (1.0 / 3.0, 1.0));
        assert_eq!(r.skipped, 1);
    }

    #[test]
    fn larger_filter_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..30).map(|_| rng.random()).collect();
            let small: Vec<u32> = (1..30).filter(|_| rng.random_bool(0.2)).collect();
            let mut big = small.clone();
            big.extend((1..30).filter(|e| !small.contains(e) && rng.random_bool(0.3)));
            big.sort_unstable();
            assert!(filtered_rank(&scores, 0, &big).unwrap() <= filtered_rank(&scores, 0, &small).unwrap());
        }
    }
}
