//! Training loop: negative sampling, Adam, checkpoints, producer pipeline and
//! adaptive-sampler feedback.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arena::Arena;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::exec::{compile_batch, release_sinks, Step};
use crate::kernels::{Backbone, Hyper, KernelRegistry, ModelDims, ModelParams, Param};
use crate::kg::{EntityId, GraphSplit};
use crate::query::{DagOptions, QueryInstance, QueryPattern};
use crate::sampler::{sample_batch, update_distribution, DifficultyTracker, QuerySampler, SamplingDistribution, N_PATTERNS};
use crate::scalar::{Precision, Scalar};
use crate::scheduler::{Scheduler, SchedulerConfig};
use crate::semantic::SemanticStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: ModelParams<T>,
    v: ModelParams<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }

    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) -> Result<()> {
        for ((p, t), (q, g)) in params.iter().zip(grads.iter()) {
            if p != q || t.dim() != g.dim() || self.m.try_get(p)?.dim() != t.dim() {
                return Err(Error::shape(format!("gradient for {} has shape {:?}, parameter {:?}", p.name(params.backbone), g.dim(), t.dim())));
            }
        }
        if params.iter().count() != grads.iter().count() {
            return Err(Error::shape("gradient and parameter sets differ"));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(self.step as i32), 1.0 - self.beta2.powi(self.step as i32));
        let step_size = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for ((p, g), ((_, m), (_, v))) in grads.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let theta = params.get_mut(p);
            Zip::from(theta).and(m).and(v).and(g).for_each(|th, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *th -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// `n_neg` entities drawn uniformly with replacement from those not in
/// `answers` (sorted, deduplicated).
pub fn negative_sample<R: Rng + ?Sized>(n_entities: usize, answers: &[EntityId], n_neg: usize, rng: &mut R) -> Result<Vec<EntityId>> {
    let legal = n_entities.saturating_sub(answers.len());
    if legal == 0 {
        return Err(Error::NoNegativesAvailable);
    }
    let mut out = Vec::with_capacity(n_neg);
    if answers.len() * 2 <= n_entities {
        while out.len() < n_neg {
            let e = rng.random_range(0..n_entities as EntityId);
            if answers.binary_search(&e).is_err() {
                out.push(e);
            }
        }
    } else {
        // index into the complement directly
        for _ in 0..n_neg {
            let mut k = rng.random_range(0..legal as EntityId);
            for &a in answers {
                if a <= k {
                    k += 1;
                } else {
                    break;
                }
            }
            out.push(k);
        }
    }
    Ok(out)
}

/// A sampled batch with its candidate lists (positive first).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub index: u64,
    pub queries: Vec<QueryInstance>,
    pub candidates: Vec<Arc<[EntityId]>>,
    pub sample_secs: f64,
}

fn batch_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Samples batch `index`; the random stream depends only on the seed and the index.
pub fn produce_batch(sampler: &QuerySampler<'_>, split: &GraphSplit, pi: &SamplingDistribution, cfg: &TrainConfig, index: u64) -> Result<TrainBatch> {
    let t0 = Instant::now();
    let mut rng = batch_rng(cfg.seed, index);
    let b = sample_batch(sampler, split, pi, cfg.batch, index, &mut rng)?;
    let mut candidates = Vec::with_capacity(b.queries.len());
    for a in &b.answers {
        let pos = a.observed[rng.random_range(0..a.observed.len())];
        let mut c = vec![pos];
        c.extend(negative_sample(split.n_entities(), &a.all(), cfg.n_neg, &mut rng)?);
        candidates.push(c.into());
    }
    Ok(TrainBatch { index, queries: b.queries, candidates, sample_secs: t0.elapsed().as_secs_f64() })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub ema: BTreeMap<QueryPattern, f64>,
    /// Sampling distribution used for the next batches.
    pub pi: BTreeMap<QueryPattern, f64>,
    pub qps: f64,
    pub qps_excl_sampling: f64,
    pub peak_bytes: u64,
    pub config_hash: String,
}

fn by_pattern(v: &[f64; N_PATTERNS]) -> BTreeMap<QueryPattern, f64> {
    QueryPattern::ALL.iter().map(|&p| (p, v[p.index()])).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub backbone: Backbone,
    pub dims: ModelDims,
    pub precision: Precision,
    pub step: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ModelParams<T>,
}

/// `NGCK`, u32 version, u64 header length, JSON header, then tensors row-major little-endian.
pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>, cfg: &TrainConfig, step: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        backbone: params.backbone,
        dims: params.dims,
        precision: T::PRECISION,
        step,
        config_hash: cfg.hash_hex(),
        config: cfg.clone(),
        tensors: params.iter().map(|(p, t)| TensorInfo { name: p.name(params.backbone).to_string(), rows: t.nrows(), cols: t.ncols() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.bytes() as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for &v in t.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], name: &str) -> Result<Checkpoint<T>> {
    let trunc = || Error::TruncatedFile(name.to_string());
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC { Error::BadMagic(name.to_string()) } else { trunc() });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(name.to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(trunc)?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.precision != T::PRECISION {
        return Err(Error::PrecisionMismatch { checkpoint: header.precision.to_string(), run: T::PRECISION.to_string() });
    }
    let mut params = ModelParams::<T>::zeros(header.backbone, header.dims);
    let expected: Vec<(Param, (usize, usize))> = ModelParams::<T>::shapes(header.backbone, &header.dims);
    if expected.len() != header.tensors.len() {
        return Err(Error::CountMismatch { expected: expected.len(), found: header.tensors.len() });
    }
    let w = T::PRECISION.width();
    let mut pos = 16 + hlen;
    for ((p, shape), info) in expected.into_iter().zip(&header.tensors) {
        if info.name != p.name(header.backbone) || (info.rows, info.cols) != shape {
            return Err(Error::shape(format!("checkpoint tensor {} {}x{} does not match {} {:?}", info.name, info.rows, info.cols, p.name(header.backbone), shape)));
        }
        let n = shape.0 * shape.1;
        let raw = bytes.get(pos..pos + n * w).ok_or_else(trunc)?;
        let data: Vec<T> = raw.chunks_exact(w).map(T::read_le).collect();
        params.set(p, Array2::from_shape_vec(shape, data).expect("sized"))?;
        pos += n * w;
    }
    if pos != bytes.len() {
        return Err(Error::shape(format!("{} trailing bytes after checkpoint tensors", bytes.len() - pos)));
    }
    Ok(Checkpoint { header, params })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>, cfg: &TrainConfig, step: u64) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, cfg, step))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?, &path.display().to_string())
}

/// Reads only the JSON header, e.g. to pick the precision before loading.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointHeader> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let name = path.display().to_string();
    if bytes.len() < 16 {
        return Err(Error::TruncatedFile(name));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(name));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    Ok(serde_json::from_slice(bytes.get(16..16 + hlen).ok_or(Error::TruncatedFile(name))?)?)
}

/// Where a run writes its artifacts; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        TrainOutputs { dir: Some(dir.into()), trace: None }
    }
}

pub fn model_dims(cfg: &TrainConfig, split: &GraphSplit, sem_dim: Option<usize>) -> ModelDims {
    ModelDims { n_entities: split.n_entities(), n_relations: split.n_relations(), dim: cfg.dim, hidden: cfg.hidden, sem_dim }
}

/// Model state of one run plus the sampler feedback loop.
pub struct Trainer<'g, T: Scalar> {
    pub cfg: TrainConfig,
    pub split: &'g GraphSplit,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub semantic: Option<SemanticStore<T>>,
    pub tracker: DifficultyTracker,
    pub pi: SamplingDistribution,
    pub metrics: Vec<StepMetrics>,
    pub step: u64,
    registry: KernelRegistry<T>,
    arena: Arena<T>,
    scheduler: Scheduler,
    base_pi: SamplingDistribution,
    hash: String,
}

impl<'g, T: Scalar> Trainer<'g, T> {
    pub fn new(cfg: TrainConfig, split: &'g GraphSplit, semantic: Option<SemanticStore<T>>) -> Result<Self> {
        cfg.validate()?;
        if T::PRECISION != cfg.precision {
            return Err(Error::PrecisionMismatch { checkpoint: cfg.precision.to_string(), run: T::PRECISION.to_string() });
        }
        if let Some(s) = &semantic {
            if s.count() != split.n_entities() {
                return Err(Error::CountMismatch { expected: split.n_entities(), found: s.count() });
            }
        }
        if cfg.adaptive && !cfg.patterns.is_empty() {
            return Err(Error::config("patterns", "adaptive sampling runs over all fourteen patterns"));
        }
        let base_pi = if cfg.patterns.is_empty() {
            SamplingDistribution::uniform()
        } else {
            SamplingDistribution::from_counts(&cfg.patterns.iter().map(|&p| (p, 1.0)).collect::<Vec<_>>())?
        };
        let dims = model_dims(&cfg, split, semantic.as_ref().map(|s| s.dim()));
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(cfg.backbone, dims, cfg.gamma, &mut init_rng);
        Ok(Trainer {
            adam: AdamState::new(&params),
            registry: KernelRegistry::new(cfg.backbone),
            arena: Arena::new(cfg.reclaim),
            scheduler: Scheduler::new(SchedulerConfig { b_max: cfg.b_max, dual_pool: cfg.dual_pool }),
            tracker: DifficultyTracker::new(cfg.decay, cfg.eta),
            pi: base_pi.clone(),
            hash: cfg.hash_hex(),
            metrics: Vec::new(),
            step: 0,
            base_pi,
            params,
            semantic,
            split,
            cfg,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Trace of the most recent scheduled step.
    pub fn last_trace(&self) -> &crate::scheduler::ExecutionTrace {
        self.scheduler.trace()
    }

    /// Runs `cfg.steps` steps, writing metrics and checkpoints under `out.dir`.
    pub fn train(&mut self, out: &TrainOutputs) -> Result<()> {
        let mut log = match &out.dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("config.toml"), toml::to_string(&self.cfg).expect("config serializes"))?;
                Some(BufWriter::new(std::fs::File::create(d.join("metrics.jsonl"))?))
            }
            None => None,
        };
        let steps = self.cfg.steps;
        let start = self.step;
        let mut on_step = |tr: &mut Self, batch: TrainBatch, pi: &RwLock<SamplingDistribution>| -> Result<()> {
            let m = tr.train_step(&batch)?;
            *pi.write().expect("pi lock") = tr.pi.clone();
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n")?;
            }
            tr.metrics.push(m);
            if let Some(d) = &out.dir {
                if tr.step % tr.cfg.checkpoint_every == 0 || tr.step == start + steps {
                    save_checkpoint(&d.join(format!("ckpt-{:06}.ngck", tr.step)), &tr.params, &tr.cfg, tr.step)?;
                    save_checkpoint(&d.join("last.ngck"), &tr.params, &tr.cfg, tr.step)?;
                }
            }
            Ok(())
        };

        let sampler = QuerySampler::new(&self.split.train);
        let pi = RwLock::new(self.pi.clone());
        if self.cfg.workers == 0 {
            for i in start..start + steps {
                let snapshot = pi.read().expect("pi lock").clone();
                let batch = produce_batch(&sampler, self.split, &snapshot, &self.cfg, i)?;
                on_step(self, batch, &pi)?;
            }
        } else {
            let next = AtomicU64::new(start);
            let stop = AtomicBool::new(false);
            let end = start + steps;
            let (tx, rx) = crossbeam_channel::bounded::<Result<TrainBatch>>(self.cfg.queue_capacity);
            let (split, cfg) = (self.split, self.cfg.clone());
            let result = std::thread::scope(|s| {
                for _ in 0..self.cfg.workers {
                    let tx = tx.clone();
                    let (sampler, pi, next, stop, cfg) = (&sampler, &pi, &next, &stop, &cfg);
                    s.spawn(move || {
                        while !stop.load(Ordering::Relaxed) {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= end {
                                break;
                            }
                            let snapshot = pi.read().expect("pi lock").clone();
                            let r = produce_batch(sampler, split, &snapshot, cfg, i);
                            let failed = r.is_err();
                            if tx.send(r).is_err() || failed {
                                break;
                            }
                        }
                    });
                }
                drop(tx);
                let mut run = || -> Result<()> {
                    for _ in 0..steps {
                        let batch = rx.recv().map_err(|_| Error::Worker("producer exited early".into()))??;
                        on_step(self, batch, &pi)?;
                    }
                    Ok(())
                };
                let r = run();
                stop.store(true, Ordering::Relaxed);
                // unblock producers waiting on a full queue
                while rx.try_recv().is_ok() {}
                drop(rx);
                r
            });
            result?;
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(path) = &out.trace {
            self.scheduler.trace().write_json(path)?;
        }
        Ok(())
    }

    /// One optimizer step on a sampled batch.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepMetrics> {
        let t0 = Instant::now();
        let n = batch.queries.len();
        let opts = DagOptions { semantic: self.semantic.is_some() };
        let (dag, plan) = compile_batch(&batch.queries, &batch.candidates, self.cfg.backbone, opts, true, self.split.n_entities())?;
        let hyper = Hyper::new(self.cfg.gamma, self.cfg.alpha_box, n);
        self.arena.reset_peak();
        let result = {
            let mut step = Step::new(&self.registry, &self.params, self.semantic.as_ref(), hyper, &dag, &plan)?;
            let sinks = self.scheduler.run(&mut step, &mut self.arena, &dag, &plan)?;
            release_sinks(&mut self.arena, &sinks)?;
            self.arena.flush_deferred();
            step.finish()?
        };
        let peak_bytes = self.arena.peak_bytes();
        let grads = result.grads.ok_or_else(|| Error::shape("training step produced no gradients"))?;
        let mut sums = [0.0f64; N_PATTERNS];
        let mut counts = [0usize; N_PATTERNS];
        for (q, l) in batch.queries.iter().zip(&result.losses) {
            let l = l.as_f64();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { pattern: q.pattern, value: l });
            }
            sums[q.pattern.index()] += l;
            counts[q.pattern.index()] += 1;
        }
        self.adam.update(&mut self.params, &grads, self.cfg.lr)?;
        let step_index = self.step;
        for p in QueryPattern::ALL {
            let i = p.index();
            if counts[i] == 0 {
                continue;
            }
            let mut l = sums[i] / counts[i] as f64;
            if let Some(s) = &self.cfg.spike {
                if s.pattern == p && s.active(step_index) {
                    l += s.magnitude;
                }
            }
            self.tracker.record(p, l)?;
        }
        self.step += 1;
        if self.cfg.adaptive && self.step % self.cfg.refresh_every == 0 {
            self.pi = update_distribution(&self.tracker, self.cfg.floor);
        } else if !self.cfg.adaptive {
            self.pi = self.base_pi.clone();
        }
        let loss = sums.iter().sum::<f64>() / n.max(1) as f64;
        let compute = t0.elapsed().as_secs_f64();
        Ok(StepMetrics {
            step: self.step,
            loss,
            ema: by_pattern(&self.tracker.ema_loss),
            pi: by_pattern(&self.pi.weights),
            qps: n as f64 / (compute + batch.sample_secs),
            qps_excl_sampling: n as f64 / compute,
            peak_bytes,
            config_hash: self.hash.clone(),
        })
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.params, &self.cfg, self.step)
    }
}

/// Loads the semantic store named in the config, if any.
pub fn load_configured_store<T: Scalar>(cfg: &TrainConfig, n_entities: usize) -> Result<Option<SemanticStore<T>>> {
    cfg.semantic_store.as_ref().map(|p| crate::semantic::load_semantic_store(p, n_entities)).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_graph;

    #[test]
    fn negatives_avoid_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = negative_sample(5, &[1, 2], 200, &mut rng).unwrap();
        assert!(s.iter().all(|e| [0, 3, 4].contains(e)));
        let s = negative_sample(5, &[0, 1, 2, 4], 50, &mut rng).unwrap();
        assert!(s.iter().all(|&e| e == 3));
        assert!(matches!(negative_sample(5, &[0, 1, 2, 3, 4], 1, &mut rng), Err(Error::NoNegativesAvailable)));
    }

    #[test]
    fn negatives_uniform_over_legal_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for answers in [&[1u32, 2][..], &[0, 1, 3][..]] {
            let s = negative_sample(5, answers, 10_000, &mut rng).unwrap();
            let legal = 5 - answers.len();
            let p = 1.0 / legal as f64;
            let sigma = (10_000.0 * p * (1.0 - p)).sqrt();
            for e in 0..5u32 {
                let c = s.iter().filter(|&&x| x == e).count() as f64;
                if answers.contains(&e) {
                    assert_eq!(c, 0.0);
                } else {
                    assert!((c - 10_000.0 * p).abs() < 5.0 * sigma, "{e}: {c}");
                }
            }
        }
    }

    fn one_tensor(v: f64) -> ModelParams<f64> {
        let dims = ModelDims { n_entities: 2, n_relations: 1, dim: 1, hidden: 1, sem_dim: None };
        let mut p = ModelParams::<f64>::zeros(Backbone::Gqe, dims);
        for (_, t) in p.iter_mut() {
            t.fill(v);
        }
        p
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut p = one_tensor(0.5);
        let mut st = AdamState::new(&p);
        st.update(&mut p, &one_tensor(1.0), 1e-4).unwrap();
        for (_, t) in p.iter() {
            assert!((t[(0, 0)] - (0.5 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        }
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.update(&mut p, &one_tensor(0.0), 1e-4).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = one_tensor(1.0);
        let mut st = AdamState::new(&p);
        let mut prev = 1.0f64;
        for i in 0..100 {
            let mut g = p.clone();
            for (_, t) in g.iter_mut() {
                t.mapv_inplace(|x| 2.0 * x);
            }
            st.update(&mut p, &g, 0.005).unwrap();
            let now = p.get(Param::Entity)[(0, 0)].abs();
            if i > 0 {
                assert!(now < prev);
            }
            prev = now;
        }
        assert!(prev < 0.6);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = one_tensor(1.0);
        let mut st = AdamState::new(&p);
        let dims = ModelDims { n_entities: 3, n_relations: 1, dim: 1, hidden: 1, sem_dim: None };
        let g = ModelParams::<f64>::zeros(Backbone::Gqe, dims);
        assert!(matches!(st.update(&mut p, &g, 1e-4), Err(Error::ShapeMismatch(_))));
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { dim: 4, hidden: 4, batch: 8, n_neg: 4, steps: 3, precision: Precision::F64, workers: 0, lr: 1e-3, ..Default::default() }
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let g = random_graph(30, 3, 200, 0.1, 1).unwrap();
        let mut cfg = small_cfg();
        cfg.backbone = Backbone::BetaE;
        let t = Trainer::<f64>::new(cfg, &g, None).unwrap();
        let bytes = t.checkpoint_bytes();
        let c = decode_checkpoint::<f64>(&bytes, "mem").unwrap();
        assert_eq!(c.params, t.params);
        assert_eq!(c.header.config_hash, t.config_hash());
        assert!(matches!(decode_checkpoint::<f32>(&bytes, "mem"), Err(Error::PrecisionMismatch { .. })));
        assert!(matches!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3], "mem"), Err(Error::TruncatedFile(_))));
        assert!(matches!(decode_checkpoint::<f64>(b"XXXXxxxxxxxxxxxxxxxx", "mem"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn zero_steps_leaves_params() {
        let g = random_graph(30, 3, 200, 0.1, 1).unwrap();
        let mut t = Trainer::<f64>::new(TrainConfig { steps: 0, ..small_cfg() }, &g, None).unwrap();
        let before = t.params.clone();
        t.train(&TrainOutputs::default()).unwrap();
        assert_eq!(t.params, before);
        assert!(t.metrics.is_empty());
    }

    #[test]
    fn pipeline_consumes_every_batch_once() {
        let g = random_graph(30, 3, 200, 0.1, 1).unwrap();
        let mut t = Trainer::<f64>::new(TrainConfig { steps: 12, workers: 3, ..small_cfg() }, &g, None).unwrap();
        t.train(&TrainOutputs::default()).unwrap();
        assert_eq!(t.step, 12);
        assert_eq!(t.metrics.len(), 12);
        assert!(t.metrics.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn inline_matches_single_producer() {
        let g = random_graph(30, 3, 200, 0.1, 1).unwrap();
        let mut a = Trainer::<f64>::new(TrainConfig { workers: 0, ..small_cfg() }, &g, None).unwrap();
        let mut b = Trainer::<f64>::new(TrainConfig { workers: 1, ..small_cfg() }, &g, None).unwrap();
        a.train(&TrainOutputs::default()).unwrap();
        b.train(&TrainOutputs::default()).unwrap();
        // checkpoints embed the config, which differs in `workers`
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics.iter().map(|m| m.loss).collect::<Vec<_>>(), b.metrics.iter().map(|m| m.loss).collect::<Vec<_>>());
    }
}
