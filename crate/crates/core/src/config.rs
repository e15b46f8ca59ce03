//! Training configuration, its TOML file form, and the provenance hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arena::ReclaimPolicy;
use crate::error::{Error, Result};
use crate::kernels::Backbone;
use crate::query::QueryPattern;
use crate::sampler::{DEFAULT_DECAY, DEFAULT_ETA, DEFAULT_FLOOR};
use crate::scalar::Precision;
use crate::scheduler::DEFAULT_B_MAX;

/// Periodic extra loss added to one pattern's difficulty signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    pub pattern: QueryPattern,
    /// A spike starts at every positive multiple of this step count.
    pub every: u64,
    pub duration: u64,
    pub magnitude: f64,
}

impl SpikeConfig {
    pub fn active(&self, step: u64) -> bool {
        self.every > 0 && step >= self.every && step % self.every < self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: Backbone,
    pub dim: usize,
    /// Hidden width of the BetaE MLPs.
    pub hidden: usize,
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub alpha_box: f64,
    pub n_neg: usize,
    pub steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub adaptive: bool,
    pub floor: f64,
    pub decay: f64,
    pub eta: f64,
    pub refresh_every: u64,
    pub spike: Option<SpikeConfig>,
    pub semantic_store: Option<PathBuf>,
    pub b_max: usize,
    pub dual_pool: bool,
    pub reclaim: ReclaimPolicy,
    /// Producer threads; 0 samples inline on the training thread, which makes
    /// runs bitwise reproducible.
    pub workers: usize,
    pub queue_capacity: usize,
    pub checkpoint_every: u64,
    /// Pattern mixture; all fourteen patterns uniformly when empty.
    pub patterns: Vec<QueryPattern>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: Backbone::Gqe,
            dim: 400,
            hidden: 400,
            batch: 512,
            lr: 1e-4,
            gamma: 12.0,
            alpha_box: 0.02,
            n_neg: 128,
            steps: 1000,
            seed: 0,
            precision: Precision::F32,
            adaptive: false,
            floor: DEFAULT_FLOOR,
            decay: DEFAULT_DECAY,
            eta: DEFAULT_ETA,
            refresh_every: 100,
            spike: None,
            semantic_store: None,
            b_max: DEFAULT_B_MAX,
            dual_pool: false,
            reclaim: ReclaimPolicy::Eager,
            workers: 1,
            queue_capacity: 4,
            checkpoint_every: 1000,
            patterns: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(f, r));
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma", "must be positive");
        }
        if self.dim == 0 || self.hidden == 0 {
            return bad("dim", "widths must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay", "must lie in (0, 1)");
        }
        if !(0.0..=1.0 / 14.0).contains(&self.floor) {
            return bad("floor", "must lie in [0, 1/14]");
        }
        if self.b_max == 0 {
            return bad("b_max", "must be at least 1");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity", "must be at least 1");
        }
        if self.refresh_every == 0 {
            return bad("refresh_every", "must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

/// Contents of a config file: `[train]` plus paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; the bundled synthetic graph when unset.
    pub dir: Option<PathBuf>,
    /// Where checkpoints, metrics and reports go.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::config(if field.is_empty() { "config".to_string() } else { field }, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("[train]\nbackbone = \"betae\"\nsteps = 5\n[data]\nout = \"runs\"\n").unwrap();
        assert_eq!(c.train.backbone, Backbone::BetaE);
        assert_eq!(c.train.steps, 5);
        assert_eq!((c.train.batch, c.train.lr, c.train.gamma, c.train.dim), (512, 1e-4, 12.0, 400));
        assert_eq!(c.data.out.as_deref(), Some(Path::new("runs")));
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_field_is_config_error() {
        let e = RunConfig::parse("[train]\nbatchsize = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { .. }), "{e}");
        let e = RunConfig::parse("[train]\nbatch = 0\n").unwrap().train.validate().unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "batch"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn spike_windows() {
        let s = SpikeConfig { pattern: QueryPattern::P2, every: 1500, duration: 500, magnitude: 5.0 };
        assert!(!s.active(0) && !s.active(1499) && s.active(1500) && s.active(1999) && !s.active(2000) && s.active(3000));
    }
}
