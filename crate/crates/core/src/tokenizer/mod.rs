//! Per-character VQ-VAE motion tokenizer.

pub mod codebook;
mod model;
mod train;

pub use codebook::{histogram, perplexity, Codebook, EmaStep};
pub use model::{straight_through, TokenSequence, Tokenizer, VqLosses};
pub use train::{reconstruction_error, usage_fraction, LogRow, TokenizerTrainer, TrainLog};

use crate::config::{field, join, list, unknown_key, Section};
use crate::error::{Error, Result};

/// Architecture and optimisation settings of a tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub codes: usize,
    pub code_dim: usize,
    pub width: usize,
    /// Residual units per resolution level.
    pub depth: usize,
    /// Number of stride-2 levels; the latent rate is `1 / 2^down_t`.
    pub down_t: usize,
    pub commit: f64,
    pub decay: f64,
    pub smooth_beta: f64,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub warmup: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub log_every: usize,
}

impl Default for TokenizerConfig {
    /// Desk-scale settings: a smaller codebook, network and batch than
    /// [`TokenizerConfig::reference`], 5k iterations and a higher learning
    /// rate to suit the shorter run (see `pilots/tokenizer.log`).
    fn default() -> Self {
        Self {
            codes: 64,
            code_dim: 32,
            width: 64,
            depth: 1,
            batch: 32,
            iters: 5000,
            lr: 5e-4,
            ..Self::reference()
        }
    }
}

impl TokenizerConfig {
    /// Full-size humanoid settings.
    pub fn reference() -> Self {
        Self {
            codes: 512,
            code_dim: 512,
            width: 512,
            depth: 3,
            down_t: 2,
            commit: 0.02,
            decay: 0.99,
            smooth_beta: 1.0,
            batch: 128,
            iters: 100_000,
            lr: 2e-4,
            warmup: 1000,
            milestones: vec![50_000, 100_000],
            gamma: 0.05,
            betas: (0.9, 0.99),
            weight_decay: 0.0,
            log_every: 100,
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.down_t
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("[tokenizer] {m}")));
        if self.codes == 0 || self.code_dim == 0 || self.width == 0 || self.batch == 0 {
            return bad("codes, code_dim, width and batch must be positive".into());
        }
        if self.down_t > 8 || window % self.downsample() != 0 {
            return bad(format!("window {window} is not divisible by 2^{}", self.down_t));
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return bad(format!("decay {} outside [0, 1]", self.decay));
        }
        if !(self.lr > 0.0 && self.smooth_beta > 0.0 && self.commit >= 0.0) {
            return bad("lr and smooth_beta must be positive, commit non-negative".into());
        }
        Ok(())
    }
}

impl Section for TokenizerConfig {
    const NAME: &'static str = "tokenizer";

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "codes" => self.codes = field(n, key, v)?,
            "code_dim" => self.code_dim = field(n, key, v)?,
            "width" => self.width = field(n, key, v)?,
            "depth" => self.depth = field(n, key, v)?,
            "down_t" => self.down_t = field(n, key, v)?,
            "commit" => self.commit = field(n, key, v)?,
            "decay" => self.decay = field(n, key, v)?,
            "smooth_beta" => self.smooth_beta = field(n, key, v)?,
            "batch" => self.batch = field(n, key, v)?,
            "iters" => self.iters = field(n, key, v)?,
            "lr" => self.lr = field(n, key, v)?,
            "warmup" => self.warmup = field(n, key, v)?,
            "milestones" => self.milestones = list(n, key, v)?,
            "gamma" => self.gamma = field(n, key, v)?,
            "beta1" => self.betas.0 = field(n, key, v)?,
            "beta2" => self.betas.1 = field(n, key, v)?,
            "weight_decay" => self.weight_decay = field(n, key, v)?,
            "log_every" => self.log_every = field(n, key, v)?,
            _ => return Err(unknown_key(n, key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        [
            ("codes", self.codes.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
            ("down_t", self.down_t.to_string()),
            ("commit", self.commit.to_string()),
            ("decay", self.decay.to_string()),
            ("smooth_beta", self.smooth_beta.to_string()),
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("milestones", join(&self.milestones)),
            ("gamma", self.gamma.to_string()),
            ("beta1", self.betas.0.to_string()),
            ("beta2", self.betas.1.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
