//! Condition-guided flow matching between two characters' codebook
//! embedding spaces.

pub mod coupling;
mod model;
mod train;

pub use coupling::{CostMatrix, CouplingKind, CouplingPlan, SinkhornParams};
pub use model::{
    expected_velocity, fm_loss, guided_velocity, interpolate, FlowModel, LogitOracle, PairOracle, VelocityField,
};
pub use train::{feature_loss_value, FlowLogRow, FlowTrainer, PairData};

use crate::config::{field, unknown_key, Section};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub iters: usize,
    pub lr: f64,
    pub warmup: usize,
    pub min_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub coupling: CouplingKind,
    pub coupling_batch: usize,
    pub sinkhorn: SinkhornParams,
    pub p_mask: f64,
    pub feat_weight: f64,
    /// Windows per iteration decoded for the feature loss.
    pub feat_batch: usize,
    /// Backpropagate the feature loss through the frozen target decoder.
    pub feat_backprop: bool,
    /// Weight of an optional cross-entropy term on target tokens; 0 disables it.
    pub ce_weight: f64,
    pub q_floor: f64,
    pub gamma: f64,
    pub steps: usize,
    pub log_every: usize,
}

impl Default for FlowConfig {
    /// Desk-scale settings: a narrow two-layer transformer, 10k iterations,
    /// coupling batches of 128 and a higher learning rate for the short run
    /// (see `pilots/flow.log`).
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            iters: 10_000,
            lr: 5e-4,
            coupling_batch: 128,
            ..Self::reference()
        }
    }
}

impl FlowConfig {
    /// Full-size settings.
    pub fn reference() -> Self {
        Self {
            d_model: 512,
            layers: 6,
            heads: 8,
            d_ff: 2048,
            dropout: 0.1,
            max_seq_len: 8,
            iters: 200_000,
            lr: 1e-4,
            warmup: 1000,
            min_lr: 0.0,
            betas: (0.9, 0.99),
            weight_decay: 1e-2,
            coupling: CouplingKind::Nearest,
            coupling_batch: 512,
            sinkhorn: SinkhornParams::default(),
            p_mask: 0.1,
            feat_weight: 0.2,
            feat_batch: 16,
            feat_backprop: true,
            ce_weight: 0.0,
            q_floor: 0.01,
            gamma: 1.0,
            steps: 8,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("[flow] {m}")));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.coupling_batch == 0 || self.steps == 0 || self.max_seq_len == 0 {
            return bad("coupling_batch, steps and max_seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.p_mask) {
            return bad("dropout must be in [0, 1) and p_mask in [0, 1]");
        }
        if !(self.q_floor > 0.0 && self.q_floor <= 1.0) {
            return bad("q_floor must be in (0, 1]");
        }
        if !self.gamma.is_finite() || !(self.lr > 0.0) || self.feat_weight < 0.0 || self.ce_weight < 0.0 {
            return bad("gamma must be finite, lr positive and loss weights non-negative");
        }
        Ok(())
    }
}

impl Section for FlowConfig {
    const NAME: &'static str = "flow";

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "d_model" => self.d_model = field(n, key, v)?,
            "layers" => self.layers = field(n, key, v)?,
            "heads" => self.heads = field(n, key, v)?,
            "d_ff" => self.d_ff = field(n, key, v)?,
            "dropout" => self.dropout = field(n, key, v)?,
            "max_seq_len" => self.max_seq_len = field(n, key, v)?,
            "iters" => self.iters = field(n, key, v)?,
            "lr" => self.lr = field(n, key, v)?,
            "warmup" => self.warmup = field(n, key, v)?,
            "min_lr" => self.min_lr = field(n, key, v)?,
            "beta1" => self.betas.0 = field(n, key, v)?,
            "beta2" => self.betas.1 = field(n, key, v)?,
            "weight_decay" => self.weight_decay = field(n, key, v)?,
            "coupling" => self.coupling = v.trim().parse()?,
            "coupling_batch" => self.coupling_batch = field(n, key, v)?,
            "sinkhorn_reg" => self.sinkhorn.reg = field(n, key, v)?,
            "sinkhorn_iters" => self.sinkhorn.iters = field(n, key, v)?,
            "p_mask" => self.p_mask = field(n, key, v)?,
            "feat_weight" => self.feat_weight = field(n, key, v)?,
            "feat_batch" => self.feat_batch = field(n, key, v)?,
            "feat_backprop" => self.feat_backprop = field(n, key, v)?,
            "ce_weight" => self.ce_weight = field(n, key, v)?,
            "q_floor" => self.q_floor = field(n, key, v)?,
            "gamma" => self.gamma = field(n, key, v)?,
            "steps" => self.steps = field(n, key, v)?,
            "log_every" => self.log_every = field(n, key, v)?,
            _ => return Err(unknown_key(n, key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        [
            ("d_model", self.d_model.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("beta1", self.betas.0.to_string()),
            ("beta2", self.betas.1.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("coupling", self.coupling.to_string()),
            ("coupling_batch", self.coupling_batch.to_string()),
            ("sinkhorn_reg", self.sinkhorn.reg.to_string()),
            ("sinkhorn_iters", self.sinkhorn.iters.to_string()),
            ("p_mask", self.p_mask.to_string()),
            ("feat_weight", self.feat_weight.to_string()),
            ("feat_batch", self.feat_batch.to_string()),
            ("feat_backprop", self.feat_backprop.to_string()),
            ("ce_weight", self.ce_weight.to_string()),
            ("q_floor", self.q_floor.to_string()),
            ("gamma", self.gamma.to_string()),
            ("steps", self.steps.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
