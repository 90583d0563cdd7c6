use std::fmt::Write as _;
use std::path::Path;

use moreflow_diffcore::{AdamW, Ctx, Graph, LrSchedule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::codebook::{histogram, perplexity, Codebook};
use super::model::{Tokenizer, VqLosses};
use super::TokenizerConfig;
use crate::error::{Error, Result};
use crate::motion::Dataset;
use crate::rng;

/// Validation windows used for the usage column of the log.
const LOG_VAL_WINDOWS: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub rec: f64,
    pub code: f64,
    pub commit: f64,
    pub usage: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,L_rec,L_code,L_commit,usage,perplexity\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iter, r.lr, r.rec, r.code, r.commit, r.usage, r.perplexity
            );
        }
        out
    }
}

/// Fraction of codebook entries used by the tokens of `x` (normalized windows).
pub fn usage_fraction(model: &Tokenizer, x: &[f64]) -> Result<f64> {
    let tokens = model.codebook.assign(&model.encode_normalized(x)?)?;
    let used = histogram(&tokens, model.codebook.size).iter().filter(|c| **c > 0.0).count();
    Ok(used as f64 / model.codebook.size as f64)
}

/// Mean smooth-L1 between normalized windows and their quantized reconstruction.
pub fn reconstruction_error(model: &Tokenizer, x: &[f64]) -> Result<f64> {
    let z = model.encode_normalized(x)?;
    let q = model.codebook.lookup(&model.codebook.assign(&z)?)?;
    let y = model.decode_latents(&q)?;
    let beta = model.config.smooth_beta;
    let total: f64 = y
        .iter()
        .zip(x)
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    Ok(total / x.len() as f64)
}

fn normalized(model: &Tokenizer, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.windows().map(|w| model.stats.normalize(&w.channels())).collect()
}

/// Incremental tokenizer training: the codebook is initialised from the
/// latents of a first batch at construction, then each [`step`] runs one
/// optimizer update and one EMA update.
///
/// [`step`]: TokenizerTrainer::step
pub struct TokenizerTrainer {
    pub model: Tokenizer,
    opt: AdamW,
    schedule: LrSchedule,
    rng: ChaCha8Rng,
    train: Vec<Vec<f64>>,
    val: Vec<f64>,
    log_val: Vec<f64>,
    iter: usize,
    log: TrainLog,
    pending: Vec<(VqLosses, f64)>,
}

impl TokenizerTrainer {
    /// `train` supplies the normalization statistics; `val` may be empty.
    pub fn new(train: &Dataset, val: &Dataset, config: TokenizerConfig, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let character = train.skeleton.id.clone();
        let mut init_rng = rng::stream(seed, &format!("tokenizer/{character}/init"));
        let mut model = Tokenizer::new(&character, train.stats()?, train.window, config.clone(), &mut init_rng)?;
        let train_x = normalized(&model, train)?;
        let val_x: Vec<f64> = normalized(&model, val)?.concat();
        let per = model.window * model.channels;
        let log_val = val_x[..val_x.len().min(LOG_VAL_WINDOWS * per)].to_vec();
        let mut rng = rng::stream(seed, &format!("tokenizer/{character}/batches"));

        let first = sample_batch(&train_x, config.batch, &mut rng);
        let latents = model.encode_normalized(&first)?;
        model.codebook = Codebook::from_latents(config.codes, config.code_dim, config.decay, &latents, &mut rng)?;

        let opt = AdamW::new(&model.store, config.betas, config.weight_decay);
        let schedule = LrSchedule::WarmupMilestones {
            peak: config.lr,
            warmup: config.warmup,
            milestones: config.milestones.clone(),
            gamma: config.gamma,
        };
        Ok(Self {
            model,
            opt,
            schedule,
            rng,
            train: train_x,
            val: val_x,
            log_val,
            iter: 0,
            log: TrainLog::default(),
            pending: Vec::new(),
        })
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Held-out windows, normalized and laid out back to back.
    pub fn validation(&self) -> &[f64] {
        &self.val
    }

    pub fn step(&mut self) -> Result<VqLosses> {
        let cfg = &self.model.config;
        let x = sample_batch(&self.train, cfg.batch, &mut self.rng);
        let lr = self.schedule.lr(self.iter);
        let mut g = Graph::new();
        let (loss, losses, latents, indices) = {
            let mut ctx = Ctx::train(&mut self.rng);
            self.model.vq_forward(&mut g, &x, &mut ctx)?
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("tokenizer loss at iteration {}", self.iter)));
        }
        let grads = g.backward(loss)?.param_grads(&self.model.store);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        let ema = self.model.codebook.ema_update(&latents, &indices, &mut self.rng)?;
        self.iter += 1;
        self.pending.push((losses, ema.perplexity));

        let every = self.model.config.log_every.max(1);
        if self.iter % every == 0 || self.iter == self.model.config.iters {
            let n = self.pending.len() as f64;
            let mean = |f: fn(&(VqLosses, f64)) -> f64| self.pending.iter().map(f).sum::<f64>() / n;
            let usage = if self.log_val.is_empty() {
                let counts = histogram(&indices, self.model.codebook.size);
                counts.iter().filter(|c| **c > 0.0).count() as f64 / counts.len() as f64
            } else {
                usage_fraction(&self.model, &self.log_val)?
            };
            let row = LogRow {
                iter: self.iter,
                lr,
                rec: mean(|p| p.0.rec),
                code: mean(|p| p.0.code),
                commit: mean(|p| p.0.commit),
                usage,
                perplexity: mean(|p| p.1),
            };
            log::info!(
                "tokenizer {} iter {} rec {:.5} commit {:.5} usage {:.3} perplexity {:.1}",
                self.model.character, row.iter, row.rec, row.commit, row.usage, row.perplexity
            );
            self.log.rows.push(row);
            self.pending.clear();
        }
        Ok(losses)
    }

    /// Runs until `config.iters`. On a non-finite loss the last good model is
    /// written to `rescue` (if given) and the error is returned.
    pub fn run(&mut self, rescue: Option<(&Path, &[(String, String)])>) -> Result<()> {
        while self.iter < self.model.config.iters {
            if let Err(e) = self.step() {
                let non_finite = matches!(
                    e,
                    Error::NonFinite(_) | Error::Engine(moreflow_diffcore::Error::NonFiniteGradient(_))
                );
                if let (true, Some((path, meta))) = (non_finite, rescue) {
                    self.model.save(path, meta)?;
                    log::error!("non-finite loss; last good model saved to {}", path.display());
                }
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> (Tokenizer, TrainLog) {
        (self.model, self.log)
    }

    /// Perplexity of the current codebook over held-out windows.
    pub fn validation_perplexity(&self) -> Result<f64> {
        if self.val.is_empty() {
            return Ok(0.0);
        }
        let tokens = self.model.codebook.assign(&self.model.encode_normalized(&self.val)?)?;
        Ok(perplexity(&histogram(&tokens, self.model.codebook.size)))
    }
}

fn sample_batch(windows: &[Vec<f64>], batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(batch * windows[0].len());
    for _ in 0..batch {
        x.extend_from_slice(&windows[rng.random_range(0..windows.len())]);
    }
    x
}
