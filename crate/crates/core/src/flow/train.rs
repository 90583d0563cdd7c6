use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use moreflow_diffcore::{AdamW, Ctx, Graph, LrSchedule, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::coupling::{couple, cosine_distance, euclidean, CostMatrix, CouplingKind, CouplingPlan};
use super::model::FlowModel;
use super::FlowConfig;
use crate::error::{Error, Result};
use crate::features::{phi, phi_vjp, Condition, ConditionSet};
use crate::motion::{Dataset, Frame, NormStats};
use crate::rng;
use crate::skeleton::Skeleton;
use crate::tokenizer::Tokenizer;

/// Windows of one character with everything the flow trainer needs
/// precomputed: tokens and condition features.
#[derive(Clone, Debug)]
pub struct CharacterData {
    pub dataset: Dataset,
    pub tokens: Vec<Vec<usize>>,
    /// Per condition of the set: `windows x dim` features, row-major.
    pub features: Vec<Vec<f64>>,
    pub feature_dims: Vec<usize>,
}

const ENCODE_CHUNK: usize = 256;

impl CharacterData {
    pub fn new(dataset: Dataset, tokenizer: &Tokenizer, conditions: &ConditionSet) -> Result<Self> {
        if dataset.skeleton.id != tokenizer.character {
            return Err(Error::Mismatch(format!(
                "dataset of {} with a tokenizer of {}",
                dataset.skeleton.id, tokenizer.character
            )));
        }
        if dataset.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let windows: Vec<_> = dataset.windows().collect();
        let mut tokens = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(ENCODE_CHUNK) {
            tokens.extend(tokenizer.tokenize_batch(chunk)?);
        }
        let mut features = Vec::with_capacity(conditions.len());
        let mut feature_dims = Vec::with_capacity(conditions.len());
        for c in &conditions.conditions {
            let dim = c.dim(&dataset.skeleton)?;
            let mut f = Vec::with_capacity(windows.len() * dim);
            for w in &windows {
                f.extend(phi(&w.frames, &dataset.skeleton, c)?);
            }
            features.push(f);
            feature_dims.push(dim);
        }
        Ok(Self {
            dataset,
            tokens,
            features,
            feature_dims,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn feature(&self, cond: usize, i: usize) -> &[f64] {
        let d = self.feature_dims[cond];
        &self.features[cond][i * d..(i + 1) * d]
    }
}

/// Source and target data of one retargeting pair.
#[derive(Clone, Debug)]
pub struct PairData {
    pub source: CharacterData,
    pub target: CharacterData,
    pub conditions: ConditionSet,
}

impl PairData {
    pub fn new(
        source: Dataset,
        target: Dataset,
        src_tok: &Tokenizer,
        tgt_tok: &Tokenizer,
        conditions: ConditionSet,
    ) -> Result<Self> {
        Ok(Self {
            source: CharacterData::new(source, src_tok, &conditions)?,
            target: CharacterData::new(target, tgt_tok, &conditions)?,
            conditions,
        })
    }
}

/// Mean over windows of `||phi(decoded) - src_features||^2`.
pub fn feature_loss_value(src_features: &[Vec<f64>], decoded: &[Vec<Frame>], skel: &Skeleton, c: &Condition) -> Result<f64> {
    if src_features.len() != decoded.len() || decoded.is_empty() {
        return Err(Error::Mismatch("feature loss needs one source feature per decoded window".into()));
    }
    let mut total = 0.0;
    for (f, frames) in src_features.iter().zip(decoded) {
        let p = phi(frames, skel, c)?;
        if p.len() != f.len() {
            return Err(Error::Mismatch("source and target features differ in size".into()));
        }
        total += p.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / decoded.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowLogRow {
    pub iter: usize,
    pub lr: f64,
    pub fm: f64,
    pub feat: f64,
    pub ce: f64,
    pub total: f64,
    pub val_fm: f64,
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub fm: f64,
    pub feat: f64,
    pub ce: f64,
    pub total: f64,
}

/// A fixed coupled batch with fixed flow times.
struct Probe {
    cond: Condition,
    z_src: Vec<f64>,
    z_tgt: Vec<f64>,
    q: Vec<f64>,
}

pub struct FlowTrainer {
    pub model: FlowModel,
    data: PairData,
    src_codebook: Vec<f64>,
    src_stats: NormStats,
    decoder: Tokenizer,
    opt: AdamW,
    schedule: LrSchedule,
    rng: ChaCha8Rng,
    probes: Vec<Probe>,
    iter: usize,
    rows: Vec<FlowLogRow>,
    pending: Vec<StepLosses>,
}

impl FlowTrainer {
    pub fn new(data: PairData, src_tok: &Tokenizer, tgt_tok: &Tokenizer, config: FlowConfig, seed: u64) -> Result<Self> {
        if src_tok.codebook.dim != tgt_tok.codebook.dim {
            return Err(Error::Mismatch(format!(
                "code dimensions differ: {} vs {}",
                src_tok.codebook.dim, tgt_tok.codebook.dim
            )));
        }
        if src_tok.latent_len() != tgt_tok.latent_len() || src_tok.latent_len() > config.max_seq_len {
            return Err(Error::Mismatch("token sequence lengths differ or exceed max_seq_len".into()));
        }
        if data.target.dataset.skeleton.id != tgt_tok.character || data.source.dataset.skeleton.id != src_tok.character {
            return Err(Error::Mismatch("pair data and tokenizers name different characters".into()));
        }
        let pair = format!("{}-{}", src_tok.character, tgt_tok.character);
        let mut init = rng::stream(seed, &format!("flow/{pair}/init"));
        let model = FlowModel::new(
            &src_tok.character,
            &tgt_tok.character,
            data.conditions.clone(),
            tgt_tok.codebook.entries.clone(),
            tgt_tok.codebook.dim,
            config.clone(),
            &mut init,
        )?;
        let mut decoder = tgt_tok.clone();
        decoder.store.set_trainable(false);
        let opt = AdamW::new(&model.store, config.betas, config.weight_decay);
        let schedule = LrSchedule::WarmupCosine {
            peak: config.lr,
            warmup: config.warmup,
            total: config.iters,
            min_lr: config.min_lr,
        };
        let mut trainer = Self {
            model,
            data,
            src_codebook: src_tok.codebook.entries.clone(),
            src_stats: src_tok.stats.clone(),
            decoder,
            opt,
            schedule,
            rng: rng::stream(seed, &format!("flow/{pair}/batches")),
            probes: Vec::new(),
            iter: 0,
            rows: Vec::new(),
            pending: Vec::new(),
        };
        let mut probe_rng = rng::stream(seed, &format!("flow/{pair}/probe"));
        let mut conds = vec![Condition::null()];
        conds.extend(trainer.data.conditions.conditions.iter().cloned());
        for c in conds {
            let (src, tgt, _) = trainer.sample_pairs(&c, &mut probe_rng)?;
            let z_src = trainer.embed_src(&src)?;
            let z_tgt = trainer.embed_tgt(&tgt)?;
            let q = (0..src.len()).map(|_| probe_rng.random::<f64>()).collect();
            trainer.probes.push(Probe { cond: c, z_src, z_tgt, q });
        }
        Ok(trainer)
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn data(&self) -> &PairData {
        &self.data
    }

    fn embed(codebook: &[f64], dim: usize, tokens: &[Vec<usize>], idx: &[usize]) -> Result<Vec<f64>> {
        let k = codebook.len() / dim;
        let mut out = Vec::with_capacity(idx.len() * tokens[0].len() * dim);
        for &i in idx {
            for &t in &tokens[i] {
                if t >= k {
                    return Err(Error::InvalidToken { index: t, size: k });
                }
                out.extend_from_slice(&codebook[t * dim..(t + 1) * dim]);
            }
        }
        Ok(out)
    }

    fn embed_src(&self, idx: &[usize]) -> Result<Vec<f64>> {
        Self::embed(&self.src_codebook, self.model.dim, &self.data.source.tokens, idx)
    }

    fn embed_tgt(&self, idx: &[usize]) -> Result<Vec<f64>> {
        Self::embed(&self.model.target_codebook, self.model.dim, &self.data.target.tokens, idx)
    }

    /// Normalized window vectors of `idx`.
    fn patterns(side: &CharacterData, stats: &NormStats, idx: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &i in idx {
            out.extend(stats.normalize(&side.dataset.window(i).channels())?);
        }
        Ok(out)
    }

    /// Cost matrix between sampled source and target windows under `c`.
    pub fn cost_matrix(&self, c: &Condition, src: &[usize], tgt: &[usize], src_stats: &NormStats) -> Result<CostMatrix> {
        let kind = self.model.config.coupling;
        match self.data.conditions.index(c)? {
            Some(ci) if kind != CouplingKind::Sinkhorn => {
                let d = self.data.source.feature_dims[ci];
                let a: Vec<f64> = src.iter().flat_map(|&i| self.data.source.feature(ci, i).to_vec()).collect();
                let b: Vec<f64> = tgt.iter().flat_map(|&j| self.data.target.feature(ci, j).to_vec()).collect();
                CostMatrix::pairwise(&a, &b, d, euclidean)
            }
            _ => {
                let a = Self::patterns(&self.data.source, src_stats, src)?;
                let b = Self::patterns(&self.data.target, &self.decoder.stats, tgt)?;
                let dim = self.data.source.dataset.window * self.decoder.channels;
                if a.len() != b.len() {
                    return Err(Error::Mismatch("pattern-space coupling needs equal channel layouts".into()));
                }
                let metric = if kind == CouplingKind::Sinkhorn { cosine_distance } else { euclidean };
                CostMatrix::pairwise(&a, &b, dim, metric)
            }
        }
    }

    /// Samples source and target batches and couples them; returns source
    /// indices and the coupled target index of each.
    fn sample_pairs(&self, c: &Condition, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>, CouplingPlan)> {
        let (ns, nt) = (self.data.source.len(), self.data.target.len());
        let k = self.model.config.coupling_batch.min(ns).min(nt);
        let src = sample(rng, ns, k).into_vec();
        let tgt = sample(rng, nt, k).into_vec();
        let cost = self.cost_matrix(c, &src, &tgt, &self.src_stats)?;
        let plan = couple(&cost, self.model.config.coupling, self.model.config.sinkhorn)?;
        let paired = plan.perm.iter().map(|&j| tgt[j]).collect();
        Ok((src, paired, plan))
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<StepLosses> {
        let cfg = self.model.config.clone();
        let n_cond = self.data.conditions.len();
        let mut c = self.data.conditions.conditions[self.rng.random_range(0..n_cond)].clone();
        if self.rng.random::<f64>() < cfg.p_mask {
            c = Condition::null();
        }
        let mut rng = self.rng.clone();
        let (src, tgt, _) = self.sample_pairs(&c, &mut rng)?;
        self.rng = rng;
        let k = src.len();
        let l = self.data.source.tokens[0].len();
        let dim = self.model.dim;
        let z_src = self.embed_src(&src)?;
        let z_tgt = self.embed_tgt(&tgt)?;
        let q: Vec<f64> = (0..k).map(|_| self.rng.random::<f64>()).collect();
        let mut z_q = Vec::with_capacity(z_src.len());
        let mut z_dot = Vec::with_capacity(z_src.len());
        for b in 0..k {
            let r = b * l * dim..(b + 1) * l * dim;
            let (zq, dz) = super::interpolate(&z_src[r.clone()], &z_tgt[r], q[b])?;
            z_q.extend(zq);
            z_dot.extend(dz);
        }

        let lr = self.schedule.lr(self.iter);
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![k, l, dim], z_q)?);
        let out = {
            let mut ctx = Ctx::train(&mut self.rng);
            self.model.forward(&mut g, zv, &q, &c, &mut ctx)?
        };
        let target = g.constant(Tensor::new(vec![k, l, dim], z_dot)?);
        let err = g.sub(out.velocity, target)?;
        let sq = g.mul(err, err)?;
        let fm = g.mean(sq);
        let mut total = fm;
        let mut losses = StepLosses {
            fm: g.value(fm).data()[0],
            ..StepLosses::default()
        };

        if cfg.ce_weight > 0.0 {
            let tokens: Vec<usize> = tgt.iter().flat_map(|&j| self.data.target.tokens[j].clone()).collect();
            let ce = cross_entropy(&mut g, out.logits, &tokens)?;
            losses.ce = g.value(ce).data()[0];
            let w = g.scale(ce, cfg.ce_weight);
            total = g.add(total, w)?;
        }

        if let Some(ci) = self.data.conditions.index(&c)? {
            let m = cfg.feat_batch.min(k);
            if cfg.feat_weight > 0.0 && m > 0 {
                let e = g.narrow0(out.expected, 0, m)?;
                let e = if cfg.feat_backprop {
                    e
                } else {
                    let v = g.value(e).clone();
                    g.constant(v)
                };
                let x_hat = self.decoder.decoder_forward(&mut g, e, &mut Ctx::eval())?;
                let src_f: Vec<Vec<f64>> = src[..m].iter().map(|&i| self.data.source.feature(ci, i).to_vec()).collect();
                let feat = self.feature_loss(&mut g, x_hat, src_f, &c)?;
                losses.feat = g.value(feat).data()[0];
                let w = g.scale(feat, cfg.feat_weight);
                total = g.add(total, w)?;
            }
        }
        losses.total = g.value(total).data()[0];
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("flow loss at iteration {}", self.iter)));
        }
        let grads = g.backward(total)?.param_grads(&self.model.store);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.iter += 1;
        self.pending.push(losses);

        let every = cfg.log_every.max(1);
        if self.iter % every == 0 || self.iter == cfg.iters {
            let n = self.pending.len() as f64;
            let mean = |f: fn(&StepLosses) -> f64| self.pending.iter().map(f).sum::<f64>() / n;
            let row = FlowLogRow {
                iter: self.iter,
                lr,
                fm: mean(|p| p.fm),
                feat: mean(|p| p.feat),
                ce: mean(|p| p.ce),
                total: mean(|p| p.total),
                val_fm: self.validation_fm()?,
            };
            log::info!(
                "flow {}-{} iter {} fm {:.4} feat {:.4} val_fm {:.4}",
                self.model.source, self.model.target, row.iter, row.fm, row.feat, row.val_fm
            );
            self.rows.push(row);
            self.pending.clear();
        }
        Ok(losses)
    }

    /// Feature loss node over decoded normalized windows `x_hat: [m, H, C]`.
    fn feature_loss(&self, g: &mut Graph, x_hat: Var, src_f: Vec<Vec<f64>>, c: &Condition) -> Result<Var> {
        let shape = g.shape(x_hat).to_vec();
        let (m, h, ch) = (shape[0], shape[1], shape[2]);
        let joints = (ch - 3) / 12;
        let stats = &self.decoder.stats;
        let raw = stats.denormalize(g.value(x_hat).data())?;
        let skel = self.data.target.dataset.skeleton.clone();
        let mut frames = Vec::with_capacity(m);
        for w in raw.chunks(h * ch) {
            frames.push(w.chunks(ch).map(|f| Frame::from_channels(f, joints, false)).collect::<Result<Vec<_>>>()?);
        }
        let value = feature_loss_value(&src_f, &frames, &skel, c)?;
        let frames = Arc::new(frames);
        let std = stats.std.clone();
        let cond = c.clone();
        let node = g.custom(&[x_hat], Tensor::scalar(value), move |gout| {
            let mut grad = Vec::with_capacity(m * h * ch);
            for (fr, f) in frames.iter().zip(&src_f) {
                // phi was computable in the forward pass, so these cannot fail
                let p = phi(fr, &skel, &cond).unwrap_or_default();
                let gp: Vec<f64> = p.iter().zip(f).map(|(a, b)| 2.0 * (a - b) * gout[0] / m as f64).collect();
                let gx = phi_vjp(fr, &skel, &cond, &gp).unwrap_or_else(|_| vec![0.0; h * ch]);
                grad.extend(gx.iter().enumerate().map(|(i, v)| v * std[i % ch]));
            }
            vec![grad]
        });
        Ok(node)
    }

    /// Mean flow-matching loss over the fixed probe batches, in eval mode.
    pub fn validation_fm(&self) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.probes {
            total += super::fm_loss(&self.model, &p.z_src, &p.z_tgt, &p.q, &p.cond)?;
        }
        Ok(total / self.probes.len() as f64)
    }

    /// Runs until `config.iters`; on a non-finite loss the last good model is
    /// written to `rescue` (if given) before the error is returned.
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

    pub fn log_csv(&self) -> String {
        let mut out = String::from("iter,lr,L_FM,L_feat,L_CE,L_total,val_FM\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{},{}", r.iter, r.lr, r.fm, r.feat, r.ce, r.total, r.val_fm);
        }
        out
    }

    pub fn rows(&self) -> &[FlowLogRow] {
        &self.rows
    }

    pub fn finish(self) -> FlowModel {
        self.model
    }
}

/// Mean cross-entropy of `logits: [.., K]` against `tokens`, one per row.
fn cross_entropy(g: &mut Graph, logits: Var, tokens: &[usize]) -> Result<Var> {
    let k = *g.shape(logits).last().unwrap_or(&0);
    let data = g.value(logits).data();
    if k == 0 || data.len() != tokens.len() * k {
        return Err(Error::Mismatch("one target token per logit row expected".into()));
    }
    let n = tokens.len() as f64;
    let mut probs = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for (row, &t) in data.chunks(k).zip(tokens) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
        loss += s.ln() + m - row[t];
        probs.extend(row.iter().map(|x| (x - m).exp() / s));
    }
    let tokens = tokens.to_vec();
    Ok(g.custom(&[logits], Tensor::scalar(loss / n), move |gout| {
        let mut grad = probs.clone();
        for (r, &t) in tokens.iter().enumerate() {
            grad[r * k + t] -= 1.0;
        }
        grad.iter_mut().for_each(|v| *v *= gout[0] / n);
        vec![grad]
    }))
}
