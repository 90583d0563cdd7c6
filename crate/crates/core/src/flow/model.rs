use std::path::Path;

use moreflow_diffcore::{Ctx, EncoderBlock, Graph, Layer, LayerSpec, ParamStore, Tensor, Var};
use rand::Rng;

use super::FlowConfig;
use crate::artifact;
use crate::config::Section;
use crate::error::{Error, Result};
use crate::features::{Condition, ConditionSet};
use crate::io::Meta;

/// A velocity field over batches of token-embedding sequences.
pub trait VelocityField {
    /// `z` holds `q.len()` sequences back to back; `q[b]` is the flow time
    /// of sequence `b`. Returns one velocity per value of `z`.
    fn velocity(&self, z: &[f64], q: &[f64], c: &Condition) -> Result<Vec<f64>>;
}

/// `(1 - gamma) v(null) + gamma v(c)`. For the null condition this is `v(null)`.
pub fn guided_velocity(field: &dyn VelocityField, z: &[f64], q: &[f64], c: &Condition, gamma: f64) -> Result<Vec<f64>> {
    let v_null = field.velocity(z, q, &Condition::null())?;
    if c.is_null() {
        return Ok(v_null);
    }
    let v_c = field.velocity(z, q, c)?;
    Ok(v_null
        .iter()
        .zip(&v_c)
        .map(|(n, c)| (1.0 - gamma) * n + gamma * c)
        .collect())
}

/// Point on the straight path at time `q` and its (constant) velocity.
pub fn interpolate(z_src: &[f64], z_tgt: &[f64], q: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if z_src.len() != z_tgt.len() {
        return Err(Error::Mismatch(format!(
            "source of {} values, target of {}",
            z_src.len(),
            z_tgt.len()
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Range {
            name: "q",
            value: q,
            range: "[0, 1]",
        });
    }
    let zq = z_src.iter().zip(z_tgt).map(|(a, b)| (1.0 - q) * a + q * b).collect();
    let dz = z_src.iter().zip(z_tgt).map(|(a, b)| b - a).collect();
    Ok((zq, dz))
}

/// Mean squared error between the field's velocity on the straight path
/// and the path velocity, with flow time `q[b]` for sequence `b`.
pub fn fm_loss(field: &dyn VelocityField, z_src: &[f64], z_tgt: &[f64], q: &[f64], c: &Condition) -> Result<f64> {
    if q.is_empty() || z_src.len() % q.len() != 0 {
        return Err(Error::Mismatch("flow times do not divide the batch".into()));
    }
    let per = z_src.len() / q.len();
    let mut z_q = Vec::with_capacity(z_src.len());
    let mut z_dot = Vec::with_capacity(z_src.len());
    for (b, &qb) in q.iter().enumerate() {
        let r = b * per..(b + 1) * per;
        let (zq, dz) = interpolate(&z_src[r.clone()], z_tgt.get(r).unwrap_or(&[]), qb)?;
        z_q.extend(zq);
        z_dot.extend(dz);
    }
    let v = field.velocity(&z_q, q, c)?;
    Ok(v.iter().zip(&z_dot).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64)
}

/// Velocity implied by target-token logits: `(E^T softmax(logits) - z) / max(1 - q, floor)`.
///
/// `logits` is `[B, L, K]`, `codebook` is `[K, d]`, `z` is `[B, L, d]`.
pub fn expected_velocity(logits: &[f64], codebook: &[f64], dim: usize, z: &[f64], q: &[f64], floor: f64) -> Result<Vec<f64>> {
    let k = codebook.len() / dim.max(1);
    if k == 0 || codebook.len() != k * dim || logits.len() % k != 0 || z.len() != logits.len() / k * dim {
        return Err(Error::Mismatch("logits, codebook and latents disagree".into()));
    }
    let positions = logits.len() / k;
    if q.is_empty() || positions % q.len() != 0 {
        return Err(Error::Mismatch("flow times do not divide the batch".into()));
    }
    let per_seq = positions / q.len();
    let mut out = Vec::with_capacity(z.len());
    for (p, row) in logits.chunks(k).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = w.iter().sum();
        let denom = (1.0 - q[p / per_seq]).max(floor);
        for j in 0..dim {
            let e: f64 = w.iter().enumerate().map(|(i, wi)| wi / s * codebook[i * dim + j]).sum();
            out.push((e - z[p * dim + j]) / denom);
        }
    }
    Ok(out)
}

/// Emits one-hot logits on known target tokens, whatever the condition.
pub struct LogitOracle {
    pub codebook: Vec<f64>,
    pub dim: usize,
    /// Target token per position, for the whole batch.
    pub targets: Vec<usize>,
    pub floor: f64,
}

impl VelocityField for LogitOracle {
    fn velocity(&self, z: &[f64], q: &[f64], _c: &Condition) -> Result<Vec<f64>> {
        let k = self.codebook.len() / self.dim;
        let mut logits = vec![0.0; self.targets.len() * k];
        for (p, &t) in self.targets.iter().enumerate() {
            if t >= k {
                return Err(Error::InvalidToken { index: t, size: k });
            }
            // large enough that every other weight underflows to zero
            logits[p * k + t] = 1e4;
        }
        expected_velocity(&logits, &self.codebook, self.dim, z, q, self.floor)
    }
}

/// The true straight-path velocity `z_tgt - z_src` of known pairs.
pub struct PairOracle {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl VelocityField for PairOracle {
    fn velocity(&self, z: &[f64], _q: &[f64], _c: &Condition) -> Result<Vec<f64>> {
        if z.len() != self.source.len() {
            return Err(Error::Mismatch("batch differs from the oracle's pairs".into()));
        }
        Ok(self.target.iter().zip(&self.source).map(|(t, s)| t - s).collect())
    }
}

/// Outputs of one forward pass.
pub struct FlowOutputs {
    pub logits: Var,
    /// Expected target embedding `E^T softmax(logits)`, `[B, L, d]`.
    pub expected: Var,
    pub velocity: Var,
}

/// Transformer velocity field predicting target-token logits.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub source: String,
    pub target: String,
    pub config: FlowConfig,
    pub conditions: ConditionSet,
    pub dim: usize,
    pub vocab: usize,
    /// Target codebook `[vocab, dim]` the expected embedding is taken over.
    pub target_codebook: Vec<f64>,
    pub store: ParamStore,
    input: Layer,
    position: Layer,
    time: [Layer; 2],
    cond: [Layer; 2],
    blocks: Vec<EncoderBlock>,
    head: Layer,
}

/// Sinusoidal features of flow time, on the same frequency ladder as the
/// positional table with `q` stretched to `[0, 1000]`.
fn time_features(q: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.len() * dim);
    for &t in q {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let a = 1000.0 * t / 10000f64.powf(2.0 * i / dim as f64);
            out.push(if c % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out
}

impl FlowModel {
    pub fn new(
        source: &str,
        target: &str,
        conditions: ConditionSet,
        target_codebook: Vec<f64>,
        dim: usize,
        config: FlowConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if dim == 0 || target_codebook.is_empty() || target_codebook.len() % dim != 0 {
            return Err(Error::Mismatch("target codebook does not match the embedding dimension".into()));
        }
        let vocab = target_codebook.len() / dim;
        let dm = config.d_model;
        let mut store = ParamStore::new();
        let lin = |store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut _| {
            LayerSpec::Linear { input: i, output: o }.build(store, name, rng)
        };
        let input = lin(&mut store, "input", dim, dm, rng)?;
        let position = LayerSpec::SinusoidalPositional { max_len: config.max_seq_len, dim: dm }.build(&mut store, "pos", rng)?;
        let time = [lin(&mut store, "time.0", dm, dm, rng)?, lin(&mut store, "time.1", dm, dm, rng)?];
        let cond = [
            lin(&mut store, "cond.0", conditions.len().max(1), dm, rng)?,
            lin(&mut store, "cond.1", dm, dm, rng)?,
        ];
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::build(&mut store, &format!("block.{i}"), dm, config.heads, config.d_ff, config.dropout, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let head = lin(&mut store, "head", dm, vocab, rng)?;
        Ok(Self {
            source: source.to_string(),
            target: target.to_string(),
            config,
            conditions,
            dim,
            vocab,
            target_codebook,
            store,
            input,
            position,
            time,
            cond,
            blocks,
            head,
        })
    }

    /// Parameters of the condition embedding's output layer.
    pub fn condition_output_params(&self) -> &[moreflow_diffcore::ParamId] {
        self.cond[1].params()
    }

    fn mlp(&self, g: &mut Graph, layers: &[Layer; 2], x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = layers[0].forward(g, &self.store, x, ctx)?;
        let h = g.silu(h);
        Ok(layers[1].forward(g, &self.store, h, ctx)?)
    }

    /// `z` is `[B, L, d]` with `L <= max_seq_len`; `q` has one time per sequence.
    pub fn forward(&self, g: &mut Graph, z: Var, q: &[f64], c: &Condition, ctx: &mut Ctx) -> Result<FlowOutputs> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.dim || s[0] != q.len() || s[1] > self.config.max_seq_len {
            return Err(Error::Mismatch(format!(
                "flow input {s:?} with {} times (dim {}, max length {})",
                q.len(),
                self.dim,
                self.config.max_seq_len
            )));
        }
        let (b, l, dm) = (s[0], s[1], self.config.d_model);
        let tf = g.constant(Tensor::new(vec![b, dm], time_features(q, dm))?);
        let mut emb = self.mlp(g, &self.time, tf, ctx)?;
        if let Some(idx) = self.conditions.index(c)? {
            let mut onehot = vec![0.0; b * self.conditions.len()];
            for r in 0..b {
                onehot[r * self.conditions.len() + idx] = 1.0;
            }
            let cv = g.constant(Tensor::new(vec![b, self.conditions.len()], onehot)?);
            let ce = self.mlp(g, &self.cond, cv, ctx)?;
            emb = g.add(emb, ce)?;
        }
        let h = self.input.forward(g, &self.store, z, ctx)?;
        let h = self.position.forward(g, &self.store, h, ctx)?;
        let mut h = g.add_mid(h, emb)?;
        for blk in &self.blocks {
            h = blk.forward(g, &self.store, h, ctx)?;
        }
        let logits = self.head.forward(g, &self.store, h, ctx)?;
        let p = g.softmax(logits);
        let table = g.constant(Tensor::new(vec![self.vocab, self.dim], self.target_codebook.clone())?);
        let expected = g.matmul(p, table)?;
        let diff = g.sub(expected, z)?;
        let inv: Vec<f64> = q
            .iter()
            .flat_map(|t| std::iter::repeat_n(1.0 / (1.0 - t).max(self.config.q_floor), l * self.dim))
            .collect();
        let inv = g.constant(Tensor::new(vec![b, l, self.dim], inv)?);
        let velocity = g.mul(diff, inv)?;
        Ok(FlowOutputs { logits, expected, velocity })
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        let mut meta: Meta = vec![
            ("kind".into(), "flow".into()),
            ("source".into(), self.source.clone()),
            ("target".into(), self.target.clone()),
            ("dim".into(), self.dim.to_string()),
            ("conditions".into(), self.conditions.to_string()),
        ];
        meta.extend(self.config.pairs().into_iter().map(|(k, v)| (format!("flow.{k}"), v)));
        meta.extend_from_slice(extra);
        let mut tensors = self.store.entries();
        tensors.push((
            "target_codebook".into(),
            Tensor::new(vec![self.vocab, self.dim], self.target_codebook.clone())?,
        ));
        artifact::save(path, &meta, tensors)
    }

    pub fn load(path: &Path) -> Result<(Self, Meta)> {
        let (meta, mut entries) = artifact::load(path)?;
        if artifact::require(&meta, "kind")? != "flow" {
            return Err(Error::Mismatch(format!("{} is not a flow checkpoint", path.display())));
        }
        let source = artifact::require(&meta, "source")?.to_string();
        let target = artifact::require(&meta, "target")?.to_string();
        let dim: usize = crate::config::field("checkpoint", "dim", artifact::require(&meta, "dim")?)?;
        let conditions = ConditionSet::parse_list(artifact::require(&meta, "conditions")?)?;
        let config = FlowConfig::from_pairs(
            FlowConfig::default(),
            meta.iter().filter_map(|(k, v)| k.strip_prefix("flow.").map(|k| (k, v.as_str()))),
        )?;
        let table = artifact::take(&mut entries, "target_codebook")?.into_data();
        let mut rng = crate::rng::stream(0, "load");
        let mut model = FlowModel::new(&source, &target, conditions, table, dim, config, &mut rng)?;
        model.store.load_entries(&entries)?;
        Ok((model, meta))
    }

    /// Sequence length of a flat batch of `values` embeddings over `batch` sequences.
    fn seq_len(&self, values: usize, batch: usize) -> Result<usize> {
        if batch == 0 || values % (batch * self.dim) != 0 {
            return Err(Error::Mismatch(format!(
                "{values} values do not form {batch} sequences of dimension {}",
                self.dim
            )));
        }
        Ok(values / (batch * self.dim))
    }
}

impl VelocityField for FlowModel {
    fn velocity(&self, z: &[f64], q: &[f64], c: &Condition) -> Result<Vec<f64>> {
        let l = self.seq_len(z.len(), q.len())?;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![q.len(), l, self.dim], z.to_vec())?);
        let out = self.forward(&mut g, zv, q, c, &mut Ctx::eval())?;
        Ok(g.value(out.velocity).data().to_vec())
    }
}
