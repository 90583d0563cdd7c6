use std::path::Path;

use moreflow_diffcore::{Activation, Ctx, Graph, Layer, LayerSpec, ParamStore, Tensor, Var};
use rand::Rng;

use super::codebook::Codebook;
use super::TokenizerConfig;
use crate::artifact;
use crate::config::Section;
use crate::error::{Error, Result};
use crate::io::Meta;
use crate::motion::{MotionWindow, NormStats};

/// Codebook indices of one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub character: String,
    pub tokens: Vec<usize>,
    pub start: usize,
}

/// Scalar losses of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqLosses {
    pub rec: f64,
    /// `||sg[z] - e||^2`, reported only: the codebook is maintained by EMA.
    pub code: f64,
    /// `commit * ||z - sg[e]||^2`.
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
enum Block {
    Plain(Layer),
    /// `x + conv2(relu(conv1(relu(x))))`
    Residual(Layer, Layer),
}

#[derive(Clone, Debug)]
struct ConvNet {
    blocks: Vec<Block>,
}

struct NetBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    prefix: &'static str,
    rng: &'a mut R,
    blocks: Vec<Block>,
}

impl<R: Rng> NetBuilder<'_, R> {
    fn name(&self) -> String {
        format!("{}.{}", self.prefix, self.blocks.len())
    }

    fn conv(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Result<()> {
        let spec = LayerSpec::TemporalConv { cin, cout, kernel, stride, pad };
        let l = spec.build(self.store, &self.name(), self.rng)?;
        self.blocks.push(Block::Plain(l));
        Ok(())
    }

    fn plain(&mut self, spec: LayerSpec) -> Result<()> {
        let l = spec.build(self.store, &self.name(), self.rng)?;
        self.blocks.push(Block::Plain(l));
        Ok(())
    }

    fn residual(&mut self, width: usize) -> Result<()> {
        let name = self.name();
        let a = LayerSpec::TemporalConv { cin: width, cout: width, kernel: 3, stride: 1, pad: 1 }
            .build(self.store, &format!("{name}.a"), self.rng)?;
        let b = LayerSpec::TemporalConv { cin: width, cout: width, kernel: 1, stride: 1, pad: 0 }
            .build(self.store, &format!("{name}.b"), self.rng)?;
        self.blocks.push(Block::Residual(a, b));
        Ok(())
    }
}

impl ConvNet {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = match b {
                Block::Plain(l) => l.forward(g, store, h, ctx)?,
                Block::Residual(a, c) => {
                    let r = g.relu(h);
                    let r = a.forward(g, store, r, ctx)?;
                    let r = g.relu(r);
                    let r = c.forward(g, store, r, ctx)?;
                    g.add(h, r)?
                }
            };
        }
        Ok(h)
    }
}

const RELU: LayerSpec = LayerSpec::Activation(Activation::Relu);

fn build_encoder(store: &mut ParamStore, cfg: &TokenizerConfig, channels: usize, rng: &mut impl Rng) -> Result<ConvNet> {
    let w = cfg.width;
    let mut b = NetBuilder { store, prefix: "enc", rng, blocks: Vec::new() };
    b.conv(channels, w, 3, 1, 1)?;
    b.plain(RELU)?;
    for _ in 0..cfg.down_t {
        b.conv(w, w, 4, 2, 1)?;
        for _ in 0..cfg.depth {
            b.residual(w)?;
        }
    }
    b.conv(w, cfg.code_dim, 3, 1, 1)?;
    Ok(ConvNet { blocks: b.blocks })
}

fn build_decoder(store: &mut ParamStore, cfg: &TokenizerConfig, channels: usize, rng: &mut impl Rng) -> Result<ConvNet> {
    let w = cfg.width;
    let mut b = NetBuilder { store, prefix: "dec", rng, blocks: Vec::new() };
    b.conv(cfg.code_dim, w, 3, 1, 1)?;
    b.plain(RELU)?;
    for _ in 0..cfg.down_t {
        for _ in 0..cfg.depth {
            b.residual(w)?;
        }
        b.plain(LayerSpec::Upsample2)?;
        b.conv(w, w, 3, 1, 1)?;
    }
    b.conv(w, w, 3, 1, 1)?;
    b.plain(RELU)?;
    b.conv(w, channels, 3, 1, 1)?;
    Ok(ConvNet { blocks: b.blocks })
}

/// `z + sg[e - z]`: forwards the quantized values, routes gradients to `z`.
pub fn straight_through(g: &mut Graph, z: Var, quantized: &[f64]) -> Result<Var> {
    let zv = g.value(z);
    if zv.numel() != quantized.len() {
        return Err(Error::Mismatch("quantized values differ in size from latents".into()));
    }
    let diff: Vec<f64> = quantized.iter().zip(zv.data()).map(|(q, z)| q - z).collect();
    let c = g.constant(Tensor::new(zv.shape().to_vec(), diff)?);
    Ok(g.add(z, c)?)
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub character: String,
    pub config: TokenizerConfig,
    pub window: usize,
    pub channels: usize,
    pub store: ParamStore,
    pub codebook: Codebook,
    pub stats: NormStats,
    encoder: ConvNet,
    decoder: ConvNet,
}

impl Tokenizer {
    /// Freshly initialised network; the codebook starts at zero until
    /// [`Codebook::from_latents`] replaces it.
    pub fn new(
        character: &str,
        stats: NormStats,
        window: usize,
        config: TokenizerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(window)?;
        let channels = stats.channels();
        let mut store = ParamStore::new();
        let encoder = build_encoder(&mut store, &config, channels, rng)?;
        let decoder = build_decoder(&mut store, &config, channels, rng)?;
        let codebook = Codebook::from_entries(
            config.codes,
            config.code_dim,
            config.decay,
            vec![0.0; config.codes * config.code_dim],
        )?;
        Ok(Self {
            character: character.to_string(),
            config,
            window,
            channels,
            store,
            codebook,
            stats,
            encoder,
            decoder,
        })
    }

    pub fn latent_len(&self) -> usize {
        self.window / self.config.downsample()
    }

    fn batch_of(&self, values: usize, per_item: usize) -> Result<usize> {
        if values == 0 || values % per_item != 0 {
            return Err(Error::Mismatch(format!(
                "{values} values are not a whole number of {per_item}-value windows"
            )));
        }
        Ok(values / per_item)
    }

    /// `[B, H, C]` normalized windows to `[B, H/4, d]` latents.
    pub fn encoder_forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        self.encoder.forward(g, &self.store, x, ctx)
    }

    /// `[B, H/4, d]` latents to `[B, H, C]` normalized windows.
    pub fn decoder_forward(&self, g: &mut Graph, z: Var, ctx: &mut Ctx) -> Result<Var> {
        self.decoder.forward(g, &self.store, z, ctx)
    }

    /// Latents of normalized windows laid out back to back.
    pub fn encode_normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        let b = self.batch_of(x.len(), self.window * self.channels)?;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![b, self.window, self.channels], x.to_vec())?);
        let z = self.encoder_forward(&mut g, xv, &mut Ctx::eval())?;
        Ok(g.value(z).data().to_vec())
    }

    /// Normalized windows decoded from latents laid out back to back.
    pub fn decode_latents(&self, z: &[f64]) -> Result<Vec<f64>> {
        let l = self.latent_len();
        let b = self.batch_of(z.len(), l * self.config.code_dim)?;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![b, l, self.config.code_dim], z.to_vec())?);
        let x = self.decoder_forward(&mut g, zv, &mut Ctx::eval())?;
        Ok(g.value(x).data().to_vec())
    }

    fn check_window(&self, w: &MotionWindow) -> Result<()> {
        if w.len() != self.window {
            return Err(Error::Mismatch(format!(
                "window of {} frames for a tokenizer of window {}",
                w.len(),
                self.window
            )));
        }
        Ok(())
    }

    /// `H/4 x d` latents of one window.
    pub fn encode(&self, w: &MotionWindow) -> Result<Vec<f64>> {
        self.check_window(w)?;
        self.encode_normalized(&self.stats.normalize(&w.channels())?)
    }

    pub fn tokenize(&self, w: &MotionWindow) -> Result<TokenSequence> {
        Ok(TokenSequence {
            character: self.character.clone(),
            tokens: self.codebook.assign(&self.encode(w)?)?,
            start: w.start,
        })
    }

    /// Token sequences of many windows, encoded in one batch.
    pub fn tokenize_batch(&self, windows: &[MotionWindow]) -> Result<Vec<Vec<usize>>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut x = Vec::with_capacity(windows.len() * self.window * self.channels);
        for w in windows {
            self.check_window(w)?;
            x.extend(self.stats.normalize(&w.channels())?);
        }
        let tokens = self.codebook.assign(&self.encode_normalized(&x)?)?;
        Ok(tokens.chunks(self.latent_len()).map(<[usize]>::to_vec).collect())
    }

    /// Decodes tokens into original units; rotations are projected onto SO(3).
    pub fn decode(&self, tokens: &[usize], start: usize, origin: [f64; 2]) -> Result<MotionWindow> {
        if tokens.len() != self.latent_len() {
            return Err(Error::Mismatch(format!(
                "{} tokens, expected {}",
                tokens.len(),
                self.latent_len()
            )));
        }
        let x = self.decode_latents(&self.codebook.lookup(tokens)?)?;
        let joints = (self.channels - 3) / 12;
        MotionWindow::from_channels(&self.stats.denormalize(&x)?, joints, start, origin)
    }

    /// Forward pass with the training objective. `x` holds `batch` normalized
    /// windows; returns the loss node, the scalar terms, the pre-quantization
    /// latents and their assignments.
    pub fn vq_forward(
        &self,
        g: &mut Graph,
        x: &[f64],
        ctx: &mut Ctx,
    ) -> Result<(Var, VqLosses, Vec<f64>, Vec<usize>)> {
        let b = self.batch_of(x.len(), self.window * self.channels)?;
        let xv = g.constant(Tensor::new(vec![b, self.window, self.channels], x.to_vec())?);
        let z = self.encoder_forward(g, xv, ctx)?;
        let latents = g.value(z).data().to_vec();
        let indices = self.codebook.assign(&latents)?;
        let quantized = self.codebook.lookup(&indices)?;
        let zq = straight_through(g, z, &quantized)?;
        let recon = self.decoder_forward(g, zq, ctx)?;
        let rec = g.smooth_l1(recon, x, self.config.smooth_beta)?;

        let sg = g.constant(Tensor::new(g.shape(z).to_vec(), quantized)?);
        let d = g.sub(z, sg)?;
        let sq = g.mul(d, d)?;
        let mse = g.mean(sq);
        let commit = g.scale(mse, self.config.commit);
        let total = g.add(rec, commit)?;
        let code = g.value(mse).data()[0];
        let losses = VqLosses {
            rec: g.value(rec).data()[0],
            code,
            commit: self.config.commit * code,
            total: g.value(total).data()[0],
        };
        Ok((total, losses, latents, indices))
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        let mut meta: Meta = vec![
            ("kind".into(), "tokenizer".into()),
            ("character".into(), self.character.clone()),
            ("window".into(), self.window.to_string()),
            ("channels".into(), self.channels.to_string()),
        ];
        meta.extend(self.config.pairs().into_iter().map(|(k, v)| (format!("tokenizer.{k}"), v)));
        meta.extend_from_slice(extra);
        let cb = &self.codebook;
        let (k, d) = (cb.size, cb.dim);
        let mut tensors = self.store.entries();
        let as_f64 = |v: &[u32]| v.iter().map(|x| *x as f64).collect::<Vec<_>>();
        tensors.extend([
            ("codebook.entries".to_string(), Tensor::new(vec![k, d], cb.entries.clone())?),
            ("codebook.ema_size".to_string(), Tensor::from_vec(cb.ema_size.clone())),
            ("codebook.ema_sum".to_string(), Tensor::new(vec![k, d], cb.ema_sum.clone())?),
            ("codebook.usage".to_string(), Tensor::from_vec(cb.usage.clone())),
            ("codebook.dead_steps".to_string(), Tensor::from_vec(as_f64(&cb.dead_steps))),
            ("codebook.resets".to_string(), Tensor::from_vec(as_f64(&cb.resets))),
            ("stats.mean".to_string(), Tensor::from_vec(self.stats.mean.clone())),
            ("stats.std".to_string(), Tensor::from_vec(self.stats.std.clone())),
        ]);
        artifact::save(path, &meta, tensors)
    }

    /// Loads a tokenizer and returns it with the file's metadata.
    pub fn load(path: &Path) -> Result<(Self, Meta)> {
        let (meta, mut entries) = artifact::load(path)?;
        if artifact::require(&meta, "kind")? != "tokenizer" {
            return Err(Error::Mismatch(format!("{} is not a tokenizer checkpoint", path.display())));
        }
        let character = artifact::require(&meta, "character")?.to_string();
        let window: usize = crate::config::field("checkpoint", "window", artifact::require(&meta, "window")?)?;
        let config = TokenizerConfig::from_pairs(
            TokenizerConfig::default(),
            meta.iter()
                .filter_map(|(k, v)| k.strip_prefix("tokenizer.").map(|k| (k, v.as_str()))),
        )?;
        let mean = artifact::take(&mut entries, "stats.mean")?.into_data();
        let std = artifact::take(&mut entries, "stats.std")?.into_data();
        let stats = NormStats { mean, std };
        let (k, d) = (config.codes, config.code_dim);
        let mut cb = Codebook::from_entries(k, d, config.decay, vec![0.0; k * d])?;
        let mut vec_of = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = artifact::take(&mut entries, name)?.into_data();
            if t.len() != len {
                return Err(Error::Mismatch(format!("`{name}` has {} values, expected {len}", t.len())));
            }
            Ok(t)
        };
        cb.entries = vec_of("codebook.entries", k * d)?;
        cb.ema_size = vec_of("codebook.ema_size", k)?;
        cb.ema_sum = vec_of("codebook.ema_sum", k * d)?;
        cb.usage = vec_of("codebook.usage", k)?;
        cb.dead_steps = vec_of("codebook.dead_steps", k)?.iter().map(|x| *x as u32).collect();
        cb.resets = vec_of("codebook.resets", k)?.iter().map(|x| *x as u32).collect();
        // weights are overwritten below; the init RNG only fixes shapes
        let mut rng = crate::rng::stream(0, "load");
        let mut model = Tokenizer::new(&character, stats, window, config, &mut rng)?;
        model.store.load_entries(&entries)?;
        model.codebook = cb;
        Ok((model, meta))
    }
}
