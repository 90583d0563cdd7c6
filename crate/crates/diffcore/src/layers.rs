//! Layer specifications and their forward passes.

use rand::{Rng, RngCore};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward context: mode plus the randomness source for dropout.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear {
        input: usize,
        output: usize,
    },
    /// Channel-last temporal convolution over `[batch, time, channels]`.
    TemporalConv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Activation(Activation),
    LayerNorm {
        dim: usize,
    },
    SelfAttention {
        dim: usize,
        heads: usize,
    },
    Embedding {
        vocab: usize,
        dim: usize,
    },
    SinusoidalPositional {
        max_len: usize,
        dim: usize,
    },
    Dropout {
        p: f64,
    },
    Upsample2,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        match *self {
            LayerSpec::SelfAttention { dim, heads } if heads == 0 || dim % heads != 0 => {
                bad(format!("attention width {dim} not divisible by {heads} heads"))
            }
            LayerSpec::TemporalConv { kernel, stride, .. } if kernel == 0 || stride == 0 => {
                bad("convolution kernel and stride must be positive".into())
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => {
                bad(format!("dropout rate {p} outside [0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Registers this layer's parameters under `prefix` and returns the layer.
    pub fn build(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Layer> {
        self.validate()?;
        let name = |s: &str| format!("{prefix}.{s}");
        let mut params = Vec::new();
        let mut table = None;
        match *self {
            LayerSpec::Linear { input, output } => {
                params.push(store.add_uniform(name("weight"), &[input, output], input, rng)?);
                params.push(store.add_uniform(name("bias"), &[output], input, rng)?);
            }
            LayerSpec::TemporalConv {
                cin, cout, kernel, ..
            } => {
                let fan_in = cin * kernel;
                params.push(store.add_uniform(name("weight"), &[kernel, cin, cout], fan_in, rng)?);
                params.push(store.add_uniform(name("bias"), &[cout], fan_in, rng)?);
            }
            LayerSpec::LayerNorm { dim } => {
                params.push(store.add(name("gain"), Tensor::new(vec![dim], vec![1.0; dim])?)?);
                params.push(store.add(name("bias"), Tensor::zeros(&[dim]))?);
            }
            LayerSpec::SelfAttention { dim, .. } => {
                for p in ["q", "k", "v", "out"] {
                    params.push(store.add_uniform(name(&format!("{p}.weight")), &[dim, dim], dim, rng)?);
                    params.push(store.add_uniform(name(&format!("{p}.bias")), &[dim], dim, rng)?);
                }
            }
            LayerSpec::Embedding { vocab, dim } => {
                params.push(store.add_uniform(name("table"), &[vocab, dim], dim, rng)?);
            }
            LayerSpec::SinusoidalPositional { max_len, dim } => {
                table = Some(sinusoidal_table(max_len, dim));
            }
            LayerSpec::Activation(_) | LayerSpec::Dropout { .. } | LayerSpec::Upsample2 => {}
        }
        Ok(Layer {
            spec: self.clone(),
            params,
            table,
        })
    }
}

/// `table[pos, 2i] = sin(pos / 10000^(2i/dim))`, `table[pos, 2i+1] = cos(..)`.
pub fn sinusoidal_table(max_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; max_len * dim];
    for pos in 0..max_len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data[pos * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, dim], data).expect("consistent shape")
}

#[derive(Clone, Debug)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<ParamId>,
    table: Option<Tensor>,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        match self.spec {
            LayerSpec::Linear { .. } => {
                let w = g.param(store, self.params[0]);
                let b = g.param(store, self.params[1]);
                let y = g.matmul(x, w)?;
                g.add_tile(y, b)
            }
            LayerSpec::TemporalConv { stride, pad, .. } => {
                let w = g.param(store, self.params[0]);
                let b = g.param(store, self.params[1]);
                g.conv1d(x, w, b, stride, pad)
            }
            LayerSpec::Activation(a) => Ok(match a {
                Activation::Relu => g.relu(x),
                Activation::Gelu => g.gelu(x),
                Activation::Silu => g.silu(x),
            }),
            LayerSpec::LayerNorm { .. } => {
                let gain = g.param(store, self.params[0]);
                let bias = g.param(store, self.params[1]);
                g.layer_norm(x, gain, bias, 1e-5)
            }
            LayerSpec::SelfAttention { heads, .. } => {
                let lin = |g: &mut Graph, i: usize, x: Var| -> Result<Var> {
                    let w = g.param(store, self.params[2 * i]);
                    let b = g.param(store, self.params[2 * i + 1]);
                    let y = g.matmul(x, w)?;
                    g.add_tile(y, b)
                };
                let q = lin(g, 0, x)?;
                let k = lin(g, 1, x)?;
                let v = lin(g, 2, x)?;
                let a = g.attention(q, k, v, heads)?;
                lin(g, 3, a)
            }
            LayerSpec::Embedding { .. } => {
                let idx: Vec<usize> = g
                    .value(x)
                    .data()
                    .iter()
                    .map(|v| {
                        if *v < 0.0 || v.fract() != 0.0 {
                            Err(Error::Shape {
                                op: "embedding",
                                detail: format!("input {v} is not a token index"),
                            })
                        } else {
                            Ok(*v as usize)
                        }
                    })
                    .collect::<Result<_>>()?;
                let table = g.param(store, self.params[0]);
                let e = g.embedding(table, &idx)?;
                let mut shape = g.shape(x).to_vec();
                shape.push(g.shape(e)[1]);
                g.reshape(e, shape)
            }
            LayerSpec::SinusoidalPositional { max_len, dim } => {
                let s = g.shape(x).to_vec();
                if s.len() < 2 || s[s.len() - 1] != dim || s[s.len() - 2] > max_len {
                    return shape_err(
                        "positional",
                        format!("input {s:?} vs table [{max_len}, {dim}]"),
                    );
                }
                let t = s[s.len() - 2];
                let table = self.table.as_ref().expect("built with table");
                let rows = Tensor::new(vec![t, dim], table.data()[..t * dim].to_vec())?;
                let c = g.constant(rows);
                g.add_tile(x, c)
            }
            LayerSpec::Dropout { p } => dropout(g, x, p, ctx),
            LayerSpec::Upsample2 => g.upsample2(x),
        }
    }
}

/// Identity in eval mode or when `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, ctx: &mut Ctx) -> Result<Var> {
    if ctx.mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_mut()
        .ok_or_else(|| Error::InvalidSpec("train-mode dropout needs a random source".into()))?;
    let keep: Vec<bool> = (0..g.value(x).numel())
        .map(|_| rng.random::<f64>() >= p)
        .collect();
    g.dropout(x, &keep, p)
}

/// A chain of layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn build(
        specs: &[LayerSpec],
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| s.build(store, &format!("{prefix}.{i}"), rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(g, store, h, ctx))
    }
}

/// Post-norm transformer encoder block with GELU feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    attn: Layer,
    norm1: Layer,
    ff1: Layer,
    ff2: Layer,
    norm2: Layer,
    dropout: f64,
}

impl EncoderBlock {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        LayerSpec::Dropout { p: dropout }.validate()?;
        Ok(Self {
            attn: LayerSpec::SelfAttention { dim, heads }.build(store, &format!("{prefix}.attn"), rng)?,
            norm1: LayerSpec::LayerNorm { dim }.build(store, &format!("{prefix}.norm1"), rng)?,
            ff1: LayerSpec::Linear { input: dim, output: ff }.build(store, &format!("{prefix}.ff1"), rng)?,
            ff2: LayerSpec::Linear { input: ff, output: dim }.build(store, &format!("{prefix}.ff2"), rng)?,
            norm2: LayerSpec::LayerNorm { dim }.build(store, &format!("{prefix}.norm2"), rng)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let a = self.attn.forward(g, store, x, ctx)?;
        let a = dropout(g, a, self.dropout, ctx)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, store, h, ctx)?;
        let f = self.ff1.forward(g, store, h, ctx)?;
        let f = g.gelu(f);
        let f = dropout(g, f, self.dropout, ctx)?;
        let f = self.ff2.forward(g, store, f, ctx)?;
        let f = dropout(g, f, self.dropout, ctx)?;
        let h2 = g.add(h, f)?;
        self.norm2.forward(g, store, h2, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = LayerSpec::Linear { input: 3, output: 3 }
            .build(&mut store, "lin", &mut rng)
            .unwrap();
        let w = layer.params()[0];
        let b = layer.params()[1];
        store.get_mut(w).value =
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        store.get_mut(b).value = Tensor::zeros(&[3]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap());
        let y = layer.forward(&mut g, &store, x, &mut Ctx::eval()).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn positional_encoding_position_zero_even_channel_is_zero() {
        let t = sinusoidal_table(8, 6);
        for c in (0..6).step_by(2) {
            assert_eq!(t.data()[c], 0.0);
        }
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn attention_spec_requires_divisible_width() {
        let err = LayerSpec::SelfAttention { dim: 10, heads: 4 }.validate();
        assert!(err.is_err());
        assert!(LayerSpec::SelfAttention { dim: 64, heads: 4 }.validate().is_ok());
    }

    #[test]
    fn train_dropout_without_rng_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let mut ctx = Ctx {
            mode: Mode::Train,
            rng: None,
        };
        assert!(dropout(&mut g, x, 0.1, &mut ctx).is_err());
        assert_eq!(dropout(&mut g, x, 0.1, &mut Ctx::eval()).unwrap(), x);
    }
}
