//! Central finite-difference checks of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{Activation, Ctx, EncoderBlock, LayerSpec};
use crate::{Graph, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

/// Uniform values in (-1, 1), kept at least 0.05 away from zero so ReLU
/// kinks stay out of the difference quotient.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `||a - b|| / max(||a||, ||b||, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

pub type Build<'a> = dyn Fn(&mut Graph, &ParamStore, Var) -> Var + 'a;

/// Scalar probe `sum(output * w)` with fixed random weights `w`.
fn probe(g: &mut Graph, y: Var) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w).expect("same shape");
    g.sum(p)
}

fn eval_loss(store: &ParamStore, input: &Tensor, build: &Build) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = build(&mut g, store, x);
    let l = probe(&mut g, y);
    g.value(l).data()[0]
}

/// Worst relative error over the input (when `input_is_float`) and every
/// parameter of `store`.
pub fn check(store: &mut ParamStore, input: &Tensor, input_is_float: bool, build: &Build) -> f64 {
    let mut g = Graph::new();
    let x = if input_is_float {
        g.variable(input.clone())
    } else {
        g.constant(input.clone())
    };
    let y = build(&mut g, store, x);
    let l = probe(&mut g, y);
    let grads = g.backward(l).expect("scalar loss");
    let pg = grads.param_grads(store);
    let mut worst: f64 = 0.0;

    if input_is_float {
        let analytic = grads.wrt(x).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = input.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = input.clone();
            minus.data_mut()[i] -= STEP;
            *n = (eval_loss(store, &plus, build) - eval_loss(store, &minus, build)) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = pg
            .get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + STEP;
            let lp = eval_loss(store, input, build);
            store.get_mut(id).value.data_mut()[i] = orig - STEP;
            let lm = eval_loss(store, input, build);
            store.get_mut(id).value.data_mut()[i] = orig;
            *n = (lp - lm) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Checks a freshly built layer on a random float input.
pub fn check_spec(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = spec.build(&mut store, "l", &mut rng).expect("valid spec");
    let input = random_tensor(&mut rng, input_shape);
    check(&mut store, &input, true, &|g, s, x| {
        layer.forward(g, s, x, &mut Ctx::eval()).expect("forward")
    })
}

/// One finite-difference case: layer kind, input shape and worst error.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub layer: &'static str,
    pub shape: Vec<usize>,
    pub error: f64,
}

/// Every layer kind on at least three input shapes.
pub fn suite() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut push = |layer: &'static str, shape: &[usize], error: f64| {
        out.push(CaseResult {
            layer,
            shape: shape.to_vec(),
            error,
        })
    };

    for (i, (inp, o, rows)) in [(3, 4, 2), (5, 2, 7), (8, 8, 3)].into_iter().enumerate() {
        let shape = [rows, inp];
        push("linear", &shape, check_spec(&LayerSpec::Linear { input: inp, output: o }, &shape, i as u64));
    }

    let convs = [
        (2, 3, 3, 1, 1, [2, 8, 2]),
        (3, 2, 4, 2, 1, [1, 8, 3]),
        (4, 5, 3, 1, 0, [2, 6, 4]),
        (2, 2, 1, 1, 0, [3, 5, 2]),
    ];
    for (i, (cin, cout, kernel, stride, pad, shape)) in convs.into_iter().enumerate() {
        let spec = LayerSpec::TemporalConv {
            cin,
            cout,
            kernel,
            stride,
            pad,
        };
        push("temporal-conv", &shape, check_spec(&spec, &shape, 10 + i as u64));
    }

    for (name, act) in [("relu", Activation::Relu), ("gelu", Activation::Gelu), ("silu", Activation::Silu)] {
        for (i, shape) in [vec![5], vec![3, 4], vec![2, 3, 2]].into_iter().enumerate() {
            push(name, &shape, check_spec(&LayerSpec::Activation(act), &shape, 20 + i as u64));
        }
    }

    for (i, shape) in [vec![2, 4], vec![3, 6], vec![2, 3, 5]].into_iter().enumerate() {
        let dim = *shape.last().unwrap_or(&1);
        let mut rng = ChaCha8Rng::seed_from_u64(30 + i as u64);
        let mut store = ParamStore::new();
        let layer = LayerSpec::LayerNorm { dim }.build(&mut store, "ln", &mut rng).expect("valid");
        // non-trivial gain and bias
        for id in layer.params() {
            store.get_mut(*id).value = random_tensor(&mut rng, &[dim]);
        }
        let input = random_tensor(&mut rng, &shape);
        let e = check(&mut store, &input, true, &|g, s, x| {
            layer.forward(g, s, x, &mut Ctx::eval()).expect("forward")
        });
        push("layer-norm", &shape, e);
    }

    for (i, (b, t, d, h)) in [(1, 3, 4, 2), (2, 4, 6, 3), (2, 2, 4, 1)].into_iter().enumerate() {
        let shape = [b, t, d];
        push(
            "self-attention",
            &shape,
            check_spec(&LayerSpec::SelfAttention { dim: d, heads: h }, &shape, 40 + i as u64),
        );
    }

    let lookups = [
        (4, 3, vec![0.0, 2.0, 2.0]),
        (6, 2, vec![5.0, 1.0]),
        (3, 5, vec![1.0, 0.0, 2.0, 1.0]),
    ];
    for (i, (vocab, dim, idx)) in lookups.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + i as u64);
        let mut store = ParamStore::new();
        let layer = LayerSpec::Embedding { vocab, dim }.build(&mut store, "emb", &mut rng).expect("valid");
        let shape = [idx.len()];
        let input = Tensor::from_vec(idx);
        let e = check(&mut store, &input, false, &|g, s, x| {
            layer.forward(g, s, x, &mut Ctx::eval()).expect("forward")
        });
        push("embedding", &shape, e);
    }

    for (i, shape) in [vec![4, 6], vec![2, 3, 4], vec![1, 8, 2]].into_iter().enumerate() {
        let dim = *shape.last().unwrap_or(&1);
        push(
            "positional",
            &shape,
            check_spec(&LayerSpec::SinusoidalPositional { max_len: 8, dim }, &shape, 60 + i as u64),
        );
    }

    for (i, shape) in [[1, 2, 3], [2, 3, 1], [2, 4, 2]].into_iter().enumerate() {
        push("upsample", &shape, check_spec(&LayerSpec::Upsample2, &shape, 70 + i as u64));
    }

    for (i, shape) in [vec![6], vec![3, 4], vec![2, 2, 5]].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(80 + i as u64);
        let mut store = ParamStore::new();
        let layer = LayerSpec::Dropout { p: 0.3 }.build(&mut store, "d", &mut rng).expect("valid");
        let input = random_tensor(&mut rng, &shape);
        // the same mask on every evaluation
        let e = check(&mut store, &input, true, &|g, s, x| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
            let mut ctx = Ctx::train(&mut mask_rng);
            layer.forward(g, s, x, &mut ctx).expect("forward")
        });
        push("dropout", &shape, e);
    }

    for (i, (b, t, d, h)) in [(1, 3, 4, 2), (2, 2, 4, 4), (1, 4, 6, 2)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(110 + i as u64);
        let mut store = ParamStore::new();
        let block = EncoderBlock::build(&mut store, "enc", d, h, 2 * d, 0.0, &mut rng).expect("valid");
        let input = random_tensor(&mut rng, &[b, t, d]);
        let e = check(&mut store, &input, true, &|g, s, x| {
            block.forward(g, s, x, &mut Ctx::eval()).expect("forward")
        });
        push("encoder-block", &[b, t, d], e);
    }
    out
}
