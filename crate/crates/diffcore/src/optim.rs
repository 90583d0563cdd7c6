use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    ///
    /// All gradients are checked first; on a non-finite value nothing is
    /// modified and the offending parameter is named in the error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        for (id, p) in store.iter() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                *w -= lr * self.weight_decay * *w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Piecewise learning-rate schedules with a linear warm-up from zero.
#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// Peak rate after warm-up, multiplied by `gamma` at each milestone.
    WarmupMilestones {
        peak: f64,
        warmup: usize,
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// Cosine decay from `peak` at the end of warm-up to `min_lr` at `total`.
    WarmupCosine {
        peak: f64,
        warmup: usize,
        total: usize,
        min_lr: f64,
    },
}

impl LrSchedule {
    pub fn lr(&self, iter: usize) -> f64 {
        match self {
            LrSchedule::WarmupMilestones {
                peak,
                warmup,
                milestones,
                gamma,
            } => {
                if iter < *warmup {
                    return peak * iter as f64 / *warmup as f64;
                }
                let passed = milestones.iter().filter(|m| iter >= **m).count() as i32;
                peak * gamma.powi(passed)
            }
            LrSchedule::WarmupCosine {
                peak,
                warmup,
                total,
                min_lr,
            } => {
                if iter < *warmup {
                    return peak * iter as f64 / *warmup as f64;
                }
                let span = total.saturating_sub(*warmup).max(1) as f64;
                let frac = ((iter - warmup) as f64 / span).min(1.0);
                min_lr + (peak - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = one_param(0.7);
        let mut opt = AdamW::new(&s, (0.9, 0.99), 0.0);
        let mut g = ParamGrads::new(1);
        g.accumulate(id, &[0.0]);
        opt.step(&mut s, &g, 2e-4).unwrap();
        assert_eq!(s.get(id).value.data(), &[0.7]);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let (w0, g0, lr, wd) = (0.5_f64, 0.3_f64, 2e-4, 1e-2);
        let (b1, b2, eps) = (0.9_f64, 0.99_f64, 1e-8);
        let (mut s, id) = one_param(w0);
        let mut opt = AdamW::new(&s, (b1, b2), wd);
        let mut g = ParamGrads::new(1);
        g.accumulate(id, &[g0]);
        opt.step(&mut s, &g, lr).unwrap();
        // m_hat = g, v_hat = g^2 after one bias-corrected step.
        let m_hat = ((1.0 - b1) * g0) / (1.0 - b1);
        let v_hat = ((1.0 - b2) * g0 * g0) / (1.0 - b2);
        let expected = w0 * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((s.get(id).value.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_param() {
        let (mut s, id) = one_param(1.0);
        let mut opt = AdamW::new(&s, (0.9, 0.99), 0.0);
        let mut g = ParamGrads::new(1);
        g.accumulate(id, &[f64::NAN]);
        let err = opt.step(&mut s, &g, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.get(id).value.data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn warmup_starts_at_zero_and_milestone_drops() {
        let s = LrSchedule::WarmupMilestones {
            peak: 2e-4,
            warmup: 1000,
            milestones: vec![50_000, 100_000],
            gamma: 0.05,
        };
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(500) - 1e-4).abs() < 1e-18);
        assert_eq!(s.lr(1000), 2e-4);
        assert!((s.lr(50_000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn cosine_reaches_zero_at_the_end() {
        let s = LrSchedule::WarmupCosine {
            peak: 1e-4,
            warmup: 1000,
            total: 200_000,
            min_lr: 0.0,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(1000), 1e-4);
        assert!(s.lr(200_000).abs() < 1e-9);
        assert!(s.lr(100_500) < s.lr(50_000));
    }
}
