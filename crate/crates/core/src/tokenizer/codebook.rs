//! Codebook with EMA maintenance and dead-code resets.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// EMA cluster size below which an entry counts as unused.
pub const DEAD_SIZE: f64 = 1.0;
/// Consecutive unused steps before an entry is reset.
pub const RESET_WINDOW: u32 = 200;
/// Laplace smoothing added to EMA cluster sizes.
pub const LAPLACE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    pub decay: f64,
    /// `size x dim`, row-major.
    pub entries: Vec<f64>,
    pub ema_size: Vec<f64>,
    pub ema_sum: Vec<f64>,
    /// Assignments since the entry was last reset.
    pub usage: Vec<f64>,
    /// Consecutive steps with `ema_size < DEAD_SIZE`.
    pub dead_steps: Vec<u32>,
    /// How often each entry was reset.
    pub resets: Vec<u32>,
}

/// Outcome of one EMA step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmaStep {
    pub resets: usize,
    pub perplexity: f64,
}

impl Codebook {
    /// Entries set to `entries`; EMA statistics start as if each entry had
    /// been assigned once to itself.
    pub fn from_entries(size: usize, dim: usize, decay: f64, entries: Vec<f64>) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::EmptyCodebook);
        }
        if entries.len() != size * dim {
            return Err(Error::Mismatch(format!(
                "codebook of {size}x{dim} given {} values",
                entries.len()
            )));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Range {
                name: "decay",
                value: decay,
                range: "[0, 1]",
            });
        }
        Ok(Self {
            size,
            dim,
            decay,
            ema_sum: entries.clone(),
            entries,
            ema_size: vec![1.0; size],
            usage: vec![0.0; size],
            dead_steps: vec![0; size],
            resets: vec![0; size],
        })
    }

    /// Entries drawn from `latents` (rows of length `dim`): distinct rows when
    /// there are enough, otherwise cycling through a shuffled order.
    pub fn from_latents(
        size: usize,
        dim: usize,
        decay: f64,
        latents: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = rows(latents, dim)?;
        let picks: Vec<usize> = if n >= size {
            sample(rng, n, size).into_vec()
        } else {
            let order = sample(rng, n, n).into_vec();
            (0..size).map(|i| order[i % n]).collect()
        };
        let mut entries = Vec::with_capacity(size * dim);
        for p in picks {
            entries.extend_from_slice(&latents[p * dim..(p + 1) * dim]);
        }
        Self::from_entries(size, dim, decay, entries)
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index and squared distance of the nearest entry; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> Result<(usize, f64)> {
        if self.size == 0 {
            return Err(Error::EmptyCodebook);
        }
        if z.len() != self.dim {
            return Err(Error::Mismatch(format!(
                "latent of length {} for codebook dimension {}",
                z.len(),
                self.dim
            )));
        }
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size {
            let d: f64 = self
                .entry(k)
                .iter()
                .zip(z)
                .map(|(e, x)| (x - e) * (x - e))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best)
    }

    /// Nearest-entry index for each row of `latents`.
    pub fn assign(&self, latents: &[f64]) -> Result<Vec<usize>> {
        rows(latents, self.dim)?;
        latents
            .chunks(self.dim)
            .map(|z| self.nearest(z).map(|(k, _)| k))
            .collect()
    }

    /// Concatenated entries for `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            if t >= self.size {
                return Err(Error::InvalidToken {
                    index: t,
                    size: self.size,
                });
            }
            out.extend_from_slice(self.entry(t));
        }
        Ok(out)
    }

    /// One EMA step from a batch of latents and their assignments, followed
    /// by resets of entries that stayed unused for [`RESET_WINDOW`] steps.
    ///
    /// With `decay == 1` the statistics and entries are frozen; only the
    /// usage counters and the dead-code bookkeeping advance.
    pub fn ema_update(
        &mut self,
        latents: &[f64],
        indices: &[usize],
        rng: &mut impl Rng,
    ) -> Result<EmaStep> {
        let n = rows(latents, self.dim)?;
        if indices.len() != n {
            return Err(Error::Mismatch(format!(
                "{n} latents but {} assignments",
                indices.len()
            )));
        }
        let d = self.dim;
        let mut counts = vec![0.0; self.size];
        let mut sums = vec![0.0; self.size * d];
        for (z, &k) in latents.chunks(d).zip(indices) {
            if k >= self.size {
                return Err(Error::InvalidToken {
                    index: k,
                    size: self.size,
                });
            }
            counts[k] += 1.0;
            for (s, x) in sums[k * d..(k + 1) * d].iter_mut().zip(z) {
                *s += x;
            }
        }
        for (u, c) in self.usage.iter_mut().zip(&counts) {
            *u += c;
        }
        let mu = self.decay;
        if mu < 1.0 {
            for (s, c) in self.ema_size.iter_mut().zip(&counts) {
                *s = mu * *s + (1.0 - mu) * c;
            }
            for (s, x) in self.ema_sum.iter_mut().zip(&sums) {
                *s = mu * *s + (1.0 - mu) * x;
            }
            let total: f64 = self.ema_size.iter().sum();
            let denom = total + self.size as f64 * LAPLACE_EPS;
            for k in 0..self.size {
                let smoothed = (self.ema_size[k] + LAPLACE_EPS) / denom * total;
                for j in 0..d {
                    self.entries[k * d + j] = self.ema_sum[k * d + j] / smoothed;
                }
            }
        }

        let mut dead = Vec::new();
        for k in 0..self.size {
            if self.ema_size[k] < DEAD_SIZE {
                self.dead_steps[k] += 1;
                if self.dead_steps[k] >= RESET_WINDOW {
                    dead.push(k);
                }
            } else {
                self.dead_steps[k] = 0;
            }
        }
        let m = dead.len().min(n);
        if m > 0 {
            let picks = sample(rng, n, m).into_vec();
            for (&k, p) in dead.iter().zip(picks) {
                let z = &latents[p * d..(p + 1) * d];
                self.entries[k * d..(k + 1) * d].copy_from_slice(z);
                self.ema_sum[k * d..(k + 1) * d].copy_from_slice(z);
                self.ema_size[k] = 1.0;
                self.usage[k] = 0.0;
                self.dead_steps[k] = 0;
                self.resets[k] += 1;
            }
        }
        if self.entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        Ok(EmaStep {
            resets: m,
            perplexity: perplexity(&counts),
        })
    }
}

fn rows(latents: &[f64], dim: usize) -> Result<usize> {
    if latents.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if dim == 0 || latents.len() % dim != 0 {
        return Err(Error::Mismatch(format!(
            "{} latent values are not a multiple of dimension {dim}",
            latents.len()
        )));
    }
    Ok(latents.len() / dim)
}

/// `exp(entropy)` of the empirical assignment distribution.
pub fn perplexity(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    if n <= 0.0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Histogram of token indices over a vocabulary of `size`.
pub fn histogram(tokens: &[usize], size: usize) -> Vec<f64> {
    let mut h = vec![0.0; size];
    for &t in tokens {
        if t < size {
            h[t] += 1.0;
        }
    }
    h
}
