//! Evaluation measures: Fréchet distance, diversity, feature alignment and
//! the natural-frame percentage.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;

use crate::config::{field, unknown_key, Section};
use crate::error::{Error, Result};
use crate::features::{phi, Condition};
use crate::motion::{Frame, MotionClip};
use crate::rng;
use crate::skeleton::Skeleton;

/// Pairs drawn by [`diversity`] when the set has more unordered pairs.
pub const DIVERSITY_PAIRS: usize = 1000;
const DIVERSITY_SEED: u64 = 123;

/// Rows of `dim`-dimensional vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Mismatch(format!("{} values of dimension {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Mismatch("feature rows of different sizes".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for i in 0..self.len() {
            m += DVector::from_column_slice(self.row(i));
        }
        m / self.len() as f64
    }

    /// Unbiased covariance.
    fn covariance(&self, mean: &DVector<f64>) -> DMatrix<f64> {
        let n = self.len();
        let mut x = DMatrix::from_row_slice(n, self.dim, &self.data);
        for mut row in x.row_iter_mut() {
            row -= mean.transpose();
        }
        x.transpose() * &x / (n.max(2) - 1) as f64
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to `a` and `b`. With fewer
/// than `dim + 1` samples in either set the covariances are taken diagonal.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Mismatch(format!("feature dimensions {} and {}", a.dim, b.dim)));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::EmptyBatch);
    }
    let (ma, mb) = (a.mean(), b.mean());
    let mean_term = (&ma - &mb).norm_squared();
    let (ca, cb) = (a.covariance(&ma), b.covariance(&mb));
    let trace = if a.len() < a.dim + 1 || b.len() < b.dim + 1 {
        (0..a.dim)
            .map(|i| {
                let (x, y) = (ca[(i, i)], cb[(i, i)]);
                x + y - 2.0 * (x * y).max(0.0).sqrt()
            })
            .sum::<f64>()
    } else {
        // tr (Ca Cb)^1/2 = tr (Ca^1/2 Cb Ca^1/2)^1/2, whose argument is symmetric
        let s = sqrt_psd(&ca);
        let inner = &s * &cb * &s;
        let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .sum();
        ca.trace() + cb.trace() - 2.0 * cross
    };
    Ok((mean_term + trace).max(0.0))
}

/// Mean Euclidean distance over unordered pairs of distinct rows: all of them
/// when there are at most [`DIVERSITY_PAIRS`], otherwise that many drawn
/// without replacement from a fixed seed.
pub fn diversity(s: &FeatureSet) -> Result<f64> {
    let n = s.len();
    if n < 2 {
        return Err(Error::EmptyBatch);
    }
    let total = n * (n - 1) / 2;
    let dist = |p: usize| {
        let (i, j) = pair_of(p, n);
        s.row(i).iter().zip(s.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let sum: f64 = if total <= DIVERSITY_PAIRS {
        (0..total).map(dist).sum()
    } else {
        let mut r = rng::stream(DIVERSITY_SEED, "metrics/diversity");
        sample(&mut r, total, DIVERSITY_PAIRS).into_iter().map(dist).sum()
    };
    Ok(sum / total.min(DIVERSITY_PAIRS) as f64)
}

/// The `p`-th unordered pair `(i, j)`, `i < j`, in row-major order.
fn pair_of(mut p: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while p >= n - 1 - i {
        p -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + p)
}

/// Mean `||a_i - b_i||` over paired rows.
pub fn mean_gap(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim != b.dim || a.len() != b.len() {
        return Err(Error::Mismatch("paired features must have equal size".into()));
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok((0..a.len())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.len() as f64)
}

/// `1 / (1 + mean ||a_i - b_i||)` over paired rows.
pub fn alignment_from_features(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    Ok(1.0 / (1.0 + mean_gap(a, b)?))
}

/// Mean distance between Φ(source window) and Φ(target window) under `c`.
pub fn feature_gap(
    src: &[Vec<Frame>],
    src_skel: &Skeleton,
    tgt: &[Vec<Frame>],
    tgt_skel: &Skeleton,
    c: &Condition,
) -> Result<f64> {
    let a = src.iter().map(|w| phi(w, src_skel, c)).collect::<Result<Vec<_>>>()?;
    let b = tgt.iter().map(|w| phi(w, tgt_skel, c)).collect::<Result<Vec<_>>>()?;
    mean_gap(&FeatureSet::from_rows(&a)?, &FeatureSet::from_rows(&b)?)
}

/// Alignment of paired source and target windows under condition `c`.
pub fn alignment(
    src: &[Vec<Frame>],
    src_skel: &Skeleton,
    tgt: &[Vec<Frame>],
    tgt_skel: &Skeleton,
    c: &Condition,
) -> Result<f64> {
    Ok(1.0 / (1.0 + feature_gap(src, src_skel, tgt, tgt_skel, c)?))
}

/// Thresholds of the natural-frame test, in metres and seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalnessConfig {
    /// A foot below `floor + contact_height` is in contact.
    pub contact_height: f64,
    /// Horizontal speed of a contact foot above which it slides.
    pub slide_speed: f64,
    /// Depth below the floor counted as penetration.
    pub penetration: f64,
    /// Acceleration sign flips within `vib_window` frames above which a joint vibrates.
    pub vib_flips: usize,
    pub vib_window: usize,
    /// Accelerations smaller than this (m/s^2) have no sign.
    pub vib_eps: f64,
}

impl Default for NaturalnessConfig {
    fn default() -> Self {
        Self {
            contact_height: 0.02,
            slide_speed: 0.05,
            penetration: 0.01,
            vib_flips: 3,
            vib_window: 5,
            vib_eps: 1e-3,
        }
    }
}

impl Section for NaturalnessConfig {
    const NAME: &'static str = "metrics";

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "contact_height" => self.contact_height = field(n, key, v)?,
            "slide_speed" => self.slide_speed = field(n, key, v)?,
            "penetration" => self.penetration = field(n, key, v)?,
            "vib_flips" => self.vib_flips = field(n, key, v)?,
            "vib_window" => self.vib_window = field(n, key, v)?,
            "vib_eps" => self.vib_eps = field(n, key, v)?,
            _ => return Err(unknown_key(n, key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        [
            ("contact_height", self.contact_height.to_string()),
            ("slide_speed", self.slide_speed.to_string()),
            ("penetration", self.penetration.to_string()),
            ("vib_flips", self.vib_flips.to_string()),
            ("vib_window", self.vib_window.to_string()),
            ("vib_eps", self.vib_eps.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Per-frame verdicts of the naturalness test.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameFlags {
    pub sliding: Vec<bool>,
    pub penetrating: Vec<bool>,
    pub vibrating: Vec<bool>,
}

impl FrameFlags {
    pub fn unnatural(&self, t: usize) -> bool {
        self.sliding[t] || self.penetrating[t] || self.vibrating[t]
    }
}

pub fn frame_flags(clip: &MotionClip, skel: &Skeleton, cfg: &NaturalnessConfig) -> Result<FrameFlags> {
    let n = clip.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if clip.frames.iter().any(|f| f.positions.len() != skel.num_joints()) {
        return Err(Error::Mismatch(format!("clip joints do not match skeleton {}", skel.id)));
    }
    let feet = skel.feet();
    let pos = |t: usize, j: usize| clip.frames[t].positions[j];
    let mut flags = FrameFlags {
        sliding: vec![false; n],
        penetrating: vec![false; n],
        vibrating: vec![false; n],
    };
    for t in 0..n {
        for &j in &feet {
            let p = pos(t, j);
            if p.z < skel.floor - cfg.penetration {
                flags.penetrating[t] = true;
            }
            if n > 1 && p.z < skel.floor + cfg.contact_height {
                let (a, b) = if t + 1 < n { (t, t + 1) } else { (t - 1, t) };
                let d = pos(b, j) - pos(a, j);
                if d.x.hypot(d.y) * clip.fps > cfg.slide_speed {
                    flags.sliding[t] = true;
                }
            }
        }
    }
    // acceleration sign per joint and axis at interior frames; flip[t] marks
    // a sign change between frames t-1 and t
    if n >= 3 {
        let acc_scale = clip.fps * clip.fps;
        let w = cfg.vib_window.max(2).min(n);
        for j in 0..skel.num_joints() {
            for axis in 0..3 {
                let mut sign = vec![0i8; n];
                for t in 1..n - 1 {
                    let a = (pos(t + 1, j)[axis] - 2.0 * pos(t, j)[axis] + pos(t - 1, j)[axis]) * acc_scale;
                    if a.abs() >= cfg.vib_eps {
                        sign[t] = a.signum() as i8;
                    }
                }
                let flip: Vec<bool> = (0..n).map(|t| t > 0 && sign[t - 1] * sign[t] < 0).collect();
                for s in 0..=n - w {
                    let count = flip[s + 1..s + w].iter().filter(|f| **f).count();
                    if count > cfg.vib_flips {
                        flags.vibrating[s..s + w].iter_mut().for_each(|f| *f = true);
                    }
                }
            }
        }
    }
    Ok(flags)
}

/// Percentage of frames with no foot sliding, foot penetration or joint
/// vibration.
pub fn naturalness(clip: &MotionClip, skel: &Skeleton, cfg: &NaturalnessConfig) -> Result<f64> {
    let flags = frame_flags(clip, skel, cfg)?;
    let natural = (0..clip.len()).filter(|&t| !flags.unnatural(t)).count();
    Ok(100.0 * natural as f64 / clip.len() as f64)
}

/// Metric values plus the settings they were computed under.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub header: Vec<(String, String)>,
    pub values: Vec<(String, f64)>,
}

impl Report {
    pub fn new(fingerprint: &str, seed: u64, thresholds: &NaturalnessConfig) -> Self {
        let mut header = vec![
            ("fingerprint".to_string(), fingerprint.to_string()),
            ("seed".to_string(), seed.to_string()),
        ];
        header.extend(thresholds.pairs().into_iter().map(|(k, v)| (format!("metrics.{k}"), v)));
        Self {
            header,
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, value: f64) {
        self.values.push((metric.to_string(), value));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("metric,value\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "{k:<24} {v}");
        }
        out.push('\n');
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k:<24} {v:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_enumeration_is_row_major() {
        let pairs: Vec<_> = (0..6).map(|p| pair_of(p, 4)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let s = FeatureSet::new(2, vec![0.0, 1.0, 2.0, 0.5, -1.0, 3.0, 0.3, 0.3]).unwrap();
        assert!(fid(&s, &s).unwrap() < 1e-8);
    }

    #[test]
    fn alignment_formula() {
        let a = FeatureSet::new(1, vec![0.0, 0.0]).unwrap();
        let b = FeatureSet::new(1, vec![1.0, -1.0]).unwrap();
        assert_eq!(alignment_from_features(&a, &a).unwrap(), 1.0);
        assert_eq!(alignment_from_features(&a, &b).unwrap(), 0.5);
    }
}
