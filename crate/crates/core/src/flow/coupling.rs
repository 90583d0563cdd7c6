//! Batch couplings: a bijection pairing source rows with target columns of a
//! cost matrix.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingKind {
    /// Greedy nearest neighbour in row order, each target used once.
    Nearest,
    /// Minimum-cost assignment (Hungarian algorithm).
    Exact,
    /// Entropic optimal transport, rounded to a permutation.
    Sinkhorn,
}

impl CouplingKind {
    pub fn name(self) -> &'static str {
        match self {
            CouplingKind::Nearest => "nn",
            CouplingKind::Exact => "exact",
            CouplingKind::Sinkhorn => "sinkhorn",
        }
    }
}

impl fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CouplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(CouplingKind::Nearest),
            "exact" => Ok(CouplingKind::Exact),
            "sinkhorn" => Ok(CouplingKind::Sinkhorn),
            _ => Err(Error::Config(format!("unknown coupling `{s}` (nn, exact, sinkhorn)"))),
        }
    }
}

/// Square cost matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub k: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyBatch);
        }
        if data.len() != k * k {
            return Err(Error::Mismatch(format!("{} costs for a {k}x{k} matrix", data.len())));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("coupling cost".into()));
        }
        Ok(Self { k, data })
    }

    /// Pairwise costs between rows of `a` and rows of `b` (both `k x dim`).
    pub fn pairwise(a: &[f64], b: &[f64], dim: usize, cost: impl Fn(&[f64], &[f64]) -> f64) -> Result<Self> {
        if dim == 0 || a.len() != b.len() || a.len() % dim != 0 {
            return Err(Error::Mismatch(format!(
                "feature batches of {} and {} values with dimension {dim}",
                a.len(),
                b.len()
            )));
        }
        let k = a.len() / dim;
        let mut data = Vec::with_capacity(k * k);
        for x in a.chunks(dim) {
            for y in b.chunks(dim) {
                data.push(cost(x, y));
            }
        }
        Self::new(k, data)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.at(i, j)).sum()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPlan {
    pub kind: CouplingKind,
    /// `perm[i]` is the target paired with source `i`.
    pub perm: Vec<usize>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornParams {
    pub reg: f64,
    pub iters: usize,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { reg: 0.05, iters: 100 }
    }
}

pub fn couple(cost: &CostMatrix, kind: CouplingKind, sinkhorn: SinkhornParams) -> Result<CouplingPlan> {
    let perm = match kind {
        CouplingKind::Nearest => greedy_nearest(cost),
        CouplingKind::Exact => hungarian(cost),
        CouplingKind::Sinkhorn => round_plan(&sinkhorn_plan(cost, sinkhorn)?, cost.k),
    };
    Ok(CouplingPlan {
        kind,
        total: cost.total(&perm),
        perm,
    })
}

/// Row by row, the cheapest unused target; ties go to the lowest index.
pub fn greedy_nearest(cost: &CostMatrix) -> Vec<usize> {
    let k = cost.k;
    let mut used = vec![false; k];
    let mut perm = Vec::with_capacity(k);
    for i in 0..k {
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, u) in used.iter().enumerate() {
            if !u && (best.0 == usize::MAX || cost.at(i, j) < best.1) {
                best = (j, cost.at(i, j));
            }
        }
        used[best.0] = true;
        perm.push(best.0);
    }
    perm
}

/// Minimum-cost perfect matching by the shortest augmenting path method
/// with row and column potentials, `O(k^3)`.
pub fn hungarian(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.k;
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of[j] - 1] = j - 1;
    }
    perm
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic transport plan between uniform marginals, computed in the log
/// domain. Returned row-major.
pub fn sinkhorn_plan(cost: &CostMatrix, p: SinkhornParams) -> Result<Vec<f64>> {
    if !(p.reg > 0.0) {
        return Err(Error::Range {
            name: "sinkhorn reg",
            value: p.reg,
            range: "(0, inf)",
        });
    }
    let k = cost.k;
    let log_w = -(k as f64).ln();
    let mut f = vec![0.0; k];
    let mut g = vec![0.0; k];
    for _ in 0..p.iters {
        for i in 0..k {
            let lse = log_sum_exp((0..k).map(|j| (g[j] - cost.at(i, j)) / p.reg));
            f[i] = p.reg * (log_w - lse);
        }
        for j in 0..k {
            let lse = log_sum_exp((0..k).map(|i| (f[i] - cost.at(i, j)) / p.reg));
            g[j] = p.reg * (log_w - lse);
        }
    }
    let mut plan = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            plan.push(((f[i] + g[j] - cost.at(i, j)) / p.reg).exp());
        }
    }
    Ok(plan)
}

/// Row by row, the largest-mass unused column; ties go to the lowest index.
pub fn round_plan(plan: &[f64], k: usize) -> Vec<usize> {
    let mut used = vec![false; k];
    let mut perm = Vec::with_capacity(k);
    for i in 0..k {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (j, u) in used.iter().enumerate() {
            if !u && (best.0 == usize::MAX || plan[i * k + j] > best.1) {
                best = (j, plan[i * k + j]);
            }
        }
        used[best.0] = true;
        perm.push(best.0);
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_is_identity() {
        let c = CostMatrix::new(1, vec![3.0]).unwrap();
        for kind in [CouplingKind::Nearest, CouplingKind::Exact, CouplingKind::Sinkhorn] {
            assert_eq!(couple(&c, kind, SinkhornParams::default()).unwrap().perm, vec![0]);
        }
        assert!(CostMatrix::new(0, vec![]).is_err());
    }

    #[test]
    fn greedy_can_be_suboptimal() {
        // greedy takes (0,0) then is forced into (1,1)
        let c = CostMatrix::new(2, vec![1.0, 2.0, 2.0, 100.0]).unwrap();
        assert_eq!(greedy_nearest(&c), vec![0, 1]);
        assert_eq!(hungarian(&c), vec![1, 0]);
    }

    #[test]
    fn sinkhorn_marginals_are_uniform() {
        let data: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.1).collect();
        let c = CostMatrix::new(4, data).unwrap();
        let plan = sinkhorn_plan(&c, SinkhornParams { reg: 0.5, iters: 500 }).unwrap();
        for i in 0..4 {
            let row: f64 = plan[i * 4..(i + 1) * 4].iter().sum();
            let col: f64 = (0..4).map(|r| plan[r * 4 + i]).sum();
            assert!((row - 0.25).abs() < 1e-9 && (col - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_distance_cases() {
        assert!(cosine_distance(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn coupling_names_roundtrip() {
        for k in [CouplingKind::Nearest, CouplingKind::Exact, CouplingKind::Sinkhorn] {
            assert_eq!(k.name().parse::<CouplingKind>().unwrap(), k);
        }
        assert!("ot".parse::<CouplingKind>().is_err());
    }
}
