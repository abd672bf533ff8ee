//! Communication graphs for decentralized FL: construction, validation, and
//! spectral analysis of symmetric doubly stochastic mixing matrices.
//!
//! Weights follow the Metropolis-Hastings rule `a_ij = 1/(1 + max(d_i, d_j))`
//! for edges with `a_ii = 1 - sum_j a_ij`, which is symmetric and doubly
//! stochastic for any simple connected graph. The full topology is the exact
//! averaging matrix `11^T/m`.

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Tolerance for row/column sums of a valid mixing matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance for the contraction inequality `||A^t - P||_op <= lambda^t`.
pub const CONTRACTION_TOL: f64 = 1e-10;
/// How far the top eigenvalue may drift from 1 before the eigensolve is
/// considered broken.
pub const UNIT_EIG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Ring,
    Grid,
    Star,
    Exp,
    Full,
    Custom,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Grid => "grid",
            TopologyKind::Star => "star",
            TopologyKind::Exp => "exp",
            TopologyKind::Full => "full",
            TopologyKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(TopologyKind::Ring),
            "grid" => Ok(TopologyKind::Grid),
            "star" => Ok(TopologyKind::Star),
            "exp" => Ok(TopologyKind::Exp),
            "full" => Ok(TopologyKind::Full),
            "custom" => Ok(TopologyKind::Custom),
            other => Err(Error::validation(format!(
                "unknown topology kind '{other}' (expected ring|grid|star|exp|full|custom)"
            ))),
        }
    }
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Symmetric doubly stochastic gossip matrix together with its graph kind.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub kind: TopologyKind,
    pub m: usize,
    weights: DMatrix<f64>,
}

/// Spectral summary: `lambda = max(|lambda_2|, |lambda_m|)` and the topology
/// coefficient `kappa_lambda` evaluated at a given `alpha`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub lambda: f64,
    pub kappa_lambda: f64,
    pub alpha: f64,
}

/// One row of the contraction report: observed `||A^t - P||_op` against the
/// spectral bound `lambda^t`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContractionStep {
    pub t: usize,
    pub observed: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub lambda: f64,
    pub steps: Vec<ContractionStep>,
}

impl ContractionReport {
    /// Largest observed excess over the bound (negative when all hold).
    pub fn max_excess(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.observed - s.bound)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.max_excess() <= tol
    }
}

fn neighbor_sets(kind: TopologyKind, m: usize) -> Result<Vec<Vec<usize>>> {
    let mut nbrs: Vec<std::collections::BTreeSet<usize>> =
        vec![std::collections::BTreeSet::new(); m];
    match kind {
        TopologyKind::Ring => {
            if m < 3 {
                return Err(Error::validation(format!("ring requires m >= 3, got {m}")));
            }
            for i in 0..m {
                nbrs[i].insert((i + 1) % m);
                nbrs[i].insert((i + m - 1) % m);
            }
        }
        TopologyKind::Star => {
            if m < 3 {
                return Err(Error::validation(format!("star requires m >= 3, got {m}")));
            }
            for leaf in 1..m {
                nbrs[0].insert(leaf);
                nbrs[leaf].insert(0);
            }
        }
        TopologyKind::Grid => {
            let q = (m as f64).sqrt().round() as usize;
            if q * q != m || q < 2 {
                return Err(Error::validation(format!(
                    "grid requires m to be a perfect square >= 4, got {m}: not a perfect square grid"
                )));
            }
            // 2D torus: wrap-around keeps every degree equal.
            for r in 0..q {
                for c in 0..q {
                    let i = r * q + c;
                    for (dr, dc) in [(1, 0), (q - 1, 0), (0, 1), (0, q - 1)] {
                        let j = ((r + dr) % q) * q + (c + dc) % q;
                        if j != i {
                            nbrs[i].insert(j);
                        }
                    }
                }
            }
        }
        TopologyKind::Exp => {
            if m < 3 {
                return Err(Error::validation(format!("exp requires m >= 3, got {m}")));
            }
            // Symmetric exponential graph: hops +/- 2^j (mod m). Power-of-two
            // sizes give the usual log2(m)-hop graph; other sizes reuse the
            // same hop set reduced mod m.
            let mut hop = 1usize;
            while hop < m {
                for i in 0..m {
                    let fwd = (i + hop) % m;
                    let bwd = (i + m - hop % m) % m;
                    if fwd != i {
                        nbrs[i].insert(fwd);
                    }
                    if bwd != i {
                        nbrs[i].insert(bwd);
                    }
                }
                hop *= 2;
            }
        }
        TopologyKind::Full | TopologyKind::Custom => {
            unreachable!("handled by the caller")
        }
    }
    Ok(nbrs.into_iter().map(|s| s.into_iter().collect()).collect())
}

impl MixingMatrix {
    /// Build one of the named topologies at client count `m`.
    pub fn build(kind: TopologyKind, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::validation(format!("topologies require m >= 2, got {m}")));
        }
        let weights = match kind {
            TopologyKind::Full => DMatrix::from_element(m, m, 1.0 / m as f64),
            TopologyKind::Custom => {
                return Err(Error::validation(
                    "custom matrices are built with MixingMatrix::from_weights",
                ))
            }
            _ => {
                let nbrs = neighbor_sets(kind, m)?;
                let deg: Vec<usize> = nbrs.iter().map(Vec::len).collect();
                let mut w = DMatrix::zeros(m, m);
                for (i, ns) in nbrs.iter().enumerate() {
                    for &j in ns {
                        if j > i {
                            let a = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
                            w[(i, j)] = a;
                            w[(j, i)] = a;
                        }
                    }
                }
                for i in 0..m {
                    let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
                    w[(i, i)] = 1.0 - off;
                }
                w
            }
        };
        let mix = MixingMatrix { kind, m, weights };
        mix.validate()?;
        Ok(mix)
    }

    /// Wrap a caller-supplied matrix, enforcing every invariant.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() != weights.ncols() || weights.nrows() < 2 {
            return Err(Error::validation("custom matrix must be square with m >= 2"));
        }
        let mix = MixingMatrix {
            kind: TopologyKind::Custom,
            m: weights.nrows(),
            weights,
        };
        mix.validate()?;
        Ok(mix)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// Check symmetry, non-negativity, double stochasticity, the spectral
    /// range (-1, 1], and connectivity.
    pub fn validate(&self) -> Result<()> {
        let m = self.m;
        let w = &self.weights;
        for i in 0..m {
            for j in 0..i {
                if w[(i, j)] != w[(j, i)] {
                    return Err(Error::validation(format!(
                        "matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        for i in 0..m {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..m {
                if w[(i, j)] < 0.0 {
                    return Err(Error::validation(format!(
                        "negative weight {} at ({i},{j})",
                        w[(i, j)]
                    )));
                }
                row += w[(i, j)];
                col += w[(j, i)];
            }
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::validation(format!(
                    "row/col sum off unity at {i}: row {row}, col {col}"
                )));
            }
        }
        let eigs = self.sorted_eigenvalues()?;
        let top = eigs[0];
        if (top - 1.0).abs() > UNIT_EIG_TOL {
            return Err(Error::NumericalValidation(format!(
                "top eigenvalue {top} deviates from 1"
            )));
        }
        let bottom = eigs[m - 1];
        if bottom <= -1.0 {
            return Err(Error::validation(format!(
                "eigenvalue {bottom} outside (-1, 1]: graph is periodic or invalid"
            )));
        }
        if m > 1 && eigs[1] >= 1.0 - 1e-10 {
            return Err(Error::validation(
                "second eigenvalue reaches 1: graph is disconnected",
            ));
        }
        Ok(())
    }

    /// Eigenvalues sorted descending.
    fn sorted_eigenvalues(&self) -> Result<Vec<f64>> {
        let eigs = self.weights.clone().symmetric_eigenvalues();
        let mut v: Vec<f64> = eigs.iter().copied().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalValidation("eigensolve produced non-finite values".into()));
        }
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        Ok(v)
    }

    /// `lambda = max(|lambda_2|, |lambda_m|)`, excluding the single unit
    /// eigenvalue. Errors if the top eigenvalue is not 1 to within 1e-8.
    pub fn spectral_lambda(&self) -> Result<f64> {
        let eigs = self.sorted_eigenvalues()?;
        if (eigs[0] - 1.0).abs() > UNIT_EIG_TOL {
            return Err(Error::NumericalValidation(format!(
                "top eigenvalue {} deviates from 1 by more than {UNIT_EIG_TOL}",
                eigs[0]
            )));
        }
        let lambda = eigs[1..]
            .iter()
            .map(|x| x.abs())
            .fold(0.0f64, f64::max)
            .min(1.0);
        // The full topology is rank one; the eigensolver leaves O(1e-16)
        // residue that would blow up 1/lambda factors downstream.
        Ok(if lambda < 1e-12 { 0.0 } else { lambda })
    }

    /// Spectral profile at a given `alpha`.
    pub fn spectral_profile(&self, alpha: f64) -> Result<SpectralProfile> {
        let lambda = self.spectral_lambda()?;
        Ok(SpectralProfile {
            lambda,
            kappa_lambda: kappa_lambda(lambda, alpha)?,
            alpha,
        })
    }

    /// Explicitly power the matrix and report `||A^t - P||_op` against
    /// `lambda^t` for `t = 1..=t_max`.
    pub fn contraction_check(&self, t_max: usize) -> Result<ContractionReport> {
        if t_max < 1 {
            return Err(Error::validation("t_max must be >= 1"));
        }
        let lambda = self.spectral_lambda()?;
        let m = self.m;
        let p = DMatrix::from_element(m, m, 1.0 / m as f64);
        let mut power = self.weights.clone();
        let mut steps = Vec::with_capacity(t_max);
        // A^t - P shares eigenvectors across t, so each power iteration is
        // warm-started with the previous step's converged vector.
        let mut warm: Option<DVector<f64>> = None;
        for t in 1..=t_max {
            if t > 1 {
                power = &power * &self.weights;
            }
            let (observed, vector) = sym_op_norm_warm(&(&power - &p), warm.take());
            warm = Some(vector);
            steps.push(ContractionStep {
                t,
                observed,
                bound: lambda.powi(t as i32),
            });
        }
        Ok(ContractionReport { lambda, steps })
    }

    /// Row-major CSV at full (round-trip) precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.m {
            for j in 0..self.m {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{}", self.weights[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    /// JSON report `{kind, m, lambda, kappa_lambda, alpha}`.
    pub fn report(&self, alpha: f64) -> Result<TopologyReport> {
        let profile = self.spectral_profile(alpha)?;
        Ok(TopologyReport {
            kind: self.kind,
            m: self.m,
            lambda: profile.lambda,
            kappa_lambda: profile.kappa_lambda,
            alpha,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyReport {
    pub kind: TopologyKind,
    pub m: usize,
    pub lambda: f64,
    pub kappa_lambda: f64,
    pub alpha: f64,
}

/// Topology coefficient
/// `kappa = (a/e)^a / (l ln(1/l)^a) + 2^a / ((1-a) e l ln(1/l)) + 2^a / (l ln(1/l))`
/// bounding `sum_{s<t} l^{t-s-1}/(s+1)^a <= kappa/t^a`. At `lambda == 0` the
/// sum collapses to its last term, so the coefficient is 0 by convention.
pub fn kappa_lambda(lambda: f64, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::validation(format!(
            "lambda must be in [0, 1), got {lambda}"
        )));
    }
    if alpha <= 0.0 || alpha >= 1.0 {
        return Err(Error::validation(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let e = std::f64::consts::E;
    let ln_inv = -lambda.ln();
    let t1 = (alpha / e).powf(alpha) / (lambda * ln_inv.powf(alpha));
    let t2 = 2f64.powf(alpha) / ((1.0 - alpha) * e * lambda * ln_inv);
    let t3 = 2f64.powf(alpha) / (lambda * ln_inv);
    Ok(t1 + t2 + t3)
}

/// Operator norm of a symmetric matrix by power iteration. Estimates climb
/// monotonically toward `max |eig|`; two deterministic starts guard against
/// an unlucky orthogonal start vector.
pub fn sym_op_norm(b: &DMatrix<f64>) -> f64 {
    let m = b.nrows();
    let mut best = 0.0f64;
    for start in 0..2u64 {
        let mut rng = CounterRng::new(start, Purpose::NormEstimate, m as u64, 0);
        let x = DVector::from_fn(m, |_, _| rng.next_normal());
        best = best.max(power_iterate(b, x, 160).0);
    }
    best
}

/// Power iteration returning the converged direction for warm restarts.
fn sym_op_norm_warm(b: &DMatrix<f64>, warm: Option<DVector<f64>>) -> (f64, DVector<f64>) {
    let m = b.nrows();
    let (start, iters) = match warm {
        Some(v) => (v, 40),
        None => {
            let mut rng = CounterRng::new(0, Purpose::NormEstimate, m as u64, 0);
            (DVector::from_fn(m, |_, _| rng.next_normal()), 160)
        }
    };
    power_iterate(b, start, iters)
}

fn power_iterate(b: &DMatrix<f64>, start: DVector<f64>, max_iters: usize) -> (f64, DVector<f64>) {
    let mut x = start;
    let nx = x.norm();
    if nx == 0.0 || !nx.is_finite() {
        let mut rng = CounterRng::new(1, Purpose::NormEstimate, b.nrows() as u64, 1);
        x = DVector::from_fn(b.nrows(), |_, _| rng.next_normal());
    }
    x /= x.norm();
    let mut best = 0.0f64;
    let mut prev = -1.0f64;
    for it in 0..max_iters {
        let y = b * &x;
        let ny = y.norm();
        best = best.max(ny);
        if ny <= 1e-300 {
            break;
        }
        x = y / ny;
        if it > 3 && (ny - prev).abs() <= 1e-14 * ny.max(1.0) {
            break;
        }
        prev = ny;
    }
    (best, x)
}
