//! Max-type statistic over candidate witnesses and its pivotal calibration.
//!
//! For candidate `j` with test-set evaluations `ĝ_j(X_i)`, `ĝ_j(Y_i)` the
//! mean difference is `S_n(ĝ_j)`. The vector `Ŝ_n` is standardized by
//! `Σ̂^{-1/2}` and the statistic is
//! `T = max_j √(n_x n_y / (n_x + n_y)) |e_jᵀ Σ̂^{-1/2} Ŝ_n|`, calibrated
//! against the maximum of `m` independent `|N(0, 1)|` variables.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::normal;

/// Conditioning floor applied to the correlation-scaled covariance.
pub const DEFAULT_KAPPA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    L1,
    L0,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::L1 => "l1",
            Variant::L0 => "l0",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizer {
    #[default]
    None,
    L1 {
        rho: f64,
    },
    L0 {
        budget: usize,
    },
}

impl Regularizer {
    pub fn type_name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::L1 { .. } => "l1",
            Regularizer::L0 { .. } => "l0",
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Regularizer::None => None,
            Regularizer::L1 { rho } => Some(rho),
            Regularizer::L0 { budget } => Some(budget as f64),
        }
    }
}

/// One member of the candidate set: projection dimension plus regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub k: usize,
    #[serde(default)]
    pub regularizer: Regularizer,
}

impl CandidateSpec {
    pub fn plain(k: usize) -> Self {
        Self {
            k,
            regularizer: Regularizer::None,
        }
    }

    pub fn l1(k: usize, rho: f64) -> Self {
        Self {
            k,
            regularizer: Regularizer::L1 { rho },
        }
    }

    pub fn l0(k: usize, budget: usize) -> Self {
        Self {
            k,
            regularizer: Regularizer::L0 { budget },
        }
    }

    /// Checks the candidate against ambient dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 || self.k > d {
            return invalid(format!(
                "candidate k = {} must satisfy 1 <= k <= d = {d}",
                self.k
            ));
        }
        match self.regularizer {
            Regularizer::None => Ok(()),
            Regularizer::L1 { rho } if rho >= 0.0 && rho.is_finite() => Ok(()),
            Regularizer::L1 { rho } => {
                invalid(format!("penalty {rho} must be finite and nonnegative"))
            }
            Regularizer::L0 { budget } if budget >= self.k && budget <= self.k * d => Ok(()),
            Regularizer::L0 { budget } => invalid(format!(
                "budget {budget} must satisfy k <= budget <= k*d for k = {}, d = {d}",
                self.k
            )),
        }
    }
}

fn check_lists(gx: &[f64], gy: &[f64], min: usize) -> Result<()> {
    if gx.len() < min || gy.len() < min {
        return invalid(format!("each sample needs at least {min} evaluations"));
    }
    if gx.iter().chain(gy).any(|v| !v.is_finite()) {
        return invalid("evaluations must be finite");
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `S_n(ĝ) = mean ĝ(X) − mean ĝ(Y)`.
pub fn sn_statistic(gx: &[f64], gy: &[f64]) -> Result<f64> {
    check_lists(gx, gy, 1)?;
    Ok(mean(gx) - mean(gy))
}

fn biased_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// `(n_y/(n_x+n_y))·Var̂(gX) + (n_x/(n_x+n_y))·Var̂(gY)` with `1/n` variances.
pub fn pooled_variance(gx: &[f64], gy: &[f64]) -> Result<f64> {
    check_lists(gx, gy, 2)?;
    let (nx, ny) = (gx.len() as f64, gy.len() as f64);
    Ok(ny / (nx + ny) * biased_var(gx) + nx / (nx + ny) * biased_var(gy))
}

/// `Σ̂` with the surviving candidate indices after elimination.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    /// Original indices of the rows/columns of `matrix`.
    pub active: Vec<usize>,
    pub eliminated: Vec<usize>,
    pub kappa: f64,
}

fn centered_cross(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    let mut c = a.clone();
    let means = a.row_mean();
    for mut row in c.row_iter_mut() {
        row -= &means;
    }
    c.tr_mul(&c) / n
}

/// Pooled plug-in covariance of the candidate evaluations. Columns of `gx`
/// (`n_x × m`) and `gy` (`n_y × m`) are candidates.
pub fn covariance_matrix(gx: &DMatrix<f64>, gy: &DMatrix<f64>) -> Result<CovarianceEstimate> {
    if gx.ncols() != gy.ncols() || gx.ncols() == 0 {
        return invalid("evaluation matrices must have the same positive number of candidates");
    }
    if gx.nrows() < 2 || gy.nrows() < 2 {
        return invalid("each sample needs at least 2 evaluations");
    }
    if gx.iter().chain(gy.iter()).any(|v| !v.is_finite()) {
        return invalid("evaluations must be finite");
    }
    let (nx, ny) = (gx.nrows() as f64, gy.nrows() as f64);
    let mut s = centered_cross(gx) * (ny / (nx + ny)) + centered_cross(gy) * (nx / (nx + ny));
    let sym = (&s + s.transpose()) * 0.5;
    s = sym;
    Ok(CovarianceEstimate {
        active: (0..s.nrows()).collect(),
        matrix: s,
        eliminated: Vec::new(),
        kappa: 0.0,
    })
}

fn lambda_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigenvalues().min()
}

fn without(m: &DMatrix<f64>, drop: usize) -> DMatrix<f64> {
    m.clone().remove_row(drop).remove_column(drop)
}

/// Removes candidates until the smallest eigenvalue of the correlation
/// matrix is at least `κ`. Candidates with zero variance are removed first;
/// then, repeatedly, the one whose removal maximizes `λ_min` (lowest index
/// on ties).
pub fn backward_eliminate(cov: &CovarianceEstimate, kappa: f64) -> Result<CovarianceEstimate> {
    if !(kappa > 0.0) {
        return invalid("kappa must be positive");
    }
    let mut matrix = cov.matrix.clone();
    let mut active = cov.active.clone();
    let mut eliminated = cov.eliminated.clone();

    let scale = matrix.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut i = 0;
    while i < active.len() {
        if matrix[(i, i)] <= 1e-14 * scale || matrix[(i, i)] <= 0.0 {
            eliminated.push(active.remove(i));
            matrix = without(&matrix, i);
        } else {
            i += 1;
        }
    }
    if active.is_empty() {
        return Err(Error::Degenerate(
            "every candidate has zero variance on the test set".into(),
        ));
    }
    let corr = |m: &DMatrix<f64>| {
        let s: Vec<f64> = m.diagonal().iter().map(|v| v.sqrt()).collect();
        DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| m[(a, b)] / (s[a] * s[b]))
    };
    let mut r = corr(&matrix);
    while active.len() > 1 && lambda_min(&r) < kappa {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..active.len() {
            let l = lambda_min(&without(&r, j));
            if l > best.0 {
                best = (l, j);
            }
        }
        let j = best.1;
        eliminated.push(active.remove(j));
        matrix = without(&matrix, j);
        r = without(&r, j);
    }
    Ok(CovarianceEstimate {
        matrix,
        active,
        eliminated,
        kappa,
    })
}

/// Symmetric `M^{-1/2}` from the eigendecomposition of `M`.
pub fn inv_sqrt_sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() || m.nrows() == 0 {
        return invalid("matrix must be square and nonempty");
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return invalid("matrix is not positive definite");
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// `max_j √(n_x n_y/(n_x+n_y)) |e_jᵀ Σ̂^{-1/2} Ŝ|`.
pub fn max_statistic(s: &DVector<f64>, cov: &DMatrix<f64>, nx: usize, ny: usize) -> Result<f64> {
    if s.len() != cov.nrows() {
        return invalid("statistic vector and covariance disagree in size");
    }
    if nx == 0 || ny == 0 {
        return invalid("sample sizes must be positive");
    }
    let r = inv_sqrt_sym(cov)?;
    let z = r * s;
    let scale = ((nx * ny) as f64 / (nx + ny) as f64).sqrt();
    Ok(scale * z.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// Upper `α` quantile of `max_{j ≤ m} |Z_j|` for independent standard normals:
/// `Φ⁻¹((1 + (1 − α)^{1/m}) / 2)`.
pub fn max_abs_gauss_quantile(m: usize, alpha: f64) -> Result<f64> {
    if m == 0 {
        return invalid("m must be at least 1");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid("alpha must lie in (0, 1)");
    }
    // Two-sided tail mass per coordinate, 1 − (1 − α)^{1/m}, split in half.
    let tail = -(alpha.ln_1p_neg() / m as f64).exp_m1() / 2.0;
    Ok(-normal::quantile(tail))
}

trait Ln1pNeg {
    fn ln_1p_neg(self) -> f64;
}

impl Ln1pNeg for f64 {
    /// `ln(1 − self)`.
    fn ln_1p_neg(self) -> f64 {
        (-self).ln_1p()
    }
}

/// `P(max_{j ≤ m} |Z_j| ≥ T) = 1 − (2Φ(T) − 1)^m`.
pub fn p_value(t: f64, m: usize) -> f64 {
    if m == 0 || t.is_nan() {
        return 1.0;
    }
    if t <= 0.0 {
        return 1.0;
    }
    let two_tail = 2.0 * normal::sf(t);
    let p = -(m as f64 * (-two_tail).ln_1p()).exp_m1();
    p.clamp(0.0, 1.0)
}

/// Statistic, calibration and per-candidate summaries for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticOutcome {
    pub t: f64,
    pub q: f64,
    pub p: f64,
    pub reject: bool,
    pub m_requested: usize,
    pub m_effective: usize,
    pub eliminated: Vec<usize>,
    pub s_n: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

/// Full assembly: `Ŝ_n`, `Σ̂`, elimination, `T`, `q_{1−α}` and `p`.
/// A candidate set with no variance at all yields `T = 0`, `p = 1`.
pub fn evaluate_statistic(
    gx: &DMatrix<f64>,
    gy: &DMatrix<f64>,
    alpha: f64,
    kappa: f64,
) -> Result<StatisticOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid("alpha must lie in (0, 1)");
    }
    let cov = covariance_matrix(gx, gy)?;
    let m = gx.ncols();
    let s_n: Vec<f64> = (0..m)
        .map(|j| gx.column(j).mean() - gy.column(j).mean())
        .collect();
    let sigma_hat: Vec<f64> = (0..m).map(|j| cov.matrix[(j, j)].max(0.0).sqrt()).collect();
    let reduced = match backward_eliminate(&cov, kappa) {
        Ok(c) => c,
        Err(Error::Degenerate(_)) => {
            return Ok(StatisticOutcome {
                t: 0.0,
                q: max_abs_gauss_quantile(1, alpha)?,
                p: 1.0,
                reject: false,
                m_requested: m,
                m_effective: 0,
                eliminated: (0..m).collect(),
                s_n,
                sigma_hat,
            })
        }
        Err(e) => return Err(e),
    };
    let s = DVector::from_iterator(reduced.active.len(), reduced.active.iter().map(|&j| s_n[j]));
    let t = max_statistic(&s, &reduced.matrix, gx.nrows(), gy.nrows())?;
    let m_eff = reduced.active.len();
    let q = max_abs_gauss_quantile(m_eff, alpha)?;
    let mut eliminated = reduced.eliminated;
    eliminated.sort_unstable();
    Ok(StatisticOutcome {
        t,
        q,
        p: p_value(t, m_eff),
        reject: t > q,
        m_requested: m,
        m_effective: m_eff,
        eliminated,
        s_n,
        sigma_hat,
    })
}

/// Per-candidate entry of a [`TestReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateReport {
    pub k: usize,
    pub reg_type: String,
    pub reg_value: Option<f64>,
    #[serde(rename = "S_n")]
    pub s_n: Option<f64>,
    pub sigma_hat: Option<f64>,
    /// Set when the candidate failed to fit and was left out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Fit-data objective of the trained witness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
    pub splits: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregation {
    pub method: String,
    pub split_p_values: Vec<f64>,
    pub splits: Vec<TestReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestReport {
    pub variant: Variant,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub q: f64,
    pub p: f64,
    pub reject: bool,
    pub m_requested: usize,
    pub m_effective: usize,
    pub eliminated: Vec<usize>,
    pub candidates: Vec<CandidateReport>,
    pub seeds: Seeds,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
}

impl TestReport {
    /// Checks the report invariants: `p ∈ [0, 1]`, counts consistent, and for
    /// single-split reports `reject ⇔ T > q`.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return invalid(format!("p-value {} outside [0, 1]", self.p));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid("alpha outside (0, 1)");
        }
        if self.m_requested != self.candidates.len() {
            return invalid("m_requested does not match the candidate list");
        }
        if self.m_effective + self.eliminated.len() > self.m_requested {
            return invalid("more candidates accounted for than requested");
        }
        if self.eliminated.iter().any(|&j| j >= self.m_requested) {
            return invalid("eliminated index out of range");
        }
        match &self.aggregation {
            None => {
                if self.reject != (self.t > self.q) {
                    return invalid("reject flag disagrees with T > q");
                }
            }
            Some(a) => {
                if self.reject != (self.p <= self.alpha) {
                    return invalid("reject flag disagrees with the aggregated p-value");
                }
                if a.split_p_values.len() != a.splits.len() {
                    return invalid("per-split p-values and reports disagree in number");
                }
                for s in &a.splits {
                    s.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a serialized report.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: TestReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}
