//! Alternating optimal transport / manifold proximal-gradient estimation of
//! `max_U min_π Σ π_ij ‖Uᵀ(x_i − y_j)‖ − ρ‖U‖₁` over the Stiefel manifold.
//!
//! The solver minimizes `F(U; π) = l(U; π) + h(U)` with
//! `l(U; π) = −Σ π_ij ‖Uᵀz_ij‖` and `h(U) = ρ‖U‖₁`. Each outer iteration
//! re-solves the transport plan at the current `U`, computes a descent
//! direction from the tangent-constrained proximal subproblem (solved through
//! its KKT system by semi-smooth Newton on the symmetric multiplier `Λ`), and
//! backtracks along the retraction until the sufficient-decrease test holds.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{orthogonality_error, orthonormal_factor, retract_with, ProjectionMatrix, Retraction};
use crate::error::{invalid, Error, Result};
use crate::seed::{derive_seed, tag};
use crate::transport::{euclidean_cost, solve_discrete_ot, TransportPlan};
use crate::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManPGOptions {
    /// Proximal step `γ`; `None` uses `1/L̂` with `L̂` the power-iteration
    /// estimate of `‖∇l(U₀; π₁)‖₂`.
    pub step_size: Option<f64>,
    /// Backtracking factor `ε ∈ (0, 1)`.
    pub armijo_shrink: f64,
    /// Sufficient-decrease slope `δ ∈ (0, 1)`.
    pub armijo_slope: f64,
    pub max_outer: usize,
    /// Relative change `‖U_{t+1} − U_t‖_F / (1 + ‖U_t‖_F)` at which to stop.
    pub tol: f64,
    pub newton_tol: f64,
    pub newton_max: usize,
    /// Smoothing of `‖Uᵀz‖` in the gradient, `sqrt(‖Uᵀz‖² + ε²)`.
    pub grad_smoothing: f64,
    /// Random orthonormal restarts in addition to the moment-based start.
    pub restarts: usize,
    pub retraction: Retraction,
    pub seed: u64,
}

impl Default for ManPGOptions {
    fn default() -> Self {
        Self {
            step_size: None,
            armijo_shrink: 0.5,
            armijo_slope: 1e-4,
            max_outer: 200,
            tol: 1e-5,
            newton_tol: 1e-8,
            newton_max: 50,
            grad_smoothing: 1e-12,
            restarts: 1,
            retraction: Retraction::Qr,
            seed: 0,
        }
    }
}

impl ManPGOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.step_size {
            if !(g > 0.0 && g.is_finite()) {
                return invalid("step_size must be positive");
            }
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return invalid("armijo_shrink must lie in (0, 1)");
        }
        if !(self.armijo_slope > 0.0 && self.armijo_slope < 1.0) {
            return invalid("armijo_slope must lie in (0, 1)");
        }
        if self.max_outer == 0 || self.newton_max == 0 {
            return invalid("iteration limits must be positive");
        }
        if !(self.tol > 0.0 && self.newton_tol > 0.0 && self.grad_smoothing > 0.0) {
            return invalid("tolerances must be positive");
        }
        Ok(())
    }
}

/// `F = l + h` at a point, for a fixed plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveState {
    pub f: f64,
    pub l: f64,
    pub h: f64,
}

impl ObjectiveState {
    fn new(l: f64, h: f64) -> Self {
        Self { f: l + h, l, h }
    }
}

/// One accepted outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// `F(U_t; π_{t+1})` before the step.
    pub before: ObjectiveState,
    /// `F(U_{t+1}; π_{t+1})` after the step.
    pub after: ObjectiveState,
    pub step: f64,
    pub v_norm: f64,
    pub gamma: f64,
    pub newton_converged: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ManPGTrace {
    pub rows: Vec<TraceRow>,
    /// Implied constraint level `τ = ‖Û‖₁` of the returned projection.
    pub tau: f64,
    /// Empirical projected W₁ on the fitting data at `Û`.
    pub value: f64,
    /// `value − ρ‖Û‖₁`.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Index of the winning start (0 = moment-based start).
    pub start: usize,
}

impl ManPGTrace {
    /// Tab-separated dump: `iter F l h step V_norm`, one accepted iteration per line.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.iter, r.after.f, r.after.l, r.after.h, r.step, r.v_norm
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionFit {
    pub u: ProjectionMatrix,
    pub rho: f64,
    pub trace: ManPGTrace,
}

/// Pair differences `z_ij = x_i − y_j`, generated on demand.
#[derive(Debug, Clone, Copy)]
pub struct PairDiffs<'a> {
    x: &'a Sample,
    y: &'a Sample,
}

impl<'a> PairDiffs<'a> {
    pub fn new(x: &'a Sample, y: &'a Sample) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return invalid("samples have different dimensions");
        }
        Ok(Self { x, y })
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn n1(&self) -> usize {
        self.x.nrows()
    }

    pub fn n2(&self) -> usize {
        self.y.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> DVector<f64> {
        DVector::from_fn(self.d(), |c, _| self.x[(i, c)] - self.y[(j, c)])
    }
}

/// Soft thresholding `sign(b)·max(|b| − t, 0)`, entrywise.
pub fn prox_l1(b: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    b.map(|v| soft(v, t))
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `∇l(U; π) = −Σ π_ij z_ij z_ijᵀ U / sqrt(‖Uᵀz_ij‖² + ε²)`.
pub fn grad_l(
    u: &ProjectionMatrix,
    plan: &TransportPlan,
    diffs: &PairDiffs<'_>,
    smoothing: f64,
) -> DMatrix<f64> {
    let um = u.as_matrix();
    let (d, k) = um.shape();
    let mut g = DMatrix::zeros(d, k);
    let eps2 = smoothing * smoothing;
    for (i, j, p) in plan.support() {
        let z = diffs.get(i, j);
        let w = um.tr_mul(&z);
        let nrm = (w.norm_squared() + eps2).sqrt();
        let coef = -p / nrm;
        g.ger(coef, &z, &w, 1.0);
    }
    g
}

/// `l(U; π)` with the same smoothing as the gradient.
fn smooth_part(
    px: &DMatrix<f64>,
    py: &DMatrix<f64>,
    support: &[(usize, usize, f64)],
    smoothing: f64,
) -> f64 {
    let k = px.ncols();
    let eps2 = smoothing * smoothing;
    let mut acc = 0.0;
    for &(i, j, p) in support {
        let mut s = 0.0;
        for c in 0..k {
            let t = px[(i, c)] - py[(j, c)];
            s += t * t;
        }
        acc += p * (s + eps2).sqrt();
    }
    -acc
}

/// Solution of the tangent-constrained proximal subproblem.
#[derive(Debug, Clone)]
pub struct DescentDirection {
    pub v: DMatrix<f64>,
    /// Symmetric multiplier of the tangency constraint.
    pub lambda: DMatrix<f64>,
    /// `‖VᵀU + UᵀV‖_F` at exit.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Solves `min_V ⟨G, V⟩ + ‖V‖²/(2γ) + ρ‖U + V‖₁` s.t. `VᵀU + UᵀV = 0`.
pub fn solve_descent_direction(
    u: &ProjectionMatrix,
    grad: &DMatrix<f64>,
    gamma: f64,
    rho: f64,
    opts: &ManPGOptions,
) -> DescentDirection {
    let k = u.k();
    descent_direction_from(u, grad, gamma, rho, opts, DMatrix::zeros(k, k))
}

struct KktSystem<'a> {
    u: &'a DMatrix<f64>,
    base: DMatrix<f64>,
    gamma: f64,
    threshold: f64,
}

impl KktSystem<'_> {
    /// `B(Λ) = U − γ(G − 2UΛ)`.
    fn b(&self, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        &self.base + self.u * lambda * (2.0 * self.gamma)
    }

    fn v(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        prox_l1(b, self.threshold) - self.u
    }

    fn residual(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let m = v.tr_mul(self.u);
        &m + m.transpose()
    }

    /// Generalized Jacobian of `Λ ↦ A(V(Λ))` in upper-triangular coordinates,
    /// using the 0/1 activity mask as the Clarke derivative of the prox.
    fn jacobian(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, k) = self.u.shape();
        let p = k * (k + 1) / 2;
        let mask = b.map(|v| if v.abs() > self.threshold { 1.0 } else { 0.0 });
        let mut jac = DMatrix::zeros(p, p);
        let pairs = sym_pairs(k);
        let two_gamma = 2.0 * self.gamma;
        let mut dv = DMatrix::zeros(d, k);
        for (col, &(a, bb)) in pairs.iter().enumerate() {
            dv.fill(0.0);
            // U H with H = e_a e_bᵀ + e_b e_aᵀ (or e_a e_aᵀ when a = b).
            for r in 0..d {
                dv[(r, bb)] += two_gamma * mask[(r, bb)] * self.u[(r, a)];
                if a != bb {
                    dv[(r, a)] += two_gamma * mask[(r, a)] * self.u[(r, bb)];
                }
            }
            let m = dv.tr_mul(self.u);
            for (row, &(i, j)) in pairs.iter().enumerate() {
                jac[(row, col)] = m[(i, j)] + m[(j, i)];
            }
        }
        jac
    }
}

fn sym_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in i..k {
            out.push((i, j));
        }
    }
    out
}

fn upper(m: &DMatrix<f64>, pairs: &[(usize, usize)]) -> DVector<f64> {
    DVector::from_iterator(pairs.len(), pairs.iter().map(|&(i, j)| m[(i, j)]))
}

fn sym_from(vec: &DVector<f64>, pairs: &[(usize, usize)], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        m[(i, j)] = vec[idx];
        m[(j, i)] = vec[idx];
    }
    m
}

const JACOBIAN_DAMPING: f64 = 1e-10;

pub(crate) fn descent_direction_from(
    u: &ProjectionMatrix,
    grad: &DMatrix<f64>,
    gamma: f64,
    rho: f64,
    opts: &ManPGOptions,
    lambda0: DMatrix<f64>,
) -> DescentDirection {
    let um = u.as_matrix();
    let k = um.ncols();
    let sys = KktSystem {
        u: um,
        base: um - grad * gamma,
        gamma,
        threshold: gamma * rho,
    };
    let pairs = sym_pairs(k);
    let mut lambda = lambda0;
    let mut b = sys.b(&lambda);
    let mut v = sys.v(&b);
    let mut e = sys.residual(&v);
    let mut res = e.norm();
    let mut iterations = 0;
    while res > opts.newton_tol && iterations < opts.newton_max {
        iterations += 1;
        let jac = sys.jacobian(&b);
        let rhs = -upper(&e, &pairs);
        let step = match jac.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                let p = pairs.len();
                let damped = jac + DMatrix::<f64>::identity(p, p) * JACOBIAN_DAMPING;
                match damped.lu().solve(&rhs) {
                    Some(s) if s.iter().all(|v| v.is_finite()) => s,
                    _ => break,
                }
            }
        };
        let dl = sym_from(&step, &pairs, k);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &lambda + &dl * t;
            let cb = sys.b(&cand);
            let cv = sys.v(&cb);
            let ce = sys.residual(&cv);
            let cres = ce.norm();
            if cres < res * (1.0 - 1e-4 * t) || cres <= opts.newton_tol {
                lambda = cand;
                b = cb;
                v = cv;
                e = ce;
                res = cres;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    DescentDirection {
        v,
        lambda,
        residual: res,
        converged: res <= opts.newton_tol,
        iterations,
    }
}

/// Moment-based starting point: leading left singular vectors of
/// `[x̄ − ȳ | √|λ₁| v₁ … √|λ_k| v_k]`, where `(λ_i, v_i)` are the eigenpairs of
/// `Ĉov(X) − Ĉov(Y)` with the largest `|λ|`.
pub fn initial_projection(x: &Sample, y: &Sample, k: usize) -> Result<ProjectionMatrix> {
    let d = x.ncols();
    if k == 0 || k > d {
        return invalid(format!(
            "projection dimension must satisfy 1 <= k <= d, got k = {k}"
        ));
    }
    let mx = x.row_mean();
    let my = y.row_mean();
    let cx = centered_cov(x, &mx);
    let cy = centered_cov(y, &my);
    let eig = (cx - cy).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let mut heur = DMatrix::zeros(d, k + 1);
    for c in 0..d {
        heur[(c, 0)] = mx[c] - my[c];
    }
    for (col, &idx) in order.iter().take(k).enumerate() {
        let s = eig.eigenvalues[idx].abs().sqrt();
        for c in 0..d {
            heur[(c, col + 1)] = s * eig.eigenvectors[(c, idx)];
        }
    }
    let svd = heur.svd(true, false);
    let cand = svd
        .u
        .map(|w| w.columns(0, k).into_owned())
        .filter(|w| w.iter().all(|v| v.is_finite()) && orthogonality_error(w) <= 1e-8);
    let m = match cand {
        Some(w) => orthonormal_factor(w),
        None => DMatrix::identity(d, k),
    };
    ProjectionMatrix::new(m)
}

fn centered_cov(x: &Sample, mean: &nalgebra::RowDVector<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean;
    }
    c.tr_mul(&c) / n
}

fn check_fit_inputs(x: &Sample, y: &Sample, k: usize, rho: f64) -> Result<()> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return invalid("projection fitting needs at least two points per sample");
    }
    if x.ncols() != y.ncols() {
        return invalid("samples have different dimensions");
    }
    if k == 0 || k > x.ncols() {
        return invalid(format!(
            "projection dimension must satisfy 1 <= k <= d (k = {k}, d = {})",
            x.ncols()
        ));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return invalid("penalty must be finite and nonnegative");
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return invalid("fitting data must be finite");
    }
    Ok(())
}

/// Fits `Û` for penalty `ρ` from the moment-based start plus
/// `opts.restarts` random starts, keeping the best fit-data objective.
pub fn manpg_fit_projection(
    x: &Sample,
    y: &Sample,
    k: usize,
    rho: f64,
    opts: &ManPGOptions,
) -> Result<ProjectionFit> {
    check_fit_inputs(x, y, k, rho)?;
    opts.validate()?;
    let mut starts = vec![initial_projection(x, y, k)?];
    for r in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, tag::RESTART, r as u64));
        starts.push(ProjectionMatrix::random(x.ncols(), k, &mut rng)?);
    }
    let mut best: Option<ProjectionFit> = None;
    for (idx, u0) in starts.into_iter().enumerate() {
        let mut fit = manpg_fit_from(x, y, u0, rho, opts)?;
        fit.trace.start = idx;
        let better = best
            .as_ref()
            .is_none_or(|b| fit.trace.objective > b.trace.objective);
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

struct Evaluated {
    u: ProjectionMatrix,
    plan: TransportPlan,
    /// `W₁(U) − ρ‖U‖₁`, the quantity being maximized.
    objective: f64,
}

fn evaluate(x: &Sample, y: &Sample, u: ProjectionMatrix, rho: f64) -> Result<Evaluated> {
    let px = x * u.as_matrix();
    let py = y * u.as_matrix();
    let cost = euclidean_cost(&px, &py);
    let plan = solve_discrete_ot(&cost, x.nrows(), y.nrows())?;
    let objective = plan.value - rho * u.l1_norm();
    if !objective.is_finite() {
        return Err(Error::Solver("non-finite projection objective".into()));
    }
    Ok(Evaluated { u, plan, objective })
}

/// Single run of the alternating algorithm from `u0`.
///
/// Besides the sufficient-decrease test at fixed `π`, the step `γ` is halved
/// whenever re-solving the plan shows the true objective went down, which
/// stops the iterates from bouncing across kinks of `U ↦ W₁(U)`. The best
/// iterate under the true objective is returned.
pub fn manpg_fit_from(
    x: &Sample,
    y: &Sample,
    u0: ProjectionMatrix,
    rho: f64,
    opts: &ManPGOptions,
) -> Result<ProjectionFit> {
    check_fit_inputs(x, y, u0.k(), rho)?;
    if u0.d() != x.ncols() {
        return invalid("initial projection has the wrong ambient dimension");
    }
    let diffs = PairDiffs::new(x, y)?;
    let k = u0.k();
    let mut current = evaluate(x, y, u0, rho)?;
    let mut best_u = current.u.clone();
    let mut best_obj = current.objective;
    let mut gamma: Option<f64> = opts.step_size;
    let mut lambda = DMatrix::zeros(k, k);
    let mut trace = ManPGTrace::default();
    let mut converged = false;

    for t in 0..opts.max_outer {
        trace.iterations = t + 1;
        let grad = grad_l(&current.u, &current.plan, &diffs, opts.grad_smoothing);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!(
                "non-finite gradient at iteration {t}"
            )));
        }
        let g = *gamma.get_or_insert_with(|| step_from_gradient(&grad));

        let dir = descent_direction_from(&current.u, &grad, g, rho, opts, lambda.clone());
        lambda = dir.lambda.clone();
        let v = dir.v;
        let v_norm2 = v.norm_squared();
        if v_norm2 <= 1e-30 {
            converged = true;
            break;
        }

        let support = current.plan.support();
        let um = current.u.as_matrix();
        let before = ObjectiveState::new(
            smooth_part(&(x * um), &(y * um), &support, opts.grad_smoothing),
            rho * current.u.l1_norm(),
        );
        let mut r = 1.0;
        let mut accepted = None;
        while r >= 1e-12 {
            let cand = retract_with(opts.retraction, &current.u, &v, r);
            let cm = cand.as_matrix();
            let after = ObjectiveState::new(
                smooth_part(&(x * cm), &(y * cm), &support, opts.grad_smoothing),
                rho * cand.l1_norm(),
            );
            if !after.f.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite objective at iteration {t}"
                )));
            }
            if after.f <= before.f - opts.armijo_slope * r * v_norm2 {
                accepted = Some((cand, after));
                break;
            }
            r *= opts.armijo_shrink;
        }
        let Some((next_u, after)) = accepted else {
            converged = true;
            break;
        };
        trace.rows.push(TraceRow {
            iter: t,
            before,
            after,
            step: r,
            v_norm: v_norm2.sqrt(),
            gamma: g,
            newton_converged: dir.converged,
        });

        let change = (next_u.as_matrix() - current.u.as_matrix()).norm()
            / (1.0 + current.u.as_matrix().norm());
        let prev_obj = current.objective;
        current = evaluate(x, y, next_u, rho)?;
        if current.objective > best_obj {
            best_obj = current.objective;
            best_u = current.u.clone();
        }
        if current.objective < prev_obj - 1e-12 * (1.0 + prev_obj.abs()) {
            gamma = Some(g * 0.5);
        }
        if change <= opts.tol {
            converged = true;
            break;
        }
    }

    let final_eval = evaluate(x, y, best_u, rho)?;
    trace.tau = final_eval.u.l1_norm();
    trace.value = final_eval.plan.value;
    trace.objective = final_eval.objective;
    trace.converged = converged;
    Ok(ProjectionFit {
        u: final_eval.u,
        rho,
        trace,
    })
}

/// `1/L̂` with `L̂ ≈ ‖∇l‖₂` from power iteration on `GᵀG`; falls back to 0.1.
fn step_from_gradient(grad: &DMatrix<f64>) -> f64 {
    let gtg = grad.tr_mul(grad);
    let k = gtg.nrows();
    let mut v = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    let mut sigma2 = 0.0;
    for _ in 0..50 {
        let w = &gtg * &v;
        let n = w.norm();
        if n == 0.0 || !n.is_finite() {
            break;
        }
        sigma2 = v.dot(&w);
        v = w / n;
    }
    let l = sigma2.sqrt();
    if l > 1e-12 && l.is_finite() {
        1.0 / l
    } else {
        0.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{empirical_projected_w1, pw_bruteforce};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gaussian(n: usize, d: usize, shift: &[f64], rng: &mut ChaCha8Rng) -> Sample {
        DMatrix::from_fn(n, d, |_, c| rng.sample::<f64, _>(StandardNormal) + shift[c])
    }

    fn tangent(u: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
        let s = u.transpose() * g;
        g - u * ((&s + s.transpose()) * 0.5)
    }

    #[test]
    fn prox_examples() {
        assert_eq!(prox_l1(&DMatrix::zeros(2, 2), 0.7), DMatrix::zeros(2, 2));
        let b = DMatrix::from_row_slice(1, 2, &[3.0, -0.5]);
        assert_eq!(prox_l1(&b, 1.0), DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        let b = DMatrix::from_row_slice(2, 2, &[1.5, -2.0, 0.1, 0.0]);
        assert_eq!(prox_l1(&b, 0.0), b);
    }

    #[test]
    fn gradient_single_pair() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let y = DMatrix::zeros(1, 2);
        let diffs = PairDiffs::new(&x, &y).unwrap();
        let plan = TransportPlan {
            matrix: DMatrix::from_element(1, 1, 1.0),
            value: 1.0,
        };
        let u = ProjectionMatrix::coordinate(2, &[0]).unwrap();
        let g = grad_l(&u, &plan, &diffs, 1e-12);
        assert!((g[(0, 0)] + 1.0).abs() < 1e-12);
        assert_eq!(g[(1, 0)], 0.0);

        let zero = TransportPlan {
            matrix: DMatrix::zeros(1, 1),
            value: 0.0,
        };
        assert_eq!(grad_l(&u, &zero, &diffs, 1e-12), DMatrix::zeros(2, 1));
    }

    /// Central finite differences of `l(·; π)` in the ambient space.
    fn fd_gradient(
        u: &DMatrix<f64>,
        x: &Sample,
        y: &Sample,
        plan: &TransportPlan,
        h: f64,
    ) -> DMatrix<f64> {
        let support = plan.support();
        let eval = |m: &DMatrix<f64>| smooth_part(&(x * m), &(y * m), &support, 1e-12);
        DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| {
            let mut up = u.clone();
            up[(i, j)] += h;
            let mut dn = u.clone();
            dn[(i, j)] -= h;
            (eval(&up) - eval(&dn)) / (2.0 * h)
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let d = 2 + (seed as usize % 4);
            let k = 1 + (seed as usize % d.min(3));
            let x = gaussian(6, d, &vec![0.5; d], &mut r);
            let y = gaussian(5, d, &vec![0.0; d], &mut r);
            let u = ProjectionMatrix::random(d, k, &mut r).unwrap();
            let cost = euclidean_cost(&(&x * u.as_matrix()), &(&y * u.as_matrix()));
            let plan = solve_discrete_ot(&cost, 6, 5).unwrap();
            let diffs = PairDiffs::new(&x, &y).unwrap();
            let g = grad_l(&u, &plan, &diffs, 1e-12);
            let fd = fd_gradient(u.as_matrix(), &x, &y, &plan, 1e-6);
            let rel = (&g - &fd).norm() / g.norm().max(1e-12);
            assert!(rel < 1e-5, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn zero_gradient_smooth_case() {
        let u = ProjectionMatrix::coordinate(3, &[0, 2]).unwrap();
        let dir = solve_descent_direction(
            &u,
            &DMatrix::zeros(3, 2),
            0.5,
            0.0,
            &ManPGOptions::default(),
        );
        assert!(dir.v.norm() < 1e-14);
    }

    #[test]
    fn smooth_case_matches_tangent_projection() {
        let mut r = rng(5);
        for &(d, k) in &[(4usize, 1usize), (6, 2), (8, 3)] {
            let u = ProjectionMatrix::random(d, k, &mut r).unwrap();
            let g = DMatrix::from_fn(d, k, |_, _| r.sample::<f64, _>(StandardNormal));
            let gamma = 0.3;
            let dir = solve_descent_direction(&u, &g, gamma, 0.0, &ManPGOptions::default());
            let expect = tangent(u.as_matrix(), &g) * (-gamma);
            assert!((&dir.v - &expect).norm() < 1e-10);
            assert!(dir.converged);
        }
    }

    #[test]
    fn penalized_direction_matches_grid_oracle() {
        // k = 1, d = 2: the tangent space at U is spanned by U⊥.
        let theta: f64 = 0.4;
        let u = ProjectionMatrix::new(DMatrix::from_column_slice(
            2,
            1,
            &[theta.cos(), theta.sin()],
        ))
        .unwrap();
        let perp = DMatrix::from_column_slice(2, 1, &[-theta.sin(), theta.cos()]);
        let g = DMatrix::from_column_slice(2, 1, &[-0.8, 0.3]);
        let (gamma, rho) = (0.7, 0.25);
        let sub = |v: &DMatrix<f64>| {
            g.dot(v) + v.norm_squared() / (2.0 * gamma) + rho * (u.as_matrix() + v).abs().sum()
        };
        let mut best = (f64::INFINITY, 0.0);
        let n = 400_000;
        for i in 0..=n {
            let t = -2.0 + 4.0 * i as f64 / n as f64;
            let val = sub(&(&perp * t));
            if val < best.0 {
                best = (val, t);
            }
        }
        let dir = solve_descent_direction(&u, &g, gamma, rho, &ManPGOptions::default());
        assert!(dir.converged);
        let t_hat = dir.v.dot(&perp);
        assert!(
            (t_hat - best.1).abs() < 1e-4,
            "newton {t_hat} grid {}",
            best.1
        );
        assert!(sub(&dir.v) <= best.0 + 1e-10);
        assert!(best.0 - sub(&dir.v) < 1e-4);
    }

    #[test]
    fn penalized_direction_satisfies_kkt() {
        let mut r = rng(21);
        let (d, k) = (7, 3);
        let u = ProjectionMatrix::random(d, k, &mut r).unwrap();
        let g = DMatrix::from_fn(d, k, |_, _| r.sample::<f64, _>(StandardNormal));
        let opts = ManPGOptions::default();
        let dir = solve_descent_direction(&u, &g, 0.4, 0.3, &opts);
        assert!(dir.converged, "residual {}", dir.residual);
        let m = dir.v.tr_mul(u.as_matrix());
        assert!((&m + m.transpose()).norm() <= opts.newton_tol);
    }

    #[test]
    fn recovers_mean_shift_direction() {
        let mut r = rng(7);
        let x = gaussian(40, 2, &[1.5, 0.0], &mut r);
        let y = gaussian(40, 2, &[0.0, 0.0], &mut r);
        let fit = manpg_fit_projection(&x, &y, 1, 0.0, &ManPGOptions::default()).unwrap();
        let (brute, _) = pw_bruteforce(&x, &y, 1, 2000).unwrap();
        assert!(
            fit.trace.value >= brute - 1e-3,
            "{} vs {brute}",
            fit.trace.value
        );
        assert!(fit.u.as_matrix()[(0, 0)].abs() >= 0.99);
        assert!(fit.u.orthogonality_error() <= 1e-8);
    }

    #[test]
    fn heavy_penalty_gives_coordinate_columns() {
        let mut r = rng(8);
        let x = gaussian(30, 5, &[1.0, 0.5, 0.0, 0.0, 0.3], &mut r);
        let y = gaussian(30, 5, &[0.0; 5], &mut r);
        let maxdist = (0..30)
            .flat_map(|i| (0..30).map(move |j| (i, j)))
            .map(|(i, j)| (x.row(i) - y.row(j)).norm())
            .fold(0.0f64, f64::max);
        let fit = manpg_fit_projection(&x, &y, 2, maxdist, &ManPGOptions::default()).unwrap();
        assert!(fit.u.l1_norm() <= 2.0 + 1e-6, "‖U‖₁ = {}", fit.u.l1_norm());
    }

    #[test]
    fn identical_samples_give_zero_value() {
        let mut r = rng(9);
        let x = gaussian(12, 3, &[0.0; 3], &mut r);
        let fit = manpg_fit_projection(&x, &x, 2, 0.0, &ManPGOptions::default()).unwrap();
        let v = empirical_projected_w1(&x, &x, &fit.u).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn trace_invariants() {
        let mut r = rng(10);
        let x = gaussian(25, 6, &[0.8, 0.0, 0.0, 0.0, 0.0, 0.4], &mut r);
        let y = gaussian(25, 6, &[0.0; 6], &mut r);
        let opts = ManPGOptions::default();
        for rho in [0.0, 0.05, 0.5] {
            let fit = manpg_fit_projection(&x, &y, 2, rho, &opts).unwrap();
            assert!(fit.u.orthogonality_error() <= 1e-8);
            assert!((fit.trace.tau - fit.u.l1_norm()).abs() < 1e-15);
            for row in &fit.trace.rows {
                let v2 = row.v_norm * row.v_norm;
                assert!(row.after.f <= row.before.f - opts.armijo_slope * row.step * v2);
                assert!(row.after.f <= row.before.f);
                assert_eq!(row.after.f, row.after.l + row.after.h);
            }
        }
    }

    #[test]
    fn unpenalized_value_dominates_penalized() {
        for seed in 0..4 {
            let mut r = rng(100 + seed);
            let x = gaussian(30, 4, &[0.7, 0.3, 0.0, 0.0], &mut r);
            let y = gaussian(30, 4, &[0.0; 4], &mut r);
            let opts = ManPGOptions {
                restarts: 3,
                seed,
                ..Default::default()
            };
            let free = manpg_fit_projection(&x, &y, 1, 0.0, &opts)
                .unwrap()
                .trace
                .value;
            for rho in [0.01, 0.1, 1.0] {
                let pen = manpg_fit_projection(&x, &y, 1, rho, &opts)
                    .unwrap()
                    .trace
                    .value;
                assert!(free >= pen - 1e-6, "seed {seed} rho {rho}: {free} < {pen}");
            }
        }
    }

    #[test]
    fn trace_dump_has_one_line_per_iteration() {
        let mut r = rng(12);
        let x = gaussian(15, 3, &[1.0, 0.0, 0.0], &mut r);
        let y = gaussian(15, 3, &[0.0; 3], &mut r);
        let fit = manpg_fit_projection(&x, &y, 1, 0.1, &ManPGOptions::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("pwtest-trace-{}", std::process::id()));
        fit.trace.write_tsv(&dir).unwrap();
        let text = std::fs::read_to_string(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(text.lines().count(), fit.trace.rows.len());
        for line in text.lines() {
            assert_eq!(line.split('\t').count(), 6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DMatrix::zeros(1, 3);
        let y = DMatrix::zeros(4, 3);
        assert!(manpg_fit_projection(&x, &y, 1, 0.0, &ManPGOptions::default()).is_err());
        let x = DMatrix::zeros(4, 3);
        assert!(manpg_fit_projection(&x, &y, 4, 0.0, &ManPGOptions::default()).is_err());
        assert!(manpg_fit_projection(&x, &y, 1, -1.0, &ManPGOptions::default()).is_err());
        let bad = ManPGOptions {
            armijo_shrink: 1.5,
            ..Default::default()
        };
        assert!(manpg_fit_projection(&x, &y, 1, 0.0, &bad).is_err());
    }
}
