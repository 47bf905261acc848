//! Projections on the Stiefel manifold `{U ∈ ℝ^{d×k} : UᵀU = I_k}` and the
//! solvers that estimate discriminative ones from fitting data.

mod manpg;
mod retraction;
mod sparse;

pub use manpg::{
    grad_l, initial_projection, manpg_fit_from, manpg_fit_projection, prox_l1,
    solve_descent_direction, DescentDirection, ManPGOptions, ManPGTrace, ObjectiveState, PairDiffs,
    ProjectionFit, TraceRow,
};
pub use retraction::{retract, retract_with, Retraction};
pub use sparse::{
    default_rho_ladder, l0_fit_projection, l0_select, prune_and_orthonormalize, L0Fit,
};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Tolerance on `‖UᵀU − I‖_F` accepted by [`ProjectionMatrix::new`].
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

/// A `d × k` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct ProjectionMatrix {
    entries: DMatrix<f64>,
}

impl ProjectionMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (d, k) = entries.shape();
        if k == 0 || k > d {
            return invalid(format!("projection must satisfy 1 <= k <= d, got {d}x{k}"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return invalid("projection has non-finite entries");
        }
        let err = orthogonality_error(&entries);
        if err > ORTHONORMALITY_TOL {
            return invalid(format!(
                "columns are not orthonormal (‖UᵀU − I‖_F = {err:.3e})"
            ));
        }
        Ok(Self { entries })
    }

    /// Caller guarantees orthonormality (e.g. output of a QR factor).
    pub(crate) fn from_orthonormal(entries: DMatrix<f64>) -> Self {
        debug_assert!(orthogonality_error(&entries) <= 1e-6);
        Self { entries }
    }

    /// Columns `e_{i}` for the given coordinate indices.
    pub fn coordinate(d: usize, indices: &[usize]) -> Result<Self> {
        let mut m = DMatrix::zeros(d, indices.len());
        for (c, &i) in indices.iter().enumerate() {
            if i >= d {
                return invalid(format!("coordinate {i} out of range for d = {d}"));
            }
            m[(i, c)] = 1.0;
        }
        Self::new(m)
    }

    /// Haar-distributed draw: orthonormalized Gaussian matrix.
    pub fn random(d: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || k > d {
            return invalid(format!("projection must satisfy 1 <= k <= d, got {d}x{k}"));
        }
        let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(Self::from_orthonormal(orthonormal_factor(g)))
    }

    pub fn d(&self) -> usize {
        self.entries.nrows()
    }

    pub fn k(&self) -> usize {
        self.entries.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|v| v.abs()).sum()
    }

    /// Number of exactly nonzero entries.
    pub fn l0_norm(&self) -> usize {
        self.entries.iter().filter(|v| **v != 0.0).count()
    }

    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.entries)
    }
}

impl TryFrom<DMatrix<f64>> for ProjectionMatrix {
    type Error = crate::Error;

    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        Self::new(m)
    }
}

impl From<ProjectionMatrix> for DMatrix<f64> {
    fn from(u: ProjectionMatrix) -> Self {
        u.entries
    }
}

/// Implied ℓ1 constraint level `τ = ‖U‖₁` of a penalized solution.
pub fn l1_norm_of(u: &ProjectionMatrix) -> f64 {
    u.l1_norm()
}

pub(crate) fn orthogonality_error(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let k = g.nrows();
    (g - DMatrix::<f64>::identity(k, k)).norm()
}

/// `qf(A)`: the thin QR factor with a nonnegative `R` diagonal, or `None`
/// when `A` is numerically rank deficient.
pub(crate) fn qf(a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    let rmax = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for c in 0..q.ncols() {
        let rc = r[(c, c)];
        if rc.abs() <= 1e-12 * rmax.max(scale) {
            return None;
        }
        if rc < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    Some(q)
}

/// Orthonormal factor of `A`: `qf(A)` when full rank, else the polar factor
/// `W Zᵀ` of the thin SVD `A = W S Zᵀ`.
pub(crate) fn orthonormal_factor(a: DMatrix<f64>) -> DMatrix<f64> {
    if let Some(q) = qf(a.clone()) {
        return q;
    }
    polar_factor(a)
}

pub(crate) fn polar_factor(a: DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = a.shape();
    let svd = a.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(w), Some(zt)) if orthogonality_error(&(&w * &zt)) <= 1e-10 => w * zt,
        _ => DMatrix::identity(d, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constructor_checks() {
        assert!(ProjectionMatrix::new(DMatrix::identity(3, 2)).is_ok());
        assert!(ProjectionMatrix::new(DMatrix::from_element(2, 1, 1.0)).is_err());
        assert!(ProjectionMatrix::new(DMatrix::identity(2, 3)).is_err());
    }

    #[test]
    fn l1_norm_examples() {
        let u = ProjectionMatrix::coordinate(5, &[0, 2, 4]).unwrap();
        assert_eq!(l1_norm_of(&u), 3.0);
        let d = 9;
        let u =
            ProjectionMatrix::new(DMatrix::from_element(d, 1, 1.0 / (d as f64).sqrt())).unwrap();
        assert!((l1_norm_of(&u) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = ProjectionMatrix::random(7, 3, &mut rng).unwrap();
        assert!(u.orthogonality_error() < 1e-12);
    }

    #[test]
    fn qf_sign_convention() {
        let a = DMatrix::from_row_slice(3, 2, &[-2.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let q = qf(a).unwrap();
        assert_eq!(
            q,
            DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).map(|v: f64| v)
        );
        assert!(qf(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).is_none());
    }
}
