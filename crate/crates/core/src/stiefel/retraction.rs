use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{orthonormal_factor, polar_factor, qf, ProjectionMatrix};

/// Retraction used to map a tangent step back onto the manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retraction {
    /// `qf(U + rV)` with a positive `R` diagonal.
    #[default]
    Qr,
    /// Polar factor of `U + rV`.
    Polar,
    /// Exponential map along the geodesic with initial velocity `V`.
    Exponential,
}

/// QR-based retraction `Retr_U(rV)`.
pub fn retract(u: &ProjectionMatrix, v: &DMatrix<f64>, r: f64) -> ProjectionMatrix {
    retract_with(Retraction::Qr, u, v, r)
}

pub fn retract_with(
    kind: Retraction,
    u: &ProjectionMatrix,
    v: &DMatrix<f64>,
    r: f64,
) -> ProjectionMatrix {
    if r == 0.0 || v.iter().all(|x| *x == 0.0) {
        return u.clone();
    }
    let um = u.as_matrix();
    let moved = um + v * r;
    let out = match kind {
        Retraction::Qr => match qf(moved.clone()) {
            Some(q) => q,
            None => polar_factor(moved),
        },
        Retraction::Polar => polar_factor(moved),
        Retraction::Exponential => exponential(um, v, r),
    };
    ProjectionMatrix::from_orthonormal(out)
}

/// `[U Q] exp(r [[UᵀV, −Rᵀ], [R, 0]]) [I; 0]` with `QR = (I − UUᵀ)V`.
fn exponential(u: &DMatrix<f64>, v: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let (d, k) = u.shape();
    let a = u.transpose() * v;
    let normal = v - u * &a;
    let qr = normal.clone().qr();
    let q = qr.q();
    let rr = qr.r();
    let mut block = DMatrix::zeros(2 * k, 2 * k);
    block.view_mut((0, 0), (k, k)).copy_from(&(&a * r));
    block
        .view_mut((0, k), (k, k))
        .copy_from(&(-rr.transpose() * r));
    block.view_mut((k, 0), (k, k)).copy_from(&(&rr * r));
    let e = block.exp();
    let mut basis = DMatrix::zeros(d, 2 * k);
    basis.view_mut((0, 0), (d, k)).copy_from(u);
    basis.view_mut((0, k), (d, k)).copy_from(&q);
    let out = basis * e.view((0, 0), (2 * k, k));
    // Round-off in exp accumulates; re-orthonormalize without changing the span.
    orthonormal_factor(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tangent(u: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
        let s = u.transpose() * g;
        let sym = (&s + s.transpose()) * 0.5;
        g - u * sym
    }

    #[test]
    fn zero_step_is_identity() {
        let u = ProjectionMatrix::coordinate(4, &[1, 3]).unwrap();
        let v = DMatrix::from_element(4, 2, 0.3);
        assert_eq!(retract(&u, &DMatrix::zeros(4, 2), 1.0), u);
        assert_eq!(retract(&u, &v, 0.0), u);
    }

    #[test]
    fn planar_step() {
        let u = ProjectionMatrix::coordinate(2, &[0]).unwrap();
        let v = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let r = 0.01;
        let out = retract(&u, &v, r);
        let m = out.as_matrix();
        let theta = r.atan();
        assert!((m[(0, 0)] - theta.cos()).abs() < 1e-12);
        assert!((m[(1, 0)] - theta.sin()).abs() < 1e-12);
        assert!(out.orthogonality_error() < 1e-12);
    }

    #[test]
    fn first_order_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = ProjectionMatrix::random(5, 2, &mut rng).unwrap();
        let g = DMatrix::from_fn(5, 2, |_, _| StandardNormal.sample(&mut rng));
        let v = tangent(u.as_matrix(), &g);
        for kind in [Retraction::Qr, Retraction::Polar, Retraction::Exponential] {
            let mut prev: Option<f64> = None;
            for r in [1e-1, 5e-2, 2.5e-2, 1.25e-2, 1e-3, 1e-4] {
                let out = retract_with(kind, &u, &v, r);
                assert!(out.orthogonality_error() < 1e-10);
                let err = (out.as_matrix() - (u.as_matrix() + &v * r)).norm();
                assert!(
                    err <= 10.0 * r * r * v.norm_squared(),
                    "{kind:?} r={r} err={err}"
                );
                if let Some(p) = prev {
                    assert!(err < p);
                }
                prev = Some(err);
            }
        }
    }

    #[test]
    fn rank_deficient_falls_back() {
        let u = ProjectionMatrix::coordinate(3, &[0, 1]).unwrap();
        // U + V has a zero column.
        let v = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let out = retract(&u, &v, 1.0);
        assert!(out.orthogonality_error() < 1e-10);
    }
}
