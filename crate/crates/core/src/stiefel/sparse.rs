//! ℓ0-constrained projections: sequential ℓ1 fits followed by repeated
//! hard-thresholding and re-orthonormalization.

use nalgebra::DMatrix;

use super::{manpg_fit_projection, qf, ManPGOptions, ProjectionFit, ProjectionMatrix};
use crate::error::{invalid, Result};
use crate::transport::{empirical_projected_w1, wasserstein1_1d};
use crate::Sample;

/// Default number of prune / re-orthonormalize passes.
pub const PRUNE_ROUNDS: usize = 5;

/// Outcome of the ℓ0 selection over a penalty ladder.
#[derive(Debug, Clone)]
pub struct L0Fit {
    pub u: ProjectionMatrix,
    /// Fit-data projected W₁ at `u`.
    pub value: f64,
    /// Penalty of the winning ladder entry; `None` for the fallback.
    pub rho: Option<f64>,
    pub budget: usize,
    /// `(ρ, value)` for every feasible ladder entry, in ladder order.
    pub ladder_values: Vec<(f64, f64)>,
    /// Set when no ladder entry survived and coordinates were selected instead.
    pub fallback: bool,
}

fn check_budget(d: usize, k: usize, budget: usize) -> Result<()> {
    if budget < k || budget > k * d {
        return invalid(format!(
            "sparsity budget must satisfy k <= budget <= k*d (k = {k}, d = {d}, budget = {budget})"
        ));
    }
    Ok(())
}

/// Entries ordered by decreasing magnitude, ties to the smaller `(row, col)`.
fn ranked_entries(m: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let mut out: Vec<(usize, usize, f64)> = (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
        .map(|(r, c)| (r, c, m[(r, c)]))
        .collect();
    out.sort_by(|a, b| {
        b.2.abs()
            .total_cmp(&a.2.abs())
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    out
}

fn keep_top(m: &DMatrix<f64>, budget: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for &(r, c, v) in ranked_entries(m).iter().take(budget) {
        out[(r, c)] = v;
    }
    out
}

/// `qf` applied to the rows that carry any nonzero, leaving other rows exactly zero.
fn qf_on_support(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let rows: Vec<usize> = (0..m.nrows())
        .filter(|&r| m.row(r).iter().any(|v| *v != 0.0))
        .collect();
    if rows.len() < m.ncols() {
        return None;
    }
    let q = qf(m.select_rows(rows.iter()))?;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(r).copy_from(&q.row(i));
    }
    Some(out)
}

/// Builds a matrix with at most `budget` nonzeros whose columns live on
/// disjoint rows, which makes it exactly orthonormal after column scaling.
/// Each column first receives its largest entry on a free row; remaining
/// slots go to the largest entries whose row is free or already owned by the
/// same column.
fn disjoint_support(m: &DMatrix<f64>, budget: usize) -> DMatrix<f64> {
    let (d, k) = m.shape();
    let ranked = ranked_entries(m);
    let mut owner: Vec<Option<usize>> = vec![None; d];
    let mut out = DMatrix::zeros(d, k);
    let mut used = 0;
    for c in 0..k {
        let &(r, _, v) = ranked
            .iter()
            .find(|&&(r, cc, _)| cc == c && owner[r].is_none())
            .expect("k <= d leaves a free row for every column");
        owner[r] = Some(c);
        out[(r, c)] = if v == 0.0 { 1.0 } else { v };
        used += 1;
    }
    for &(r, c, v) in &ranked {
        if used >= budget || v == 0.0 {
            break;
        }
        if out[(r, c)] != 0.0 {
            continue;
        }
        if owner[r].is_none_or(|o| o == c) {
            owner[r] = Some(c);
            out[(r, c)] = v;
            used += 1;
        }
    }
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        col /= n;
    }
    out
}

/// Keeps the `budget` largest-magnitude entries and re-orthonormalizes, for
/// `rounds` passes; if the result is still too dense, finishes with a
/// disjoint-support selection that is orthonormal by construction.
pub fn prune_and_orthonormalize(
    u: &ProjectionMatrix,
    budget: usize,
    rounds: usize,
) -> Result<ProjectionMatrix> {
    check_budget(u.d(), u.k(), budget)?;
    if u.l0_norm() <= budget {
        return Ok(u.clone());
    }
    let mut cur = u.as_matrix().clone();
    for _ in 0..rounds {
        let pruned = keep_top(&cur, budget);
        match qf_on_support(&pruned) {
            Some(q) => {
                let nnz = q.iter().filter(|v| **v != 0.0).count();
                cur = q;
                if nnz <= budget {
                    return Ok(ProjectionMatrix::from_orthonormal(cur));
                }
            }
            None => break,
        }
    }
    Ok(ProjectionMatrix::from_orthonormal(disjoint_support(
        &cur, budget,
    )))
}

/// Eight log-spaced penalties from `1e-3` up to the largest per-coordinate
/// root-mean-square pairwise difference `sqrt(mean_ij (x_ia − y_ja)²)`.
pub fn default_rho_ladder(x: &Sample, y: &Sample) -> Vec<f64> {
    const LOW: f64 = 1e-3;
    const COUNT: usize = 8;
    let (n1, n2) = (x.nrows() as f64, y.nrows() as f64);
    let mut high = 0.0f64;
    for a in 0..x.ncols().min(y.ncols()) {
        let (cx, cy) = (x.column(a), y.column(a));
        let mean_sq = cx.norm_squared() / n1 + cy.norm_squared() / n2
            - 2.0 * (cx.sum() / n1) * (cy.sum() / n2);
        high = high.max(mean_sq.max(0.0).sqrt());
    }
    if !(high > LOW) || !high.is_finite() {
        return vec![LOW];
    }
    let (la, lb) = (LOW.ln(), high.ln());
    (0..COUNT)
        .map(|i| (la + (lb - la) * i as f64 / (COUNT - 1) as f64).exp())
        .collect()
}

/// Prunes each ladder fit to `budget` nonzeros and keeps the one with the
/// largest fit-data projected W₁ (earliest wins ties).
pub fn l0_select(
    x: &Sample,
    y: &Sample,
    fits: &[ProjectionFit],
    k: usize,
    budget: usize,
) -> Result<L0Fit> {
    check_budget(x.ncols(), k, budget)?;
    let mut best: Option<(ProjectionMatrix, f64, f64)> = None;
    let mut ladder_values = Vec::with_capacity(fits.len());
    for fit in fits {
        if fit.u.k() != k || fit.u.d() != x.ncols() {
            return invalid("ladder fit has the wrong shape");
        }
        let Ok(pruned) = prune_and_orthonormalize(&fit.u, budget, PRUNE_ROUNDS) else {
            continue;
        };
        let Ok(value) = empirical_projected_w1(x, y, &pruned) else {
            continue;
        };
        if !value.is_finite() {
            continue;
        }
        ladder_values.push((fit.rho, value));
        if best.as_ref().is_none_or(|b| value > b.1) {
            best = Some((pruned, value, fit.rho));
        }
    }
    match best {
        Some((u, value, rho)) => Ok(L0Fit {
            u,
            value,
            rho: Some(rho),
            budget,
            ladder_values,
            fallback: false,
        }),
        None => coordinate_fallback(x, y, k, budget),
    }
}

/// Selects the `k` coordinates with the largest marginal W₁.
fn coordinate_fallback(x: &Sample, y: &Sample, k: usize, budget: usize) -> Result<L0Fit> {
    let d = x.ncols();
    let mut scores = Vec::with_capacity(d);
    for a in 0..d {
        let xs: Vec<f64> = x.column(a).iter().copied().collect();
        let ys: Vec<f64> = y.column(a).iter().copied().collect();
        scores.push((a, wasserstein1_1d(&xs, &ys)?));
    }
    scores.sort_by(|p, q| q.1.total_cmp(&p.1).then(p.0.cmp(&q.0)));
    let mut idx: Vec<usize> = scores.iter().take(k).map(|s| s.0).collect();
    idx.sort_unstable();
    let u = ProjectionMatrix::coordinate(d, &idx)?;
    let value = empirical_projected_w1(x, y, &u)?;
    Ok(L0Fit {
        u,
        value,
        rho: None,
        budget,
        ladder_values: Vec::new(),
        fallback: true,
    })
}

/// Fits the penalized projection for every `ρ` in the ladder, then prunes
/// and selects as in [`l0_select`]. Ladder entries whose fit fails are skipped.
pub fn l0_fit_projection(
    x: &Sample,
    y: &Sample,
    k: usize,
    budget: usize,
    ladder: &[f64],
    opts: &ManPGOptions,
) -> Result<L0Fit> {
    if ladder.is_empty() {
        return invalid("penalty ladder is empty");
    }
    if k == 0 || k > x.ncols() {
        return invalid(format!(
            "projection dimension must satisfy 1 <= k <= d, got k = {k}"
        ));
    }
    check_budget(x.ncols(), k, budget)?;
    let fits: Vec<ProjectionFit> = ladder
        .iter()
        .filter_map(|&rho| manpg_fit_projection(x, y, k, rho, opts).ok())
        .collect();
    l0_select(x, y, &fits, k, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, shift: &[f64], rng: &mut ChaCha8Rng) -> Sample {
        DMatrix::from_fn(n, d, |_, c| rng.sample::<f64, _>(StandardNormal) + shift[c])
    }

    #[test]
    fn inactive_budget_leaves_u_unchanged() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let u = ProjectionMatrix::random(6, 2, &mut r).unwrap();
        let out = prune_and_orthonormalize(&u, 12, PRUNE_ROUNDS).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn budget_k_selects_coordinates() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let u = ProjectionMatrix::random(7, 3, &mut r).unwrap();
            let out = prune_and_orthonormalize(&u, 3, PRUNE_ROUNDS).unwrap();
            let mut rows = Vec::new();
            for col in out.as_matrix().column_iter() {
                let nz: Vec<usize> = (0..7).filter(|&i| col[i] != 0.0).collect();
                assert_eq!(nz.len(), 1);
                assert_eq!(col[nz[0]].abs(), 1.0);
                rows.push(nz[0]);
            }
            rows.sort_unstable();
            rows.dedup();
            assert_eq!(rows.len(), 3);
        }
    }

    #[test]
    fn output_is_feasible_for_every_budget() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for &(d, k) in &[(5usize, 1usize), (8, 2), (10, 3), (4, 4)] {
            for _ in 0..5 {
                let u = ProjectionMatrix::random(d, k, &mut r).unwrap();
                for budget in k..=k * d {
                    let out = prune_and_orthonormalize(&u, budget, PRUNE_ROUNDS).unwrap();
                    assert!(out.orthogonality_error() <= 1e-8);
                    assert!(out.l0_norm() <= budget, "d {d} k {k} budget {budget}");
                }
            }
        }
    }

    #[test]
    fn single_column_keeps_largest_entries() {
        let u = ProjectionMatrix::new(DMatrix::from_column_slice(3, 1, &[0.8, 0.0, 0.6])).unwrap();
        let out = prune_and_orthonormalize(&u, 1, PRUNE_ROUNDS).unwrap();
        assert_eq!(out.as_matrix().as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let s = 0.5f64;
        let u = ProjectionMatrix::new(DMatrix::from_column_slice(4, 1, &[s, -s, s, s])).unwrap();
        let out = prune_and_orthonormalize(&u, 2, PRUNE_ROUNDS).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let expect = [h, -h, 0.0, 0.0];
        for (a, b) in out.as_matrix().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_range_budget() {
        let u = ProjectionMatrix::coordinate(3, &[0, 1]).unwrap();
        assert!(prune_and_orthonormalize(&u, 1, 5).is_err());
        assert!(prune_and_orthonormalize(&u, 7, 5).is_err());
    }

    #[test]
    fn ladder_is_log_spaced() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(20, 3, &[2.0, 0.0, 0.0], &mut r);
        let y = gaussian(20, 3, &[0.0; 3], &mut r);
        let ladder = default_rho_ladder(&x, &y);
        assert_eq!(ladder.len(), 8);
        assert!((ladder[0] - 1e-3).abs() < 1e-15);
        let ratio = ladder[1] / ladder[0];
        for w in ladder.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-9);
        }
        let direct = (0..20)
            .flat_map(|i| (0..20).map(move |j| (i, j)))
            .map(|(i, j)| (x[(i, 0)] - y[(j, 0)]).powi(2))
            .sum::<f64>()
            / 400.0;
        assert!((ladder[7] - direct.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn dense_budget_and_zero_penalty_match_manpg() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(20, 3, &[1.0, 0.5, 0.0], &mut r);
        let y = gaussian(20, 3, &[0.0; 3], &mut r);
        let opts = ManPGOptions::default();
        let plain = manpg_fit_projection(&x, &y, 2, 0.0, &opts).unwrap();
        let l0 = l0_fit_projection(&x, &y, 2, 6, &[0.0], &opts).unwrap();
        assert_eq!(l0.u, plain.u);
        assert!(!l0.fallback);
    }

    #[test]
    fn planar_shift_selects_first_axis() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian(40, 2, &[2.0, 0.0], &mut r);
        let y = gaussian(40, 2, &[0.0, 0.0], &mut r);
        let fit = l0_fit_projection(
            &x,
            &y,
            1,
            1,
            &default_rho_ladder(&x, &y),
            &ManPGOptions::default(),
        )
        .unwrap();
        let e1 = empirical_projected_w1(&x, &y, &ProjectionMatrix::coordinate(2, &[0]).unwrap())
            .unwrap();
        let e2 = empirical_projected_w1(&x, &y, &ProjectionMatrix::coordinate(2, &[1]).unwrap())
            .unwrap();
        assert!(e1 > e2);
        assert_eq!(fit.u.as_matrix()[(0, 0)].abs(), 1.0);
        assert_eq!(fit.value, e1);
    }

    #[test]
    fn selection_is_argmax_over_ladder() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian(25, 5, &[0.8, 0.0, 0.4, 0.0, 0.0], &mut r);
        let y = gaussian(25, 5, &[0.0; 5], &mut r);
        let fit = l0_fit_projection(
            &x,
            &y,
            2,
            4,
            &default_rho_ladder(&x, &y),
            &ManPGOptions::default(),
        )
        .unwrap();
        assert!(!fit.ladder_values.is_empty());
        for &(_, v) in &fit.ladder_values {
            assert!(fit.value >= v);
        }
        assert!(fit.u.l0_norm() <= 4);
    }

    #[test]
    fn empty_ladder_falls_back_to_coordinates() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian(15, 4, &[0.0, 0.0, 3.0, 0.0], &mut r);
        let y = gaussian(15, 4, &[0.0; 4], &mut r);
        let fit = l0_select(&x, &y, &[], 1, 2).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.u, ProjectionMatrix::coordinate(4, &[2]).unwrap());
        assert!(l0_fit_projection(&x, &y, 1, 2, &[], &ManPGOptions::default()).is_err());
    }
}
