//! Simulation models, permutation baselines and Monte Carlo power studies.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pipeline::{multi_split_test, TestConfig};
use crate::seed::{derive_seed, tag};
use crate::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    /// Mean shift with AR(0.5) covariance.
    A,
    /// Variance shift on the leading coordinates.
    B,
    /// Same mean and variance, different marginals on `s = [5β]` coordinates.
    C,
    /// Same marginals, different dependence on an `s = [100β]` block.
    D,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Model::A => "A",
            Model::B => "B",
            Model::C => "C",
            Model::D => "D",
        };
        f.write_str(c)
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Model::A),
            "B" => Ok(Model::B),
            "C" => Ok(Model::C),
            "D" => Ok(Model::D),
            other => invalid(format!("unknown model '{other}' (expected A, B, C or D)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: Model,
    pub beta: f64,
    pub d: usize,
    pub n_x: usize,
    pub n_y: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Rounding to the nearest integer, halves away from zero.
pub fn round_half_away(v: f64) -> usize {
    v.round().max(0.0) as usize
}

/// Number of affected coordinates for Models C and D (0 for A and B).
pub fn sparsity(model: Model, beta: f64) -> usize {
    match model {
        Model::C => round_half_away(5.0 * beta),
        Model::D => round_half_away(100.0 * beta),
        Model::A | Model::B => 0,
    }
}

/// Model A mean of `Y`: `μ_j = 0.8β j⁻³`.
pub fn model_a_mean(beta: f64, d: usize) -> Vec<f64> {
    (1..=d).map(|j| 0.8 * beta / (j as f64).powi(3)).collect()
}

/// Model B extra variance: `8β j⁻³`.
pub fn model_b_extra_variance(beta: f64, d: usize) -> Vec<f64> {
    (1..=d).map(|j| 8.0 * beta / (j as f64).powi(3)).collect()
}

/// `n` rows with covariance `r^{|i−j|}` via `x_j = r x_{j−1} + √(1−r²) z_j`.
pub fn ar1_gaussian_sample(d: usize, r: f64, n: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ar1_with(d, r, n, &mut rng)
}

fn ar1_with(d: usize, r: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if !(r.abs() < 1.0) {
        return invalid("AR(1) correlation must satisfy |r| < 1");
    }
    let c = (1.0 - r * r).sqrt();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let mut prev = 0.0;
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let v = if j == 0 { z } else { r * prev + c * z };
            out[(i, j)] = v;
            prev = v;
        }
    }
    Ok(out)
}

/// `½N(−1, I) + ½N(1, I)` on `d` coordinates, one sign per row.
fn mixture(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for j in 0..d {
            out[(i, j)] = s + rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

fn check_spec(spec: &ModelSpec) -> Result<()> {
    if !(spec.beta >= 0.0 && spec.beta.is_finite()) {
        return invalid("beta must be finite and nonnegative");
    }
    if spec.d == 0 || spec.n_x == 0 || spec.n_y == 0 {
        return invalid("d, n_x and n_y must be positive");
    }
    let s = sparsity(spec.model, spec.beta);
    if s > spec.d {
        return invalid(format!(
            "model {} with beta {} needs s = {s} > d = {}",
            spec.model, spec.beta, spec.d
        ));
    }
    Ok(())
}

/// Draws `(X, Y)` from the model; `X` and `Y` use independent streams.
pub fn gen_model(spec: &ModelSpec) -> Result<(Sample, Sample)> {
    check_spec(spec)?;
    let mut rx = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, tag::MODEL, 0));
    let mut ry = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, tag::MODEL, 1));
    let (d, nx, ny, beta) = (spec.d, spec.n_x, spec.n_y, spec.beta);
    match spec.model {
        Model::A => {
            let x = ar1_with(d, 0.5, nx, &mut rx)?;
            let mut y = ar1_with(d, 0.5, ny, &mut ry)?;
            let mu = model_a_mean(beta, d);
            for mut row in y.row_iter_mut() {
                for j in 0..d {
                    row[j] += mu[j];
                }
            }
            Ok((x, y))
        }
        Model::B => {
            let x = ar1_with(d, 0.5, nx, &mut rx)?;
            let mut y = ar1_with(d, 0.5, ny, &mut ry)?;
            let sd: Vec<f64> = model_b_extra_variance(beta, d)
                .iter()
                .map(|v| v.sqrt())
                .collect();
            for i in 0..ny {
                for j in 0..d {
                    let z: f64 = ry.sample(StandardNormal);
                    y[(i, j)] += sd[j] * z;
                }
            }
            Ok((x, y))
        }
        Model::C => {
            let s = sparsity(Model::C, beta);
            let x = mixture(nx, d, &mut rx);
            let mut y = DMatrix::zeros(ny, d);
            if s > 0 {
                let y1 = ar1_with(s, 0.5, ny, &mut ry)? * std::f64::consts::SQRT_2;
                y.columns_mut(0, s).copy_from(&y1);
            }
            if s < d {
                y.columns_mut(s, d - s)
                    .copy_from(&mixture(ny, d - s, &mut ry));
            }
            Ok((x, y))
        }
        Model::D => {
            let s = sparsity(Model::D, beta);
            let x = mixture(nx, d, &mut rx);
            let mut y = DMatrix::zeros(ny, d);
            for i in 0..ny {
                let sign = if ry.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut prev = 0.0;
                for j in 0..d {
                    let z: f64 = ry.sample(StandardNormal);
                    let e = if j == 0 || j >= s {
                        z
                    } else {
                        0.9 * prev + (1.0f64 - 0.81).sqrt() * z
                    };
                    prev = e;
                    y[(i, j)] = sign + e;
                }
            }
            Ok((x, y))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic: f64,
    pub p: f64,
    pub reject: bool,
}

fn pooled_distances(x: &Sample, y: &Sample) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        return invalid("samples have different dimensions");
    }
    if x.nrows() < 2 || y.nrows() < 2 {
        return invalid("each sample needs at least 2 points");
    }
    let n = x.nrows() + y.nrows();
    let row = |i: usize| {
        if i < x.nrows() {
            x.row(i)
        } else {
            y.row(i - x.nrows())
        }
    };
    let mut dist = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (row(i) - row(j)).norm();
            dist[(i, j)] = v;
            dist[(j, i)] = v;
        }
    }
    Ok(dist)
}

fn median_offdiag(dist: &DMatrix<f64>) -> f64 {
    let n = dist.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| dist[(i, j)])
        .collect();
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        *v.select_nth_unstable_by(mid, f64::total_cmp).1
    } else {
        let hi = *v.select_nth_unstable_by(mid, f64::total_cmp).1;
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Sums of `m[i, j]` over `i ≠ j` within the first group, within the second
/// group, and over the whole pooled sample, for a labeling `idx`.
fn block_sums(m: &DMatrix<f64>, idx: &[usize], nx: usize, total: f64) -> (f64, f64, f64) {
    let (a, b) = idx.split_at(nx);
    let within = |g: &[usize]| {
        let mut s = 0.0;
        for (p, &i) in g.iter().enumerate() {
            for &j in &g[p + 1..] {
                s += m[(i, j)];
            }
        }
        2.0 * s
    };
    let sxx = within(a);
    let syy = within(b);
    (sxx, syy, (total - sxx - syy) / 2.0)
}

fn permutation_test(
    m: &DMatrix<f64>,
    nx: usize,
    n_perms: usize,
    alpha: f64,
    seed: u64,
    stat: impl Fn(f64, f64, f64) -> f64,
) -> PermutationResult {
    let n = m.nrows();
    let total: f64 = m.sum() - m.diagonal().sum();
    let mut idx: Vec<usize> = (0..n).collect();
    let eval = |idx: &[usize]| {
        let (sxx, syy, sxy) = block_sums(m, idx, nx, total);
        stat(sxx, syy, sxy)
    };
    let observed = eval(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag::PERMUTATION, 0));
    let mut b = 0usize;
    for _ in 0..n_perms {
        idx.shuffle(&mut rng);
        if eval(&idx) >= observed {
            b += 1;
        }
    }
    let p = (b + 1) as f64 / (n_perms + 1) as f64;
    PermutationResult {
        statistic: observed,
        p,
        reject: p <= alpha,
    }
}

fn check_perm_args(n_perms: usize, alpha: f64) -> Result<()> {
    if n_perms < 99 {
        return invalid("at least 99 permutations are required");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid("alpha must lie in (0, 1)");
    }
    Ok(())
}

/// Unbiased squared MMD with a Gaussian kernel `exp(−‖x−y‖²/(2h²))`, `h` the
/// median pooled pairwise distance, calibrated by permutation.
pub fn mmd_permutation_test(
    x: &Sample,
    y: &Sample,
    n_perms: usize,
    alpha: f64,
    seed: u64,
) -> Result<PermutationResult> {
    check_perm_args(n_perms, alpha)?;
    let dist = pooled_distances(x, y)?;
    let h = median_offdiag(&dist);
    if !(h > 0.0) {
        return Ok(PermutationResult {
            statistic: 0.0,
            p: 1.0,
            reject: false,
        });
    }
    let kern = dist.map(|v| (-(v * v) / (2.0 * h * h)).exp());
    let (nx, ny) = (x.nrows() as f64, y.nrows() as f64);
    Ok(permutation_test(
        &kern,
        x.nrows(),
        n_perms,
        alpha,
        seed,
        |sxx, syy, sxy| sxx / (nx * (nx - 1.0)) + syy / (ny * (ny - 1.0)) - 2.0 * sxy / (nx * ny),
    ))
}

/// Energy statistic `2 mean‖x−y‖ − mean‖x−x′‖ − mean‖y−y′‖` (all pairs),
/// calibrated by permutation.
pub fn energy_permutation_test(
    x: &Sample,
    y: &Sample,
    n_perms: usize,
    alpha: f64,
    seed: u64,
) -> Result<PermutationResult> {
    check_perm_args(n_perms, alpha)?;
    let dist = pooled_distances(x, y)?;
    if dist.iter().all(|v| *v == 0.0) {
        return Ok(PermutationResult {
            statistic: 0.0,
            p: 1.0,
            reject: false,
        });
    }
    let (nx, ny) = (x.nrows() as f64, y.nrows() as f64);
    Ok(permutation_test(
        &dist,
        x.nrows(),
        n_perms,
        alpha,
        seed,
        |sxx, syy, sxy| 2.0 * sxy / (nx * ny) - sxx / (nx * nx) - syy / (ny * ny),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    Mmd,
    Energy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Mmd => "mmd",
            Method::Energy => "energy",
        }
    }
}

/// Model cell of a power study; the seed is assigned per replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub model: Model,
    pub beta: f64,
    pub d: usize,
    pub n_x: usize,
    pub n_y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub models: Vec<CellSpec>,
    pub n_reps: usize,
    pub alpha: f64,
    pub n_perms: usize,
    pub seed: u64,
    /// Settings of the proposed test; its `alpha` and `seed` are overridden.
    pub proposed: TestConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Proposed, Method::Mmd, Method::Energy],
            models: Vec::new(),
            n_reps: 100,
            alpha: 0.05,
            n_perms: 199,
            seed: 0,
            proposed: TestConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: BenchConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.models.is_empty() {
            return invalid("a power study needs at least one method and one model cell");
        }
        if self.n_reps == 0 {
            return invalid("n_reps must be at least 1");
        }
        check_perm_args(self.n_perms, self.alpha)?;
        for c in &self.models {
            check_spec(&c.spec(0))?;
        }
        self.proposed.validate()
    }
}

impl CellSpec {
    pub fn spec(&self, seed: u64) -> ModelSpec {
        ModelSpec {
            model: self.model,
            beta: self.beta,
            d: self.d,
            n_x: self.n_x,
            n_y: self.n_y,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub method: String,
    pub model: String,
    pub beta: f64,
    pub d: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub alpha: f64,
    pub n_reps: usize,
    pub n_failed: usize,
    pub reject_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
}

impl PowerTable {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn rate(&self, method: Method, model: Model) -> Option<f64> {
        let model = model.to_string();
        self.rows
            .iter()
            .find(|r| r.method == method.name() && r.model == model)
            .map(|r| r.reject_rate)
    }
}

/// Data seed of replication `rep` in cell `cell`; shared by all methods so
/// that they are compared on the same draws.
pub fn replication_seed(master: u64, cell: usize, rep: usize) -> u64 {
    derive_seed(
        derive_seed(master, tag::REPLICATION, cell as u64),
        tag::REPLICATION,
        rep as u64,
    )
}

/// Runs one method on one dataset and returns the rejection decision.
pub fn run_method(
    method: Method,
    x: &Sample,
    y: &Sample,
    config: &BenchConfig,
    seed: u64,
) -> Result<bool> {
    match method {
        Method::Proposed => {
            let tc = TestConfig {
                alpha: config.alpha,
                seed,
                ..config.proposed.clone()
            };
            Ok(multi_split_test(x, y, &tc)?.reject)
        }
        Method::Mmd => Ok(mmd_permutation_test(x, y, config.n_perms, config.alpha, seed)?.reject),
        Method::Energy => {
            Ok(energy_permutation_test(x, y, config.n_perms, config.alpha, seed)?.reject)
        }
    }
}

/// Rejection rates for every (method, model cell), `n_reps` replications each.
/// Replications that error are counted in `n_failed` and excluded from the rate.
pub fn power_study(config: &BenchConfig) -> Result<PowerTable> {
    config.validate()?;
    let mut rows = Vec::new();
    for (ci, cell) in config.models.iter().enumerate() {
        let outcomes: Vec<Vec<Option<bool>>> = (0..config.n_reps)
            .into_par_iter()
            .map(|rep| {
                let seed = replication_seed(config.seed, ci, rep);
                let data = gen_model(&cell.spec(seed));
                config
                    .methods
                    .iter()
                    .enumerate()
                    .map(|(mi, &m)| {
                        let (x, y) = data.as_ref().ok()?;
                        run_method(
                            m,
                            x,
                            y,
                            config,
                            derive_seed(seed, tag::PERMUTATION, mi as u64 + 1),
                        )
                        .ok()
                    })
                    .collect()
            })
            .collect();
        for (mi, &m) in config.methods.iter().enumerate() {
            let ok: Vec<bool> = outcomes.iter().filter_map(|o| o[mi]).collect();
            let n_failed = config.n_reps - ok.len();
            let rate = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().filter(|r| **r).count() as f64 / ok.len() as f64
            };
            rows.push(PowerRow {
                method: m.name().to_string(),
                model: cell.model.to_string(),
                beta: cell.beta,
                d: cell.d,
                n_x: cell.n_x,
                n_y: cell.n_y,
                alpha: config.alpha,
                n_reps: config.n_reps,
                n_failed,
                reject_rate: rate,
            });
        }
    }
    Ok(PowerTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-sample Kolmogorov–Smirnov statistic.
    fn ks2(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let v = a[i].min(b[j]);
            while i < a.len() && a[i] <= v {
                i += 1;
            }
            while j < b.len() && b[j] <= v {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    /// Asymptotic 5% critical value of the two-sample KS statistic.
    fn ks_crit(n: usize, m: usize) -> f64 {
        1.358 * ((n + m) as f64 / (n * m) as f64).sqrt()
    }

    fn spec(model: Model, beta: f64, d: usize, n: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            model,
            beta,
            d,
            n_x: n,
            n_y: n,
            seed,
        }
    }

    #[test]
    fn model_parameters() {
        let mu = model_a_mean(1.0, 3);
        assert!((mu[0] - 0.8).abs() < 1e-15 && (mu[1] - 0.1).abs() < 1e-15);
        assert!((mu[2] - 0.8 / 27.0).abs() < 1e-15);
        assert_eq!(sparsity(Model::C, 0.2), 1);
        assert_eq!(sparsity(Model::C, 0.3), 2);
        assert_eq!(sparsity(Model::C, 0.5), 3);
        assert_eq!(sparsity(Model::D, 0.4), 40);
        assert!(gen_model(&spec(Model::D, 0.4, 10, 5, 0)).is_err());
        assert!(gen_model(&spec(Model::A, -1.0, 10, 5, 0)).is_err());
        assert_eq!("c".parse::<Model>().unwrap(), Model::C);
        assert!("E".parse::<Model>().is_err());
    }

    #[test]
    fn ar1_trivial_cases() {
        let a = ar1_gaussian_sample(4, 0.0, 2000, 1).unwrap();
        let c = a.column(0).dot(&a.column(3)) / 2000.0;
        assert!(c.abs() < 0.08);
        let b = ar1_gaussian_sample(1, 0.7, 20000, 2).unwrap();
        let m = b.mean();
        let v = b.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20000.0;
        assert!(m.abs() < 0.03 && (v - 1.0).abs() < 0.04);
        assert!(ar1_gaussian_sample(3, 1.0, 5, 0).is_err());
    }

    #[test]
    fn ar1_covariance() {
        let n = 100_000;
        let x = ar1_gaussian_sample(5, 0.5, n, 3).unwrap();
        let means = x.row_mean();
        for a in 0..5 {
            for b in 0..5 {
                let c = (0..n)
                    .map(|i| (x[(i, a)] - means[a]) * (x[(i, b)] - means[b]))
                    .sum::<f64>()
                    / n as f64;
                let expect = 0.5f64.powi((a as i32 - b as i32).abs());
                assert!((c - expect).abs() < 0.02, "({a},{b}): {c} vs {expect}");
            }
        }
    }

    #[test]
    fn determinism() {
        let s = spec(Model::C, 0.4, 6, 30, 9);
        assert_eq!(gen_model(&s).unwrap(), gen_model(&s).unwrap());
        assert_ne!(
            gen_model(&s).unwrap().0,
            gen_model(&ModelSpec { seed: 10, ..s }).unwrap().0
        );
    }

    #[test]
    fn null_models_have_identical_laws() {
        for model in [Model::A, Model::B, Model::C, Model::D] {
            let (x, y) = gen_model(&spec(model, 0.0, 4, 4000, 21)).unwrap();
            for j in 0..4 {
                let a: Vec<f64> = x.column(j).iter().copied().collect();
                let b: Vec<f64> = y.column(j).iter().copied().collect();
                assert!(
                    ks2(&a, &b) < 1.3 * ks_crit(4000, 4000),
                    "model {model} coordinate {j}"
                );
            }
            let pa: Vec<f64> = x.row_iter().map(|r| r[0] * r[1]).collect();
            let pb: Vec<f64> = y.row_iter().map(|r| r[0] * r[1]).collect();
            assert!(
                ks2(&pa, &pb) < 1.3 * ks_crit(4000, 4000),
                "model {model} product"
            );
        }
    }

    #[test]
    fn null_model_a_first_coordinate_rejects_at_nominal_rate() {
        let reps = 200;
        let mut rejections = 0;
        for rep in 0..reps {
            let (x, y) = gen_model(&spec(Model::A, 0.0, 3, 100, 1000 + rep)).unwrap();
            let a: Vec<f64> = x.column(0).iter().copied().collect();
            let b: Vec<f64> = y.column(0).iter().copied().collect();
            if ks2(&a, &b) > ks_crit(100, 100) {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!(rate <= 0.1, "rate {rate}");
    }

    #[test]
    fn alternatives_differ_where_expected() {
        let (x, y) = gen_model(&spec(Model::B, 1.0, 5, 20000, 2)).unwrap();
        let var = |m: &Sample, j: usize| {
            let c = m.column(j);
            let mu = c.mean();
            c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c.len() as f64
        };
        assert!((var(&y, 0) - 9.0).abs() < 0.3);
        assert!((var(&y, 1) - 2.0).abs() < 0.1);
        assert!((var(&x, 0) - 1.0).abs() < 0.05);
        let cov01 = |m: &Sample| {
            let (a, b) = (m.column(0), m.column(1));
            let (ma, mb) = (a.mean(), b.mean());
            a.iter()
                .zip(b.iter())
                .map(|(p, q)| (p - ma) * (q - mb))
                .sum::<f64>()
                / a.len() as f64
        };
        assert!((cov01(&y) - 0.5).abs() < 0.08);

        let (x, y) = gen_model(&spec(Model::C, 0.4, 4, 20000, 3)).unwrap();
        assert!((var(&y, 0) - 2.0).abs() < 0.1 && (var(&x, 0) - 2.0).abs() < 0.1);
        assert!((cov01(&y) - 1.0).abs() < 0.08);
        assert!((cov01(&x) - 1.0).abs() < 0.08);

        let (x, y) = gen_model(&spec(Model::D, 0.03, 5, 20000, 4)).unwrap();
        assert!((cov01(&y) - 1.9).abs() < 0.08);
        assert!((cov01(&x) - 1.0).abs() < 0.08);
    }

    #[test]
    fn identical_samples_give_large_p() {
        let (x, _) = gen_model(&spec(Model::A, 0.0, 3, 30, 5)).unwrap();
        let m = mmd_permutation_test(&x, &x, 99, 0.05, 1).unwrap();
        assert!(m.p > 0.5 && !m.reject);
        let e = energy_permutation_test(&x, &x, 99, 0.05, 1).unwrap();
        assert!(e.statistic.abs() < 1e-12 && e.p > 0.5);
        let same = DMatrix::from_element(5, 2, 1.0);
        assert_eq!(
            mmd_permutation_test(&same, &same, 99, 0.05, 0).unwrap().p,
            1.0
        );
        assert!(mmd_permutation_test(&x, &x, 50, 0.05, 0).is_err());
    }

    #[test]
    fn mmd_statistic_matches_direct_formula() {
        let (x, y) = gen_model(&spec(Model::A, 1.0, 2, 12, 6)).unwrap();
        let r = mmd_permutation_test(&x, &y, 99, 0.05, 0).unwrap();
        let pooled: Vec<Vec<f64>> = x
            .row_iter()
            .chain(y.row_iter())
            .map(|r| r.iter().copied().collect())
            .collect();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut ds = Vec::new();
        for i in 0..24 {
            for j in (i + 1)..24 {
                ds.push(dist(&pooled[i], &pooled[j]));
            }
        }
        ds.sort_by(f64::total_cmp);
        let h = 0.5 * (ds[ds.len() / 2 - 1] + ds[ds.len() / 2]);
        let k = |a: &[f64], b: &[f64]| (-dist(a, b).powi(2) / (2.0 * h * h)).exp();
        let (xs, ys) = pooled.split_at(12);
        let mut kxx = 0.0;
        let mut kyy = 0.0;
        let mut kxy = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    kxx += k(&xs[i], &xs[j]);
                    kyy += k(&ys[i], &ys[j]);
                }
                kxy += k(&xs[i], &ys[j]);
            }
        }
        let direct = kxx / 132.0 + kyy / 132.0 - 2.0 * kxy / 144.0;
        assert!((r.statistic - direct).abs() < 1e-12);
    }

    #[test]
    fn energy_detects_location_shift() {
        let mut hits = 0;
        for rep in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(rep);
            let x = DMatrix::from_fn(100, 1, |_, _| r.sample::<f64, _>(StandardNormal));
            let y = DMatrix::from_fn(100, 1, |_, _| r.sample::<f64, _>(StandardNormal) + 3.0);
            if energy_permutation_test(&x, &y, 99, 0.05, rep)
                .unwrap()
                .reject
            {
                hits += 1;
            }
        }
        assert_eq!(hits, 20);
    }

    #[test]
    fn permutation_p_values_are_valid() {
        let reps = 300;
        let mut rej = [0usize; 2];
        for rep in 0..reps {
            let (x, y) = gen_model(&spec(Model::A, 0.0, 2, 15, 500 + rep)).unwrap();
            rej[0] += mmd_permutation_test(&x, &y, 99, 0.05, rep).unwrap().reject as usize;
            rej[1] += energy_permutation_test(&x, &y, 99, 0.05, rep)
                .unwrap()
                .reject as usize;
        }
        for r in rej {
            // 0.05 + 1/100 plus three binomial standard errors.
            assert!((r as f64 / reps as f64) <= 0.06 + 3.0 * (0.06f64 * 0.94 / reps as f64).sqrt());
        }
    }

    #[test]
    fn power_study_bookkeeping() {
        let cfg = BenchConfig {
            methods: vec![Method::Mmd, Method::Energy],
            models: vec![
                CellSpec {
                    model: Model::A,
                    beta: 0.0,
                    d: 3,
                    n_x: 15,
                    n_y: 15,
                },
                CellSpec {
                    model: Model::A,
                    beta: 1.0,
                    d: 3,
                    n_x: 15,
                    n_y: 15,
                },
            ],
            n_reps: 6,
            n_perms: 99,
            ..Default::default()
        };
        let t = power_study(&cfg).unwrap();
        assert_eq!(t.rows.len(), 4);
        for r in &t.rows {
            assert!((0.0..=1.0).contains(&r.reject_rate));
            assert_eq!(r.n_failed, 0);
        }
        assert_eq!(t, power_study(&cfg).unwrap());
        let csv = t.to_csv_string().unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "method,model,beta,d,n_x,n_y,alpha,n_reps,n_failed,reject_rate"
        );
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn bench_config_json() {
        let c = BenchConfig::from_json(
            r#"{"methods":["mmd"],"models":[{"model":"B","beta":1.0,"d":10,"n_x":20,"n_y":20}],"n_reps":3}"#,
        )
        .unwrap();
        assert_eq!(c.models[0].model, Model::B);
        assert!(BenchConfig::from_json(r#"{"methods":["mmd"],"models":[],"n_reps":3}"#).is_err());
        assert!(BenchConfig::from_json(
            r#"{"methods":["mmd"],"models":[{"model":"A","beta":0,"d":2,"n_x":5,"n_y":5}],"x":1}"#
        )
        .is_err());
    }
}
