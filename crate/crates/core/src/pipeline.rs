//! End-to-end test: split, fit projections and witnesses on the fitting half,
//! evaluate on the test half, calibrate, and aggregate over several splits.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::{derive_seed, tag};
use crate::statistic::{
    evaluate_statistic, Aggregation, CandidateReport, CandidateSpec, Regularizer, Seeds,
    TestReport, Variant, DEFAULT_KAPPA,
};
use crate::stiefel::{
    default_rho_ladder, l0_select, manpg_fit_projection, ManPGOptions, ProjectionFit,
    ProjectionMatrix,
};
use crate::witness::{
    default_output_bound, train_witness_projected, NetworkArchitecture, TrainOptions,
    WitnessNetwork,
};
use crate::Sample;

/// Fit/test partition of both samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub fit_x: Vec<usize>,
    pub test_x: Vec<usize>,
    pub fit_y: Vec<usize>,
    pub test_y: Vec<usize>,
    pub seed: u64,
}

fn partition(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_fit = (ratio * n as f64).round() as usize;
    if n_fit < 2 || n - n_fit.min(n) < 2 {
        return invalid(format!(
            "splitting {n} points with ratio {ratio} leaves fewer than 2 points on one side"
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut fit = perm[..n_fit].to_vec();
    let mut test = perm[n_fit..].to_vec();
    fit.sort_unstable();
    test.sort_unstable();
    Ok((fit, test))
}

/// Uniformly random partition with `round(ratio·n)` fitting points per sample.
pub fn split_sample(nx: usize, ny: usize, ratio: f64, seed: u64) -> Result<SplitIndices> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return invalid("split ratio must lie in (0, 1)");
    }
    if nx < 4 || ny < 4 {
        return invalid("each sample needs at least 4 points to be split");
    }
    let mut rx = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag::SPLIT, 0));
    let mut ry = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag::SPLIT, 1));
    let (fit_x, test_x) = partition(nx, ratio, &mut rx)?;
    let (fit_y, test_y) = partition(ny, ratio, &mut ry)?;
    Ok(SplitIndices {
        fit_x,
        test_x,
        fit_y,
        test_y,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Cauchy,
    Bonferroni,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Cauchy => "cauchy",
            Aggregator::Bonferroni => "bonferroni",
        }
    }
}

/// Combines per-split p-values.
///
/// Cauchy: `1/2 − arctan(mean tan((1/2 − p_i)π))/π`, with `p_i` clamped to
/// `[1e-15, 1 − 1e-15]`. Bonferroni: `min(1, K·min p_i)`.
pub fn aggregate_pvalues(ps: &[f64], method: Aggregator) -> Result<f64> {
    if ps.is_empty() {
        return invalid("no p-values to aggregate");
    }
    if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return invalid("p-values must lie in [0, 1]");
    }
    let k = ps.len() as f64;
    let p = match method {
        Aggregator::Cauchy => {
            let t = ps
                .iter()
                .map(|p| ((0.5 - p.clamp(1e-15, 1.0 - 1e-15)) * std::f64::consts::PI).tan())
                .sum::<f64>()
                / k;
            0.5 - t.atan() / std::f64::consts::PI
        }
        Aggregator::Bonferroni => k * ps.iter().fold(1.0f64, |a, &p| a.min(p)),
    };
    Ok(p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub variant: Variant,
    /// Explicit candidate set; `None` uses the variant's default set.
    pub candidates: Option<Vec<CandidateSpec>>,
    pub alpha: f64,
    pub split_ratio: f64,
    pub n_splits: usize,
    pub aggregation: Aggregator,
    pub seed: u64,
    pub kappa: f64,
    /// Penalties fitted before pruning in the ℓ0 variant; `None` uses
    /// [`default_rho_ladder`] on the fitting data.
    pub rho_ladder: Option<Vec<f64>>,
    pub manpg: ManPGOptions,
    pub training: TrainOptions,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            variant: Variant::L1,
            candidates: None,
            alpha: 0.05,
            split_ratio: 0.5,
            n_splits: 5,
            aggregation: Aggregator::Cauchy,
            seed: 0,
            kappa: DEFAULT_KAPPA,
            rho_ladder: None,
            manpg: ManPGOptions::default(),
            training: TrainOptions::default(),
        }
    }
}

/// Default candidate sets for ambient dimension `d`: `k ∈ {1, 5, 10}` (those
/// not exceeding `d`) crossed with `ρ ∈ {0.01, 0.1, 1}` for ℓ1, with
/// `ϖ ∈ {k, ⌊k√d⌋, kd}` for ℓ0, and unpenalized for the plain variant.
pub fn default_candidates(variant: Variant, d: usize) -> Vec<CandidateSpec> {
    let ks: Vec<usize> = [1usize, 5, 10].into_iter().filter(|&k| k <= d).collect();
    let mut out = Vec::new();
    for &k in &ks {
        match variant {
            Variant::Plain => out.push(CandidateSpec::plain(k)),
            Variant::L1 => {
                for rho in [0.01, 0.1, 1.0] {
                    out.push(CandidateSpec::l1(k, rho));
                }
            }
            Variant::L0 => {
                let mid = (k as f64 * (d as f64).sqrt()).floor() as usize;
                let mut budgets = vec![k, mid.clamp(k, k * d), k * d];
                budgets.dedup();
                for b in budgets {
                    out.push(CandidateSpec::l0(k, b));
                }
            }
        }
    }
    out
}

impl TestConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: TestConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid("alpha must lie in (0, 1)");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return invalid("split_ratio must lie in (0, 1)");
        }
        if self.n_splits == 0 {
            return invalid("n_splits must be at least 1");
        }
        if !(self.kappa > 0.0) {
            return invalid("kappa must be positive");
        }
        if let Some(c) = &self.candidates {
            if c.is_empty() {
                return invalid("candidate list is empty");
            }
            for spec in c {
                let ok = matches!(
                    (self.variant, spec.regularizer),
                    (Variant::Plain, Regularizer::None)
                        | (Variant::L1, Regularizer::None | Regularizer::L1 { .. })
                        | (Variant::L0, Regularizer::L0 { .. })
                );
                if !ok {
                    return invalid(format!(
                        "{} regularizer is not allowed in the {} variant",
                        spec.regularizer.type_name(),
                        self.variant.name()
                    ));
                }
            }
        }
        if let Some(l) = &self.rho_ladder {
            if l.is_empty() || l.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                return invalid("rho_ladder must be a nonempty list of nonnegative penalties");
            }
        }
        self.manpg.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// Candidate set resolved against dimension `d`.
    pub fn resolved_candidates(&self, d: usize) -> Result<Vec<CandidateSpec>> {
        let c = match &self.candidates {
            Some(c) => c.clone(),
            None => default_candidates(self.variant, d),
        };
        if c.is_empty() {
            return invalid("candidate set is empty for this dimension");
        }
        for spec in &c {
            spec.validate(d)?;
        }
        Ok(c)
    }
}

fn check_data(x: &Sample, y: &Sample) -> Result<()> {
    if x.ncols() != y.ncols() {
        return invalid(format!(
            "samples have different dimensions ({} vs {})",
            x.ncols(),
            y.ncols()
        ));
    }
    if x.ncols() == 0 {
        return invalid("samples have no coordinates");
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return invalid("data contain non-finite values");
    }
    Ok(())
}

/// FNV-1a over the candidate content, so seeds follow the candidate rather
/// than its position in the list.
fn content_hash(k: usize, kind: u8, value: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = (k as u64)
        .to_le_bytes()
        .into_iter()
        .chain([kind])
        .chain(value.to_le_bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn spec_hash(spec: &CandidateSpec) -> u64 {
    match spec.regularizer {
        Regularizer::None => content_hash(spec.k, 0, 0),
        Regularizer::L1 { rho } => content_hash(spec.k, 1, rho.to_bits()),
        Regularizer::L0 { budget } => content_hash(spec.k, 2, budget as u64),
    }
}

/// Key of one penalized projection fit, shared between candidates.
fn fit_key(k: usize, rho: f64) -> (usize, u64) {
    // ρ = 0 and "no penalty" are the same problem.
    (k, if rho == 0.0 { 0 } else { rho.to_bits() })
}

/// A candidate witness `ĝ = f̂ ∘ Û` fitted on one fitting set.
#[derive(Debug, Clone)]
pub struct FittedCandidate {
    pub spec: CandidateSpec,
    pub u: ProjectionMatrix,
    pub net: WitnessNetwork,
    pub fit_objective: f64,
}

impl FittedCandidate {
    /// `ĝ` on every row of `data`.
    pub fn evaluate(&self, data: &Sample) -> Result<DVector<f64>> {
        if data.ncols() != self.u.d() {
            return invalid("data do not match the projection dimension");
        }
        self.net.forward_rows(&(data * self.u.as_matrix()))
    }
}

/// Fits every candidate on `(fit_x, fit_y)`. Seeds derive from `seed` and
/// each candidate's content, so identical specs give identical witnesses.
pub fn fit_candidates(
    fit_x: &Sample,
    fit_y: &Sample,
    specs: &[CandidateSpec],
    config: &TestConfig,
    seed: u64,
) -> Result<Vec<Result<FittedCandidate>>> {
    check_data(fit_x, fit_y)?;
    let d = fit_x.ncols();
    for s in specs {
        s.validate(d)?;
    }
    let ladder = match &config.rho_ladder {
        Some(l) => l.clone(),
        None => default_rho_ladder(fit_x, fit_y),
    };

    let mut jobs: Vec<(usize, f64)> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |k: usize, rho: f64| {
        if seen.insert(fit_key(k, rho)) {
            jobs.push((k, rho));
        }
    };
    for s in specs {
        match s.regularizer {
            Regularizer::None => push(s.k, 0.0),
            Regularizer::L1 { rho } => push(s.k, rho),
            Regularizer::L0 { .. } => ladder.iter().for_each(|&r| push(s.k, r)),
        }
    }
    let fits: Vec<Result<ProjectionFit>> = jobs
        .par_iter()
        .map(|&(k, rho)| {
            let (_, bits) = fit_key(k, rho);
            let opts = ManPGOptions {
                seed: derive_seed(seed, tag::RESTART, content_hash(k, 1, bits)),
                ..config.manpg.clone()
            };
            manpg_fit_projection(fit_x, fit_y, k, rho, &opts)
        })
        .collect();
    let fit_map: HashMap<(usize, u64), &Result<ProjectionFit>> = jobs
        .iter()
        .map(|&(k, rho)| fit_key(k, rho))
        .zip(fits.iter())
        .collect();
    let clone_fit = |k: usize, rho: f64| -> Result<ProjectionFit> {
        match fit_map[&fit_key(k, rho)] {
            Ok(f) => Ok(f.clone()),
            Err(e) => Err(Error::Solver(format!(
                "projection fit (k = {k}, rho = {rho}) failed: {e}"
            ))),
        }
    };

    let out = specs
        .par_iter()
        .map(|spec| -> Result<FittedCandidate> {
            let u = match spec.regularizer {
                Regularizer::None => clone_fit(spec.k, 0.0)?.u,
                Regularizer::L1 { rho } => clone_fit(spec.k, rho)?.u,
                Regularizer::L0 { budget } => {
                    let ok: Vec<ProjectionFit> = ladder
                        .iter()
                        .filter_map(|&r| clone_fit(spec.k, r).ok())
                        .collect();
                    l0_select(fit_x, fit_y, &ok, spec.k, budget)?.u
                }
            };
            let px = fit_x * u.as_matrix();
            let py = fit_y * u.as_matrix();
            let arch = NetworkArchitecture::for_projection(spec.k, default_output_bound(&px, &py))?;
            let topts = TrainOptions {
                seed: derive_seed(seed, tag::NETWORK, spec_hash(spec)),
                ..config.training.clone()
            };
            let trained = train_witness_projected(&px, &py, &arch, &topts)?;
            Ok(FittedCandidate {
                spec: *spec,
                u,
                net: trained.net,
                fit_objective: trained.objective,
            })
        })
        .collect();
    Ok(out)
}

/// Rows touched while fitting and while evaluating the statistic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexAudit {
    pub fit_x: BTreeSet<usize>,
    pub fit_y: BTreeSet<usize>,
    pub eval_x: BTreeSet<usize>,
    pub eval_y: BTreeSet<usize>,
}

impl IndexAudit {
    /// True when no evaluated row was used for fitting.
    pub fn is_separated(&self) -> bool {
        self.fit_x.is_disjoint(&self.eval_x) && self.fit_y.is_disjoint(&self.eval_y)
    }
}

fn select(data: &Sample, idx: &[usize], log: Option<&mut BTreeSet<usize>>) -> Sample {
    if let Some(l) = log {
        l.extend(idx.iter().copied());
    }
    data.select_rows(idx.iter())
}

/// One split: fit on `split`'s fitting rows, evaluate on its test rows.
pub fn run_single_split_test(
    x: &Sample,
    y: &Sample,
    config: &TestConfig,
    split: &SplitIndices,
) -> Result<TestReport> {
    single_split(x, y, config, split, None)
}

/// [`run_single_split_test`] that also records which rows entered each stage.
pub fn run_single_split_test_audited(
    x: &Sample,
    y: &Sample,
    config: &TestConfig,
    split: &SplitIndices,
) -> Result<(TestReport, IndexAudit)> {
    let mut audit = IndexAudit::default();
    let report = single_split(x, y, config, split, Some(&mut audit))?;
    Ok((report, audit))
}

fn check_split(split: &SplitIndices, nx: usize, ny: usize) -> Result<()> {
    let cover = |fit: &[usize], test: &[usize], n: usize| {
        let mut all: Vec<usize> = fit.iter().chain(test).copied().collect();
        all.sort_unstable();
        all.len() == n && all.iter().enumerate().all(|(i, &v)| i == v)
    };
    if !cover(&split.fit_x, &split.test_x, nx) || !cover(&split.fit_y, &split.test_y, ny) {
        return invalid("split indices do not partition the samples");
    }
    if split.fit_x.len() < 2
        || split.test_x.len() < 2
        || split.fit_y.len() < 2
        || split.test_y.len() < 2
    {
        return invalid("every side of the split needs at least 2 points");
    }
    Ok(())
}

fn single_split(
    x: &Sample,
    y: &Sample,
    config: &TestConfig,
    split: &SplitIndices,
    mut audit: Option<&mut IndexAudit>,
) -> Result<TestReport> {
    config.validate()?;
    check_data(x, y)?;
    check_split(split, x.nrows(), y.nrows())?;
    let specs = config.resolved_candidates(x.ncols())?;
    let fit_x = select(x, &split.fit_x, audit.as_mut().map(|a| &mut a.fit_x));
    let fit_y = select(y, &split.fit_y, audit.as_mut().map(|a| &mut a.fit_y));
    let test_x = select(x, &split.test_x, audit.as_mut().map(|a| &mut a.eval_x));
    let test_y = select(y, &split.test_y, audit.as_mut().map(|a| &mut a.eval_y));

    let fitted = fit_candidates(&fit_x, &fit_y, &specs, config, split.seed)?;
    let mut warnings = Vec::new();
    let mut ok_idx = Vec::new();
    let mut cols_x = Vec::new();
    let mut cols_y = Vec::new();
    let mut first_err = None;
    let mut reports: Vec<CandidateReport> = specs
        .iter()
        .map(|s| CandidateReport {
            k: s.k,
            reg_type: s.regularizer.type_name().to_string(),
            reg_value: s.regularizer.value(),
            s_n: None,
            sigma_hat: None,
            error: None,
            fit_objective: None,
        })
        .collect();
    for (j, f) in fitted.into_iter().enumerate() {
        let evaluated = f.and_then(|c| {
            let gx = c.evaluate(&test_x)?;
            let gy = c.evaluate(&test_y)?;
            Ok((c.fit_objective, gx, gy))
        });
        match evaluated {
            Ok((obj, gx, gy)) => {
                reports[j].fit_objective = Some(obj);
                ok_idx.push(j);
                cols_x.push(gx);
                cols_y.push(gy);
            }
            Err(e) => {
                warnings.push(format!("candidate {j} dropped: {e}"));
                reports[j].error = Some(e.to_string());
                first_err.get_or_insert(Error::Candidate {
                    index: j,
                    source: Box::new(e),
                });
            }
        }
    }
    if ok_idx.is_empty() {
        return Err(first_err.expect("at least one candidate"));
    }
    let gx = DMatrix::from_columns(&cols_x);
    let gy = DMatrix::from_columns(&cols_y);
    let out = evaluate_statistic(&gx, &gy, config.alpha, config.kappa)?;
    for (pos, &j) in ok_idx.iter().enumerate() {
        reports[j].s_n = Some(out.s_n[pos]);
        reports[j].sigma_hat = Some(out.sigma_hat[pos]);
    }
    let eliminated: Vec<usize> = out.eliminated.iter().map(|&p| ok_idx[p]).collect();
    Ok(TestReport {
        variant: config.variant,
        alpha: config.alpha,
        t: out.t,
        q: out.q,
        p: out.p,
        reject: out.reject,
        m_requested: specs.len(),
        m_effective: out.m_effective,
        eliminated,
        candidates: reports,
        seeds: Seeds {
            master: config.seed,
            splits: vec![split.seed],
        },
        warnings,
        aggregation: None,
    })
}

/// Seed of split `s` under master seed `master`.
pub fn split_seed(master: u64, s: usize) -> u64 {
    derive_seed(master, tag::SPLIT, s as u64)
}

/// Runs `n_splits` seeded splits and aggregates their p-values. The
/// top-level `T`, `q` and candidate entries are those of the first split;
/// `p` is the aggregate and `reject` is `p ≤ α`.
pub fn multi_split_test(x: &Sample, y: &Sample, config: &TestConfig) -> Result<TestReport> {
    config.validate()?;
    check_data(x, y)?;
    let seeds: Vec<u64> = (0..config.n_splits)
        .map(|s| split_seed(config.seed, s))
        .collect();
    let reports: Vec<TestReport> = seeds
        .par_iter()
        .map(|&s| {
            let split = split_sample(x.nrows(), y.nrows(), config.split_ratio, s)?;
            run_single_split_test(x, y, config, &split)
        })
        .collect::<Result<Vec<_>>>()?;
    if reports.len() == 1 {
        return Ok(reports.into_iter().next().unwrap());
    }
    let ps: Vec<f64> = reports.iter().map(|r| r.p).collect();
    let p = aggregate_pvalues(&ps, config.aggregation)?;
    let first = &reports[0];
    let warnings = reports
        .iter()
        .enumerate()
        .flat_map(|(s, r)| r.warnings.iter().map(move |w| format!("split {s}: {w}")))
        .collect();
    Ok(TestReport {
        variant: config.variant,
        alpha: config.alpha,
        t: first.t,
        q: first.q,
        p,
        reject: p <= config.alpha,
        m_requested: first.m_requested,
        m_effective: first.m_effective,
        eliminated: first.eliminated.clone(),
        candidates: first.candidates.clone(),
        seeds: Seeds {
            master: config.seed,
            splits: seeds,
        },
        warnings,
        aggregation: Some(Aggregation {
            method: config.aggregation.name().to_string(),
            split_p_values: ps,
            splits: reports,
        }),
    })
}
