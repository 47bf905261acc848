//! ReLU witness networks on projected data.
//!
//! A network maps `z ∈ ℝ^k` through `D` hidden ReLU layers and one affine
//! output layer, then clamps to `[−B, B]`. Training maximizes the mean
//! difference `mean f(Ûᵀx) − mean f(Ûᵀy)` with Adam; after every update each
//! weight matrix is divided by a power-iteration estimate of its top singular
//! value, which keeps the network close to 1-Lipschitz.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::{derive_seed, tag};
use crate::stiefel::ProjectionMatrix;
use crate::Sample;

/// Hidden-layer count used by default.
pub const DEFAULT_DEPTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    /// `(p₀, …, p_{D+1})` with `p₀ = k` and `p_{D+1} = 1`.
    pub widths: Vec<usize>,
    pub output_bound: f64,
}

impl NetworkArchitecture {
    pub fn new(widths: Vec<usize>, output_bound: f64) -> Result<Self> {
        if widths.len() < 2 {
            return invalid("an architecture needs at least input and output widths");
        }
        if widths.contains(&0) {
            return invalid("all layer widths must be at least 1");
        }
        if *widths.last().unwrap() != 1 {
            return invalid("the output width must be 1");
        }
        if !(output_bound > 0.0) {
            return invalid("output bound must be positive");
        }
        Ok(Self {
            widths,
            output_bound,
        })
    }

    /// `DEFAULT_DEPTH` equal hidden layers of [`default_hidden_width`]`(k)`.
    pub fn for_projection(k: usize, output_bound: f64) -> Result<Self> {
        if k == 0 {
            return invalid("projection dimension must be positive");
        }
        let w = default_hidden_width(k);
        let mut widths = vec![k];
        widths.extend(std::iter::repeat_n(w, DEFAULT_DEPTH));
        widths.push(1);
        Self::new(widths, output_bound)
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }
}

/// Hidden width interpolating 50, 150, 250 at `k = 1, 5, 10`; beyond `k = 10`
/// it keeps growing by 20 per unit of `k`.
pub fn default_hidden_width(k: usize) -> usize {
    let k = k as f64;
    let w = if k <= 5.0 {
        50.0 + 25.0 * (k - 1.0)
    } else {
        150.0 + 20.0 * (k - 5.0)
    };
    w.round().max(1.0) as usize
}

/// `4√k · max |projected coordinate|` over both fitting samples.
pub fn default_output_bound(px: &DMatrix<f64>, py: &DMatrix<f64>) -> f64 {
    let k = px.ncols() as f64;
    let m = px
        .iter()
        .chain(py.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let b = 4.0 * k.sqrt() * m;
    if b > 0.0 && b.is_finite() {
        b
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Power-iteration state: left and right singular vector estimates.
    pub sn_u: DVector<f64>,
    pub sn_v: DVector<f64>,
}

impl Layer {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
            sn_u: DVector::from_element(out, 1.0 / (out as f64).sqrt()),
            sn_v: DVector::from_element(inp, 1.0 / (inp as f64).sqrt()),
        }
    }

    /// One power-iteration update; returns the estimate `uᵀAv`.
    fn power_step(&mut self) -> f64 {
        let v = self.weight.tr_mul(&self.sn_u);
        let nv = v.norm();
        if nv == 0.0 || !nv.is_finite() {
            return 0.0;
        }
        self.sn_v = v / nv;
        let u = &self.weight * &self.sn_v;
        let nu = u.norm();
        if nu == 0.0 || !nu.is_finite() {
            return 0.0;
        }
        self.sn_u = u / nu;
        self.sn_u.dot(&(&self.weight * &self.sn_v))
    }

    fn normalize(&mut self, iterations: usize) {
        let mut sigma = 0.0;
        for _ in 0..iterations.max(1) {
            sigma = self.power_step();
        }
        if sigma > 0.0 && sigma.is_finite() {
            self.weight /= sigma;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessNetwork {
    pub layers: Vec<Layer>,
    pub output_bound: f64,
    pub seed: u64,
}

impl WitnessNetwork {
    /// All-zero weights and biases.
    pub fn zeros(arch: &NetworkArchitecture) -> Self {
        let layers = arch
            .widths
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Self {
            layers,
            output_bound: arch.output_bound,
            seed: 0,
        }
    }

    /// Glorot-uniform weights, zero biases, random unit power-iteration vectors.
    pub fn random(arch: &NetworkArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(arch);
        net.seed = seed;
        for layer in &mut net.layers {
            let (out, inp) = layer.weight.shape();
            let a = (6.0 / (inp + out) as f64).sqrt();
            layer.weight = DMatrix::from_fn(out, inp, |_, _| rng.random_range(-a..a));
            layer.sn_u = random_unit(out, &mut rng);
            layer.sn_v = random_unit(inp, &mut rng);
        }
        net
    }

    /// Builds a network from explicit `(weight, bias)` pairs.
    pub fn from_parts(parts: Vec<(DMatrix<f64>, DVector<f64>)>, output_bound: f64) -> Result<Self> {
        if parts.is_empty() {
            return invalid("a network needs at least one layer");
        }
        let mut layers = Vec::with_capacity(parts.len());
        let mut prev: Option<usize> = None;
        for (w, b) in parts {
            if w.nrows() != b.len() || prev.is_some_and(|p| p != w.ncols()) {
                return invalid("layer shapes do not chain");
            }
            prev = Some(w.nrows());
            let mut l = Layer::zeros(w.ncols(), w.nrows());
            l.weight = w;
            l.bias = b;
            layers.push(l);
        }
        if prev != Some(1) {
            return invalid("the output width must be 1");
        }
        if !(output_bound > 0.0) {
            return invalid("output bound must be positive");
        }
        Ok(Self {
            layers,
            output_bound,
            seed: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn architecture(&self) -> NetworkArchitecture {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(|l| l.weight.nrows()));
        NetworkArchitecture {
            widths,
            output_bound: self.output_bound,
        }
    }

    /// `f(z)` for a single input.
    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.input_dim() {
            return invalid(format!(
                "input has dimension {}, network expects {}",
                z.len(),
                self.input_dim()
            ));
        }
        let h = DMatrix::from_column_slice(z.len(), 1, z);
        Ok(self.forward_columns(h)[0])
    }

    /// `f` applied to every row of `points` (`n × k`).
    pub fn forward_rows(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        if points.ncols() != self.input_dim() {
            return invalid(format!(
                "inputs have dimension {}, network expects {}",
                points.ncols(),
                self.input_dim()
            ));
        }
        Ok(self.forward_columns(points.transpose()))
    }

    fn forward_columns(&self, mut h: DMatrix<f64>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut pre = &l.weight * &h;
            for mut c in pre.column_iter_mut() {
                c += &l.bias;
            }
            if i < last {
                pre.apply(|v| *v = v.max(0.0));
            }
            h = pre;
        }
        let b = self.output_bound;
        DVector::from_iterator(h.ncols(), h.row(0).iter().map(|v| v.clamp(-b, b)))
    }

    /// One power-iteration update per layer followed by `A ← A/σ̂`.
    pub fn spectral_normalize(&mut self) {
        self.spectral_normalize_with(1);
    }

    pub fn spectral_normalize_with(&mut self, iterations: usize) {
        for l in &mut self.layers {
            l.normalize(iterations);
        }
    }

    /// Exact spectral norms from a dense SVD.
    pub fn spectral_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| l.weight.clone().singular_values().max())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetworkRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<NetworkRecord>(text)?.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn random_unit(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let nv = v.norm();
        if nv > 0.0 {
            return v / nv;
        }
    }
}

/// On-disk form: row-major weights, so the file reads naturally.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkRecord {
    widths: Vec<usize>,
    output_bound: f64,
    seed: u64,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<&WitnessNetwork> for NetworkRecord {
    fn from(net: &WitnessNetwork) -> Self {
        Self {
            widths: net.architecture().widths,
            output_bound: net.output_bound,
            seed: net.seed,
            weights: net
                .layers
                .iter()
                .map(|l| {
                    l.weight
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect()
                })
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| l.bias.iter().copied().collect())
                .collect(),
        }
    }
}

impl TryFrom<NetworkRecord> for WitnessNetwork {
    type Error = Error;

    fn try_from(r: NetworkRecord) -> Result<Self> {
        if r.weights.len() != r.biases.len() || r.widths.len() != r.weights.len() + 1 {
            return invalid("network record has inconsistent layer counts");
        }
        let mut parts = Vec::with_capacity(r.weights.len());
        for (i, (w, b)) in r.weights.into_iter().zip(r.biases).enumerate() {
            let (inp, out) = (r.widths[i], r.widths[i + 1]);
            if w.len() != out || w.iter().any(|row| row.len() != inp) || b.len() != out {
                return invalid(format!("layer {i} does not match the recorded widths"));
            }
            let flat: Vec<f64> = w.into_iter().flatten().collect();
            parts.push((
                DMatrix::from_row_slice(out, inp, &flat),
                DVector::from_vec(b),
            ));
        }
        let mut net = WitnessNetwork::from_parts(parts, r.output_bound)?;
        net.seed = r.seed;
        Ok(net)
    }
}

/// `f(z)` for one input vector.
pub fn mlp_forward(net: &WitnessNetwork, z: &[f64]) -> Result<f64> {
    net.forward(z)
}

pub fn spectral_normalize(net: &mut WitnessNetwork) {
    net.spectral_normalize();
}

/// `mean f(projX) − mean f(projY)`; rows are points.
pub fn witness_objective(
    net: &WitnessNetwork,
    px: &DMatrix<f64>,
    py: &DMatrix<f64>,
) -> Result<f64> {
    if px.nrows() == 0 || py.nrows() == 0 {
        return invalid("both samples must be nonempty");
    }
    let fx = net.forward_rows(px)?;
    let fy = net.forward_rows(py)?;
    Ok(fx.mean() - fy.mean())
}

/// Parameter gradients, layer by layer.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Value and reverse-mode gradient of `Σ_i c_i f(z_i)` for columns `z_i` of `h0`.
fn weighted_value_and_grad(
    net: &WitnessNetwork,
    h0: DMatrix<f64>,
    coef: &[f64],
) -> (f64, Gradients) {
    let nl = net.layers.len();
    let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
    acts.push(h0);
    let mut out = DMatrix::zeros(0, 0);
    for (i, l) in net.layers.iter().enumerate() {
        let mut pre = &l.weight * &acts[i];
        for mut c in pre.column_iter_mut() {
            c += &l.bias;
        }
        if i + 1 < nl {
            pre.apply(|v| *v = v.max(0.0));
            acts.push(pre);
        } else {
            out = pre;
        }
    }
    let b = net.output_bound;
    let n = coef.len();
    let mut value = 0.0;
    let mut delta = DMatrix::zeros(1, n);
    for i in 0..n {
        let o = out[(0, i)];
        value += coef[i] * o.clamp(-b, b);
        if o.abs() <= b {
            delta[(0, i)] = coef[i];
        }
    }
    let mut gw = vec![DMatrix::zeros(0, 0); nl];
    let mut gb = vec![DVector::zeros(0); nl];
    for i in (0..nl).rev() {
        gw[i] = &delta * acts[i].transpose();
        gb[i] = delta.column_sum();
        if i > 0 {
            let mut back = net.layers[i].weight.transpose() * &delta;
            // Hidden activations are post-ReLU, so a zero marks an inactive unit.
            back.zip_apply(&acts[i], |g, a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            delta = back;
        }
    }
    (
        value,
        Gradients {
            weights: gw,
            biases: gb,
        },
    )
}

/// `witness_objective` and its gradient with respect to every weight and bias.
pub fn objective_gradient(
    net: &WitnessNetwork,
    px: &DMatrix<f64>,
    py: &DMatrix<f64>,
) -> Result<(f64, Gradients)> {
    if px.nrows() == 0 || py.nrows() == 0 {
        return invalid("both samples must be nonempty");
    }
    if px.ncols() != net.input_dim() || py.ncols() != net.input_dim() {
        return invalid("inputs do not match the network input dimension");
    }
    let (nx, ny) = (px.nrows(), py.nrows());
    let mut h0 = DMatrix::zeros(net.input_dim(), nx + ny);
    h0.columns_mut(0, nx).copy_from(&px.transpose());
    h0.columns_mut(nx, ny).copy_from(&py.transpose());
    let coef: Vec<f64> = std::iter::repeat_n(1.0 / nx as f64, nx)
        .chain(std::iter::repeat_n(-1.0 / ny as f64, ny))
        .collect();
    Ok(weighted_value_and_grad(net, h0, &coef))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    /// `None`: full batch when `n_fit ≤ 512`, else batches of 128.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    pub power_iterations: usize,
    pub warmup_iterations: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: None,
            learning_rate: 1e-3,
            seed: 0,
            power_iterations: 1,
            warmup_iterations: 20,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if self.batch_size == Some(0) {
            return invalid("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning rate must be positive");
        }
        if self.power_iterations == 0 {
            return invalid("power_iterations must be positive");
        }
        Ok(())
    }
}

/// Power iterations spent on the returned network so that the final
/// normalization uses a converged singular value estimate.
const POLISH_ITERATIONS: usize = 200;

#[derive(Debug, Clone)]
pub struct TrainedWitness {
    pub net: WitnessNetwork,
    /// Full-data objective of the returned network.
    pub objective: f64,
    /// Full-data objective right after initialization and warm-up.
    pub initial_objective: f64,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    mb: Vec<DVector<f64>>,
    vb: Vec<DVector<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &WitnessNetwork) -> Self {
        Self {
            m: net.layers.iter().map(|l| l.weight.map(|_| 0.0)).collect(),
            v: net.layers.iter().map(|l| l.weight.map(|_| 0.0)).collect(),
            mb: net.layers.iter().map(|l| l.bias.map(|_| 0.0)).collect(),
            vb: net.layers.iter().map(|l| l.bias.map(|_| 0.0)).collect(),
            t: 0,
        }
    }

    /// Ascent step along `g`.
    fn step(&mut self, net: &mut WitnessNetwork, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for (i, l) in net.layers.iter_mut().enumerate() {
            for (((p, m), v), gv) in l
                .weight
                .iter_mut()
                .zip(self.m[i].iter_mut())
                .zip(self.v[i].iter_mut())
                .zip(g.weights[i].iter())
            {
                upd(p, m, v, *gv);
            }
            for (((p, m), v), gv) in l
                .bias
                .iter_mut()
                .zip(self.mb[i].iter_mut())
                .zip(self.vb[i].iter_mut())
                .zip(g.biases[i].iter())
            {
                upd(p, m, v, *gv);
            }
        }
    }
}

/// Projects the fitting data through `u` and trains a witness on it.
pub fn train_witness(
    fit_x: &Sample,
    fit_y: &Sample,
    u: &ProjectionMatrix,
    arch: &NetworkArchitecture,
    opts: &TrainOptions,
) -> Result<TrainedWitness> {
    if fit_x.nrows() < 2 || fit_y.nrows() < 2 {
        return invalid("witness training needs at least two points per sample");
    }
    if fit_x.ncols() != u.d() || fit_y.ncols() != u.d() {
        return invalid("fitting data do not match the projection dimension");
    }
    let px = fit_x * u.as_matrix();
    let py = fit_y * u.as_matrix();
    train_witness_projected(&px, &py, arch, opts)
}

/// Training on already projected points (`n × k` each).
pub fn train_witness_projected(
    px: &DMatrix<f64>,
    py: &DMatrix<f64>,
    arch: &NetworkArchitecture,
    opts: &TrainOptions,
) -> Result<TrainedWitness> {
    opts.validate()?;
    if px.nrows() < 2 || py.nrows() < 2 {
        return invalid("witness training needs at least two points per sample");
    }
    if px.ncols() != arch.input_dim() || py.ncols() != arch.input_dim() {
        return invalid("projected data do not match the network input width");
    }
    if px.iter().chain(py.iter()).any(|v| !v.is_finite()) {
        return invalid("projected data must be finite");
    }
    match train_once(px, py, arch, opts, opts.seed) {
        Ok(t) => Ok(t),
        Err(Error::Solver(_)) => {
            let retry = derive_seed(opts.seed, tag::NETWORK, 1);
            train_once(px, py, arch, opts, retry).map_err(|e| match e {
                Error::Solver(m) => Error::Solver(format!("{m} (after one restart)")),
                other => other,
            })
        }
        Err(e) => Err(e),
    }
}

fn train_once(
    px: &DMatrix<f64>,
    py: &DMatrix<f64>,
    arch: &NetworkArchitecture,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainedWitness> {
    let mut net = WitnessNetwork::random(arch, seed);
    for _ in 0..opts.warmup_iterations {
        net.spectral_normalize_with(opts.power_iterations);
    }
    let (nx, ny) = (px.nrows(), py.nrows());
    let batch = match opts.batch_size {
        Some(b) => b,
        None if nx + ny <= 512 => nx + ny,
        None => 128,
    };
    let n_batches = (nx + ny).div_ceil(batch).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag::NETWORK, 0));
    let mut ix: Vec<usize> = (0..nx).collect();
    let mut iy: Vec<usize> = (0..ny).collect();
    let mut adam = Adam::new(&net);

    let initial_objective = witness_objective(&net, px, py)?;
    let mut best = (initial_objective, net.clone(), 0usize);
    for epoch in 0..opts.epochs {
        // With a single full batch the gradient pass below already yields
        // the objective of the current network.
        if epoch > 0 && n_batches > 1 {
            let obj = witness_objective(&net, px, py)?;
            if !obj.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite witness objective at epoch {epoch}"
                )));
            }
            if obj > best.0 {
                best = (obj, net.clone(), epoch);
            }
        }
        if n_batches > 1 {
            ix.shuffle(&mut rng);
            iy.shuffle(&mut rng);
        }
        for b in 0..n_batches {
            let sx = &ix[b * nx / n_batches..(b + 1) * nx / n_batches];
            let sy = &iy[b * ny / n_batches..(b + 1) * ny / n_batches];
            if sx.is_empty() || sy.is_empty() {
                continue;
            }
            let (bx, by) = if n_batches == 1 {
                (px.clone(), py.clone())
            } else {
                (px.select_rows(sx.iter()), py.select_rows(sy.iter()))
            };
            let (val, grad) = objective_gradient(&net, &bx, &by)?;
            if !val.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite witness objective at epoch {epoch}"
                )));
            }
            if n_batches == 1 && epoch > 0 && val > best.0 {
                best = (val, net.clone(), epoch);
            }
            adam.step(&mut net, &grad, opts.learning_rate);
            net.spectral_normalize_with(opts.power_iterations);
        }
    }
    let last = witness_objective(&net, px, py)?;
    if !last.is_finite() {
        return Err(Error::Solver(
            "non-finite witness objective after training".into(),
        ));
    }
    if last > best.0 {
        best = (last, net, opts.epochs);
    }
    let (_, mut net, best_epoch) = best;
    net.spectral_normalize_with(POLISH_ITERATIONS);
    let objective = witness_objective(&net, px, py)?;
    Ok(TrainedWitness {
        net,
        objective,
        initial_objective,
        best_epoch,
    })
}
