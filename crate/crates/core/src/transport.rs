//! Discrete 1-Wasserstein distances between uniform empirical measures.
//!
//! The general case is solved exactly by a transportation simplex working on
//! integer-scaled supplies (each source ships `n₂` units, each sink receives
//! `n₁`), so plans are exact vertices of the coupling polytope. Scalar
//! projections take a merge-based quantile fast path.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stiefel::ProjectionMatrix;
use crate::Sample;

/// A uniform empirical measure `(1/n) Σ δ_{x_i}` over the rows of `points`.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    points: DMatrix<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return invalid("discrete measure needs at least one atom");
        }
        if points.iter().any(|v| !v.is_finite()) {
            return invalid("discrete measure atoms must be finite");
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Mass of every atom.
    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// W₁ to another measure under the Euclidean ground cost.
    pub fn w1(&self, other: &DiscreteMeasure) -> Result<f64> {
        if self.dim() != other.dim() {
            return invalid("measures live in different dimensions");
        }
        if self.dim() == 1 {
            let xs: Vec<f64> = self.points.column(0).iter().copied().collect();
            let ys: Vec<f64> = other.points.column(0).iter().copied().collect();
            return wasserstein1_1d(&xs, &ys);
        }
        let cost = euclidean_cost(&self.points, &other.points);
        Ok(solve_discrete_ot(&cost, self.len(), other.len())?.value)
    }
}

/// A coupling of two uniform empirical measures together with its cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `n₁ × n₂` nonnegative matrix with row sums `1/n₁` and column sums `1/n₂`.
    pub matrix: DMatrix<f64>,
    /// `Σ π_ij c_ij` for the cost the plan was solved against.
    pub value: f64,
}

impl TransportPlan {
    pub fn n1(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n2(&self) -> usize {
        self.matrix.ncols()
    }

    /// Nonzero entries as `(i, j, π_ij)`, in row-major order.
    pub fn support(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.n1() + self.n2());
        for i in 0..self.n1() {
            for j in 0..self.n2() {
                let p = self.matrix[(i, j)];
                if p > 0.0 {
                    out.push((i, j, p));
                }
            }
        }
        out
    }

    /// Largest absolute deviation of the row and column sums from the uniform marginals.
    pub fn marginal_residual(&self) -> f64 {
        let (n1, n2) = (self.n1(), self.n2());
        let mut worst: f64 = 0.0;
        for i in 0..n1 {
            let s: f64 = self.matrix.row(i).iter().sum();
            worst = worst.max((s - 1.0 / n1 as f64).abs());
        }
        for j in 0..n2 {
            let s: f64 = self.matrix.column(j).iter().sum();
            worst = worst.max((s - 1.0 / n2 as f64).abs());
        }
        worst
    }
}

/// Exact W₁ between the uniform empirical measures on `xs` and `ys`.
///
/// Integrates `|F⁻¹(t) − G⁻¹(t)|` over the merged quantile breakpoints, which
/// sit on the lattice `1/(n·m)` and are therefore located exactly.
pub fn wasserstein1_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return invalid("wasserstein1_1d needs nonempty samples");
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return invalid("wasserstein1_1d needs finite samples");
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(sorted_w1(&a, &b))
}

pub(crate) fn sorted_w1(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as u64, b.len() as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0u64;
    let mut acc = 0.0;
    let total = n * m;
    while t < total {
        let next_a = (i as u64 + 1) * m;
        let next_b = (j as u64 + 1) * n;
        let next = next_a.min(next_b);
        acc += (next - t) as f64 * (a[i] - b[j]).abs();
        t = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    acc / total as f64
}

/// Pairwise Euclidean distances between the rows of `a` and `b`.
pub fn euclidean_cost(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n1, n2, d) = (a.nrows(), b.nrows(), a.ncols());
    DMatrix::from_fn(n1, n2, |i, j| {
        let mut s = 0.0;
        for c in 0..d {
            let diff = a[(i, c)] - b[(j, c)];
            s += diff * diff;
        }
        s.sqrt()
    })
}

/// Solves the discrete optimal transport problem between uniform marginals
/// `1/n₁` (rows) and `1/n₂` (columns) for the given cost.
pub fn solve_discrete_ot(cost: &DMatrix<f64>, n1: usize, n2: usize) -> Result<TransportPlan> {
    if n1 == 0 || n2 == 0 {
        return invalid("transport needs at least one atom on each side");
    }
    if cost.nrows() != n1 || cost.ncols() != n2 {
        return invalid(format!(
            "cost is {}x{} but marginals are {}x{}",
            cost.nrows(),
            cost.ncols(),
            n1,
            n2
        ));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return invalid("transport cost has a non-finite entry");
    }

    // Forced couplings.
    if n1 == 1 || n2 == 1 {
        let matrix = DMatrix::from_element(n1, n2, 1.0 / (n1 * n2) as f64);
        let value = matrix.component_mul(cost).sum();
        return Ok(TransportPlan { matrix, value });
    }

    let flows = TransportSimplex::new(cost, n1, n2).solve()?;
    let scale = 1.0 / (n1 * n2) as f64;
    let mut matrix = DMatrix::zeros(n1, n2);
    let mut value = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            let f = flows[i * n2 + j];
            if f > 0 {
                let p = f as f64 * scale;
                matrix[(i, j)] = p;
                value += p * cost[(i, j)];
            }
        }
    }
    Ok(TransportPlan { matrix, value })
}

/// Primal network simplex on the complete bipartite graph, with an artificial
/// root carrying the initial star basis.
///
/// Degeneracy is handled with strongly feasible spanning trees: the leaving arc
/// is the last blocking arc met when walking the pivot cycle from its apex in
/// the orientation of the entering arc. Entering arcs come from a cyclic block
/// search over arcs in row-major order.
struct TransportSimplex {
    n1: usize,
    n2: usize,
    root: usize,
    /// Row-major costs rescaled to `[-1, 1]`.
    cost: Vec<f64>,
    artificial_cost: f64,
    flow: Vec<i64>,
    adj: Vec<Vec<usize>>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// `true` when the arc to the parent points from the node towards the parent.
    up: Vec<bool>,
    depth: Vec<usize>,
    pot: Vec<f64>,
    next_arc: usize,
    block: usize,
    queue: Vec<usize>,
}

const NONE: usize = usize::MAX;
const REDUCED_COST_TOL: f64 = 1e-12;

impl TransportSimplex {
    fn new(cost: &DMatrix<f64>, n1: usize, n2: usize) -> Self {
        let scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut c = Vec::with_capacity(n1 * n2);
        for i in 0..n1 {
            for j in 0..n2 {
                c.push(cost[(i, j)] / scale);
            }
        }
        let nodes = n1 + n2 + 1;
        let n_real = n1 * n2;
        let mut flow = vec![0i64; n_real + n1 + n2];
        let mut adj = vec![Vec::new(); nodes];
        let root = n1 + n2;
        for v in 0..n1 + n2 {
            let a = n_real + v;
            flow[a] = if v < n1 { n2 as i64 } else { n1 as i64 };
            adj[v].push(a);
            adj[root].push(a);
        }
        let block = ((n_real as f64).sqrt().ceil() as usize).max(10).min(n_real);
        let mut s = Self {
            n1,
            n2,
            root,
            cost: c,
            artificial_cost: 2.0 * (n1 + n2 + 1) as f64,
            flow,
            adj,
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            up: vec![false; nodes],
            depth: vec![0; nodes],
            pot: vec![0.0; nodes],
            next_arc: 0,
            block,
            queue: Vec::with_capacity(nodes),
        };
        s.rebuild();
        s
    }

    fn n_real(&self) -> usize {
        self.n1 * self.n2
    }

    fn tail(&self, a: usize) -> usize {
        let nr = self.n_real();
        if a < nr {
            a / self.n2
        } else {
            let v = a - nr;
            if v < self.n1 {
                v
            } else {
                self.root
            }
        }
    }

    fn head(&self, a: usize) -> usize {
        let nr = self.n_real();
        if a < nr {
            self.n1 + a % self.n2
        } else {
            let v = a - nr;
            if v < self.n1 {
                self.root
            } else {
                v
            }
        }
    }

    fn arc_cost(&self, a: usize) -> f64 {
        if a < self.n_real() {
            self.cost[a]
        } else {
            self.artificial_cost
        }
    }

    /// Recomputes parents, depths and potentials from the root.
    fn rebuild(&mut self) {
        self.parent[self.root] = NONE;
        self.pred[self.root] = NONE;
        self.depth[self.root] = 0;
        self.pot[self.root] = 0.0;
        self.relabel_below(self.root);
    }

    /// Relabels every node reached from `start` without passing through its
    /// own predecessor arc; `start` itself must already be labelled.
    fn relabel_below(&mut self, start: usize) {
        self.queue.clear();
        self.queue.push(start);
        let mut head_idx = 0;
        while head_idx < self.queue.len() {
            let u = self.queue[head_idx];
            head_idx += 1;
            for k in 0..self.adj[u].len() {
                let a = self.adj[u][k];
                if a == self.pred[u] {
                    continue;
                }
                let (t, h) = (self.tail(a), self.head(a));
                let v = if t == u { h } else { t };
                self.parent[v] = u;
                self.pred[v] = a;
                self.depth[v] = self.depth[u] + 1;
                let c = self.arc_cost(a);
                if t == v {
                    self.up[v] = true;
                    self.pot[v] = self.pot[u] - c;
                } else {
                    self.up[v] = false;
                    self.pot[v] = self.pot[u] + c;
                }
                self.queue.push(v);
            }
        }
    }

    fn reduced_cost(&self, a: usize) -> f64 {
        let i = a / self.n2;
        let j = self.n1 + a % self.n2;
        self.cost[a] + self.pot[i] - self.pot[j]
    }

    fn find_entering(&mut self) -> Option<usize> {
        let nr = self.n_real();
        let mut best = None;
        let mut min = -REDUCED_COST_TOL;
        let mut left = self.block;
        for k in 0..nr {
            let a = (self.next_arc + k) % nr;
            let rc = self.reduced_cost(a);
            if rc < min {
                min = rc;
                best = Some(a);
            }
            left -= 1;
            if left == 0 {
                if best.is_some() {
                    self.next_arc = (a + 1) % nr;
                    return best;
                }
                left = self.block;
            }
        }
        best
    }

    fn remove_tree_arc(&mut self, a: usize) {
        for node in [self.tail(a), self.head(a)] {
            let list = &mut self.adj[node];
            if let Some(pos) = list.iter().position(|&x| x == a) {
                list.remove(pos);
            }
        }
    }

    fn pivot(&mut self, entering: usize) {
        let first = self.tail(entering);
        let second = self.head(entering);

        let (mut a, mut b) = (first, second);
        while a != b {
            if self.depth[a] >= self.depth[b] {
                a = self.parent[a];
            } else {
                b = self.parent[b];
            }
        }
        let join = a;

        let mut delta = i64::MAX;
        let mut u_out = NONE;
        let mut out_on_first = true;
        let mut u = first;
        while u != join {
            if self.up[u] {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if !self.up[u] {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                    out_on_first = false;
                }
            }
            u = self.parent[u];
        }
        debug_assert!(
            u_out != NONE,
            "bipartite cycles always contain a backward arc"
        );

        if delta > 0 {
            self.flow[entering] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                if self.up[u] {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                if self.up[u] {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }

        let leaving = self.pred[u_out];
        self.remove_tree_arc(leaving);
        self.adj[first].push(entering);
        self.adj[second].push(entering);

        // Only the subtree cut off below `u_out` moves; it hangs from the
        // entering arc afterwards.
        let (v, anchor) = if out_on_first {
            (first, second)
        } else {
            (second, first)
        };
        let c = self.cost[entering];
        self.parent[v] = anchor;
        self.pred[v] = entering;
        self.depth[v] = self.depth[anchor] + 1;
        if v == first {
            self.up[v] = true;
            self.pot[v] = self.pot[anchor] - c;
        } else {
            self.up[v] = false;
            self.pot[v] = self.pot[anchor] + c;
        }
        self.relabel_below(v);
    }

    fn solve(mut self) -> Result<Vec<i64>> {
        let max_pivots = 50 * (self.n_real() + self.n1 + self.n2) + 1000;
        let mut pivots = 0;
        while let Some(a) = self.find_entering() {
            self.pivot(a);
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::Solver(format!(
                    "transport simplex exceeded {max_pivots} pivots"
                )));
            }
        }
        let nr = self.n_real();
        if self.flow[nr..].iter().any(|&f| f != 0) {
            return Err(Error::Solver(
                "artificial arcs still carry flow at optimality".into(),
            ));
        }
        self.flow.truncate(nr);
        Ok(self.flow)
    }
}

/// Rows of `x` projected through `u`: an `n × k` matrix.
pub fn project(x: &Sample, u: &ProjectionMatrix) -> DMatrix<f64> {
    x * u.as_matrix()
}

/// W₁ between the pushforwards `{Uᵀx_i}` and `{Uᵀy_j}`.
pub fn empirical_projected_w1(x: &Sample, y: &Sample, u: &ProjectionMatrix) -> Result<f64> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return invalid("projected W1 needs nonempty samples");
    }
    if x.ncols() != u.d() || y.ncols() != u.d() {
        return invalid(format!(
            "samples have dimension {} / {} but the projection expects {}",
            x.ncols(),
            y.ncols(),
            u.d()
        ));
    }
    let px = project(x, u);
    let py = project(y, u);
    projected_w1(&px, &py)
}

/// W₁ between two already-projected point clouds.
pub(crate) fn projected_w1(px: &DMatrix<f64>, py: &DMatrix<f64>) -> Result<f64> {
    if px.ncols() == 1 {
        let xs: Vec<f64> = px.column(0).iter().copied().collect();
        let ys: Vec<f64> = py.column(0).iter().copied().collect();
        return wasserstein1_1d(&xs, &ys);
    }
    let cost = euclidean_cost(px, py);
    Ok(solve_discrete_ot(&cost, px.nrows(), py.nrows())?.value)
}

/// W₁ between the raw samples under the Euclidean ground cost.
pub fn empirical_w1(x: &Sample, y: &Sample) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return invalid("samples have different dimensions");
    }
    DiscreteMeasure::new(x.clone())?.w1(&DiscreteMeasure::new(y.clone())?)
}

/// Unit directions of the deterministic angular grid used by [`pw_bruteforce`].
///
/// Hyperspherical angles `θ₁..θ_{d-2} ∈ {jπ/res : j = 0..=res}` and
/// `θ_{d-1} ∈ {jπ/res : j = 0..res}` cover every direction up to sign, and the
/// grid at resolution `res` is contained in the grid at `2·res`.
pub fn angular_grid(d: usize, resolution: usize) -> Result<Vec<Vec<f64>>> {
    if d == 0 || d > 4 {
        return invalid(format!("angular grid supports 1 <= d <= 4, got d = {d}"));
    }
    if resolution == 0 {
        return invalid("grid resolution must be positive");
    }
    if d == 1 {
        return Ok(vec![vec![1.0]]);
    }
    let step = std::f64::consts::PI / resolution as f64;
    let mut out = Vec::new();
    let mut idx = vec![0usize; d - 1];
    loop {
        let mut u = vec![0.0; d];
        let mut sin_prod = 1.0;
        for (a, &j) in idx.iter().enumerate() {
            let theta = j as f64 * step;
            u[a] = sin_prod * theta.cos();
            sin_prod *= theta.sin();
        }
        u[d - 1] = sin_prod;
        out.push(u);

        // Odometer increment; the last angle stops short of π.
        let mut pos = d - 2;
        loop {
            let limit = if pos == d - 2 {
                resolution - 1
            } else {
                resolution
            };
            if idx[pos] < limit {
                idx[pos] += 1;
                break;
            }
            idx[pos] = 0;
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
        }
    }
}

/// Grid-search oracle for the projected W₁ over unit directions (`k = 1`, `d ≤ 4`).
pub fn pw_bruteforce(
    x: &Sample,
    y: &Sample,
    k: usize,
    resolution: usize,
) -> Result<(f64, ProjectionMatrix)> {
    let d = x.ncols();
    if k != 1 || d > 4 || d == 0 {
        return invalid(format!(
            "brute-force projected W1 supports k = 1 and d <= 4 (got d = {d}, k = {k})"
        ));
    }
    if y.ncols() != d {
        return invalid("samples have different dimensions");
    }
    let mut best = f64::NEG_INFINITY;
    let mut arg = vec![0.0; d];
    let mut px = vec![0.0; x.nrows()];
    let mut py = vec![0.0; y.nrows()];
    for u in angular_grid(d, resolution)? {
        for (i, v) in px.iter_mut().enumerate() {
            *v = (0..d).map(|c| x[(i, c)] * u[c]).sum();
        }
        for (j, v) in py.iter_mut().enumerate() {
            *v = (0..d).map(|c| y[(j, c)] * u[c]).sum();
        }
        let w = wasserstein1_1d(&px, &py)?;
        if w > best {
            best = w;
            arg = u;
        }
    }
    let u = ProjectionMatrix::new(DMatrix::from_column_slice(d, 1, &arg))?;
    Ok((best, u))
}
