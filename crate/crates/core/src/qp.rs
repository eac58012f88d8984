//! Convex quadratic programming by active sets.
//!
//! Problems are stated as maximisation of a concave quadratic
//!
//! ```text
//! maximise  xᵀQx + fᵀx   subject to  A x ≤ b,  C x = d,  l ≤ x ≤ u
//! ```
//!
//! with `Q` negative semidefinite. Coordinates without curvature receive a
//! small ridge so that the Hessian `G = -2Q` can be factored as `L Lᵀ`; the
//! ridge is reported in the solution. In the variables `z = Lᵀx` the problem
//! becomes a projection-like program with identity Hessian.
//!
//! The solve has two phases sharing one orthogonal factorisation `J, R` of
//! the working set (updated by Givens rotations):
//!
//! 1. a dual active-set pass computes the point of the feasible set closest
//!    to the origin, or returns a Farkas certificate of infeasibility;
//! 2. a primal active-set pass starts from that point and improves the
//!    objective monotonically until the multipliers are nonnegative.
//!
//! Entering and leaving constraints are chosen deterministically (most
//! violated or most negative first, lowest index on ties).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sparse row `Σ coef · x[idx]`. Repeated indices are summed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
}

impl LinearRow {
    pub fn new(terms: Vec<(usize, f64)>) -> Self {
        LinearRow { terms }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, v)| v * x[i]).sum()
    }

    /// Same row with duplicate indices merged and zeros removed, sorted.
    fn canonical(&self) -> Vec<(usize, f64)> {
        let mut t = self.terms.clone();
        t.sort_by_key(|&(i, _)| i);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(t.len());
        for (i, v) in t {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => out.push((i, v)),
            }
        }
        out.retain(|&(_, v)| v != 0.0);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadratic {
    Diagonal(Vec<f64>),
    /// Row-major symmetric matrix.
    Dense(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub n: usize,
    pub quadratic: Quadratic,
    pub linear: Vec<f64>,
    pub ineq: Vec<LinearRow>,
    pub ineq_rhs: Vec<f64>,
    pub eq: Vec<LinearRow>,
    pub eq_rhs: Vec<f64>,
    /// Per-variable bounds; empty vectors mean no bounds.
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl QpProblem {
    pub fn new(n: usize) -> Self {
        QpProblem {
            n,
            quadratic: Quadratic::Diagonal(vec![0.0; n]),
            linear: vec![0.0; n],
            ineq: Vec::new(),
            ineq_rhs: Vec::new(),
            eq: Vec::new(),
            eq_rhs: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    /// Adds `row · x ≤ rhs` and returns its index.
    pub fn add_ineq(&mut self, row: LinearRow, rhs: f64) -> usize {
        self.ineq.push(row);
        self.ineq_rhs.push(rhs);
        self.ineq.len() - 1
    }

    /// Adds `row · x = rhs` and returns its index.
    pub fn add_eq(&mut self, row: LinearRow, rhs: f64) -> usize {
        self.eq.push(row);
        self.eq_rhs.push(rhs);
        self.eq.len() - 1
    }

    pub fn set_bounds(&mut self, lower: Vec<Option<f64>>, upper: Vec<Option<f64>>) {
        self.lower = lower;
        self.upper = upper;
    }

    /// `xᵀQx + fᵀx`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let quad = match &self.quadratic {
            Quadratic::Diagonal(q) => q.iter().zip(x).map(|(q, x)| q * x * x).sum::<f64>(),
            Quadratic::Dense(q) => q
                .iter()
                .zip(x)
                .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .sum(),
        };
        quad + self.linear.iter().zip(x).map(|(f, x)| f * x).sum::<f64>()
    }

    /// Objective including the ridge recorded in a solution, i.e. the
    /// function the solver actually maximised.
    pub fn regularized_objective(&self, x: &[f64], ridge: &[f64]) -> f64 {
        self.objective(x) - 0.5 * ridge.iter().zip(x).map(|(r, x)| r * x * x).sum::<f64>()
    }

    fn check(&self) -> Result<(), QpError> {
        let dim = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.linear.len() != self.n {
            return dim("linear term length");
        }
        match &self.quadratic {
            Quadratic::Diagonal(q) if q.len() != self.n => return dim("quadratic diagonal length"),
            Quadratic::Dense(q) => {
                if q.len() != self.n || q.iter().any(|r| r.len() != self.n) {
                    return dim("quadratic matrix shape");
                }
                for i in 0..self.n {
                    for j in 0..i {
                        let (a, b) = (q[i][j], q[j][i]);
                        if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                            return dim("quadratic matrix is not symmetric");
                        }
                    }
                }
            }
            _ => {}
        }
        if self.ineq.len() != self.ineq_rhs.len() || self.eq.len() != self.eq_rhs.len() {
            return dim("right-hand side length");
        }
        if (!self.lower.is_empty() && self.lower.len() != self.n)
            || (!self.upper.is_empty() && self.upper.len() != self.n)
        {
            return dim("bound vector length");
        }
        for row in self.ineq.iter().chain(&self.eq) {
            if row
                .terms
                .iter()
                .any(|&(i, v)| i >= self.n || !v.is_finite())
            {
                return dim("row index out of range or non-finite coefficient");
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.linear)
            || !finite(&self.eq_rhs)
            || self.ineq_rhs.iter().any(|b| b.is_nan())
        {
            return dim("non-finite data");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// The final working set is optimal for the solver but the KKT
    /// residuals exceed the tolerance.
    Degenerate,
}

/// Nonnegative residuals of the optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// `xᵀQx + fᵀx` without the ridge.
    pub objective: f64,
    pub ineq_multipliers: Vec<f64>,
    pub eq_multipliers: Vec<f64>,
    pub lower_multipliers: Vec<f64>,
    pub upper_multipliers: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub phase1_iterations: usize,
    /// Curvature added to the Hessian `-2Q`, per variable.
    pub ridge: Vec<f64>,
    pub kkt: KktResidual,
    /// Regularised objective after each primal iteration, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

/// Farkas certificate: nonnegative inequality weights (bounds written as
/// `≤` rows) and free equality weights whose combination of rows vanishes
/// while the combined right-hand side, `gap`, is negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarkasCertificate {
    pub ineq: Vec<f64>,
    pub eq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub gap: f64,
}

impl FarkasCertificate {
    /// Largest entry of `Σ w_i a_i`, which should vanish.
    pub fn combination_residual(&self, prob: &QpProblem) -> f64 {
        let mut acc = vec![0.0; prob.n];
        for (row, w) in prob
            .ineq
            .iter()
            .zip(&self.ineq)
            .chain(prob.eq.iter().zip(&self.eq))
        {
            for &(i, v) in &row.terms {
                acc[i] += w * v;
            }
        }
        for (i, w) in self.lower.iter().enumerate() {
            acc[i] -= w;
        }
        for (i, w) in self.upper.iter().enumerate() {
            acc[i] += w;
        }
        acc.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("problem is infeasible (certificate gap {})", .0.gap)]
    Infeasible(Box<FarkasCertificate>),
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("ill-conditioned working set (pivot {0:e})")]
    IllConditioned(f64),
    #[error("objective is not concave (pivot {0:e})")]
    NotConcave(f64),
    #[error("malformed problem: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    /// Optimality tolerance on the scaled KKT residuals.
    pub tol: f64,
    /// Feasibility tolerance, relative to `1 + |rhs|`.
    pub feas_tol: f64,
    /// Iteration cap; `None` means `50 (n + m)`.
    pub max_iter: Option<usize>,
    /// Curvature added to coordinates without any.
    pub ridge: f64,
    pub record_trace: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-8,
            feas_tol: 1e-11,
            max_iter: None,
            ridge: 1e-9,
            record_trace: false,
        }
    }
}

pub fn solve_qp(prob: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    QpSolver::new(prob, *opts)?.solve()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Eq(usize),
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone)]
struct Con {
    /// `L⁻¹ a / ‖L⁻¹ a‖`.
    row: Vec<(usize, f64)>,
    rhs: f64,
    /// `‖L⁻¹ a‖`; zero marks an empty row.
    scale: f64,
    /// Feasibility threshold in the transformed units.
    thr: f64,
    source: Source,
}

impl Con {
    fn is_eq(&self) -> bool {
        matches!(self.source, Source::Eq(_))
    }

    fn dot(&self, z: &[f64]) -> f64 {
        self.row.iter().map(|&(i, v)| v * z[i]).sum()
    }
}

#[derive(Debug, Clone)]
enum Chol {
    Diagonal(Vec<f64>),
    /// Lower triangle, row-major.
    Dense(Vec<Vec<f64>>),
}

impl Chol {
    /// `L⁻¹ a` for a sparse `a`.
    fn forward(&self, a: &[(usize, f64)], n: usize) -> Vec<(usize, f64)> {
        match self {
            Chol::Diagonal(l) => a.iter().map(|&(i, v)| (i, v / l[i])).collect(),
            Chol::Dense(l) => {
                let mut y = vec![0.0; n];
                for &(i, v) in a {
                    y[i] += v;
                }
                let first = a.iter().map(|&(i, _)| i).min().unwrap_or(n);
                for i in first..n {
                    let mut s = y[i];
                    for k in first..i {
                        s -= l[i][k] * y[k];
                    }
                    y[i] = s / l[i][i];
                }
                y.into_iter()
                    .enumerate()
                    .filter(|&(_, v)| v != 0.0)
                    .collect()
            }
        }
    }

    /// `x = L⁻ᵀ z`.
    fn to_x(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Chol::Diagonal(l) => z.iter().zip(l).map(|(z, l)| z / l).collect(),
            Chol::Dense(l) => {
                let n = z.len();
                let mut x = vec![0.0; n];
                for i in (0..n).rev() {
                    let mut s = z[i];
                    for k in i + 1..n {
                        s -= l[k][i] * x[k];
                    }
                    x[i] = s / l[i][i];
                }
                x
            }
        }
    }

    /// `z = Lᵀ x`.
    fn to_z(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Chol::Diagonal(l) => x.iter().zip(l).map(|(x, l)| x * l).collect(),
            Chol::Dense(l) => {
                let n = x.len();
                (0..n)
                    .map(|i| (i..n).map(|k| l[k][i] * x[k]).sum())
                    .collect()
            }
        }
    }
}

/// Orthogonal factorisation of the working-set normals `N = J₁ R`.
#[derive(Debug, Clone)]
struct Factor {
    n: usize,
    /// Column-major `n × n`.
    j: Vec<f64>,
    /// Upper-triangular columns; column `k` has `k + 1` entries.
    r: Vec<Vec<f64>>,
    /// `(constraint id, orientation)` per column.
    active: Vec<(usize, f64)>,
}

const DEPENDENCE_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-14;

impl Factor {
    fn identity(n: usize) -> Self {
        let mut j = vec![0.0; n * n];
        for k in 0..n {
            j[k * n + k] = 1.0;
        }
        Factor {
            n,
            j,
            r: Vec::new(),
            active: Vec::new(),
        }
    }

    fn q(&self) -> usize {
        self.active.len()
    }

    fn col(&self, k: usize) -> &[f64] {
        &self.j[k * self.n..(k + 1) * self.n]
    }

    /// `Jᵀ (σ a)`.
    fn jt_sparse(&self, a: &[(usize, f64)], sign: f64) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                let c = self.col(k);
                sign * a.iter().map(|&(i, v)| c[i] * v).sum::<f64>()
            })
            .collect()
    }

    fn rotate(&mut self, k1: usize, k2: usize, c: f64, s: f64) {
        let n = self.n;
        let (lo, hi) = self.j.split_at_mut(k2 * n);
        let a = &mut lo[k1 * n..(k1 + 1) * n];
        let b = &mut hi[..n];
        for (x, y) in a.iter_mut().zip(b.iter_mut()) {
            let (xa, yb) = (*x, *y);
            *x = c * xa + s * yb;
            *y = -s * xa + c * yb;
        }
    }

    /// Append a constraint with `d = Jᵀ(σa)`.
    fn add(&mut self, entry: (usize, f64), mut d: Vec<f64>) -> Result<(), QpError> {
        let q = self.q();
        for k in (q + 1..self.n).rev() {
            if d[k] == 0.0 {
                continue;
            }
            let h = d[k - 1].hypot(d[k]);
            let (c, s) = (d[k - 1] / h, d[k] / h);
            d[k - 1] = h;
            d[k] = 0.0;
            self.rotate(k - 1, k, c, s);
        }
        if d[q].abs() < PIVOT_TOL {
            return Err(QpError::IllConditioned(d[q].abs()));
        }
        d.truncate(q + 1);
        self.r.push(d);
        self.active.push(entry);
        Ok(())
    }

    fn remove(&mut self, pos: usize) {
        self.r.remove(pos);
        self.active.remove(pos);
        let q = self.q();
        for i in pos..q {
            let (a, b) = (self.r[i][i], self.r[i][i + 1]);
            let h = a.hypot(b);
            if h != 0.0 && b != 0.0 {
                let (c, s) = (a / h, b / h);
                for k in i..q {
                    let (x, y) = (self.r[k][i], self.r[k][i + 1]);
                    self.r[k][i] = c * x + s * y;
                    self.r[k][i + 1] = -s * x + c * y;
                }
                self.rotate(i, i + 1, c, s);
            }
            self.r[i].truncate(i + 1);
        }
    }

    /// Solve `R ν = v` for the leading `q` entries of `v`.
    fn solve_r(&self, v: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut rhs = v[..q].to_vec();
        let mut nu = vec![0.0; q];
        for k in (0..q).rev() {
            nu[k] = rhs[k] / self.r[k][k];
            for i in 0..k {
                rhs[i] -= self.r[k][i] * nu[k];
            }
        }
        nu
    }

    /// Solve `Rᵀ u = v`.
    fn solve_rt(&self, v: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut u = vec![0.0; q];
        for k in 0..q {
            let s: f64 = (0..k).map(|i| self.r[k][i] * u[i]).sum();
            u[k] = (v[k] - s) / self.r[k][k];
        }
        u
    }

    /// `J₁ u`.
    fn range_combine(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (k, &uk) in u.iter().enumerate() {
            for (o, ci) in out.iter_mut().zip(self.col(k)) {
                *o += uk * ci;
            }
        }
        out
    }

    /// `J₂ J₂ᵀ v`, the projection onto the null space of the working set.
    fn null_project(&self, v: &[f64]) -> Vec<f64> {
        let (n, q) = (self.n, self.q());
        if n - q <= q {
            let mut out = vec![0.0; n];
            for k in q..n {
                let c = self.col(k);
                let w: f64 = c.iter().zip(v).map(|(a, b)| a * b).sum();
                for (o, ci) in out.iter_mut().zip(c) {
                    *o += w * ci;
                }
            }
            out
        } else {
            let mut out = v.to_vec();
            for k in 0..q {
                let c = self.col(k);
                let w: f64 = c.iter().zip(v).map(|(a, b)| a * b).sum();
                for (o, ci) in out.iter_mut().zip(c) {
                    *o -= w * ci;
                }
            }
            out
        }
    }

    /// `J₂ d₂` from precomputed `d = Jᵀa`.
    fn null_combine(&self, d: &[f64]) -> Vec<f64> {
        let (n, q) = (self.n, self.q());
        let mut out = vec![0.0; n];
        for k in q..n {
            if d[k] == 0.0 {
                continue;
            }
            for (o, ci) in out.iter_mut().zip(self.col(k)) {
                *o += d[k] * ci;
            }
        }
        out
    }

    /// `J₁ᵀ v`.
    fn range_coords(&self, v: &[f64]) -> Vec<f64> {
        (0..self.q())
            .map(|k| self.col(k).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// A prepared problem: factored Hessian and transformed constraints. Can be
/// solved once and then reused for projections onto the feasible set.
#[derive(Debug, Clone)]
pub struct QpSolver {
    prob: QpProblem,
    opts: QpOptions,
    chol: Chol,
    ridge: Vec<f64>,
    cons: Vec<Con>,
    c_tilde: Vec<f64>,
    trivially_infeasible: Option<usize>,
    max_iter: usize,
}

/// Projections onto the feasible set from a fixed starting point, sharing
/// the factorisation of the constraints active there.
pub struct Projector<'a> {
    solver: &'a QpSolver,
    start: Working,
}

impl Projector<'_> {
    pub fn project(&self, target: &[f64]) -> Result<Vec<f64>, QpError> {
        let s = self.solver;
        let c: Vec<f64> = s.chol.to_z(target).iter().map(|v| -v).collect();
        let mut w = self.start.clone();
        let mut iters = 0;
        let mut trace = Vec::new();
        s.primal_phase(&mut w, &c, &mut iters, &mut trace)?;
        Ok(s.chol.to_x(&w.z))
    }
}

#[derive(Clone)]
struct Working {
    z: Vec<f64>,
    f: Factor,
    is_active: Vec<bool>,
}

impl QpSolver {
    pub fn new(prob: &QpProblem, opts: QpOptions) -> Result<Self, QpError> {
        prob.check()?;
        let n = prob.n;
        let (chol, ridge) = factor_hessian(&prob.quadratic, n, opts.ridge)?;

        let mut cons = Vec::new();
        let mut push = |a: Vec<(usize, f64)>, rhs: f64, source: Source| {
            cons.push(make_con(&chol, n, &a, rhs, source, opts.feas_tol));
        };
        for (i, row) in prob.eq.iter().enumerate() {
            push(row.canonical(), prob.eq_rhs[i], Source::Eq(i));
        }
        for (i, row) in prob.ineq.iter().enumerate() {
            if prob.ineq_rhs[i] != f64::INFINITY {
                push(row.canonical(), prob.ineq_rhs[i], Source::Ineq(i));
            }
        }
        for (i, l) in prob.lower.iter().enumerate() {
            if let Some(l) = l.filter(|l| l.is_finite()) {
                push(vec![(i, -1.0)], -l, Source::Lower(i));
            }
        }
        for (i, u) in prob.upper.iter().enumerate() {
            if let Some(u) = u.filter(|u| u.is_finite()) {
                push(vec![(i, 1.0)], u, Source::Upper(i));
            }
        }
        let trivially_infeasible = cons.iter().position(|c| {
            c.scale == 0.0
                && if c.is_eq() {
                    c.rhs.abs() > c.thr
                } else {
                    c.rhs < -c.thr
                }
        });
        let neg_f: Vec<(usize, f64)> = prob.linear.iter().map(|f| -f).enumerate().collect();
        let mut c_tilde = vec![0.0; n];
        for (i, v) in chol.forward(&neg_f, n) {
            c_tilde[i] = v;
        }
        let m = prob.ineq.len() + prob.eq.len() + 2 * n;
        Ok(QpSolver {
            prob: prob.clone(),
            max_iter: opts.max_iter.unwrap_or(50 * (n + m)),
            opts,
            chol,
            ridge,
            cons,
            c_tilde,
            trivially_infeasible,
        })
    }

    pub fn problem(&self) -> &QpProblem {
        &self.prob
    }

    /// Curvature added to `-2Q` per variable.
    pub fn ridge(&self) -> &[f64] {
        &self.ridge
    }

    pub fn solve(&self) -> Result<QpSolution, QpError> {
        if let Some(id) = self.trivially_infeasible {
            let c = &self.cons[id];
            let sign = if c.is_eq() && c.rhs > 0.0 { -1.0 } else { 1.0 };
            return Err(self.certificate(&[(id, sign, 1.0)]));
        }
        let mut iters = 0;
        let zero = vec![0.0; self.prob.n];
        let mut w = self.dual_phase(&zero, &mut iters)?;
        let phase1 = iters;
        let mut trace = Vec::new();
        let nu = self.primal_phase(&mut w, &self.c_tilde, &mut iters, &mut trace)?;
        Ok(self.finish(&w, &nu, iters, phase1, trace))
    }

    /// Point of the feasible set closest to `target` in the Hessian metric,
    /// starting from the feasible point `from` and the constraints active
    /// there.
    pub fn project(&self, from: &[f64], target: &[f64]) -> Result<Vec<f64>, QpError> {
        self.projector(from)?.project(target)
    }

    /// Prepare repeated projections from the same feasible point.
    pub fn projector(&self, from: &[f64]) -> Result<Projector<'_>, QpError> {
        let n = self.prob.n;
        let mut w = Working {
            z: self.chol.to_z(from),
            f: Factor::identity(n),
            is_active: vec![false; self.cons.len()],
        };
        for (id, con) in self.cons.iter().enumerate() {
            if con.scale == 0.0 {
                continue;
            }
            let v = con.dot(&w.z) - con.rhs;
            if con.is_eq() || v.abs() <= 10.0 * con.thr {
                if w.f.q() == n {
                    break;
                }
                let d = w.f.jt_sparse(&con.row, 1.0);
                let d2: f64 = d[w.f.q()..].iter().map(|x| x * x).sum::<f64>().sqrt();
                if d2 > 1e-8 {
                    w.f.add((id, 1.0), d)?;
                    w.is_active[id] = true;
                }
            }
        }
        Ok(Projector {
            solver: self,
            start: w,
        })
    }

    fn certificate(&self, weights: &[(usize, f64, f64)]) -> QpError {
        let p = &self.prob;
        let mut cert = FarkasCertificate {
            ineq: vec![0.0; p.ineq.len()],
            eq: vec![0.0; p.eq.len()],
            lower: vec![0.0; p.n],
            upper: vec![0.0; p.n],
            gap: 0.0,
        };
        for &(id, sign, y) in weights {
            let c = &self.cons[id];
            let w = if c.scale > 0.0 {
                sign * y / c.scale
            } else {
                sign * y
            };
            match c.source {
                Source::Eq(i) => {
                    cert.eq[i] += w;
                    cert.gap += w * p.eq_rhs[i];
                }
                Source::Ineq(i) => {
                    cert.ineq[i] += w;
                    cert.gap += w * p.ineq_rhs[i];
                }
                Source::Lower(i) => {
                    cert.lower[i] += w;
                    cert.gap -= w * p.lower[i].unwrap_or(0.0);
                }
                Source::Upper(i) => {
                    cert.upper[i] += w;
                    cert.gap += w * p.upper[i].unwrap_or(0.0);
                }
            }
        }
        QpError::Infeasible(Box::new(cert))
    }

    /// Dual active-set pass minimising `½‖z‖² + cᵀz` over the feasible set.
    fn dual_phase(&self, c: &[f64], iters: &mut usize) -> Result<Working, QpError> {
        let n = self.prob.n;
        let mut w = Working {
            z: c.iter().map(|v| -v).collect(),
            f: Factor::identity(n),
            is_active: vec![false; self.cons.len()],
        };
        let mut nu: Vec<f64> = Vec::new();
        for id in 0..self.cons.len() {
            if self.cons[id].is_eq() && self.cons[id].scale > 0.0 {
                self.dual_add(&mut w, &mut nu, id, iters)?;
            }
        }
        loop {
            let mut best: Option<(usize, f64)> = None;
            for (id, con) in self.cons.iter().enumerate() {
                if con.is_eq() || con.scale == 0.0 || w.is_active[id] {
                    continue;
                }
                let v = con.dot(&w.z) - con.rhs;
                if v > con.thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((id, v));
                }
            }
            match best {
                None => return Ok(w),
                Some((id, _)) => self.dual_add(&mut w, &mut nu, id, iters)?,
            }
        }
    }

    fn dual_add(
        &self,
        w: &mut Working,
        nu: &mut Vec<f64>,
        id: usize,
        iters: &mut usize,
    ) -> Result<(), QpError> {
        let con = &self.cons[id];
        let mut sign = 1.0;
        let mut v = con.dot(&w.z) - con.rhs;
        if con.is_eq() && v < 0.0 {
            sign = -1.0;
            v = -v;
        }
        let mut u_p = 0.0;
        loop {
            *iters += 1;
            if *iters > self.max_iter {
                return Err(QpError::IterationLimit(self.max_iter));
            }
            let q = w.f.q();
            let d = w.f.jt_sparse(&con.row, sign);
            let d2sq: f64 = d[q..].iter().map(|x| x * x).sum();
            let r: Vec<f64> = w.f.solve_r(&d).into_iter().map(|x| -x).collect();

            let mut t2 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for pos in 0..q {
                let (aid, _) = w.f.active[pos];
                if self.cons[aid].is_eq() || r[pos] >= 0.0 {
                    continue;
                }
                let t = (-nu[pos] / r[pos]).max(0.0);
                let better = match drop {
                    None => true,
                    Some(bp) => t < t2 || (t == t2 && aid < w.f.active[bp].0),
                };
                if better {
                    t2 = t;
                    drop = Some(pos);
                }
            }
            let t1 = if d2sq.sqrt() > DEPENDENCE_TOL {
                v / d2sq
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                if con.is_eq() && v <= con.thr {
                    // Redundant equality, already satisfied.
                    return Ok(());
                }
                let mut weights: Vec<(usize, f64, f64)> = vec![(id, sign, 1.0)];
                for (pos, &(aid, s)) in w.f.active.iter().enumerate() {
                    weights.push((aid, s, r[pos]));
                }
                return Err(self.certificate(&weights));
            }
            if t1.is_infinite() {
                for (x, ri) in nu.iter_mut().zip(&r) {
                    *x += t2 * ri;
                }
                u_p += t2;
                let pos = drop.expect("finite dual step has a leaving constraint");
                w.is_active[w.f.active[pos].0] = false;
                nu.remove(pos);
                w.f.remove(pos);
                continue;
            }
            let t = t1.min(t2);
            let s = w.f.null_combine(&d);
            for (zi, si) in w.z.iter_mut().zip(&s) {
                *zi -= t * si;
            }
            for (x, ri) in nu.iter_mut().zip(&r) {
                *x += t * ri;
            }
            u_p += t;
            if t1 <= t2 {
                w.f.add((id, sign), d)?;
                w.is_active[id] = true;
                nu.push(u_p);
                return Ok(());
            }
            let pos = drop.expect("partial step has a leaving constraint");
            w.is_active[w.f.active[pos].0] = false;
            nu.remove(pos);
            w.f.remove(pos);
            v = sign * (con.dot(&w.z) - con.rhs);
        }
    }

    /// Primal active-set pass minimising `½‖z‖² + cᵀz` from a feasible
    /// working set. Returns the multipliers of the final working set.
    fn primal_phase(
        &self,
        w: &mut Working,
        c: &[f64],
        iters: &mut usize,
        trace: &mut Vec<f64>,
    ) -> Result<Vec<f64>, QpError> {
        let n = self.prob.n;
        loop {
            *iters += 1;
            if *iters > self.max_iter {
                return Err(QpError::IterationLimit(self.max_iter));
            }
            let g: Vec<f64> = w.z.iter().zip(c).map(|(z, c)| z + c).collect();
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let p: Vec<f64> = w.f.null_project(&g).into_iter().map(|x| -x).collect();
            let pmax = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if self.opts.record_trace {
                trace.push(self.z_objective(&w.z, c));
            }

            if pmax <= 1e-13 * (1.0 + gmax) || w.f.q() == n {
                let d1 = w.f.range_coords(&g);
                let neg: Vec<f64> = d1.iter().map(|x| -x).collect();
                let nu = w.f.solve_r(&neg);
                let numax = nu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let mut leave: Option<usize> = None;
                for (pos, &(id, _)) in w.f.active.iter().enumerate() {
                    if self.cons[id].is_eq() || nu[pos] >= -1e-12 * (1.0 + numax) {
                        continue;
                    }
                    let better = match leave {
                        None => true,
                        Some(lp) => {
                            nu[pos] < nu[lp] || (nu[pos] == nu[lp] && id < w.f.active[lp].0)
                        }
                    };
                    if better {
                        leave = Some(pos);
                    }
                }
                match leave {
                    None => {
                        self.refine(w);
                        let g: Vec<f64> = w.z.iter().zip(c).map(|(z, c)| z + c).collect();
                        let neg: Vec<f64> = w.f.range_coords(&g).iter().map(|x| -x).collect();
                        return Ok(w.f.solve_r(&neg));
                    }
                    Some(pos) => {
                        w.is_active[w.f.active[pos].0] = false;
                        w.f.remove(pos);
                        continue;
                    }
                }
            }

            let mut alpha = 1.0;
            let mut block: Option<usize> = None;
            for (id, con) in self.cons.iter().enumerate() {
                if con.is_eq() || con.scale == 0.0 || w.is_active[id] {
                    continue;
                }
                let ap = con.dot(&p);
                if ap <= 1e-14 * pmax {
                    continue;
                }
                let slack = (con.rhs - con.dot(&w.z)).max(0.0);
                let a = slack / ap;
                if a < alpha {
                    alpha = a;
                    block = Some(id);
                }
            }
            for (zi, pi) in w.z.iter_mut().zip(&p) {
                *zi += alpha * pi;
            }
            if let Some(id) = block {
                let d = w.f.jt_sparse(&self.cons[id].row, 1.0);
                w.f.add((id, 1.0), d)?;
                w.is_active[id] = true;
            }
        }
    }

    /// Move `z` within the range of the working-set normals so that the
    /// active constraints hold to rounding. Large linear terms on ridge
    /// coordinates otherwise leave residuals well above machine precision.
    fn refine(&self, w: &mut Working) {
        for _ in 0..2 {
            let r: Vec<f64> =
                w.f.active
                    .iter()
                    .map(|&(id, sign)| sign * (self.cons[id].rhs - self.cons[id].dot(&w.z)))
                    .collect();
            let u = w.f.solve_rt(&r);
            let dz = w.f.range_combine(&u);
            for (z, d) in w.z.iter_mut().zip(&dz) {
                *z += d;
            }
        }
    }

    /// Max-form value of the regularised problem at `z` for linear term `c`.
    fn z_objective(&self, z: &[f64], c: &[f64]) -> f64 {
        -z.iter()
            .zip(c)
            .map(|(z, c)| 0.5 * z * z + c * z)
            .sum::<f64>()
    }

    fn finish(
        &self,
        w: &Working,
        nu: &[f64],
        iters: usize,
        phase1: usize,
        trace: Vec<f64>,
    ) -> QpSolution {
        let p = &self.prob;
        let x = self.chol.to_x(&w.z);
        let mut sol = QpSolution {
            objective: p.objective(&x),
            x,
            ineq_multipliers: vec![0.0; p.ineq.len()],
            eq_multipliers: vec![0.0; p.eq.len()],
            lower_multipliers: vec![0.0; if p.lower.is_empty() { 0 } else { p.n }],
            upper_multipliers: vec![0.0; if p.upper.is_empty() { 0 } else { p.n }],
            status: QpStatus::Optimal,
            iterations: iters,
            phase1_iterations: phase1,
            ridge: self.ridge.clone(),
            kkt: KktResidual {
                stationarity: 0.0,
                primal: 0.0,
                dual: 0.0,
                complementarity: 0.0,
            },
            trace,
        };
        for (pos, &(id, sign)) in w.f.active.iter().enumerate() {
            let con = &self.cons[id];
            let val = sign * nu[pos] / con.scale;
            match con.source {
                Source::Eq(i) => sol.eq_multipliers[i] = val,
                Source::Ineq(i) => sol.ineq_multipliers[i] = val,
                Source::Lower(i) => sol.lower_multipliers[i] = val,
                Source::Upper(i) => sol.upper_multipliers[i] = val,
            }
        }
        sol.kkt = kkt_residual_scaled(p, &sol);
        if sol.kkt.max() > self.opts.tol {
            sol.status = QpStatus::Degenerate;
        }
        sol
    }
}

fn make_con(
    chol: &Chol,
    n: usize,
    a: &[(usize, f64)],
    rhs: f64,
    source: Source,
    feas_tol: f64,
) -> Con {
    let t = chol.forward(a, n);
    let norm = t.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
    let thr_orig = feas_tol * (1.0 + rhs.abs());
    if norm == 0.0 || !norm.is_finite() {
        return Con {
            row: Vec::new(),
            rhs,
            scale: 0.0,
            thr: thr_orig,
            source,
        };
    }
    Con {
        row: t.into_iter().map(|(i, v)| (i, v / norm)).collect(),
        rhs: rhs / norm,
        scale: norm,
        thr: thr_orig / norm,
        source,
    }
}

/// Factor `G = -2Q (+ ridge) = L Lᵀ`.
fn factor_hessian(q: &Quadratic, n: usize, ridge: f64) -> Result<(Chol, Vec<f64>), QpError> {
    let mut added = vec![0.0; n];
    match q {
        Quadratic::Diagonal(d) => {
            let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut l = Vec::with_capacity(n);
            for (i, &qi) in d.iter().enumerate() {
                let mut g = -2.0 * qi;
                if g < -1e-12 * scale {
                    return Err(QpError::NotConcave(g));
                }
                if g <= 1e-12 * scale || g <= 0.0 {
                    g += ridge;
                    added[i] = ridge;
                }
                l.push(g.sqrt());
            }
            Ok((Chol::Diagonal(l), added))
        }
        Quadratic::Dense(m) => {
            let scale = (0..n).fold(0.0f64, |acc, i| acc.max(m[i][i].abs()));
            let mut l = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..=i {
                    let mut s = -2.0 * m[i][j];
                    for k in 0..j {
                        s -= l[i][k] * l[j][k];
                    }
                    if i == j {
                        if s < -1e-9 * (1.0 + 2.0 * scale) {
                            return Err(QpError::NotConcave(s));
                        }
                        if s <= 1e-12 * (1.0 + 2.0 * scale) {
                            s += ridge;
                            added[i] = ridge;
                        }
                        l[i][i] = s.sqrt();
                    } else {
                        l[i][j] = s / l[j][j];
                    }
                }
            }
            Ok((Chol::Dense(l), added))
        }
    }
}

/// Gradient of the regularised max-form objective.
fn gradient(prob: &QpProblem, ridge: &[f64], x: &[f64]) -> Vec<f64> {
    let mut g = prob.linear.clone();
    match &prob.quadratic {
        Quadratic::Diagonal(q) => {
            for i in 0..prob.n {
                g[i] += 2.0 * q[i] * x[i];
            }
        }
        Quadratic::Dense(q) => {
            for i in 0..prob.n {
                g[i] += 2.0 * q[i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    for i in 0..prob.n.min(ridge.len()) {
        g[i] -= ridge[i] * x[i];
    }
    g
}

struct Residuals {
    stat: Vec<f64>,
    stat_scale: f64,
    /// `(violation, complementarity product, rhs, multiplier)` per row.
    rows: Vec<(f64, f64, f64, f64)>,
}

fn residuals(prob: &QpProblem, sol: &QpSolution) -> Residuals {
    let x = &sol.x;
    let g = gradient(prob, &sol.ridge, x);
    let mut stat_scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    stat_scale = stat_scale.max(prob.linear.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut stat = g;
    let mut rows = Vec::new();
    let apply = |row: &[(usize, f64)], w: f64, stat: &mut Vec<f64>| {
        for &(i, v) in row {
            stat[i] -= w * v;
        }
        row.iter().fold(0.0f64, |m, &(_, v)| m.max((w * v).abs()))
    };
    for (i, row) in prob.ineq.iter().enumerate() {
        let w = sol.ineq_multipliers[i];
        stat_scale = stat_scale.max(apply(&row.terms, w, &mut stat));
        let b = prob.ineq_rhs[i];
        let slack = b - row.dot(x);
        let viol = if b.is_finite() {
            (-slack).max(0.0)
        } else {
            0.0
        };
        let prod = if b.is_finite() { w * slack } else { w };
        rows.push((viol, prod, b, w));
    }
    for (i, row) in prob.eq.iter().enumerate() {
        let w = sol.eq_multipliers[i];
        stat_scale = stat_scale.max(apply(&row.terms, w, &mut stat));
        let b = prob.eq_rhs[i];
        rows.push(((row.dot(x) - b).abs(), 0.0, b, 0.0));
    }
    for (i, l) in prob.lower.iter().enumerate() {
        let w = sol.lower_multipliers.get(i).copied().unwrap_or(0.0);
        stat_scale = stat_scale.max(apply(&[(i, -1.0)], w, &mut stat));
        if let Some(l) = l.filter(|l| l.is_finite()) {
            let slack = x[i] - l;
            rows.push(((-slack).max(0.0), w * slack, l, w));
        } else {
            rows.push((0.0, w, 0.0, w));
        }
    }
    for (i, u) in prob.upper.iter().enumerate() {
        let w = sol.upper_multipliers.get(i).copied().unwrap_or(0.0);
        stat_scale = stat_scale.max(apply(&[(i, 1.0)], w, &mut stat));
        if let Some(u) = u.filter(|u| u.is_finite()) {
            let slack = u - x[i];
            rows.push(((-slack).max(0.0), w * slack, u, w));
        } else {
            rows.push((0.0, w, 0.0, w));
        }
    }
    Residuals {
        stat,
        stat_scale,
        rows,
    }
}

/// Absolute residuals of the optimality conditions of the problem the
/// solution was computed for (including its ridge).
pub fn kkt_residual(prob: &QpProblem, sol: &QpSolution) -> KktResidual {
    let r = residuals(prob, sol);
    let mut out = KktResidual {
        stationarity: r.stat.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        primal: 0.0,
        dual: 0.0,
        complementarity: 0.0,
    };
    for (viol, prod, _, w) in r.rows {
        out.primal = out.primal.max(viol);
        out.complementarity = out.complementarity.max(prod.abs());
        out.dual = out.dual.max((-w).max(0.0));
    }
    out
}

/// Residuals relative to the magnitudes involved: stationarity against the
/// largest gradient or multiplier term, feasibility against `1 + |rhs|`,
/// multiplier signs against the largest multiplier, and complementarity
/// against both factors.
pub fn kkt_residual_scaled(prob: &QpProblem, sol: &QpSolution) -> KktResidual {
    let r = residuals(prob, sol);
    let wmax = r.rows.iter().fold(0.0f64, |m, row| m.max(row.3.abs()));
    let mut out = KktResidual {
        stationarity: r.stat.iter().fold(0.0f64, |m, v| m.max(v.abs())) / (1.0 + r.stat_scale),
        primal: 0.0,
        dual: 0.0,
        complementarity: 0.0,
    };
    for (viol, prod, b, w) in r.rows {
        out.primal = out.primal.max(viol / (1.0 + b.abs()));
        out.dual = out.dual.max((-w).max(0.0) / (1.0 + wmax));
        out.complementarity = out
            .complementarity
            .max(prod.abs() / ((1.0 + w.abs()) * (1.0 + b.abs())));
    }
    out
}
