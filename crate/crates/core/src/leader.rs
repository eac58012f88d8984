//! The storage provider's problem. Followers' equilibrium trades are affine
//! in the provider's price `λ_s(t)` and grid energy `e_g(t)`, so revenue is a
//! concave quadratic in those decisions and the whole horizon is one QP.
//!
//! Decision layout over `t = 0..H`: `λ_s` at `t`, `e_g` at `H + t`, and the
//! storage charge/discharge split `c` at `2H + t`, `d` at `3H + t`. The split
//! keeps the state-of-charge dynamics linear; a small penalty on `c + d`
//! selects complementary splits, which are audited after the solve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ces::{soc_from_split, soc_trajectory, StorageParams};
use crate::feeder::{FeederModel, SensitivityPair};
use crate::followers::{self, MarketContext, NashCertificate};
use crate::profiles::SurplusSet;
use crate::qp::{
    kkt_residual, KktResidual, LinearRow, QpError, QpOptions, QpProblem, QpSolver, QpStatus,
    Quadratic,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LeaderError {
    #[error("{what} covers {got} intervals, expected {expected}")]
    HorizonMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("storage bus {bus} is not on the feeder")]
    CesBusMissing { bus: usize },
    #[error("interval {t} has no participating users")]
    NoParticipants { t: usize },
    #[error("invalid market data: {0}")]
    InvalidMarket(String),
    #[error("no schedule satisfies the constraint families {families:?} together")]
    InfeasibleScenario { families: Vec<Family> },
    #[error("simultaneous charge {charge} and discharge {discharge} at t = {t}")]
    ComplementarityViolation {
        t: usize,
        charge: f64,
        discharge: f64,
    },
    #[error("certificate failure: {0}")]
    CertificateFailure(String),
    #[error(transparent)]
    Solver(#[from] QpError),
}

/// Revenue coefficients for one interval: revenue is
/// `μ1 λ² + μ2 λ + μ3 e_g² + μ4 e_g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuCoefficients {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
}

pub fn mu_coefficients(m: usize, phi: f64, delta: f64, e_n: f64, sum_s: f64) -> MuCoefficients {
    let mf = m as f64;
    MuCoefficients {
        mu1: -mf / (phi * (mf + 1.0)),
        mu2: mf / (mf + 1.0) * (e_n + delta / phi) - sum_s,
        mu3: -phi / (mf + 1.0),
        mu4: -(phi * e_n + delta) / (mf + 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurplusCase {
    AllSurplus,
    AllDeficit,
    Mixed,
}

/// Admissible range of the common equilibrium grid trade `ε(t)` keeping
/// every participant's trade within its own interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBounds {
    pub case: SurplusCase,
    pub lower: f64,
    pub upper: f64,
}

pub fn epsilon_bounds(s: &[f64]) -> EpsilonBounds {
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if s.iter().all(|&v| v >= 0.0) {
        EpsilonBounds {
            case: SurplusCase::AllSurplus,
            lower: -min,
            upper: 0.0,
        }
    } else if s.iter().all(|&v| v < 0.0) {
        EpsilonBounds {
            case: SurplusCase::AllDeficit,
            lower: 0.0,
            upper: -max,
        }
    } else {
        EpsilonBounds {
            case: SurplusCase::Mixed,
            lower: 0.0,
            upper: 0.0,
        }
    }
}

/// `W_s = Σ_t (-λ_s Σ_p y_p - λ_g e_g)`.
pub fn revenue(lambda_s: &[f64], y: &[Vec<f64>], lambda_g: &[f64], e_g: &[f64]) -> f64 {
    lambda_s
        .iter()
        .zip(y)
        .zip(lambda_g.iter().zip(e_g))
        .map(|((ls, yt), (lg, eg))| -ls * yt.iter().sum::<f64>() - lg * eg)
        .sum()
}

/// Everything the provider's problem depends on apart from the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketData {
    pub dt_hours: f64,
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    pub lambda_min: f64,
    /// Grid energy of non-participants per interval.
    pub e_n: Vec<f64>,
    pub surplus: SurplusSet,
    /// Transformer limits on the total grid energy per interval, kWh.
    pub grid_forward_max: f64,
    pub grid_reverse_max: f64,
    pub storage: StorageParams,
}

impl MarketData {
    pub fn horizon(&self) -> usize {
        self.surplus.horizon()
    }

    fn check(&self) -> Result<(), LeaderError> {
        let h = self.horizon();
        for (what, len) in [
            ("price slope", self.phi.len()),
            ("price intercept", self.delta.len()),
            ("non-participant energy", self.e_n.len()),
        ] {
            if len != h {
                return Err(LeaderError::HorizonMismatch {
                    what,
                    expected: h,
                    got: len,
                });
            }
        }
        if self.storage.dt_hours != self.dt_hours {
            return Err(LeaderError::InvalidMarket(
                "storage interval length differs from the market's".into(),
            ));
        }
        self.storage
            .validate()
            .map_err(|e| LeaderError::InvalidMarket(e.to_string()))?;
        if self.phi.iter().any(|&p| !(p > 0.0)) || self.delta.iter().any(|&d| !(d > 0.0)) {
            return Err(LeaderError::InvalidMarket(
                "price slope and intercept must be positive".into(),
            ));
        }
        for t in 0..h {
            if self.surplus.s[t].is_empty() {
                return Err(LeaderError::NoParticipants { t: t + 1 });
            }
        }
        Ok(())
    }
}

/// Linearised voltage data for the storage bus coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageNetwork {
    pub model: FeederModel,
    pub sens: SensitivityPair,
    pub ces_bus: usize,
    /// Squared voltages without any storage flow, time-major.
    pub base_vsq: Vec<Vec<f64>>,
    /// Tightening of the limits used in the QP, per-unit.
    pub margin_pu: f64,
}

impl VoltageNetwork {
    /// Change of each bus's squared voltage per kWh of storage charge.
    pub fn storage_sensitivity(&self, dt_hours: f64) -> Vec<f64> {
        let per_kwh = 1.0 / (dt_hours * self.model.s_base_kva);
        self.sens
            .r
            .iter()
            .map(|row| row[self.ces_bus - 1] * per_kwh)
            .collect()
    }

    /// Linear squared voltages given a storage flow series.
    pub fn voltages(&self, e_s: &[f64], dt_hours: f64) -> Vec<Vec<f64>> {
        let k = self.storage_sensitivity(dt_hours);
        self.base_vsq
            .iter()
            .zip(e_s)
            .map(|(base, e)| base.iter().zip(&k).map(|(b, k)| b + k * e).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PriceFloor,
    GridForward,
    GridReverse,
    ChargeRate,
    DischargeRate,
    CapacityMax,
    CapacityMin,
    Cyclical,
    EpsilonBound,
    SplitNonnegative,
    StorageLink,
    VoltageMax,
    VoltageMin,
}

impl Family {
    /// Families that may be relaxed when explaining infeasibility. The split
    /// and link rows only define auxiliary variables.
    pub const RELAXABLE: [Family; 11] = [
        Family::PriceFloor,
        Family::GridForward,
        Family::GridReverse,
        Family::ChargeRate,
        Family::DischargeRate,
        Family::CapacityMax,
        Family::CapacityMin,
        Family::Cyclical,
        Family::EpsilonBound,
        Family::VoltageMax,
        Family::VoltageMin,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub family: Family,
    /// 1-based interval; the last interval for horizon-wide rows.
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bus: Option<usize>,
}

/// `ε(t) = a λ_s + b e_g + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonAffine {
    pub a: f64,
    pub b: f64,
    pub k: f64,
}

impl EpsilonAffine {
    fn new(m: usize, phi: f64, delta: f64, e_n: f64) -> Self {
        let m1 = m as f64 + 1.0;
        EpsilonAffine {
            a: 1.0 / (phi * m1),
            b: -1.0 / m1,
            k: -(delta / phi + e_n) / m1,
        }
    }

    pub fn eval(&self, lambda_s: f64, e_g: f64) -> f64 {
        self.a * lambda_s + self.b * e_g + self.k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderProblem {
    pub horizon: usize,
    pub qp: QpProblem,
    pub mu: Vec<MuCoefficients>,
    pub eps: Vec<EpsilonAffine>,
    pub eps_bounds: Vec<EpsilonBounds>,
    pub ineq_tags: Vec<RowTag>,
    pub eq_tags: Vec<RowTag>,
    pub split_penalty: f64,
    pub voltage_constrained: bool,
}

impl LeaderProblem {
    pub fn lambda_index(&self, t: usize) -> usize {
        t
    }
    pub fn grid_index(&self, t: usize) -> usize {
        self.horizon + t
    }
    pub fn charge_index(&self, t: usize) -> usize {
        2 * self.horizon + t
    }
    pub fn discharge_index(&self, t: usize) -> usize {
        3 * self.horizon + t
    }

    /// Copy of the QP without the rows of the given families.
    pub fn without(&self, drop: &[Family]) -> QpProblem {
        without_families(&self.qp, &self.ineq_tags, &self.eq_tags, drop)
    }

    pub fn count(&self, family: Family) -> usize {
        self.ineq_tags
            .iter()
            .chain(&self.eq_tags)
            .filter(|t| t.family == family)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderOptions {
    pub voltage_constraints: bool,
    pub qp: QpOptions,
    /// Split penalty relative to the mean `|μ2|`.
    pub split_penalty_factor: f64,
    pub complementarity_tol: f64,
    /// Tolerance of the constraint audit, natural units.
    pub audit_tol: f64,
    /// Grid points per user in the follower deviation scan.
    pub nash_resolution: usize,
    /// Return degenerate splits as a flagged result instead of an error.
    pub accept_degenerate: bool,
}

impl Default for LeaderOptions {
    fn default() -> Self {
        LeaderOptions {
            voltage_constraints: true,
            qp: QpOptions::default(),
            split_penalty_factor: 1e-6,
            complementarity_tol: 1e-6,
            audit_tol: 1e-6,
            nash_resolution: 200,
            accept_degenerate: false,
        }
    }
}

pub fn assemble_leader_problem(
    data: &MarketData,
    network: Option<&VoltageNetwork>,
    opts: &LeaderOptions,
) -> Result<LeaderProblem, LeaderError> {
    data.check()?;
    let h = data.horizon();
    let voltage = if opts.voltage_constraints {
        network
    } else {
        None
    };
    if let Some(net) = voltage {
        if !net.model.has_bus(net.ces_bus) {
            return Err(LeaderError::CesBusMissing { bus: net.ces_bus });
        }
        if net.base_vsq.len() != h {
            return Err(LeaderError::HorizonMismatch {
                what: "base voltages",
                expected: h,
                got: net.base_vsq.len(),
            });
        }
    }
    let st = &data.storage;

    let mut mu = Vec::with_capacity(h);
    let mut eps = Vec::with_capacity(h);
    let mut bounds = Vec::with_capacity(h);
    for t in 0..h {
        let s = &data.surplus.s[t];
        let m = s.len();
        mu.push(mu_coefficients(
            m,
            data.phi[t],
            data.delta[t],
            data.e_n[t],
            s.iter().sum(),
        ));
        eps.push(EpsilonAffine::new(
            m,
            data.phi[t],
            data.delta[t],
            data.e_n[t],
        ));
        bounds.push(epsilon_bounds(s));
    }
    let split_penalty =
        opts.split_penalty_factor * mu.iter().map(|m| m.mu2.abs()).sum::<f64>() / h as f64;

    let mut lp = LeaderProblem {
        horizon: h,
        qp: QpProblem::new(4 * h),
        mu,
        eps,
        eps_bounds: bounds,
        ineq_tags: Vec::new(),
        eq_tags: Vec::new(),
        split_penalty,
        voltage_constrained: voltage.is_some(),
    };
    let mut quad = vec![0.0; 4 * h];
    let mut lin = vec![0.0; 4 * h];
    for t in 0..h {
        quad[lp.lambda_index(t)] = lp.mu[t].mu1;
        lin[lp.lambda_index(t)] = lp.mu[t].mu2;
        quad[lp.grid_index(t)] = lp.mu[t].mu3;
        lin[lp.grid_index(t)] = lp.mu[t].mu4;
        lin[lp.charge_index(t)] = -split_penalty;
        lin[lp.discharge_index(t)] = -split_penalty;
    }
    lp.qp.quadratic = Quadratic::Diagonal(quad);
    lp.qp.linear = lin;

    let mut ineq = Vec::new();
    let mut eqs = Vec::new();
    let tag = |family, t: usize| RowTag {
        family,
        t: t + 1,
        bus: None,
    };
    let sens = voltage.map(|n| n.storage_sensitivity(data.dt_hours));

    for t in 0..h {
        let (li, gi) = (lp.lambda_index(t), lp.grid_index(t));
        let m = data.surplus.s[t].len() as f64;
        let ea = lp.eps[t];
        let sum_s: f64 = data.surplus.s[t].iter().sum();
        // E = Mε + E_N + e_g and e_s = Mε + Σs + e_g as affine forms.
        let (e_l, e_g, e_c) = (m * ea.a, m * ea.b + 1.0, m * ea.k + data.e_n[t]);
        let (s_l, s_g, s_c) = (m * ea.a, m * ea.b + 1.0, m * ea.k + sum_s);
        let affine = |cl: f64, cg: f64| LinearRow::new(vec![(li, cl), (gi, cg)]);
        let phi = data.phi[t];

        ineq.push((
            affine(-phi * e_l, -phi * e_g),
            data.delta[t] - data.lambda_min + phi * e_c,
            tag(Family::PriceFloor, t),
        ));
        ineq.push((
            affine(e_l, e_g),
            data.grid_forward_max - e_c,
            tag(Family::GridForward, t),
        ));
        ineq.push((
            affine(-e_l, -e_g),
            data.grid_reverse_max + e_c,
            tag(Family::GridReverse, t),
        ));
        ineq.push((
            affine(s_l, s_g),
            st.charge_max_kwh() - s_c,
            tag(Family::ChargeRate, t),
        ));
        ineq.push((
            affine(-s_l, -s_g),
            st.discharge_max_kwh() + s_c,
            tag(Family::DischargeRate, t),
        ));

        let mut soc = Vec::with_capacity(2 * (t + 1));
        for tau in 0..=t {
            soc.push((lp.charge_index(tau), st.eta_c));
            soc.push((lp.discharge_index(tau), -st.eta_d));
        }
        let neg: Vec<(usize, f64)> = soc.iter().map(|&(i, v)| (i, -v)).collect();
        ineq.push((
            LinearRow::new(soc.clone()),
            st.b_max - st.b0,
            tag(Family::CapacityMax, t),
        ));
        ineq.push((
            LinearRow::new(neg.clone()),
            st.b0 - st.b_min,
            tag(Family::CapacityMin, t),
        ));
        if t + 1 == h {
            ineq.push((LinearRow::new(soc), st.theta, tag(Family::Cyclical, t)));
            ineq.push((LinearRow::new(neg), st.theta, tag(Family::Cyclical, t)));
        }

        let b = lp.eps_bounds[t];
        match b.case {
            SurplusCase::Mixed => {
                eqs.push((affine(ea.a, ea.b), -ea.k, tag(Family::EpsilonBound, t)))
            }
            _ => {
                ineq.push((
                    affine(-ea.a, -ea.b),
                    ea.k - b.lower,
                    tag(Family::EpsilonBound, t),
                ));
                ineq.push((
                    affine(ea.a, ea.b),
                    b.upper - ea.k,
                    tag(Family::EpsilonBound, t),
                ));
            }
        }

        ineq.push((
            LinearRow::new(vec![(lp.charge_index(t), -1.0)]),
            0.0,
            tag(Family::SplitNonnegative, t),
        ));
        ineq.push((
            LinearRow::new(vec![(lp.discharge_index(t), -1.0)]),
            0.0,
            tag(Family::SplitNonnegative, t),
        ));
        eqs.push((
            LinearRow::new(vec![
                (lp.charge_index(t), 1.0),
                (lp.discharge_index(t), -1.0),
                (li, -s_l),
                (gi, -s_g),
            ]),
            s_c,
            tag(Family::StorageLink, t),
        ));

        if let (Some(net), Some(k)) = (voltage, &sens) {
            let vmax = (net.model.v_max_pu - net.margin_pu).powi(2);
            let vmin = (net.model.v_min_pu + net.margin_pu).powi(2);
            for (i, &ki) in k.iter().enumerate() {
                let base = net.base_vsq[t][i] + ki * s_c;
                let bus = Some(i + 1);
                let row = |sign: f64| {
                    let terms = if ki == 0.0 {
                        Vec::new()
                    } else {
                        vec![(li, sign * ki * s_l), (gi, sign * ki * s_g)]
                    };
                    LinearRow::new(terms)
                };
                ineq.push((
                    row(1.0),
                    vmax - base,
                    RowTag {
                        bus,
                        ..tag(Family::VoltageMax, t)
                    },
                ));
                ineq.push((
                    row(-1.0),
                    base - vmin,
                    RowTag {
                        bus,
                        ..tag(Family::VoltageMin, t)
                    },
                ));
            }
        }
    }
    for (row, rhs, tag) in ineq {
        lp.qp.add_ineq(row, rhs);
        lp.ineq_tags.push(tag);
    }
    for (row, rhs, tag) in eqs {
        lp.qp.add_eq(row, rhs);
        lp.eq_tags.push(tag);
    }
    Ok(lp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub family: Family,
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub qp_status: QpStatus,
    /// Scaled residuals used for the optimality decision.
    pub kkt: KktResidual,
    pub kkt_absolute: KktResidual,
    /// Largest `c(t) d(t)`.
    pub complementarity: f64,
    pub nash: NashCertificate,
    pub audit: Vec<AuditViolation>,
    /// Intervals (1-based) where the storage price is not positive.
    pub nonpositive_price: Vec<usize>,
}

impl Certificates {
    pub fn clean(&self) -> bool {
        self.qp_status == QpStatus::Optimal && self.audit.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub voltage_constrained: bool,
    pub lambda_s: Vec<f64>,
    pub e_g: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// Storage trades, `[t][participant]`.
    pub y: Vec<Vec<f64>>,
    /// Grid trades, `[t][participant]`.
    pub e: Vec<Vec<f64>>,
    pub e_s: Vec<f64>,
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
    /// State of charge from the net flow with efficiency by flow direction.
    pub soc: Vec<f64>,
    /// Total grid energy `E(t)`.
    pub grid_energy: Vec<f64>,
    pub lambda_g: Vec<f64>,
    /// Linear squared voltages, when a network was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_vsq: Option<Vec<Vec<f64>>>,
    /// Revenue recomputed from prices and trades.
    pub revenue: f64,
    /// Revenue from the quadratic objective at the solution.
    pub objective: f64,
    /// Value of the split penalty at the solution.
    pub split_penalty: f64,
    /// Cumulative cost per participant.
    pub participant_costs: Vec<f64>,
    /// Full decision vector in the QP layout.
    pub decision: Vec<f64>,
    pub iterations: usize,
    pub certificates: Certificates,
}

fn quadratic_revenue(lp: &LeaderProblem, x: &[f64]) -> f64 {
    (0..lp.horizon)
        .map(|t| {
            let (l, g) = (x[lp.lambda_index(t)], x[lp.grid_index(t)]);
            let m = lp.mu[t];
            m.mu1 * l * l + m.mu2 * l + m.mu3 * g * g + m.mu4 * g
        })
        .sum()
}

/// Follower responses and prices implied by a decision vector.
struct Implied {
    epsilon: Vec<f64>,
    y: Vec<Vec<f64>>,
    e_s: Vec<f64>,
    grid_energy: Vec<f64>,
    lambda_g: Vec<f64>,
}

fn implied(lp: &LeaderProblem, data: &MarketData, x: &[f64]) -> Implied {
    let h = lp.horizon;
    let mut out = Implied {
        epsilon: Vec::with_capacity(h),
        y: Vec::with_capacity(h),
        e_s: Vec::with_capacity(h),
        grid_energy: Vec::with_capacity(h),
        lambda_g: Vec::with_capacity(h),
    };
    for t in 0..h {
        let (ls, eg) = (x[lp.lambda_index(t)], x[lp.grid_index(t)]);
        let eps = lp.eps[t].eval(ls, eg);
        let y: Vec<f64> = data.surplus.s[t].iter().map(|s| s + eps).collect();
        let e_total: f64 = data.surplus.s[t].len() as f64 * eps + data.e_n[t] + eg;
        out.e_s.push(crate::ces::net_storage_flow(eg, &y));
        out.lambda_g.push(data.phi[t] * e_total + data.delta[t]);
        out.grid_energy.push(e_total);
        out.epsilon.push(eps);
        out.y.push(y);
    }
    out
}

/// Solve the provider's problem and reconstruct the follower equilibrium.
pub fn solve_stackelberg(
    data: &MarketData,
    network: Option<&VoltageNetwork>,
    opts: &LeaderOptions,
) -> Result<(LeaderProblem, EquilibriumResult), LeaderError> {
    let lp = assemble_leader_problem(data, network, opts)?;
    let solver = QpSolver::new(&lp.qp, opts.qp)?;
    let sol = match solver.solve() {
        Ok(s) => s,
        Err(QpError::Infeasible(_)) => {
            return Err(LeaderError::InfeasibleScenario {
                families: infeasible_families(&lp.qp, &lp.ineq_tags, &lp.eq_tags, &opts.qp)?,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let result = reconstruct(
        &lp,
        data,
        network,
        opts,
        &sol.x,
        sol.status,
        sol.kkt,
        kkt_residual(&lp.qp, &sol),
        sol.iterations,
    )?;
    Ok((lp, result))
}

/// Copy of a tagged QP without the rows of the given families.
pub fn without_families(
    qp: &QpProblem,
    ineq_tags: &[RowTag],
    eq_tags: &[RowTag],
    drop: &[Family],
) -> QpProblem {
    let mut out = QpProblem::new(qp.n);
    out.quadratic = qp.quadratic.clone();
    out.linear = qp.linear.clone();
    out.lower = qp.lower.clone();
    out.upper = qp.upper.clone();
    for ((row, rhs), tag) in qp.ineq.iter().zip(&qp.ineq_rhs).zip(ineq_tags) {
        if !drop.contains(&tag.family) {
            out.add_ineq(row.clone(), *rhs);
        }
    }
    for ((row, rhs), tag) in qp.eq.iter().zip(&qp.eq_rhs).zip(eq_tags) {
        if !drop.contains(&tag.family) {
            out.add_eq(row.clone(), *rhs);
        }
    }
    out
}

/// Deletion filter over the relaxable families: drop a family for good when
/// the rest stays infeasible without it. The remaining set is irreducible.
pub fn infeasible_families(
    qp: &QpProblem,
    ineq_tags: &[RowTag],
    eq_tags: &[RowTag],
    opts: &QpOptions,
) -> Result<Vec<Family>, QpError> {
    let present: Vec<Family> = Family::RELAXABLE
        .into_iter()
        .filter(|f| ineq_tags.iter().chain(eq_tags).any(|t| t.family == *f))
        .collect();
    let mut needed = present.clone();
    for f in present {
        let trial: Vec<Family> = needed.iter().copied().filter(|&g| g != f).collect();
        let dropped: Vec<Family> = Family::RELAXABLE
            .into_iter()
            .filter(|g| !trial.contains(g))
            .collect();
        let reduced = without_families(qp, ineq_tags, eq_tags, &dropped);
        match QpSolver::new(&reduced, *opts)?.solve() {
            Err(QpError::Infeasible(_)) => needed = trial,
            Ok(_) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(needed)
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    lp: &LeaderProblem,
    data: &MarketData,
    network: Option<&VoltageNetwork>,
    opts: &LeaderOptions,
    x: &[f64],
    status: QpStatus,
    kkt: KktResidual,
    kkt_absolute: KktResidual,
    iterations: usize,
) -> Result<EquilibriumResult, LeaderError> {
    let h = lp.horizon;
    let imp = implied(lp, data, x);
    let lambda_s: Vec<f64> = (0..h).map(|t| x[lp.lambda_index(t)]).collect();
    let e_g: Vec<f64> = (0..h).map(|t| x[lp.grid_index(t)]).collect();
    let charge: Vec<f64> = (0..h).map(|t| x[lp.charge_index(t)]).collect();
    let discharge: Vec<f64> = (0..h).map(|t| x[lp.discharge_index(t)]).collect();
    let soc = soc_trajectory(&data.storage, &imp.e_s).b;
    let e: Vec<Vec<f64>> = imp
        .y
        .iter()
        .zip(&data.surplus.s)
        .map(|(y, s)| y.iter().zip(s).map(|(y, s)| y - s).collect())
        .collect();
    let linear_vsq = network.map(|n| n.voltages(&imp.e_s, data.dt_hours));

    let m = data.surplus.participant_count();
    let mut participant_costs = vec![0.0; m];
    for t in 0..h {
        for p in 0..m {
            participant_costs[p] += imp.lambda_g[t] * e[t][p] - lambda_s[t] * imp.y[t][p];
        }
    }

    let complementarity = charge
        .iter()
        .zip(&discharge)
        .map(|(c, d)| (c * d).abs())
        .fold(0.0, f64::max);

    let mut nash = NashCertificate {
        max_advantage: 0.0,
        worst_user: None,
        evaluations: 0,
    };
    for t in 0..h {
        let ctx = MarketContext::new(
            t + 1,
            data.phi[t],
            data.delta[t],
            data.e_n[t],
            e_g[t],
            lambda_s[t],
            m,
        )
        .map_err(|e| LeaderError::InvalidMarket(e.to_string()))?;
        let cert = followers::verify_nash(
            &imp.y[t],
            &data.surplus.s[t],
            &ctx,
            opts.nash_resolution,
            true,
        )
        .map_err(|e| LeaderError::CertificateFailure(format!("t = {}: {e}", t + 1)))?;
        nash.evaluations += cert.evaluations;
        if cert.max_advantage > nash.max_advantage {
            nash.max_advantage = cert.max_advantage;
            nash.worst_user = cert.worst_user;
        }
    }

    let result = EquilibriumResult {
        voltage_constrained: lp.voltage_constrained,
        revenue: revenue(&lambda_s, &imp.y, &imp.lambda_g, &e_g),
        objective: quadratic_revenue(lp, x),
        split_penalty: lp.split_penalty
            * (charge.iter().sum::<f64>() + discharge.iter().sum::<f64>()),
        lambda_s,
        e_g,
        epsilon: imp.epsilon,
        y: imp.y,
        e,
        e_s: imp.e_s,
        charge,
        discharge,
        soc,
        grid_energy: imp.grid_energy,
        lambda_g: imp.lambda_g,
        linear_vsq,
        participant_costs,
        decision: x.to_vec(),
        iterations,
        certificates: Certificates {
            qp_status: status,
            kkt,
            kkt_absolute,
            complementarity,
            nash,
            audit: Vec::new(),
            nonpositive_price: Vec::new(),
        },
    };
    let mut result = result;
    result.certificates.nonpositive_price = result
        .lambda_s
        .iter()
        .enumerate()
        .filter(|(_, &l)| l <= 0.0)
        .map(|(t, _)| t + 1)
        .collect();
    result.certificates.audit = audit(lp, data, network, &result, opts.audit_tol);

    if complementarity >= opts.complementarity_tol {
        let t = (0..h)
            .max_by(|&a, &b| {
                (result.charge[a] * result.discharge[a])
                    .total_cmp(&(result.charge[b] * result.discharge[b]))
            })
            .unwrap_or(0);
        if !opts.accept_degenerate {
            return Err(LeaderError::ComplementarityViolation {
                t: t + 1,
                charge: result.charge[t],
                discharge: result.discharge[t],
            });
        }
        result.certificates.qp_status = QpStatus::Degenerate;
    }
    Ok(result)
}

/// Check every modelled constraint in natural units.
pub fn audit(
    lp: &LeaderProblem,
    data: &MarketData,
    network: Option<&VoltageNetwork>,
    r: &EquilibriumResult,
    tol: f64,
) -> Vec<AuditViolation> {
    let mut out = Vec::new();
    let st = &data.storage;
    let mut flag = |family, t: usize, index: Option<usize>, value: f64, bound: f64, ok: bool| {
        if !ok {
            out.push(AuditViolation {
                family,
                t: t + 1,
                index,
                value,
                bound,
            });
        }
    };
    for t in 0..lp.horizon {
        for (p, (&y, &s)) in r.y[t].iter().zip(&data.surplus.s[t]).enumerate() {
            let (lo, hi) = followers::trade_bounds(s);
            flag(Family::EpsilonBound, t, Some(p), y, lo, y >= lo - tol);
            flag(Family::EpsilonBound, t, Some(p), y, hi, y <= hi + tol);
        }
        let eb = lp.eps_bounds[t];
        let eps = r.epsilon[t];
        flag(
            Family::EpsilonBound,
            t,
            None,
            eps,
            eb.lower,
            eps >= eb.lower - tol,
        );
        flag(
            Family::EpsilonBound,
            t,
            None,
            eps,
            eb.upper,
            eps <= eb.upper + tol,
        );
        let es = r.e_s[t];
        flag(
            Family::ChargeRate,
            t,
            None,
            es,
            st.charge_max_kwh(),
            es <= st.charge_max_kwh() + tol,
        );
        flag(
            Family::DischargeRate,
            t,
            None,
            es,
            -st.discharge_max_kwh(),
            es >= -st.discharge_max_kwh() - tol,
        );
        let b = r.soc[t];
        flag(
            Family::CapacityMax,
            t,
            None,
            b,
            st.b_max,
            b <= st.b_max + tol,
        );
        flag(
            Family::CapacityMin,
            t,
            None,
            b,
            st.b_min,
            b >= st.b_min - tol,
        );
        let lg = r.lambda_g[t];
        flag(
            Family::PriceFloor,
            t,
            None,
            lg,
            data.lambda_min,
            lg >= data.lambda_min - tol,
        );
        let e = r.grid_energy[t];
        flag(
            Family::GridForward,
            t,
            None,
            e,
            data.grid_forward_max,
            e <= data.grid_forward_max + tol,
        );
        flag(
            Family::GridReverse,
            t,
            None,
            e,
            -data.grid_reverse_max,
            e >= -data.grid_reverse_max - tol,
        );
        let (c, d) = (r.charge[t], r.discharge[t]);
        flag(
            Family::SplitNonnegative,
            t,
            None,
            c.min(d),
            0.0,
            c >= -tol && d >= -tol,
        );
        flag(
            Family::StorageLink,
            t,
            None,
            c - d,
            es,
            (c - d - es).abs() <= tol,
        );
    }
    if let Some(&last) = r.soc.last() {
        let h = lp.horizon - 1;
        flag(
            Family::Cyclical,
            h,
            None,
            last,
            st.b0,
            (last - st.b0).abs() <= st.theta + tol,
        );
    }
    let split = soc_from_split(st, &r.charge, &r.discharge);
    for (t, (a, b)) in split.iter().zip(&r.soc).enumerate() {
        flag(Family::StorageLink, t, None, *a, *b, (a - b).abs() <= tol);
    }
    if lp.voltage_constrained {
        if let (Some(net), Some(vsq)) = (network, &r.linear_vsq) {
            let (lo, hi) = (net.model.v_min_sq(), net.model.v_max_sq());
            for (t, row) in vsq.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    flag(Family::VoltageMax, t, Some(i + 1), v, hi, v <= hi + tol);
                    flag(Family::VoltageMin, t, Some(i + 1), v, lo, v >= lo - tol);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackelbergCertificate {
    pub probes: usize,
    /// Largest gain of a probe in the objective the solver maximised.
    pub max_advantage: f64,
    /// Largest gain of a probe in revenue alone.
    pub max_revenue_advantage: f64,
    /// Probes whose state of charge also respects the capacity and
    /// cyclical limits under direction-dependent efficiency.
    pub physically_feasible: usize,
    pub nash: NashCertificate,
}

/// Project `target` onto the feasible set with the decisions outside
/// intervals `start..start + len` held at `x_star`.
fn project_window(
    lp: &LeaderProblem,
    x_star: &[f64],
    start: usize,
    len: usize,
    target: &[f64],
    opts: &LeaderOptions,
) -> Result<Vec<f64>, QpError> {
    let idx: Vec<usize> = (start..start + len)
        .flat_map(|t| {
            [
                lp.lambda_index(t),
                lp.grid_index(t),
                lp.charge_index(t),
                lp.discharge_index(t),
            ]
        })
        .collect();
    let mut local = vec![usize::MAX; lp.qp.n];
    for (k, &i) in idx.iter().enumerate() {
        local[i] = k;
    }
    let mut sub = QpProblem::new(idx.len());
    if let Quadratic::Diagonal(q) = &lp.qp.quadratic {
        sub.quadratic = Quadratic::Diagonal(idx.iter().map(|&i| q[i]).collect());
    }
    sub.linear = idx.iter().map(|&i| lp.qp.linear[i]).collect();
    let restrict = |row: &LinearRow, rhs: f64| {
        let mut terms = Vec::new();
        let mut fixed = 0.0;
        for &(i, v) in &row.terms {
            match local[i] {
                usize::MAX => fixed += v * x_star[i],
                k => terms.push((k, v)),
            }
        }
        (!terms.is_empty()).then(|| (LinearRow::new(terms), rhs - fixed))
    };
    for (row, &rhs) in lp.qp.ineq.iter().zip(&lp.qp.ineq_rhs) {
        if let Some((r, b)) = restrict(row, rhs) {
            sub.add_ineq(r, b);
        }
    }
    for (row, &rhs) in lp.qp.eq.iter().zip(&lp.qp.eq_rhs) {
        if let Some((r, b)) = restrict(row, rhs) {
            sub.add_eq(r, b);
        }
    }
    let from: Vec<f64> = idx.iter().map(|&i| x_star[i]).collect();
    let to: Vec<f64> = idx.iter().map(|&i| target[i]).collect();
    let solver = QpSolver::new(&sub, opts.qp)?;
    let y = solver.project(&from, &to)?;
    let mut x = x_star.to_vec();
    for (k, &i) in idx.iter().enumerate() {
        x[i] = y[k];
    }
    Ok(x)
}

pub const LEADER_ADVANTAGE_TOL: f64 = 1e-6;

/// Random perturbations of the provider's decisions over a random window of
/// intervals, projected onto the feasible set, must not beat the solution; followers must have no
/// profitable unilateral deviation.
pub fn verify_stackelberg(
    lp: &LeaderProblem,
    data: &MarketData,
    result: &EquilibriumResult,
    opts: &LeaderOptions,
    n_probes: usize,
    seed: u64,
) -> Result<StackelbergCertificate, LeaderError> {
    let h = lp.horizon;
    let solver = QpSolver::new(&lp.qp, opts.qp)?;
    let mut full: Option<crate::qp::Projector<'_>> = None;
    let ridge = solver.ridge().to_vec();
    let x_star = &result.decision;
    let f_star = lp.qp.regularized_objective(x_star, &ridge);
    let rev_star = result.revenue;

    let mean_abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64;
    let scale_l = 0.1 * (1.0 + mean_abs(&result.lambda_s));
    let scale_g = 0.1 * (1.0 + mean_abs(&result.e_g));
    let scale_s = 0.1 * (1.0 + mean_abs(&result.e_s));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cert = StackelbergCertificate {
        probes: n_probes,
        max_advantage: f64::NEG_INFINITY,
        max_revenue_advantage: f64::NEG_INFINITY,
        physically_feasible: 0,
        nash: result.certificates.nash,
    };
    for _ in 0..n_probes {
        let u = 10f64.powf(rng.gen_range(-3.0..0.0));
        // Window of intervals to perturb, log-uniform in length.
        let len = (h as f64)
            .powf(rng.gen_range(0.0..1.0))
            .round()
            .clamp(1.0, h as f64) as usize;
        let start = rng.gen_range(0..=h - len);
        let mut target = x_star.clone();
        for t in start..start + len {
            target[lp.lambda_index(t)] += u * scale_l * rng.gen_range(-1.0..1.0);
            target[lp.grid_index(t)] += u * scale_g * rng.gen_range(-1.0..1.0);
            target[lp.charge_index(t)] += u * scale_s * rng.gen_range(-1.0..1.0);
            target[lp.discharge_index(t)] += u * scale_s * rng.gen_range(-1.0..1.0);
        }
        let x = if len == h {
            if full.is_none() {
                full = Some(solver.projector(x_star)?);
            }
            full.as_ref().expect("just built").project(&target)?
        } else {
            project_window(lp, x_star, start, len, &target, opts)?
        };
        let adv = lp.qp.regularized_objective(&x, &ridge) - f_star;
        let imp = implied(lp, data, &x);
        let e_g: Vec<f64> = (0..h).map(|t| x[lp.grid_index(t)]).collect();
        let lambda_s: Vec<f64> = (0..h).map(|t| x[lp.lambda_index(t)]).collect();
        let rev = revenue(&lambda_s, &imp.y, &imp.lambda_g, &e_g) - rev_star;
        let soc = soc_trajectory(&data.storage, &imp.e_s);
        if crate::ces::check_storage_feasibility_tol(&soc, &data.storage, opts.audit_tol)
            .iter()
            .all(|v| {
                !matches!(
                    v.limit,
                    crate::ces::StorageLimit::CapacityMax
                        | crate::ces::StorageLimit::CapacityMin
                        | crate::ces::StorageLimit::Cyclical
                )
            })
        {
            cert.physically_feasible += 1;
        }
        cert.max_advantage = cert.max_advantage.max(adv);
        cert.max_revenue_advantage = cert.max_revenue_advantage.max(rev);
        if adv > LEADER_ADVANTAGE_TOL {
            return Err(LeaderError::CertificateFailure(format!(
                "a feasible perturbation improves the objective by {adv:e}"
            )));
        }
    }
    if cert.nash.max_advantage > followers::DEVIATION_TOL {
        return Err(LeaderError::CertificateFailure(format!(
            "a follower can gain {:e} by deviating",
            cert.nash.max_advantage
        )));
    }
    Ok(cert)
}
