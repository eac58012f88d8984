//! Operating modes on one scenario: no storage, the pricing game with and
//! without voltage rows, and a community-cost optimum, plus comparison
//! reports and the seasonal sweep.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ces::{
    check_storage_feasibility_tol, soc_from_split, soc_trajectory, StorageLimit, StorageParams,
};
use crate::feeder::{
    check_thermal, check_voltage_limits, linear_voltages, sensitivity_matrices, sweep_power_flow,
    BusInjectionSeries, FeederError, FeederModel, ThermalViolation, VoltageViolation,
};
use crate::leader::{
    self, infeasible_families, AuditViolation, Certificates, Family, LeaderError, LeaderOptions,
    MarketData, RowTag, StackelbergCertificate, VoltageNetwork,
};
use crate::profiles::{aggregate_by_bus, surplus, ProfileError, ProfileSet, Season, SurplusSet};
use crate::qp::{
    kkt_residual, KktResidual, LinearRow, QpError, QpProblem, QpSolver, QpStatus, Quadratic,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Leader(#[from] LeaderError),
    #[error(transparent)]
    Solver(#[from] QpError),
    #[error("no schedule satisfies the constraint families {families:?} together")]
    InfeasibleScenario { families: Vec<Family> },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("results cannot be compared: {0}")]
    IncompatibleResults(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Game,
    GameNovolt,
    Centralized,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Baseline,
        Mode::Game,
        Mode::GameNovolt,
        Mode::Centralized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Game => "game",
            Mode::GameNovolt => "game-novolt",
            Mode::Centralized => "centralized",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub dt_hours: f64,
    pub model: FeederModel,
    pub profiles: ProfileSet,
    pub ces_bus: usize,
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    pub lambda_min: f64,
    pub storage: StorageParams,
    /// Bounds on `E(t)` in kWh per interval.
    pub grid_forward_max: f64,
    pub grid_reverse_max: f64,
    pub voltage_margin_pu: f64,
    pub leader: LeaderOptions,
    /// Leader perturbations checked after each game solve; 0 skips the check.
    pub stackelberg_probes: usize,
}

/// `φ_t` and `δ_t` series for a two-level tariff with a 1-based inclusive
/// peak window.
pub fn price_series(
    horizon: usize,
    peak_start: usize,
    peak_end: usize,
    phi_offpeak: f64,
    phi_ratio: f64,
    delta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let phi = (1..=horizon)
        .map(|t| {
            if (peak_start..=peak_end).contains(&t) {
                phi_ratio * phi_offpeak
            } else {
                phi_offpeak
            }
        })
        .collect();
    (phi, vec![delta; horizon])
}

/// Grid energy without storage: `E_N(t) - Σ_p s_p(t)`.
pub fn baseline_grid_energy(profiles: &ProfileSet) -> Vec<f64> {
    let s = surplus(profiles);
    profiles
        .non_participant_energy()
        .iter()
        .enumerate()
        .map(|(t, en)| en - s.total(t))
        .collect()
}

/// Off-peak slope such that the highest peak-window baseline price exceeds
/// the lowest off-peak one by `spread`.
pub fn calibrate_phi(
    profiles: &ProfileSet,
    horizon: usize,
    peak_start: usize,
    peak_end: usize,
    phi_ratio: f64,
    spread: f64,
) -> Result<f64, ScenarioError> {
    let e = baseline_grid_energy(profiles);
    if e.len() != horizon {
        return Err(ScenarioError::Invalid(format!(
            "profiles cover {} intervals, expected {horizon}",
            e.len()
        )));
    }
    let peak = |t: usize| (peak_start..=peak_end).contains(&(t + 1));
    let hi = (0..horizon)
        .filter(|&t| peak(t))
        .map(|t| phi_ratio * e[t])
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = (0..horizon)
        .filter(|&t| !peak(t))
        .map(|t| e[t])
        .fold(f64::INFINITY, f64::min);
    let (hi, lo) = match (hi.is_finite(), lo.is_finite()) {
        (true, true) => (hi, lo),
        _ => {
            let ext = |f: fn(f64, f64) -> f64, init| {
                (0..horizon)
                    .map(|t| if peak(t) { phi_ratio * e[t] } else { e[t] })
                    .fold(init, f)
            };
            (
                ext(f64::max, f64::NEG_INFINITY),
                ext(f64::min, f64::INFINITY),
            )
        }
    };
    let denom = hi - lo;
    if !(denom > 0.0) || !(spread > 0.0) {
        return Err(ScenarioError::Invalid(
            "cannot calibrate the price slope: baseline demand has no spread".into(),
        ));
    }
    Ok(spread / denom)
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.profiles.horizon
    }

    pub fn check(&self) -> Result<(), ScenarioError> {
        let h = self.horizon();
        self.profiles.validate(Some(&self.model))?;
        if !self.model.has_bus(self.ces_bus) {
            return Err(ScenarioError::Invalid(format!(
                "storage bus {} is not on the feeder",
                self.ces_bus
            )));
        }
        if self.phi.len() != h || self.delta.len() != h {
            return Err(ScenarioError::Invalid(
                "price series length differs from the horizon".into(),
            ));
        }
        if self.profiles.participant_count() == 0 {
            return Err(ScenarioError::Invalid("no participating users".into()));
        }
        if self.storage.dt_hours != self.dt_hours {
            return Err(ScenarioError::Invalid(
                "storage interval length differs".into(),
            ));
        }
        self.storage
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(self.grid_forward_max > 0.0 && self.grid_reverse_max > 0.0) {
            return Err(ScenarioError::Invalid(
                "grid limits must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn surplus(&self) -> SurplusSet {
        surplus(&self.profiles)
    }

    pub fn market_data(&self) -> MarketData {
        MarketData {
            dt_hours: self.dt_hours,
            phi: self.phi.clone(),
            delta: self.delta.clone(),
            lambda_min: self.lambda_min,
            e_n: self.profiles.non_participant_energy(),
            surplus: self.surplus(),
            grid_forward_max: self.grid_forward_max,
            grid_reverse_max: self.grid_reverse_max,
            storage: self.storage,
        }
    }

    pub fn injections(&self, e_s: Option<&[f64]>) -> Result<BusInjectionSeries, ScenarioError> {
        Ok(aggregate_by_bus(
            &self.profiles,
            &self.model,
            Some(self.ces_bus),
            e_s,
            self.dt_hours,
        )?)
    }

    pub fn voltage_network(&self) -> Result<VoltageNetwork, ScenarioError> {
        let sens = sensitivity_matrices(&self.model);
        let base_vsq = linear_voltages(&sens, &self.injections(None)?, self.model.v0_pu)?;
        Ok(VoltageNetwork {
            model: self.model.clone(),
            sens,
            ces_bus: self.ces_bus,
            base_vsq,
            margin_pu: self.voltage_margin_pu,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageSeries {
    pub e_s: Vec<f64>,
    pub e_g: Vec<f64>,
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
    pub soc: Vec<f64>,
    /// Participant trades with the storage, `[t][participant]`.
    pub y: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameDetail {
    pub voltage_constrained: bool,
    pub lambda_s: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub objective: f64,
    pub split_penalty: f64,
    pub iterations: usize,
    pub certificates: Certificates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stackelberg: Option<StackelbergCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralizedDetail {
    pub status: QpStatus,
    pub kkt: KktResidual,
    pub kkt_absolute: KktResidual,
    pub complementarity: f64,
    pub audit: Vec<AuditViolation>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub horizon: usize,
    pub dt_hours: f64,
    pub bus_count: usize,
    pub participant_count: usize,
    pub non_participant_count: usize,
    /// `E(t)`, kWh per interval.
    pub grid_energy: Vec<f64>,
    pub lambda_g: Vec<f64>,
    /// Cumulative cost per participant over the horizon.
    pub participant_costs: Vec<f64>,
    pub non_participant_costs: Vec<f64>,
    /// `Σ_t λ_g(t) E(t)`.
    pub community_cost: f64,
    /// Provider cash flow; absent when there is no storage.
    pub revenue: Option<f64>,
    /// `|Σ costs - revenue - community cost|`.
    pub accounting_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageSeries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<GameDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centralized: Option<CentralizedDetail>,
    /// Voltage magnitudes from the exact power flow, `[t][bus - 1]`.
    pub voltages: Vec<Vec<f64>>,
    pub voltage_violations: Vec<VoltageViolation>,
    pub thermal_violations: Vec<ThermalViolation>,
    pub sweep_residual: f64,
    /// Largest gap between linear and exact voltage magnitudes.
    pub linear_voltage_error: f64,
}

impl ModeResult {
    pub fn peak_grid_energy(&self) -> f64 {
        self.grid_energy
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when the mode's optimality and constraint certificates hold.
    /// The exact voltage audit is reported separately.
    pub fn certificates_clean(&self) -> bool {
        if let Some(g) = &self.game {
            return g.certificates.clean();
        }
        if let Some(c) = &self.centralized {
            return c.status == QpStatus::Optimal && c.audit.is_empty();
        }
        true
    }
}

/// Settlement of one mode: prices, per-user costs, exact voltages.
struct Settlement<'a> {
    sc: &'a Scenario,
    mode: Mode,
    grid_energy: Vec<f64>,
    /// Participant grid trades `e_p = y_p - s_p`.
    e_p: Vec<Vec<f64>>,
    lambda_s: Option<Vec<f64>>,
    y: Option<Vec<Vec<f64>>>,
    revenue: Option<f64>,
    e_s: Option<Vec<f64>>,
}

impl Settlement<'_> {
    fn finish(self) -> Result<ModeResult, ScenarioError> {
        let sc = self.sc;
        let h = sc.horizon();
        let lambda_g: Vec<f64> = (0..h)
            .map(|t| sc.phi[t] * self.grid_energy[t] + sc.delta[t])
            .collect();
        let m = sc.profiles.participant_count();
        let mut participant_costs = vec![0.0; m];
        for t in 0..h {
            for p in 0..m {
                let mut c = lambda_g[t] * self.e_p[t][p];
                if let (Some(ls), Some(y)) = (&self.lambda_s, &self.y) {
                    c -= ls[t] * y[t][p];
                }
                participant_costs[p] += c;
            }
        }
        let non_participant_costs: Vec<f64> = sc
            .profiles
            .non_participants()
            .map(|u| (0..h).map(|t| lambda_g[t] * u.demand[t]).sum())
            .collect();
        let community_cost: f64 = (0..h).map(|t| lambda_g[t] * self.grid_energy[t]).sum();
        let total: f64 = participant_costs.iter().chain(&non_participant_costs).sum();
        let accounting_residual = (total - self.revenue.unwrap_or(0.0) - community_cost).abs();

        let inj = sc.injections(self.e_s.as_deref())?;
        let sweep = sweep_power_flow(&sc.model, &inj, 1e-12, 500)?;
        let sens = sensitivity_matrices(&sc.model);
        let lin = linear_voltages(&sens, &inj, sc.model.v0_pu)?;
        let voltages = sweep.magnitudes();
        let linear_voltage_error = lin
            .iter()
            .zip(&voltages)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(a, b)| (a.max(0.0).sqrt() - b).abs()))
            .fold(0.0, f64::max);

        Ok(ModeResult {
            scenario: sc.name.clone(),
            mode: self.mode,
            seed: sc.seed,
            horizon: h,
            dt_hours: sc.dt_hours,
            bus_count: sc.model.bus_count(),
            participant_count: m,
            non_participant_count: non_participant_costs.len(),
            grid_energy: self.grid_energy,
            lambda_g,
            participant_costs,
            non_participant_costs,
            community_cost,
            revenue: self.revenue,
            accounting_residual,
            storage: None,
            game: None,
            centralized: None,
            voltage_violations: check_voltage_limits(&sweep.vsq, &sc.model),
            thermal_violations: check_thermal(&sc.model, &sweep.p_flow, &sweep.q_flow),
            voltages,
            sweep_residual: sweep.residual,
            linear_voltage_error,
        })
    }
}

/// No storage: every participant settles its surplus with the grid.
pub fn run_baseline(sc: &Scenario) -> Result<ModeResult, ScenarioError> {
    sc.check()?;
    let s = sc.surplus();
    Settlement {
        sc,
        mode: Mode::Baseline,
        grid_energy: baseline_grid_energy(&sc.profiles),
        e_p: s
            .s
            .iter()
            .map(|row| row.iter().map(|v| -v).collect())
            .collect(),
        lambda_s: None,
        y: None,
        revenue: None,
        e_s: None,
    }
    .finish()
}

/// The pricing game, with or without the linear voltage rows.
pub fn run_decentralized(
    sc: &Scenario,
    voltage_constraints: bool,
) -> Result<ModeResult, ScenarioError> {
    sc.check()?;
    let data = sc.market_data();
    let net = sc.voltage_network()?;
    let opts = LeaderOptions {
        voltage_constraints,
        ..sc.leader
    };
    let (lp, eq) = leader::solve_stackelberg(&data, Some(&net), &opts)?;
    let stackelberg = if sc.stackelberg_probes > 0 {
        Some(leader::verify_stackelberg(
            &lp,
            &data,
            &eq,
            &opts,
            sc.stackelberg_probes,
            sc.seed,
        )?)
    } else {
        None
    };
    let mut r = Settlement {
        sc,
        mode: if voltage_constraints {
            Mode::Game
        } else {
            Mode::GameNovolt
        },
        grid_energy: eq.grid_energy.clone(),
        e_p: eq.e.clone(),
        lambda_s: Some(eq.lambda_s.clone()),
        y: Some(eq.y.clone()),
        revenue: Some(eq.revenue),
        e_s: Some(eq.e_s.clone()),
    }
    .finish()?;
    r.storage = Some(StorageSeries {
        e_s: eq.e_s,
        e_g: eq.e_g,
        charge: eq.charge,
        discharge: eq.discharge,
        soc: eq.soc,
        y: eq.y,
    });
    r.game = Some(GameDetail {
        voltage_constrained: voltage_constraints,
        lambda_s: eq.lambda_s,
        epsilon: eq.epsilon,
        objective: eq.objective,
        split_penalty: eq.split_penalty,
        iterations: eq.iterations,
        certificates: eq.certificates,
        stackelberg,
    });
    Ok(r)
}

/// Split a total storage trade over participants: surplus users supply a
/// charge and deficit users absorb a discharge, each pro rata to its own
/// surplus. The remainder of the storage flow goes to the grid.
fn allocate_trades(s: &[f64], e_s: f64) -> Vec<f64> {
    let pos: f64 = s.iter().filter(|&&v| v > 0.0).sum();
    let neg: f64 = s.iter().filter(|&&v| v < 0.0).sum();
    let total = e_s.clamp(neg, pos);
    s.iter()
        .map(|&v| {
            if total > 0.0 && v > 0.0 {
                total * v / pos
            } else if total < 0.0 && v < 0.0 {
                total * v / neg
            } else {
                0.0
            }
        })
        .collect()
}

/// Minimise the community's grid bill `Σ_t φ_t E(t)² + δ_t E(t)` over the
/// storage schedule. `E(t) = e_s(t) - Σ_p s_p(t) + E_N(t)` does not depend on
/// how the storage flow is shared between users and grid, so the problem is
/// posed over `(e_s, c, d)`; trades are then allocated users first.
pub fn run_centralized(sc: &Scenario) -> Result<ModeResult, ScenarioError> {
    sc.check()?;
    let h = sc.horizon();
    let st = &sc.storage;
    let s = sc.surplus();
    let e_n = sc.profiles.non_participant_energy();
    let kappa: Vec<f64> = (0..h).map(|t| e_n[t] - s.total(t)).collect();
    let (ei, ci, di) = (|t: usize| t, |t: usize| h + t, |t: usize| 2 * h + t);

    let mut qp = QpProblem::new(3 * h);
    let mut quad = vec![0.0; 3 * h];
    let mut lin = vec![0.0; 3 * h];
    let slopes: Vec<f64> = (0..h)
        .map(|t| 2.0 * sc.phi[t] * kappa[t] + sc.delta[t])
        .collect();
    let rho =
        sc.leader.split_penalty_factor * slopes.iter().map(|v| v.abs()).sum::<f64>() / h as f64;
    for t in 0..h {
        quad[ei(t)] = -sc.phi[t];
        lin[ei(t)] = -slopes[t];
        lin[ci(t)] = -rho;
        lin[di(t)] = -rho;
    }
    qp.quadratic = Quadratic::Diagonal(quad);
    qp.linear = lin;

    let net = sc.voltage_network()?;
    let k = net.storage_sensitivity(sc.dt_hours);
    let vmax = (sc.model.v_max_pu - sc.voltage_margin_pu).powi(2);
    let vmin = (sc.model.v_min_pu + sc.voltage_margin_pu).powi(2);

    let mut ineq_tags = Vec::new();
    let mut eq_tags = Vec::new();
    let mut push = |qp: &mut QpProblem, row: Vec<(usize, f64)>, rhs: f64, family, t: usize, bus| {
        qp.add_ineq(LinearRow::new(row), rhs);
        ineq_tags.push(RowTag {
            family,
            t: t + 1,
            bus,
        });
    };
    for t in 0..h {
        let e = ei(t);
        push(
            &mut qp,
            vec![(e, -sc.phi[t])],
            sc.delta[t] - sc.lambda_min + sc.phi[t] * kappa[t],
            Family::PriceFloor,
            t,
            None,
        );
        push(
            &mut qp,
            vec![(e, 1.0)],
            sc.grid_forward_max - kappa[t],
            Family::GridForward,
            t,
            None,
        );
        push(
            &mut qp,
            vec![(e, -1.0)],
            sc.grid_reverse_max + kappa[t],
            Family::GridReverse,
            t,
            None,
        );
        push(
            &mut qp,
            vec![(e, 1.0)],
            st.charge_max_kwh(),
            Family::ChargeRate,
            t,
            None,
        );
        push(
            &mut qp,
            vec![(e, -1.0)],
            st.discharge_max_kwh(),
            Family::DischargeRate,
            t,
            None,
        );
        let soc: Vec<(usize, f64)> = (0..=t)
            .flat_map(|tau| [(ci(tau), st.eta_c), (di(tau), -st.eta_d)])
            .collect();
        let neg: Vec<(usize, f64)> = soc.iter().map(|&(i, v)| (i, -v)).collect();
        push(
            &mut qp,
            soc.clone(),
            st.b_max - st.b0,
            Family::CapacityMax,
            t,
            None,
        );
        push(
            &mut qp,
            neg.clone(),
            st.b0 - st.b_min,
            Family::CapacityMin,
            t,
            None,
        );
        if t + 1 == h {
            push(&mut qp, soc, st.theta, Family::Cyclical, t, None);
            push(&mut qp, neg, st.theta, Family::Cyclical, t, None);
        }
        push(
            &mut qp,
            vec![(ci(t), -1.0)],
            0.0,
            Family::SplitNonnegative,
            t,
            None,
        );
        push(
            &mut qp,
            vec![(di(t), -1.0)],
            0.0,
            Family::SplitNonnegative,
            t,
            None,
        );
        for (i, &ki) in k.iter().enumerate() {
            let terms = if ki == 0.0 { Vec::new() } else { vec![(e, ki)] };
            let neg_terms = terms.iter().map(|&(j, v)| (j, -v)).collect();
            let base = net.base_vsq[t][i];
            push(
                &mut qp,
                terms,
                vmax - base,
                Family::VoltageMax,
                t,
                Some(i + 1),
            );
            push(
                &mut qp,
                neg_terms,
                base - vmin,
                Family::VoltageMin,
                t,
                Some(i + 1),
            );
        }
        qp.add_eq(
            LinearRow::new(vec![(ci(t), 1.0), (di(t), -1.0), (e, -1.0)]),
            0.0,
        );
        eq_tags.push(RowTag {
            family: Family::StorageLink,
            t: t + 1,
            bus: None,
        });
    }

    let solver = QpSolver::new(&qp, sc.leader.qp)?;
    let sol = match solver.solve() {
        Ok(sol) => sol,
        Err(QpError::Infeasible(_)) => {
            return Err(ScenarioError::InfeasibleScenario {
                families: infeasible_families(&qp, &ineq_tags, &eq_tags, &sc.leader.qp)?,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let x = &sol.x;
    let e_s: Vec<f64> = (0..h).map(|t| x[ei(t)]).collect();
    let charge: Vec<f64> = (0..h).map(|t| x[ci(t)]).collect();
    let discharge: Vec<f64> = (0..h).map(|t| x[di(t)]).collect();
    let y: Vec<Vec<f64>> = (0..h).map(|t| allocate_trades(&s.s[t], e_s[t])).collect();
    let e_g: Vec<f64> = (0..h).map(|t| e_s[t] - y[t].iter().sum::<f64>()).collect();
    let grid_energy: Vec<f64> = (0..h).map(|t| e_s[t] + kappa[t]).collect();
    let e_p: Vec<Vec<f64>> = (0..h)
        .map(|t| y[t].iter().zip(&s.s[t]).map(|(y, s)| y - s).collect())
        .collect();
    let lambda_g: Vec<f64> = (0..h)
        .map(|t| sc.phi[t] * grid_energy[t] + sc.delta[t])
        .collect();
    let revenue = -(0..h).map(|t| lambda_g[t] * e_g[t]).sum::<f64>();
    let soc = soc_trajectory(st, &e_s).b;
    let complementarity = charge
        .iter()
        .zip(&discharge)
        .map(|(c, d)| (c * d).abs())
        .fold(0.0, f64::max);

    let tol = sc.leader.audit_tol;
    let mut audit = Vec::new();
    let mut flag = |family, t: usize, index, value: f64, bound: f64, ok: bool| {
        if !ok {
            audit.push(AuditViolation {
                family,
                t,
                index,
                value,
                bound,
            })
        }
    };
    for t in 0..h {
        for (p, (&yp, &sp)) in y[t].iter().zip(&s.s[t]).enumerate() {
            let (lo, hi) = crate::followers::trade_bounds(sp);
            flag(
                Family::EpsilonBound,
                t + 1,
                Some(p),
                yp,
                lo,
                yp >= lo - tol && yp <= hi + tol,
            );
        }
        let e = grid_energy[t];
        flag(
            Family::PriceFloor,
            t + 1,
            None,
            lambda_g[t],
            sc.lambda_min,
            lambda_g[t] >= sc.lambda_min - tol,
        );
        flag(
            Family::GridForward,
            t + 1,
            None,
            e,
            sc.grid_forward_max,
            e <= sc.grid_forward_max + tol,
        );
        flag(
            Family::GridReverse,
            t + 1,
            None,
            e,
            -sc.grid_reverse_max,
            e >= -sc.grid_reverse_max - tol,
        );
        flag(
            Family::StorageLink,
            t + 1,
            None,
            charge[t] - discharge[t],
            e_s[t],
            (charge[t] - discharge[t] - e_s[t]).abs() <= tol,
        );
    }
    let traj = soc_trajectory(st, &e_s);
    for v in check_storage_feasibility_tol(&traj, st, tol) {
        let family = match v.limit {
            StorageLimit::ChargeRate => Family::ChargeRate,
            StorageLimit::DischargeRate => Family::DischargeRate,
            StorageLimit::CapacityMax => Family::CapacityMax,
            StorageLimit::CapacityMin => Family::CapacityMin,
            StorageLimit::Cyclical => Family::Cyclical,
        };
        flag(family, v.t, None, v.value, v.bound, false);
    }
    for (t, (a, b)) in soc_from_split(st, &charge, &discharge)
        .iter()
        .zip(&soc)
        .enumerate()
    {
        flag(
            Family::StorageLink,
            t + 1,
            None,
            *a,
            *b,
            (a - b).abs() <= tol,
        );
    }
    for (t, row) in net.voltages(&e_s, sc.dt_hours).iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            flag(
                Family::VoltageMax,
                t + 1,
                Some(i + 1),
                v,
                sc.model.v_max_sq(),
                v <= sc.model.v_max_sq() + tol,
            );
            flag(
                Family::VoltageMin,
                t + 1,
                Some(i + 1),
                v,
                sc.model.v_min_sq(),
                v >= sc.model.v_min_sq() - tol,
            );
        }
    }

    let mut status = sol.status;
    if complementarity >= sc.leader.complementarity_tol {
        if !sc.leader.accept_degenerate {
            let t = (0..h)
                .max_by(|&a, &b| (charge[a] * discharge[a]).total_cmp(&(charge[b] * discharge[b])))
                .unwrap_or(0);
            return Err(LeaderError::ComplementarityViolation {
                t: t + 1,
                charge: charge[t],
                discharge: discharge[t],
            }
            .into());
        }
        status = QpStatus::Degenerate;
    }

    let mut r = Settlement {
        sc,
        mode: Mode::Centralized,
        grid_energy,
        e_p,
        lambda_s: None,
        y: None,
        revenue: Some(revenue),
        e_s: Some(e_s.clone()),
    }
    .finish()?;
    r.centralized = Some(CentralizedDetail {
        status,
        kkt: sol.kkt,
        kkt_absolute: kkt_residual(&qp, &sol),
        complementarity,
        audit,
        iterations: sol.iterations,
    });
    r.storage = Some(StorageSeries {
        e_s,
        e_g,
        charge,
        discharge,
        soc,
        y,
    });
    Ok(r)
}

pub fn run_mode(sc: &Scenario, mode: Mode) -> Result<ModeResult, ScenarioError> {
    match mode {
        Mode::Baseline => run_baseline(sc),
        Mode::Game => run_decentralized(sc, true),
        Mode::GameNovolt => run_decentralized(sc, false),
        Mode::Centralized => run_centralized(sc),
    }
}

/// Map `f` over `items` on at most `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

pub fn run_modes(
    sc: &Scenario,
    modes: &[Mode],
    jobs: usize,
) -> Vec<Result<ModeResult, ScenarioError>> {
    par_map(modes, jobs, |&m| run_mode(sc, m))
}

/// Five-number summary of one bus's voltage over the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusVoltageStats {
    pub bus: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn voltage_stats(voltages: &[Vec<f64>], bus_count: usize) -> Vec<BusVoltageStats> {
    (0..bus_count)
        .map(|i| {
            let mut v: Vec<f64> = voltages.iter().map(|row| row[i]).collect();
            v.sort_by(f64::total_cmp);
            BusVoltageStats {
                bus: i + 1,
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub scenario: String,
    pub mode: Mode,
    /// Largest `E(t)`, kWh per interval.
    pub peak_grid_energy: f64,
    pub participant_total_cost: f64,
    pub participant_avg_cost: f64,
    pub non_participant_total_cost: f64,
    pub non_participant_avg_cost: Option<f64>,
    pub community_cost: f64,
    pub revenue: Option<f64>,
    pub soc_max: Option<f64>,
    pub overvoltage_count: usize,
    pub undervoltage_count: usize,
    pub voltage_stats: Vec<BusVoltageStats>,
}

impl ModeSummary {
    pub fn of(r: &ModeResult) -> Self {
        let p_total: f64 = r.participant_costs.iter().sum();
        let n_total: f64 = r.non_participant_costs.iter().sum();
        let under = r.voltage_violations.iter().filter(|v| v.is_under()).count();
        ModeSummary {
            scenario: r.scenario.clone(),
            mode: r.mode,
            peak_grid_energy: r.peak_grid_energy(),
            participant_total_cost: p_total,
            participant_avg_cost: p_total / r.participant_count as f64,
            non_participant_total_cost: n_total,
            non_participant_avg_cost: (r.non_participant_count > 0)
                .then(|| n_total / r.non_participant_count as f64),
            community_cost: r.community_cost,
            revenue: r.revenue,
            soc_max: r
                .storage
                .as_ref()
                .map(|s| s.soc.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            overvoltage_count: r.voltage_violations.len() - under,
            undervoltage_count: under,
            voltage_stats: voltage_stats(&r.voltages, r.bus_count),
        }
    }
}

/// Relative changes against the reference mode, in percent. `None` where the
/// reference value is zero or absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDelta {
    pub mode: Mode,
    pub peak_grid_energy_pct: Option<f64>,
    pub participant_avg_cost_pct: Option<f64>,
    pub non_participant_avg_cost_pct: Option<f64>,
    pub community_cost_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub horizon: usize,
    pub dt_hours: f64,
    pub reference: Mode,
    pub modes: Vec<ModeSummary>,
    pub deltas: Vec<ModeDelta>,
}

pub fn pct_change(value: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| 100.0 * (value - reference) / reference.abs())
}

/// Summaries and deltas against the baseline (or the first result when no
/// baseline is present).
pub fn compare(results: &[ModeResult]) -> Result<ComparisonReport, ScenarioError> {
    if results.len() < 2 {
        return Err(ScenarioError::IncompatibleResults(
            "need at least two results".into(),
        ));
    }
    let first = &results[0];
    for r in &results[1..] {
        let mismatch = [
            ("horizon", r.horizon != first.horizon),
            ("interval length", r.dt_hours != first.dt_hours),
            ("bus count", r.bus_count != first.bus_count),
            (
                "participant count",
                r.participant_count != first.participant_count,
            ),
            (
                "non-participant count",
                r.non_participant_count != first.non_participant_count,
            ),
        ];
        if let Some((what, _)) = mismatch.iter().find(|(_, bad)| *bad) {
            return Err(ScenarioError::IncompatibleResults(format!(
                "{what} differs between {} and {}",
                first.mode, r.mode
            )));
        }
    }
    let modes: Vec<ModeSummary> = results.iter().map(ModeSummary::of).collect();
    let reference = modes
        .iter()
        .find(|m| m.mode == Mode::Baseline)
        .unwrap_or(&modes[0])
        .clone();
    let deltas = modes
        .iter()
        .map(|m| ModeDelta {
            mode: m.mode,
            peak_grid_energy_pct: pct_change(m.peak_grid_energy, reference.peak_grid_energy),
            participant_avg_cost_pct: pct_change(
                m.participant_avg_cost,
                reference.participant_avg_cost,
            ),
            non_participant_avg_cost_pct: match (
                m.non_participant_avg_cost,
                reference.non_participant_avg_cost,
            ) {
                (Some(a), Some(b)) => pct_change(a, b),
                _ => None,
            },
            community_cost_pct: pct_change(m.community_cost, reference.community_cost),
        })
        .collect();
    Ok(ComparisonReport {
        horizon: first.horizon,
        dt_hours: first.dt_hours,
        reference: reference.mode,
        modes,
        deltas,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn summary_csv(report: &ComparisonReport) -> String {
    let mut s = String::from(
        "scenario,mode,peak_grid_kwh,participant_avg_cost,non_participant_avg_cost,community_cost,revenue,\
         overvoltages,undervoltages,peak_pct,participant_cost_pct,non_participant_cost_pct,community_cost_pct\n",
    );
    for (m, d) in report.modes.iter().zip(&report.deltas) {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.scenario,
            m.mode,
            m.peak_grid_energy,
            m.participant_avg_cost,
            opt(m.non_participant_avg_cost),
            m.community_cost,
            opt(m.revenue),
            m.overvoltage_count,
            m.undervoltage_count,
            opt(d.peak_grid_energy_pct),
            opt(d.participant_avg_cost_pct),
            opt(d.non_participant_avg_cost_pct),
            opt(d.community_cost_pct),
        ));
    }
    s
}

pub fn voltage_quantiles_csv(report: &ComparisonReport) -> String {
    let mut s = String::from("scenario,mode,bus,min,q1,median,q3,max\n");
    for m in &report.modes {
        for b in &m.voltage_stats {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.scenario, m.mode, b.bus, b.min, b.q1, b.median, b.q3, b.max
            ));
        }
    }
    s
}

/// Per-interval grid energy and prices of one mode.
pub fn series_csv(r: &ModeResult) -> String {
    let mut s = String::from("t,grid_kwh,lambda_g");
    if r.game.is_some() {
        s.push_str(",lambda_s,epsilon_kwh");
    }
    s.push('\n');
    for t in 0..r.horizon {
        s.push_str(&format!("{},{},{}", t + 1, r.grid_energy[t], r.lambda_g[t]));
        if let Some(g) = &r.game {
            s.push_str(&format!(",{},{}", g.lambda_s[t], g.epsilon[t]));
        }
        s.push('\n');
    }
    s
}

/// Storage schedule of one mode; `None` without storage.
pub fn storage_csv(r: &ModeResult) -> Option<String> {
    let st = r.storage.as_ref()?;
    let mut s =
        String::from("t,e_s_kwh,e_g_kwh,charge_kwh,discharge_kwh,soc_kwh,storage_trade_kwh\n");
    for t in 0..r.horizon {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t + 1,
            st.e_s[t],
            st.e_g[t],
            st.charge[t],
            st.discharge[t],
            st.soc[t],
            st.y[t].iter().sum::<f64>()
        ));
    }
    Some(s)
}

/// Exact voltage magnitudes, one column per bus.
pub fn voltages_csv(r: &ModeResult) -> String {
    let mut s = String::from("t");
    for b in 1..=r.bus_count {
        s.push_str(&format!(",v{b}"));
    }
    s.push('\n');
    for (t, row) in r.voltages.iter().enumerate() {
        s.push_str(&(t + 1).to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonReport {
    pub season: Season,
    pub report: ComparisonReport,
}

/// Cost and revenue bars scaled by the largest magnitude of each metric
/// across seasons, per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub season: Season,
    pub mode: Mode,
    pub participant_avg_cost: f64,
    pub non_participant_avg_cost: Option<f64>,
    pub revenue: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seasons: Vec<SeasonReport>,
    pub normalized: Vec<NormalizedRow>,
}

fn normalize(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let scale = values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    values
        .iter()
        .map(|v| v.map(|v| if scale > 0.0 { v / scale } else { 0.0 }))
        .collect()
}

/// Every mode on every season's scenario.
pub fn seasonal_sweep(
    scenarios: &[(Season, Scenario)],
    jobs: usize,
) -> Result<SweepReport, ScenarioError> {
    let tasks: Vec<(usize, Mode)> = (0..scenarios.len())
        .flat_map(|i| Mode::ALL.into_iter().map(move |m| (i, m)))
        .collect();
    let mut results = par_map(&tasks, jobs, |&(i, m)| run_mode(&scenarios[i].1, m)).into_iter();
    let mut seasons = Vec::with_capacity(scenarios.len());
    for (season, _) in scenarios {
        let per: Vec<ModeResult> = results
            .by_ref()
            .take(Mode::ALL.len())
            .collect::<Result<_, _>>()?;
        seasons.push(SeasonReport {
            season: *season,
            report: compare(&per)?,
        });
    }
    let mut normalized = Vec::new();
    for (k, mode) in Mode::ALL.into_iter().enumerate() {
        let pick = |f: &dyn Fn(&ModeSummary) -> Option<f64>| -> Vec<Option<f64>> {
            normalize(
                &seasons
                    .iter()
                    .map(|s| f(&s.report.modes[k]))
                    .collect::<Vec<_>>(),
            )
        };
        let p = pick(&|m| Some(m.participant_avg_cost));
        let n = pick(&|m| m.non_participant_avg_cost);
        let w = pick(&|m| m.revenue);
        for (i, s) in seasons.iter().enumerate() {
            normalized.push(NormalizedRow {
                season: s.season,
                mode,
                participant_avg_cost: p[i].unwrap_or(0.0),
                non_participant_avg_cost: n[i],
                revenue: w[i],
            });
        }
    }
    Ok(SweepReport {
        seasons,
        normalized,
    })
}

pub fn normalized_csv(sweep: &SweepReport) -> String {
    let mut s = String::from("season,mode,participant_avg_cost,non_participant_avg_cost,revenue\n");
    for r in &sweep.normalized {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.season.name(),
            r.mode,
            r.participant_avg_cost,
            opt(r.non_participant_avg_cost),
            opt(r.revenue)
        ));
    }
    s
}

pub fn season_voltage_csv(sweep: &SweepReport) -> String {
    let mut s = String::from("season,mode,bus,min,q1,median,q3,max\n");
    for season in &sweep.seasons {
        for m in &season.report.modes {
            for b in &m.voltage_stats {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    season.season.name(),
                    m.mode,
                    b.bus,
                    b.min,
                    b.q1,
                    b.median,
                    b.q3,
                    b.max
                ));
            }
        }
    }
    s
}
