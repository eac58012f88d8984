//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! lines show up under `cargo test`.

mod common;

use std::time::{Duration, Instant};

use cesgame_core::feeder::{
    distflow_residual, linear_voltages, sensitivity_matrices, sweep_power_flow,
};
use cesgame_core::followers::{nash_closed_form, verify_nash, MarketContext};
use cesgame_core::leader::{solve_stackelberg, LeaderOptions, MarketData, LEADER_ADVANTAGE_TOL};
use cesgame_core::profiles::SurplusSet;
use cesgame_core::scenarios::{
    compare, normalized_csv, run_mode, season_voltage_csv, seasonal_sweep, series_csv, storage_csv,
    summary_csv, voltage_quantiles_csv, voltages_csv,
};
use cesgame_core::{Mode, ModeResult, Scenario, StorageParams};
use common::{damped_best_response, natural_audit, report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NASH_TOL: f64 = 1e-8;
const KKT_TOL: f64 = 1e-8;
const PROBES: usize = 1000;
const AUDIT_TOL: f64 = 1e-6;
const COMPLEMENTARITY_TOL: f64 = 1e-6;
const LINEAR_VOLTAGE_TOL: f64 = 0.01;
const SWEEP_RESIDUAL_TOL: f64 = 1e-10;
const COST_TOL: f64 = 1e-6;

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn criterion_1() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_gap, mut worst_adv) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..200 {
        let m = rng.gen_range(1..=10);
        let s: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let ctx = MarketContext::new(
            1,
            rng.gen_range(0.05..2.0),
            rng.gen_range(5.0..40.0),
            rng.gen_range(0.0..20.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(5.0..60.0),
            m,
        )
        .unwrap();
        let (_, y) = nash_closed_form(&s, &ctx).unwrap();
        let (fixed, _) = damped_best_response(
            &s,
            ctx.phi,
            ctx.delta,
            ctx.lambda_s,
            ctx.e_n,
            ctx.e_g,
            100_000,
        );
        let gap = y
            .iter()
            .zip(&fixed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_gap = worst_gap.max(gap);
        match verify_nash(&y, &s, &ctx, 1000, false) {
            Ok(c) => worst_adv = worst_adv.max(c.max_advantage),
            Err(_) => failures += 1,
        }
        if gap > NASH_TOL {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = failures == 0 && worst_adv <= NASH_TOL && elapsed < Duration::from_secs(10);
    report(
        ok,
        1,
        &format!(
            "closed-form Nash vs best-response fixed point on 200 instances: max gap {worst_gap:.2e}, \
             max deviation gain {worst_adv:.2e} (tol {NASH_TOL:.0e}), {:.2} s",
            secs(elapsed)
        ),
    )
}

struct Toy {
    data: MarketData,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let s: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..2).map(|_| sign * rng.gen_range(0.5..3.0)).collect())
        .collect();
    let surplus_side = s
        .iter()
        .map(|r| r.iter().map(|&v| v >= 0.0).collect())
        .collect();
    let storage = StorageParams {
        b_max: 10.0,
        b_min: 1.0,
        charge_max_kw: 4.0,
        discharge_max_kw: 4.0,
        eta_c: 0.95,
        eta_d: 1.05,
        b0: rng.gen_range(3.0..8.0),
        theta: rng.gen_range(1.0..3.0),
        dt_hours: 1.0,
    };
    Toy {
        data: MarketData {
            dt_hours: 1.0,
            phi: (0..2).map(|_| rng.gen_range(0.5..2.0)).collect(),
            delta: (0..2).map(|_| rng.gen_range(5.0..15.0)).collect(),
            lambda_min: 0.5,
            e_n: (0..2).map(|_| rng.gen_range(0.5..3.0)).collect(),
            surplus: SurplusSet { s, surplus_side },
            grid_forward_max: 12.0,
            grid_reverse_max: 12.0,
            storage,
        },
    }
}

/// One interval of the toy market, evaluated from first principles.
struct Step<'a> {
    d: &'a MarketData,
    t: usize,
}

impl Step<'_> {
    fn m(&self) -> f64 {
        self.d.surplus.s[self.t].len() as f64
    }
    fn sum_s(&self) -> f64 {
        self.d.surplus.s[self.t].iter().sum()
    }
    fn eps(&self, lambda: f64, e_g: f64) -> f64 {
        let (phi, delta) = (self.d.phi[self.t], self.d.delta[self.t]);
        ((lambda - delta) / phi - self.d.e_n[self.t] - e_g) / (self.m() + 1.0)
    }
    fn eps_range(&self) -> (f64, f64) {
        let s = &self.d.surplus.s[self.t];
        let lo = s
            .iter()
            .map(|&v| v.min(0.0) - v)
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = s
            .iter()
            .map(|&v| v.max(0.0) - v)
            .fold(f64::INFINITY, f64::min);
        (lo, hi)
    }
    /// Bounding box of the feasible `(λ_s, e_g)` set.
    fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let d = self.d;
        let st = &d.storage;
        let (lo, hi) = self.eps_range();
        let m = self.m();
        let eg_lo = (-d.grid_reverse_max - d.e_n[self.t] - m * hi)
            .max(-st.discharge_max_kwh() - self.sum_s() - m * hi);
        let eg_hi = (d.grid_forward_max - d.e_n[self.t] - m * lo)
            .min(st.charge_max_kwh() - self.sum_s() - m * lo);
        let lam = |eg: f64, eps: f64| {
            d.delta[self.t] + d.phi[self.t] * (d.e_n[self.t] + eg + (m + 1.0) * eps)
        };
        ([lam(eg_lo, lo), lam(eg_hi, hi)], [eg_lo, eg_hi])
    }
    /// `(revenue, e_s)` if every per-interval limit holds.
    fn eval(&self, lambda: f64, e_g: f64) -> Option<(f64, f64)> {
        let d = self.d;
        let st = &d.storage;
        let eps = self.eps(lambda, e_g);
        let (lo, hi) = self.eps_range();
        if eps < lo || eps > hi {
            return None;
        }
        let m = self.m();
        let e = m * eps + d.e_n[self.t] + e_g;
        let price = d.phi[self.t] * e + d.delta[self.t];
        if price < d.lambda_min || e > d.grid_forward_max || -e > d.grid_reverse_max {
            return None;
        }
        let e_s = e_g + self.sum_s() + m * eps;
        if e_s > st.charge_max_kwh() || -e_s > st.discharge_max_kwh() {
            return None;
        }
        Some((-lambda * (self.sum_s() + m * eps) - price * e_g, e_s))
    }
    fn revenue(&self, lambda: f64, e_g: f64) -> f64 {
        let eps = self.eps(lambda, e_g);
        let e = self.m() * eps + self.d.e_n[self.t] + e_g;
        -lambda * (self.sum_s() + self.m() * eps)
            - (self.d.phi[self.t] * e + self.d.delta[self.t]) * e_g
    }
}

fn soc_step(st: &StorageParams, b: f64, e_s: f64) -> f64 {
    b + if e_s >= 0.0 {
        st.eta_c * e_s
    } else {
        st.eta_d * e_s
    }
}

/// Best revenue over the 51⁴ lattice on the bounding box and the gap bound
/// `Σ_i max|∂R/∂x_i| h_i / 2`.
fn lattice(d: &MarketData, n: usize) -> (f64, f64, usize) {
    let st = &d.storage;
    let mut per_t = Vec::new();
    let mut gap = 0.0;
    for t in 0..2 {
        let step = Step { d, t };
        let (lam, eg) = step.bbox();
        let hl = (lam[1] - lam[0]) / (n - 1) as f64;
        let hg = (eg[1] - eg[0]) / (n - 1) as f64;
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (l, g) = (lam[0] + hl * i as f64, eg[0] + hg * j as f64);
                if let Some(v) = step.eval(l, g) {
                    pts.push(v);
                }
            }
        }
        // Revenue is quadratic, so central differences are exact and the
        // gradient's extremes sit at the corners.
        let (mut gl, mut gg) = (0.0f64, 0.0f64);
        for &l in &lam {
            for &g in &eg {
                let dl = (step.revenue(l + 1e-3, g) - step.revenue(l - 1e-3, g)) / 2e-3;
                let dg = (step.revenue(l, g + 1e-3) - step.revenue(l, g - 1e-3)) / 2e-3;
                gl = gl.max(dl.abs());
                gg = gg.max(dg.abs());
            }
        }
        gap += 0.5 * (gl * hl + gg * hg);
        per_t.push(pts);
    }
    let mut best = f64::NEG_INFINITY;
    let mut feasible = 0;
    for &(r0, e0) in &per_t[0] {
        let b1 = soc_step(st, st.b0, e0);
        if b1 > st.b_max || b1 < st.b_min {
            continue;
        }
        for &(r1, e1) in &per_t[1] {
            let b2 = soc_step(st, b1, e1);
            if b2 > st.b_max || b2 < st.b_min || (b2 - st.b0).abs() > st.theta {
                continue;
            }
            feasible += 1;
            best = best.max(r0 + r1);
        }
    }
    (best, gap, feasible)
}

fn criterion_2() -> bool {
    let start = Instant::now();
    let opts = LeaderOptions {
        voltage_constraints: false,
        ..LeaderOptions::default()
    };
    let mut ok = true;
    let (mut worst_margin, mut worst_kkt, mut max_gap) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut min_feasible = usize::MAX;
    for seed in 0..20 {
        let inst = toy(seed);
        let (best, gap, feasible) = lattice(&inst.data, 51);
        min_feasible = min_feasible.min(feasible);
        match solve_stackelberg(&inst.data, None, &opts) {
            Ok((_, r)) => {
                let kkt = r.certificates.kkt.max();
                worst_kkt = worst_kkt.max(kkt);
                worst_margin = worst_margin.min(r.revenue - best);
                max_gap = max_gap.max(gap);
                if feasible == 0 || r.revenue < best - gap || kkt >= KKT_TOL {
                    ok = false;
                    println!("  toy {seed}: revenue {} lattice {best} gap {gap} kkt {kkt:.2e} points {feasible}", r.revenue);
                }
            }
            Err(e) => {
                ok = false;
                println!("  toy {seed}: {e}");
            }
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    report(
        ok,
        2,
        &format!(
            "leader QP vs 51^4 lattice on 20 toys: min(revenue - lattice best) {worst_margin:.3e}, \
             largest gap bound {max_gap:.3e}, max KKT {worst_kkt:.2e} (tol {KKT_TOL:.0e}), \
             fewest feasible lattice points {min_feasible}, {:.2} s",
            secs(elapsed)
        ),
    )
}

/// Results of every mode on one scenario.
struct Suite {
    name: &'static str,
    scenario: Scenario,
    results: Vec<ModeResult>,
    game_seconds: f64,
}

fn run_suite(name: &'static str, sc: Scenario) -> Suite {
    let mut results = Vec::new();
    let mut game_seconds = 0.0;
    for mode in Mode::ALL {
        let t0 = Instant::now();
        let r = run_mode(&sc, mode).unwrap_or_else(|e| panic!("{name} {mode}: {e}"));
        if mode == Mode::Game {
            game_seconds = secs(t0.elapsed());
        }
        results.push(r);
    }
    Suite {
        name,
        scenario: sc,
        results,
        game_seconds,
    }
}

impl Suite {
    fn get(&self, mode: Mode) -> &ModeResult {
        self.results.iter().find(|r| r.mode == mode).unwrap()
    }
}

fn criterion_3(suites: &[Suite]) -> bool {
    let mut ok = true;
    let mut lines = Vec::new();
    for s in suites {
        for mode in [Mode::Game, Mode::GameNovolt] {
            let g = s.get(mode).game.as_ref().unwrap();
            let cert = g.stackelberg.as_ref();
            let nash = g.certificates.nash.max_advantage;
            let pass = cert
                .is_some_and(|c| c.probes == PROBES && c.max_advantage <= LEADER_ADVANTAGE_TOL)
                && nash <= NASH_TOL;
            ok &= pass;
            lines.push(format!(
                "{} {mode}: leader gain {:.2e}, follower gain {nash:.2e}",
                s.name,
                cert.map_or(f64::NAN, |c| c.max_advantage)
            ));
        }
    }
    report(
        ok,
        3,
        &format!(
            "{PROBES} projected leader probes (tol {LEADER_ADVANTAGE_TOL:.0e}) and follower scans (tol {NASH_TOL:.0e}): {}",
            lines.join("; ")
        ),
    )
}

/// The shipped scenario with every profile scaled so the feeder's total
/// apparent load stays within 30% of the transformer rating.
fn light_load(sc: &Scenario, transformer_kva: f64) -> Scenario {
    let mut light = sc.clone();
    let h = sc.horizon();
    let peak = (0..h)
        .map(|t| {
            let (mut p, mut q) = (0.0, 0.0);
            for u in &sc.profiles.users {
                p += if u.participating {
                    u.demand[t] - u.pv[t]
                } else {
                    u.demand[t]
                } / sc.dt_hours;
                q += u.reactive[t];
            }
            f64::hypot(p, q)
        })
        .fold(0.0, f64::max);
    let f = (0.3 * transformer_kva / peak).min(1.0);
    for u in &mut light.profiles.users {
        for v in u.demand.iter_mut().chain(&mut u.pv).chain(&mut u.reactive) {
            *v *= f;
        }
    }
    light
}

fn criterion_4() -> bool {
    let cfg = common::paper_config();
    let sc = light_load(&common::paper_scenario(0), cfg.network.transformer_kva);
    let start = Instant::now();
    let inj = sc.injections(None).unwrap();
    let lin = linear_voltages(&sensitivity_matrices(&sc.model), &inj, sc.model.v0_pu).unwrap();
    let sweep = sweep_power_flow(&sc.model, &inj, 1e-12, 500).unwrap();
    let elapsed = start.elapsed();
    let mut err = 0.0f64;
    for (a, b) in lin.iter().zip(&sweep.vsq) {
        for (a, b) in a.iter().zip(b) {
            err = err.max((a.sqrt() - b.sqrt()).abs());
        }
    }
    let recomputed = (0..sc.horizon())
        .map(|t| {
            distflow_residual(
                &sc.model,
                &inj.p[t],
                &inj.q[t],
                &sweep.vsq[t],
                &sweep.p_flow[t],
                &sweep.q_flow[t],
            )
        })
        .fold(0.0, f64::max);
    let independent = common::lindistflow_vsq(&sc, None);
    let lib_gap = lin
        .iter()
        .zip(&independent)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let ok = err < LINEAR_VOLTAGE_TOL
        && sweep.residual < SWEEP_RESIDUAL_TOL
        && recomputed < SWEEP_RESIDUAL_TOL
        && lib_gap < 1e-12
        && elapsed < Duration::from_secs(5);
    report(
        ok,
        4,
        &format!(
            "linear vs exact voltages at 30% load, H={}: max error {err:.2e} pu (tol {LINEAR_VOLTAGE_TOL}), \
             sweep residual {:.2e} / recomputed {recomputed:.2e} (tol {SWEEP_RESIDUAL_TOL:.0e}), \
             sensitivity vs path-sum oracle {lib_gap:.1e}, {:.3} s",
            sc.horizon(),
            sweep.residual,
            secs(elapsed)
        ),
    )
}

fn criterion_5(suites: &[Suite]) -> bool {
    let mut ok = true;
    let mut checked = 0;
    let mut worst_cd = 0.0f64;
    for s in suites {
        for mode in [Mode::Game, Mode::GameNovolt, Mode::Centralized] {
            let r = s.get(mode);
            let bad = natural_audit(&s.scenario, r, AUDIT_TOL, mode != Mode::GameNovolt);
            let (lib_audit, cd) = match (&r.game, &r.centralized) {
                (Some(g), _) => (g.certificates.audit.len(), g.certificates.complementarity),
                (_, Some(c)) => (c.audit.len(), c.complementarity),
                _ => unreachable!(),
            };
            worst_cd = worst_cd.max(cd);
            if !bad.is_empty() || lib_audit > 0 || cd >= COMPLEMENTARITY_TOL {
                ok = false;
                println!(
                    "  {} {mode}: {} violations, e.g. {:?}",
                    s.name,
                    bad.len() + lib_audit,
                    bad.first()
                );
            }
            checked += 1;
        }
    }
    report(
        ok,
        5,
        &format!(
            "natural-unit audit of {checked} equilibria at {AUDIT_TOL:.0e}: trade bounds, storage flow, \
             state of charge, rates, capacity, cycle, price floor, transformer, linear voltages; \
             max c*d {worst_cd:.2e} (tol {COMPLEMENTARITY_TOL:.0e})"
        ),
    )
}

fn criterion_6(paper: &Suite) -> bool {
    let base = paper.get(Mode::Baseline);
    let game = paper.get(Mode::Game);
    let novolt = paper.get(Mode::GameNovolt);
    let central = paper.get(Mode::Centralized);
    let (rg, rn) = (game.revenue.unwrap(), novolt.revenue.unwrap());
    let checks = [
        ("baseline violations", !base.voltage_violations.is_empty()),
        (
            "game clean",
            game.voltage_violations.is_empty() && game.certificates_clean(),
        ),
        (
            "peak cut",
            game.peak_grid_energy() < base.peak_grid_energy(),
        ),
        ("revenue order", rg <= rn + COST_TOL * rn.abs().max(1.0)),
        (
            "centralized cheapest",
            central.community_cost <= game.community_cost + COST_TOL,
        ),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        failed.is_empty(),
        6,
        &format!(
            "shipped autumn scenario: baseline {} exact-voltage violations, game {}, \
             peak {:.2} -> {:.2} kWh, revenue {rg:.1} <= {rn:.1}, community cost centralized {:.1} vs game {:.1}{}",
            base.voltage_violations.len(),
            game.voltage_violations.len(),
            base.peak_grid_energy(),
            game.peak_grid_energy(),
            central.community_cost,
            game.community_cost,
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            }
        ),
    )
}

/// Every JSON and CSV artifact of a suite, concatenated.
fn artifacts(s: &Suite) -> String {
    let mut out = String::new();
    for r in &s.results {
        out += &serde_json::to_string(r).unwrap();
        out += &series_csv(r);
        out += &storage_csv(r).unwrap_or_default();
        out += &voltages_csv(r);
    }
    let report = compare(&s.results).unwrap();
    out += &serde_json::to_string(&report).unwrap();
    out += &summary_csv(&report);
    out += &voltage_quantiles_csv(&report);
    out
}

fn criterion_7(first: &[Suite], second: &[Suite], sweeps: [String; 2]) -> bool {
    let mut ok = sweeps[0] == sweeps[1];
    let mut bytes = sweeps[0].len();
    for (a, b) in first.iter().zip(second) {
        let (x, y) = (artifacts(a), artifacts(b));
        ok &= x == y;
        bytes += x.len();
    }
    report(
        ok,
        7,
        &format!(
            "two seeded runs of {} scenarios plus the seasonal sweep give identical JSON/CSV ({bytes} bytes compared)",
            first.len()
        ),
    )
}

fn criterion_8() -> bool {
    let sc = common::paper_scenario(0);
    let data = sc.market_data();
    let net = sc.voltage_network().unwrap();
    let start = Instant::now();
    let solved = solve_stackelberg(&data, Some(&net), &sc.leader);
    let elapsed = start.elapsed();
    let ok = solved.as_ref().is_ok_and(|(_, r)| r.certificates.clean())
        && elapsed < Duration::from_secs(300);
    report(
        ok,
        8,
        &format!(
            "H={} with {} users on {} buses solved in {:.2} s (limit 300 s)",
            sc.horizon(),
            sc.profiles.users.len(),
            sc.model.bus_count(),
            secs(elapsed)
        ),
    )
}

fn sweep_artifacts() -> String {
    let cfg = common::small_config(0);
    let seasons = cfg.season_scenarios(&common::data_dir()).unwrap();
    let sweep = seasonal_sweep(&seasons, 1).unwrap();
    serde_json::to_string(&sweep).unwrap() + &normalized_csv(&sweep) + &season_voltage_csv(&sweep)
}

fn main() {
    let started = Instant::now();
    let mut ok = criterion_1();
    ok &= criterion_2();
    ok &= criterion_4();
    ok &= criterion_8();

    let run = || {
        vec![
            run_suite("half-hourly", common::small_scenario(PROBES)),
            run_suite("five-minute", common::paper_scenario(PROBES)),
        ]
    };
    let first = run();
    for s in &first {
        println!(
            "  {} game solve with certificates: {:.1} s",
            s.name, s.game_seconds
        );
    }
    ok &= criterion_3(&first);
    ok &= criterion_5(&first);
    ok &= criterion_6(&first[1]);
    let second = run();
    ok &= criterion_7(&first, &second, [sweep_artifacts(), sweep_artifacts()]);

    println!(
        "acceptance: {} in {:.1} s",
        if ok { "all criteria pass" } else { "FAILED" },
        secs(started.elapsed())
    );
    if !ok {
        std::process::exit(1);
    }
}
