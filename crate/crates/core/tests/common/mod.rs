#![allow(dead_code)]

use std::path::PathBuf;

use cesgame_core::config::Config;
use cesgame_core::followers::trade_bounds;
use cesgame_core::{ModeResult, Scenario};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn paper_config() -> Config {
    Config::load(&data_dir().join("paper-autumn.cfg"))
        .unwrap()
        .0
}

pub fn paper_scenario(probes: usize) -> Scenario {
    let mut cfg = paper_config();
    cfg.solver.stackelberg_probes = probes;
    cfg.scenario(&data_dir()).unwrap()
}

/// The shipped config on half-hour intervals: same day, 48 steps.
pub fn small_config(probes: usize) -> Config {
    let mut cfg = paper_config();
    cfg.horizon.intervals = 48;
    cfg.horizon.interval_hours = 0.5;
    cfg.prices.peak_start = 15;
    cfg.prices.peak_end = 46;
    cfg.solver.stackelberg_probes = probes;
    cfg
}

pub fn small_scenario(probes: usize) -> Scenario {
    small_config(probes).scenario(&data_dir()).unwrap()
}

/// `R_ij = -2 * (resistance shared by the root paths of i and j)`, built
/// straight from the line list.
pub fn lindistflow_vsq(sc: &Scenario, e_s: Option<&[f64]>) -> Vec<Vec<f64>> {
    let m = &sc.model;
    let n = m.bus_count();
    let path: Vec<Vec<usize>> = (1..=n).map(|b| m.path_to_root(b)).collect();
    let shared = |i: usize, j: usize, r: bool| -> f64 {
        path[i]
            .iter()
            .filter(|b| path[j].contains(b))
            .map(|&b| {
                let l = m.line_into(b);
                if r {
                    l.r_pu
                } else {
                    l.x_pu
                }
            })
            .sum()
    };
    let h = sc.horizon();
    let to_pu = |kwh: f64| kwh / sc.dt_hours / m.s_base_kva;
    (0..h)
        .map(|t| {
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            for u in &sc.profiles.users {
                let net = if u.participating {
                    u.demand[t] - u.pv[t]
                } else {
                    u.demand[t]
                };
                p[u.bus - 1] += to_pu(net);
                q[u.bus - 1] += u.reactive[t] / m.s_base_kva;
            }
            if let Some(es) = e_s {
                p[sc.ces_bus - 1] += to_pu(es[t]);
            }
            (0..n)
                .map(|i| {
                    m.v0_pu * m.v0_pu
                        + (0..n)
                            .map(|j| {
                                -2.0 * (shared(i, j, true) * p[j] + shared(i, j, false) * q[j])
                            })
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Every operating limit of a storage-bearing result, rechecked from the
/// reported trades in kWh, cents and squared per-unit volts. Returns one
/// message per violation.
pub fn natural_audit(sc: &Scenario, r: &ModeResult, tol: f64, voltage: bool) -> Vec<String> {
    let mut bad = Vec::new();
    let st = r.storage.as_ref().expect("storage series");
    let h = sc.horizon();
    let p = &sc.storage;
    let e_n = sc.profiles.non_participant_energy();
    let parts: Vec<_> = sc.profiles.participants().collect();
    let mut b = p.b0;
    let mut soc = Vec::new();
    for t in 0..h {
        let mut sum_y = 0.0;
        let mut e = e_n[t] + st.e_g[t];
        for (k, u) in parts.iter().enumerate() {
            let s = u.pv[t] - u.demand[t];
            let y = st.y[t][k];
            let (lo, hi) = trade_bounds(s);
            if y < lo - tol || y > hi + tol {
                bad.push(format!(
                    "t={} user {k}: trade {y} outside [{lo}, {hi}]",
                    t + 1
                ));
            }
            sum_y += y;
            e += y - s;
        }
        let es = st.e_g[t] + sum_y;
        if (es - st.e_s[t]).abs() > tol {
            bad.push(format!(
                "t={}: storage flow {} vs e_g + sum y {es}",
                t + 1,
                st.e_s[t]
            ));
        }
        if (e - r.grid_energy[t]).abs() > tol {
            bad.push(format!(
                "t={}: grid energy {} vs {e}",
                t + 1,
                r.grid_energy[t]
            ));
        }
        let lg = sc.phi[t] * e + sc.delta[t];
        if lg < sc.lambda_min - tol {
            bad.push(format!(
                "t={}: grid price {lg} under floor {}",
                t + 1,
                sc.lambda_min
            ));
        }
        if e > sc.grid_forward_max + tol || -e > sc.grid_reverse_max + tol {
            bad.push(format!("t={}: transformer energy {e}", t + 1));
        }
        if es > p.charge_max_kw * p.dt_hours + tol || -es > p.discharge_max_kw * p.dt_hours + tol {
            bad.push(format!("t={}: storage rate {es}", t + 1));
        }
        let (c, d) = (st.charge[t], st.discharge[t]);
        if c < -tol || d < -tol || (c * d).abs() >= 1e-6 || (c - d - es).abs() > tol {
            bad.push(format!("t={}: split c={c} d={d}", t + 1));
        }
        b += if es >= 0.0 {
            p.eta_c * es
        } else {
            p.eta_d * es
        };
        soc.push(b);
        if b > p.b_max + tol || b < p.b_min - tol {
            bad.push(format!("t={}: state of charge {b}", t + 1));
        }
        if (b - st.soc[t]).abs() > tol {
            bad.push(format!(
                "t={}: reported state of charge {} vs {b}",
                t + 1,
                st.soc[t]
            ));
        }
    }
    if (b - p.b0).abs() > p.theta + tol {
        bad.push(format!("final state of charge {b} vs initial {}", p.b0));
    }
    if voltage {
        let (lo, hi) = (sc.model.v_min_sq(), sc.model.v_max_sq());
        for (t, row) in lindistflow_vsq(sc, Some(&st.e_s)).iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if v > hi + tol || v < lo - tol {
                    bad.push(format!(
                        "t={} bus {}: linear squared voltage {v}",
                        t + 1,
                        i + 1
                    ));
                }
            }
        }
    }
    bad
}

/// Damped simultaneous best responses. Plain simultaneous updates oscillate
/// once there are four or more players; the damping keeps the fixed point.
pub fn damped_best_response(
    s: &[f64],
    phi: f64,
    delta: f64,
    lambda_s: f64,
    e_n: f64,
    e_g: f64,
    max_rounds: usize,
) -> (Vec<f64>, usize) {
    let m = s.len();
    let omega = 2.0 / (m as f64 + 1.0);
    let mut y = s.to_vec();
    for round in 0..max_rounds {
        let total: f64 = y.iter().zip(s).map(|(y, s)| y - s).sum::<f64>() + e_n + e_g;
        let mut change: f64 = 0.0;
        let next: Vec<f64> = (0..m)
            .map(|p| {
                let others = total - (y[p] - s[p]);
                // d/dy [ (phi (others + y - s) + delta)(y - s) - lambda_s y ] = 0
                let br = s[p] + (lambda_s - delta - phi * others) / (2.0 * phi);
                let v = y[p] + omega * (br - y[p]);
                change = change.max((v - y[p]).abs());
                v
            })
            .collect();
        y = next;
        if change < 1e-14 * (1.0 + y.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            return (y, round + 1);
        }
    }
    (y, max_rounds)
}

pub fn report(ok: bool, criterion: u32, text: &str) -> bool {
    println!(
        "[{}] criterion {criterion}: {text}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}
