//! Community storage: net flow, state of charge and operating limits.
//!
//! Energies are kWh per interval, charge-positive; rates are kW.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StorageError {
    #[error("invalid storage parameter: {0}")]
    Invalid(String),
}

pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    pub b_max: f64,
    pub b_min: f64,
    pub charge_max_kw: f64,
    pub discharge_max_kw: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub b0: f64,
    pub theta: f64,
    pub dt_hours: f64,
}

impl StorageParams {
    /// Parameters with the initial charge halfway between the limits and a
    /// cyclical slack of 1e-3 kWh.
    pub fn with_defaults(
        b_max: f64,
        b_min: f64,
        charge_max_kw: f64,
        discharge_max_kw: f64,
        eta_c: f64,
        eta_d: f64,
        dt_hours: f64,
    ) -> Self {
        StorageParams {
            b_max,
            b_min,
            charge_max_kw,
            discharge_max_kw,
            eta_c,
            eta_d,
            b0: b_min + 0.5 * (b_max - b_min),
            theta: 1e-3,
            dt_hours,
        }
    }

    pub fn validate(&self) -> Result<(), StorageError> {
        let bad = |m: &str| Err(StorageError::Invalid(m.to_string()));
        let all = [
            self.b_max,
            self.b_min,
            self.charge_max_kw,
            self.discharge_max_kw,
            self.eta_c,
            self.eta_d,
            self.b0,
            self.theta,
            self.dt_hours,
        ];
        if !all.iter().all(|v| v.is_finite()) {
            return bad("non-finite value");
        }
        if !(self.eta_c > 0.0 && self.eta_c <= 1.0) {
            return bad("charging efficiency must lie in (0, 1]");
        }
        if self.eta_d < 1.0 {
            return bad("discharging efficiency must be at least 1");
        }
        if !(self.b_min >= 0.0 && self.b_min <= self.b0 && self.b0 <= self.b_max) {
            return bad("need 0 <= B_min <= b0 <= B_max");
        }
        if self.theta < 0.0 {
            return bad("cyclical slack must be nonnegative");
        }
        if self.charge_max_kw <= 0.0 || self.discharge_max_kw <= 0.0 {
            return bad("rate limits must be positive");
        }
        if self.dt_hours <= 0.0 {
            return bad("interval length must be positive");
        }
        Ok(())
    }

    pub fn charge_max_kwh(&self) -> f64 {
        self.charge_max_kw * self.dt_hours
    }

    pub fn discharge_max_kwh(&self) -> f64 {
        self.discharge_max_kw * self.dt_hours
    }
}

/// `e_s = e_g + Σ y_p`.
pub fn net_storage_flow(e_g: f64, y: &[f64]) -> f64 {
    e_g + y.iter().sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageTrajectory {
    pub e_s: Vec<f64>,
    /// State of charge at the end of each interval.
    pub b: Vec<f64>,
}

/// SoC recursion with the charging efficiency applied to inflows and the
/// discharging one to outflows.
pub fn soc_trajectory(params: &StorageParams, e_s: &[f64]) -> StorageTrajectory {
    let mut b = Vec::with_capacity(e_s.len());
    let mut level = params.b0;
    for &e in e_s {
        level += if e >= 0.0 {
            params.eta_c * e
        } else {
            params.eta_d * e
        };
        b.push(level);
    }
    StorageTrajectory {
        e_s: e_s.to_vec(),
        b,
    }
}

/// SoC from separate charge and discharge amounts (both nonnegative).
pub fn soc_from_split(params: &StorageParams, charge: &[f64], discharge: &[f64]) -> Vec<f64> {
    let mut level = params.b0;
    charge
        .iter()
        .zip(discharge)
        .map(|(c, d)| {
            level += params.eta_c * c - params.eta_d * d;
            level
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageLimit {
    ChargeRate,
    DischargeRate,
    CapacityMax,
    CapacityMin,
    Cyclical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageViolation {
    pub limit: StorageLimit,
    /// 1-based interval; the final interval for the cyclical limit.
    pub t: usize,
    pub value: f64,
    pub bound: f64,
}

/// Every rate, capacity and cyclical violation beyond `tol` kWh.
pub fn check_storage_feasibility_tol(
    traj: &StorageTrajectory,
    params: &StorageParams,
    tol: f64,
) -> Vec<StorageViolation> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<StorageViolation>, limit, t, value, bound| {
        out.push(StorageViolation {
            limit,
            t,
            value,
            bound,
        })
    };
    for (k, (&e, &b)) in traj.e_s.iter().zip(&traj.b).enumerate() {
        let t = k + 1;
        if e > params.charge_max_kwh() + tol {
            push(
                &mut out,
                StorageLimit::ChargeRate,
                t,
                e,
                params.charge_max_kwh(),
            );
        }
        if -e > params.discharge_max_kwh() + tol {
            push(
                &mut out,
                StorageLimit::DischargeRate,
                t,
                e,
                -params.discharge_max_kwh(),
            );
        }
        if b > params.b_max + tol {
            push(&mut out, StorageLimit::CapacityMax, t, b, params.b_max);
        }
        if b < params.b_min - tol {
            push(&mut out, StorageLimit::CapacityMin, t, b, params.b_min);
        }
    }
    if let Some(&last) = traj.b.last() {
        if (last - params.b0).abs() > params.theta + tol {
            push(
                &mut out,
                StorageLimit::Cyclical,
                traj.b.len(),
                last,
                params.b0,
            );
        }
    }
    out
}

pub fn check_storage_feasibility(
    traj: &StorageTrajectory,
    params: &StorageParams,
) -> Vec<StorageViolation> {
    check_storage_feasibility_tol(traj, params, FEASIBILITY_TOL)
}

/// `t,e_s_kwh,b_kwh` with 1-based `t`.
pub fn trajectory_csv(traj: &StorageTrajectory) -> String {
    let mut s = String::from("t,e_s_kwh,b_kwh\n");
    for (k, (e, b)) in traj.e_s.iter().zip(&traj.b).enumerate() {
        s.push_str(&format!("{},{},{}\n", k + 1, e, b));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> StorageParams {
        StorageParams {
            b0: 100.0,
            ..StorageParams::with_defaults(700.0, 35.0, 150.0, 150.0, 0.98, 1.02, 5.0 / 60.0)
        }
    }

    #[test]
    fn net_flow() {
        assert_eq!(net_storage_flow(0.0, &[0.0, 0.0]), 0.0);
        assert_eq!(net_storage_flow(-3.0, &[2.0, 3.0]), 2.0);
    }

    #[test]
    fn soc_branches() {
        let p = params();
        assert_abs_diff_eq!(soc_trajectory(&p, &[10.0]).b[0], 109.8, epsilon = 1e-12);
        assert_abs_diff_eq!(soc_trajectory(&p, &[-10.0]).b[0], 89.8, epsilon = 1e-12);
        let round = soc_trajectory(&p, &[7.0, -7.0]);
        assert_abs_diff_eq!(
            round.b[1] - p.b0,
            (p.eta_c - p.eta_d) * 7.0,
            epsilon = 1e-12
        );
        assert_eq!(
            soc_from_split(&p, &[10.0], &[0.0]),
            soc_trajectory(&p, &[10.0]).b
        );
    }

    #[test]
    fn feasibility_boundaries() {
        let p = params();
        let full = 150.0 * p.dt_hours;
        let t = soc_trajectory(&p, &[full, -full / p.eta_d * p.eta_c]);
        assert!(check_storage_feasibility(&t, &p).is_empty());

        let low = StorageParams {
            b0: 0.04 * 700.0,
            ..p
        };
        let t = soc_trajectory(&low, &[0.0]);
        let v = check_storage_feasibility(&t, &low);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].limit, StorageLimit::CapacityMin);

        let zero = StorageParams { theta: 0.0, ..p };
        let t = soc_trajectory(&zero, &[0.0; 4]);
        assert!(check_storage_feasibility(&t, &zero).is_empty());
        assert!(t.b.iter().all(|&b| b == zero.b0));

        let t = soc_trajectory(&p, &[full * 1.01]);
        let v = check_storage_feasibility(&t, &p);
        assert!(v.iter().any(|v| v.limit == StorageLimit::ChargeRate));
        assert!(v.iter().any(|v| v.limit == StorageLimit::Cyclical));
    }

    #[test]
    fn validation() {
        assert!(params().validate().is_ok());
        assert!(StorageParams {
            eta_c: 1.2,
            ..params()
        }
        .validate()
        .is_err());
        assert!(StorageParams {
            eta_d: 0.9,
            ..params()
        }
        .validate()
        .is_err());
        assert!(StorageParams {
            b0: 800.0,
            ..params()
        }
        .validate()
        .is_err());
        assert!(StorageParams {
            theta: -1.0,
            ..params()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_export() {
        let t = soc_trajectory(&params(), &[1.0]);
        assert_eq!(trajectory_csv(&t), "t,e_s_kwh,b_kwh\n1,1,100.98\n");
    }
}
