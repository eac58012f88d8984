//! The followers' game within one interval: each participant picks its
//! storage trade `y_p` given the provider's price and grid schedule.
//!
//! Trades are kWh, sell-positive towards storage; the implied grid trade is
//! `e_p = y_p - s_p` (buy-positive).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FollowerError {
    #[error("price slope must be positive, got {0}")]
    NonPositiveSlope(f64),
    #[error("price intercept must be positive, got {0}")]
    NonPositiveIntercept(f64),
    #[error("the game needs at least one participant")]
    NoParticipants,
    #[error("non-finite market input")]
    NonFinite,
    #[error("trade vector has {got} entries for {expected} participants")]
    LengthMismatch { expected: usize, got: usize },
    #[error("user {user} can lower its cost by {advantage:e} by trading {deviation} instead")]
    CertificateFailure {
        user: usize,
        deviation: f64,
        advantage: f64,
    },
}

/// Market data a follower sees in one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketContext {
    /// 1-based interval index, informational.
    pub t: usize,
    pub phi: f64,
    pub delta: f64,
    /// Grid energy of the non-participants.
    pub e_n: f64,
    /// Grid energy bought by the storage provider.
    pub e_g: f64,
    pub lambda_s: f64,
    pub m: usize,
}

impl MarketContext {
    /// Checks `φ > 0`, `δ > 0` and `M ≥ 1`. The sign of `λ_s` is left to the
    /// caller: the leader reports it rather than constraining it.
    pub fn new(
        t: usize,
        phi: f64,
        delta: f64,
        e_n: f64,
        e_g: f64,
        lambda_s: f64,
        m: usize,
    ) -> Result<Self, FollowerError> {
        if ![phi, delta, e_n, e_g, lambda_s]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(FollowerError::NonFinite);
        }
        if phi <= 0.0 {
            return Err(FollowerError::NonPositiveSlope(phi));
        }
        if delta <= 0.0 {
            return Err(FollowerError::NonPositiveIntercept(delta));
        }
        if m == 0 {
            return Err(FollowerError::NoParticipants);
        }
        Ok(MarketContext {
            t,
            phi,
            delta,
            e_n,
            e_g,
            lambda_s,
            m,
        })
    }
}

/// Grid price for total grid energy `e_total`. No floor is applied here.
pub fn grid_price(e_total: f64, ctx: &MarketContext) -> f64 {
    ctx.phi * e_total + ctx.delta
}

/// Coefficients `(K2, K1, K0)` of a participant's cost as a quadratic in its
/// own trade, given the grid energy of everyone else `E_{-p}`.
pub fn cost_coefficients(s: f64, e_minus_p: f64, ctx: &MarketContext) -> (f64, f64, f64) {
    let k2 = ctx.phi;
    let k1 = -(ctx.phi * (2.0 * s - e_minus_p) - ctx.delta + ctx.lambda_s);
    let k0 = ctx.phi * s * s - (ctx.phi * e_minus_p + ctx.delta) * s;
    (k2, k1, k0)
}

/// Cost of trading `y` for a participant with surplus `s`.
pub fn user_cost(y: f64, s: f64, e_minus_p: f64, ctx: &MarketContext) -> f64 {
    let (k2, k1, k0) = cost_coefficients(s, e_minus_p, ctx);
    k2 * y * y + k1 * y + k0
}

/// The same cost evaluated from prices: `λ_g e_p - λ_s y`.
pub fn user_cost_direct(y: f64, s: f64, e_minus_p: f64, ctx: &MarketContext) -> f64 {
    let e_p = y - s;
    grid_price(e_minus_p + e_p, ctx) * e_p - ctx.lambda_s * y
}

/// Unconstrained cost minimiser `-K1 / (2 K2)`.
pub fn best_response(s: f64, e_minus_p: f64, ctx: &MarketContext) -> f64 {
    let (k2, k1, _) = cost_coefficients(s, e_minus_p, ctx);
    -k1 / (2.0 * k2)
}

/// The common grid trade of every participant at the equilibrium.
pub fn equilibrium_epsilon(ctx: &MarketContext) -> f64 {
    ((ctx.lambda_s - ctx.delta) / ctx.phi - ctx.e_n - ctx.e_g) / (ctx.m as f64 + 1.0)
}

/// Closed-form equilibrium: `ε` and `y*_p = s_p + ε`.
pub fn nash_closed_form(s: &[f64], ctx: &MarketContext) -> Result<(f64, Vec<f64>), FollowerError> {
    if s.len() != ctx.m {
        return Err(FollowerError::LengthMismatch {
            expected: ctx.m,
            got: s.len(),
        });
    }
    let eps = equilibrium_epsilon(ctx);
    Ok((eps, s.iter().map(|&sp| sp + eps).collect()))
}

/// Trade interval of a participant: a surplus user sells at most its surplus,
/// a deficit user buys at most its deficit.
pub fn trade_bounds(s: f64) -> (f64, f64) {
    if s >= 0.0 {
        (0.0, s)
    } else {
        (s, 0.0)
    }
}

/// Grid energy of everyone except `p` under trade profile `y`.
pub fn others_grid_energy(p: usize, y: &[f64], s: &[f64], ctx: &MarketContext) -> f64 {
    let own: f64 = y
        .iter()
        .zip(s)
        .enumerate()
        .filter(|&(q, _)| q != p)
        .map(|(_, (yq, sq))| yq - sq)
        .sum();
    own + ctx.e_n + ctx.e_g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashCertificate {
    pub max_advantage: f64,
    pub worst_user: Option<usize>,
    pub evaluations: usize,
}

pub const DEVIATION_TOL: f64 = 1e-8;

/// Scan unilateral deviations for every participant and fail if any lowers
/// its cost by more than [`DEVIATION_TOL`]. With `bounded` the scan covers
/// the participant's trade interval; otherwise a window around its trade.
pub fn verify_nash(
    y: &[f64],
    s: &[f64],
    ctx: &MarketContext,
    resolution: usize,
    bounded: bool,
) -> Result<NashCertificate, FollowerError> {
    if y.len() != s.len() || s.len() != ctx.m {
        return Err(FollowerError::LengthMismatch {
            expected: ctx.m,
            got: y.len().min(s.len()),
        });
    }
    let resolution = resolution.max(2);
    let mut cert = NashCertificate {
        max_advantage: 0.0,
        worst_user: None,
        evaluations: 0,
    };
    let mut failure = None;
    for p in 0..y.len() {
        let e_minus = others_grid_energy(p, y, s, ctx);
        let cost = |v: f64| user_cost(v, s[p], e_minus, ctx);
        let (lo, hi) = if bounded {
            trade_bounds(s[p])
        } else {
            let w = 1.0 + 2.0 * s[p].abs() + y[p].abs();
            (y[p] - w, y[p] + w)
        };
        let (best_y, best_c, evals) = scan_minimum(cost, lo, hi, resolution);
        cert.evaluations += evals;
        let advantage = cost(y[p]) - best_c;
        if advantage > cert.max_advantage {
            cert.max_advantage = advantage;
            cert.worst_user = Some(p);
            if advantage > DEVIATION_TOL && failure.is_none() {
                failure = Some(FollowerError::CertificateFailure {
                    user: p,
                    deviation: best_y,
                    advantage,
                });
            }
        }
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(cert),
    }
}

/// Uniform grid over `[lo, hi]` followed by golden-section refinement in the
/// cell around the best grid point. Returns `(argmin, min, evaluations)`.
pub fn scan_minimum<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> (f64, f64, usize) {
    let points = points.max(2);
    let step = (hi - lo) / (points - 1) as f64;
    let mut best = (lo, f(lo));
    for k in 1..points {
        let x = if k == points - 1 {
            hi
        } else {
            lo + step * k as f64
        };
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    let mut evals = points;
    if step > 0.0 {
        let (mut a, mut b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        evals += 2;
        for _ in 0..80 {
            if b - a <= 1e-14 * (1.0 + a.abs() + b.abs()) {
                break;
            }
            if f1 < f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = f(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = f(x2);
            }
            evals += 1;
        }
        for (x, v) in [(x1, f1), (x2, f2)] {
            if v < best.1 {
                best = (x, v);
            }
        }
    }
    (best.0, best.1, evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx(phi: f64, delta: f64, lambda_s: f64, m: usize) -> MarketContext {
        MarketContext::new(1, phi, delta, 0.0, 0.0, lambda_s, m).unwrap()
    }

    #[test]
    fn grid_price_examples() {
        let c = ctx(2.0, 1.0, 1.0, 1);
        assert_eq!(grid_price(0.0, &c), 1.0);
        assert_eq!(grid_price(3.0, &c), 7.0);
    }

    #[test]
    fn context_validation() {
        assert!(MarketContext::new(1, 0.0, 1.0, 0.0, 0.0, 1.0, 1).is_err());
        assert!(MarketContext::new(1, 1.0, -1.0, 0.0, 0.0, 1.0, 1).is_err());
        assert!(MarketContext::new(1, 1.0, 1.0, 0.0, 0.0, 1.0, 0).is_err());
        assert!(MarketContext::new(1, 1.0, 1.0, f64::NAN, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn cost_examples() {
        let c = MarketContext::new(1, 0.7, 30.0, 4.0, -1.0, 25.0, 3).unwrap();
        let s = 1.7;
        assert_abs_diff_eq!(user_cost(s, s, 2.3, &c), -25.0 * s, epsilon = 1e-12);
        assert_abs_diff_eq!(user_cost(0.0, 0.0, 2.3, &c), 0.0, epsilon = 1e-12);
        for &(y, e) in &[(0.3, 2.0), (-1.2, -4.0), (2.5, 0.0)] {
            assert_abs_diff_eq!(
                user_cost(y, s, e, &c),
                user_cost_direct(y, s, e, &c),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn best_response_zero_gradient_case() {
        // φ(2s - E_{-p}) - δ + λ_s = 0 gives a zero minimiser.
        let c = ctx(1.0, 2.0, 2.0, 1);
        assert_abs_diff_eq!(best_response(1.5, 3.0, &c), 0.0, epsilon = 1e-15);
        let c = ctx(0.9, 20.0, 23.0, 1);
        let y = best_response(1.0, 0.5, &c);
        let here = user_cost(y, 1.0, 0.5, &c);
        assert!(here <= user_cost(y + 0.1, 1.0, 0.5, &c));
        assert!(here <= user_cost(y - 0.1, 1.0, 0.5, &c));
    }

    #[test]
    fn two_user_closed_form() {
        let c = MarketContext {
            delta: 0.0,
            ..ctx(1.0, 1.0, 1.0, 2)
        };
        let (eps, y) = nash_closed_form(&[2.0, 1.0], &c).unwrap();
        assert_abs_diff_eq!(eps, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[0], 7.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 4.0 / 3.0, epsilon = 1e-15);
        // Each trade is the best response to the other.
        let e_minus_0 = others_grid_energy(0, &y, &[2.0, 1.0], &c);
        assert_abs_diff_eq!(best_response(2.0, e_minus_0, &c), y[0], epsilon = 1e-14);
    }

    #[test]
    fn zero_epsilon_case() {
        let c = ctx(0.8, 30.0, 30.0, 3);
        let s = [1.0, -2.0, 0.5];
        let (eps, y) = nash_closed_form(&s, &c).unwrap();
        assert_eq!(eps, 0.0);
        assert_eq!(y, s.to_vec());
        assert!(nash_closed_form(&s[..2], &c).is_err());
    }

    #[test]
    fn certificate_passes_and_fails() {
        let c = MarketContext {
            delta: 0.0,
            ..ctx(1.0, 1.0, 1.0, 2)
        };
        let s = [2.0, 1.0];
        let (_, y) = nash_closed_form(&s, &c).unwrap();
        let cert = verify_nash(&y, &s, &c, 1000, false).unwrap();
        assert!(cert.max_advantage < 1e-8);
        let mut bad = y.clone();
        bad[0] += 0.5;
        match verify_nash(&bad, &s, &c, 1000, false) {
            Err(FollowerError::CertificateFailure {
                user, advantage, ..
            }) => {
                assert_eq!(user, 0);
                assert!(advantage > 0.2);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn single_participant_matches_direct_minimisation() {
        let c = MarketContext::new(1, 0.6, 28.0, 3.0, -2.0, 31.0, 1).unwrap();
        let s = [1.4];
        let (_, y) = nash_closed_form(&s, &c).unwrap();
        let e_minus = c.e_n + c.e_g;
        let (argmin, _, _) = scan_minimum(
            |v| user_cost_direct(v, s[0], e_minus, &c),
            -20.0,
            20.0,
            4001,
        );
        assert_abs_diff_eq!(y[0], argmin, epsilon = 1e-6);
    }

    #[test]
    fn scan_finds_interior_and_edge_minima() {
        let (x, v, _) = scan_minimum(|x| (x - 0.3) * (x - 0.3), -1.0, 1.0, 100);
        assert_abs_diff_eq!(x, 0.3, epsilon = 1e-7);
        assert!(v < 1e-14);
        let (x, _, _) = scan_minimum(|x| x, 2.0, 5.0, 100);
        assert_eq!(x, 2.0);
    }
}
