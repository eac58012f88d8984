use cesgame_core::qp::{
    kkt_residual, kkt_residual_scaled, solve_qp, LinearRow, QpError, QpOptions, QpProblem,
    QpStatus, Quadratic,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box_problem(seed: u64, n: usize, m: usize) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = QpProblem::new(n);
    p.quadratic = Quadratic::Diagonal((0..n).map(|_| -rng.gen_range(0.2..2.0)).collect());
    p.linear = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    for _ in 0..m {
        let row = (0..n).map(|i| (i, rng.gen_range(-1.0..1.0))).collect();
        p.add_ineq(LinearRow::new(row), rng.gen_range(0.3..1.5));
    }
    p.set_bounds(vec![Some(-1.0); n], vec![Some(1.0); n]);
    p
}

/// Best objective over the feasible points of a uniform lattice on the box.
fn lattice_best(p: &QpProblem, points: usize) -> f64 {
    let n = p.n;
    let grid: Vec<f64> = (0..points)
        .map(|k| -1.0 + 2.0 * k as f64 / (points - 1) as f64)
        .collect();
    let q = match &p.quadratic {
        Quadratic::Diagonal(q) => q.clone(),
        _ => unreachable!(),
    };
    let rows: Vec<Vec<f64>> = p
        .ineq
        .iter()
        .map(|r| {
            let mut dense = vec![0.0; n];
            for &(i, v) in &r.terms {
                dense[i] += v;
            }
            dense
        })
        .collect();
    let mut best = f64::NEG_INFINITY;
    let mut partial = vec![vec![0.0; rows.len()]; n + 1];
    let mut obj = vec![0.0; n + 1];
    fn rec(
        d: usize,
        n: usize,
        grid: &[f64],
        q: &[f64],
        f: &[f64],
        rows: &[Vec<f64>],
        rhs: &[f64],
        partial: &mut Vec<Vec<f64>>,
        obj: &mut Vec<f64>,
        best: &mut f64,
    ) {
        if d == n {
            if partial[n].iter().zip(rhs).all(|(a, b)| a <= b) && obj[n] > *best {
                *best = obj[n];
            }
            return;
        }
        for &x in grid {
            for k in 0..rows.len() {
                partial[d + 1][k] = partial[d][k] + rows[k][d] * x;
            }
            obj[d + 1] = obj[d] + q[d] * x * x + f[d] * x;
            rec(d + 1, n, grid, q, f, rows, rhs, partial, obj, best);
        }
    }
    rec(
        0,
        n,
        &grid,
        &q,
        &p.linear,
        &rows,
        &p.ineq_rhs,
        &mut partial,
        &mut obj,
        &mut best,
    );
    best
}

#[test]
fn six_variable_lattice_oracle() {
    for seed in 0..3 {
        let p = random_box_problem(seed, 6, 10);
        let s = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        let best = lattice_best(&p, 21);
        // The lattice never beats the optimum, and the optimum is within a
        // gradient-times-spacing bound of the lattice.
        let h = 0.1;
        let grad: f64 = (0..6)
            .map(|i| match &p.quadratic {
                Quadratic::Diagonal(q) => 2.0 * q[i].abs() + p.linear[i].abs(),
                _ => unreachable!(),
            })
            .sum();
        assert!(
            s.objective >= best - 1e-9,
            "seed {seed}: {} < {best}",
            s.objective
        );
        assert!(
            s.objective - best <= grad * h,
            "seed {seed}: gap {} above bound {}",
            s.objective - best,
            grad * h
        );
    }
}

#[test]
fn scaling_covariance() {
    let mut p = QpProblem::new(3);
    p.quadratic = Quadratic::Diagonal(vec![-1.0, -2.0, -0.5]);
    p.add_ineq(LinearRow::new(vec![(0, -1.0), (1, -1.0)]), -1.0);
    p.add_ineq(LinearRow::new(vec![(1, 1.0), (2, -1.0)]), 0.5);
    p.add_eq(LinearRow::new(vec![(0, 1.0), (2, 1.0)]), 0.7);
    let base = solve_qp(&p, &QpOptions::default()).unwrap();
    for alpha in [0.5, 3.0, 10.0] {
        let mut scaled = p.clone();
        scaled.ineq_rhs.iter_mut().for_each(|b| *b *= alpha);
        scaled.eq_rhs.iter_mut().for_each(|b| *b *= alpha);
        let s = solve_qp(&scaled, &QpOptions::default()).unwrap();
        for (a, b) in s.x.iter().zip(&base.x) {
            assert!((a - alpha * b).abs() < 1e-10 * (1.0 + alpha));
        }
    }
}

#[test]
fn duality_gap_vanishes() {
    for seed in 10..20 {
        let mut p = random_box_problem(seed, 5, 8);
        // Bounds become explicit rows so the dual below covers everything.
        for i in 0..5 {
            p.add_ineq(LinearRow::new(vec![(i, 1.0)]), 1.0);
            p.add_ineq(LinearRow::new(vec![(i, -1.0)]), 1.0);
        }
        p.lower.clear();
        p.upper.clear();
        let s = solve_qp(&p, &QpOptions::default()).unwrap();
        let q = match &p.quadratic {
            Quadratic::Diagonal(q) => q.clone(),
            _ => unreachable!(),
        };
        let mut at = p.linear.clone();
        for (row, w) in p.ineq.iter().zip(&s.ineq_multipliers) {
            for &(i, v) in &row.terms {
                at[i] -= w * v;
            }
        }
        let dual: f64 = at
            .iter()
            .zip(&q)
            .map(|(g, q)| g * g / (-4.0 * q))
            .sum::<f64>()
            + s.ineq_multipliers
                .iter()
                .zip(&p.ineq_rhs)
                .map(|(w, b)| w * b)
                .sum::<f64>();
        let gap = dual - s.objective;
        assert!(gap.abs() < 1e-8, "seed {seed}: gap {gap}");
    }
}

fn arb_problem() -> impl Strategy<Value = QpProblem> {
    (
        2usize..8,
        0usize..12,
        0usize..3,
        any::<u64>(),
        any::<bool>(),
    )
        .prop_map(|(n, m, me, seed, dense)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = QpProblem::new(n);
            if dense {
                // -(B Bᵀ) with a few zero-curvature directions possible.
                let k = rng.gen_range(1..=n);
                let b: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let q = (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| {
                                -(0..k).map(|l| b[i][l] * b[j][l]).sum::<f64>()
                                    - if i == j { 0.1 } else { 0.0 }
                            })
                            .collect()
                    })
                    .collect();
                p.quadratic = Quadratic::Dense(q);
            } else {
                p.quadratic = Quadratic::Diagonal(
                    (0..n)
                        .map(|_| {
                            if rng.gen_bool(0.2) {
                                0.0
                            } else {
                                -rng.gen_range(0.1..3.0)
                            }
                        })
                        .collect(),
                );
            }
            p.linear = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for _ in 0..m {
                let mut row = Vec::new();
                for i in 0..n {
                    if rng.gen_bool(0.7) {
                        row.push((i, rng.gen_range(-2.0..2.0)));
                    }
                }
                p.add_ineq(LinearRow::new(row), rng.gen_range(-1.0..3.0));
            }
            for _ in 0..me {
                let row = (0..n).map(|i| (i, rng.gen_range(-1.0..1.0))).collect();
                p.add_eq(LinearRow::new(row), rng.gen_range(-1.0..1.0));
            }
            p.set_bounds(vec![Some(-5.0); n], vec![Some(5.0); n]);
            p
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn solutions_are_certified(p in arb_problem()) {
        let opts = QpOptions { record_trace: true, ..QpOptions::default() };
        match solve_qp(&p, &opts) {
            Ok(s) => {
                prop_assert_eq!(s.status, QpStatus::Optimal);
                prop_assert!(kkt_residual_scaled(&p, &s).max() < 1e-8);
                prop_assert!(kkt_residual(&p, &s).max() < 1e-7);
                let again = solve_qp(&p, &opts).unwrap();
                prop_assert_eq!(&again, &s);
                for w in s.trace.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
                }
            }
            Err(QpError::Infeasible(cert)) => {
                prop_assert!(cert.gap < 0.0);
                prop_assert!(cert.ineq.iter().chain(&cert.lower).chain(&cert.upper).all(|&w| w >= -1e-12));
                let scale = 1.0 + cert.ineq.iter().chain(&cert.eq).chain(&cert.lower).chain(&cert.upper)
                    .fold(0.0f64, |m, w| m.max(w.abs()));
                prop_assert!(cert.combination_residual(&p) < 1e-9 * scale,
                    "residual {} gap {}", cert.combination_residual(&p), cert.gap);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}
