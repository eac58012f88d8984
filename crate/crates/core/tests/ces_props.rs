use cesgame_core::ces::{
    check_storage_feasibility, net_storage_flow, soc_from_split, soc_trajectory, StorageLimit,
};
use cesgame_core::StorageParams;
use proptest::prelude::*;

fn params() -> StorageParams {
    StorageParams::with_defaults(100.0, 10.0, 20.0, 25.0, 0.95, 1.05, 0.5)
}

proptest! {
    #[test]
    fn split_matches_signed_recursion(e in prop::collection::vec(-12.0f64..12.0, 1..60)) {
        let p = params();
        let c: Vec<f64> = e.iter().map(|v| v.max(0.0)).collect();
        let d: Vec<f64> = e.iter().map(|v| (-v).max(0.0)).collect();
        let a = soc_trajectory(&p, &e).b;
        let b = soc_from_split(&p, &c, &d);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn simultaneous_charge_and_discharge_loses_energy(
        e in prop::collection::vec(-12.0f64..12.0, 1..40),
        extra in prop::collection::vec(0.0f64..3.0, 40),
    ) {
        let p = params();
        let c: Vec<f64> = e.iter().zip(&extra).map(|(v, x)| v.max(0.0) + x).collect();
        let d: Vec<f64> = e.iter().zip(&extra).map(|(v, x)| (-v).max(0.0) + x).collect();
        let clean = soc_trajectory(&p, &e).b;
        let lossy = soc_from_split(&p, &c, &d);
        for (x, y) in clean.iter().zip(&lossy) {
            prop_assert!(*y <= *x + 1e-9);
        }
    }

    #[test]
    fn idle_storage_is_feasible(n in 1usize..100) {
        let p = params();
        let traj = soc_trajectory(&p, &vec![0.0; n]);
        prop_assert!(check_storage_feasibility(&traj, &p).is_empty());
        prop_assert!(traj.b.iter().all(|&b| b == p.b0));
    }

    #[test]
    fn flow_is_grid_plus_trades(e_g in -10.0f64..10.0, y in prop::collection::vec(-5.0f64..5.0, 0..10)) {
        let total: f64 = y.iter().sum();
        prop_assert!((net_storage_flow(e_g, &y) - e_g - total).abs() < 1e-12);
    }
}

#[test]
fn each_limit_is_reported() {
    let p = params();
    let kinds = |e: &[f64]| -> Vec<StorageLimit> {
        check_storage_feasibility(&soc_trajectory(&p, e), &p)
            .iter()
            .map(|v| v.limit)
            .collect()
    };
    // 20 kW for half an hour is 10 kWh.
    assert!(kinds(&[10.5, -10.5]).contains(&StorageLimit::ChargeRate));
    assert!(kinds(&[-13.0, 13.0]).contains(&StorageLimit::DischargeRate));
    assert!(kinds(&[10.0; 6]).contains(&StorageLimit::CapacityMax));
    assert!(kinds(&[-12.0; 4]).contains(&StorageLimit::CapacityMin));
    assert_eq!(kinds(&[1.0]), vec![StorageLimit::Cyclical]);
    assert!(kinds(&[1.0, -0.95 / 1.05]).is_empty());
}

#[test]
fn parameters_are_validated() {
    let mut p = params();
    assert!(p.validate().is_ok());
    p.eta_c = 1.2;
    assert!(p.validate().is_err());
    let mut p = params();
    p.eta_d = 0.9;
    assert!(p.validate().is_err());
    let mut p = params();
    p.b0 = 200.0;
    assert!(p.validate().is_err());
    let mut p = params();
    p.theta = -1.0;
    assert!(p.validate().is_err());
}
