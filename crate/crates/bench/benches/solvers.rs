use std::hint::black_box;
use std::path::PathBuf;

use cesgame_core::feeder::sweep_power_flow;
use cesgame_core::followers::nash_closed_form;
use cesgame_core::scenarios::{run_centralized, run_decentralized};
use cesgame_core::{Config, MarketContext, Scenario};
use criterion::{criterion_group, criterion_main, Criterion};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn scenario(half_hourly: bool) -> Scenario {
    let mut cfg = Config::load(&data_dir().join("paper-autumn.cfg"))
        .unwrap()
        .0;
    if half_hourly {
        cfg.horizon.intervals = 48;
        cfg.horizon.interval_hours = 0.5;
        cfg.prices.peak_start = 15;
        cfg.prices.peak_end = 46;
    }
    cfg.solver.stackelberg_probes = 0;
    cfg.scenario(&data_dir()).unwrap()
}

fn power_flow(c: &mut Criterion) {
    let sc = scenario(false);
    let inj = sc.injections(None).unwrap();
    c.bench_function("sweep_power_flow_288", |b| {
        b.iter(|| sweep_power_flow(&sc.model, black_box(&inj), 1e-12, 200).unwrap())
    });
}

fn nash(c: &mut Criterion) {
    let s: Vec<f64> = (0..50).map(|i| 0.3 - 0.013 * i as f64).collect();
    let ctx = MarketContext::new(0, 0.02, 8.0, 1.5, 0.4, 9.0, s.len()).unwrap();
    c.bench_function("nash_closed_form_50", |b| {
        b.iter(|| nash_closed_form(black_box(&s), &ctx).unwrap())
    });
}

fn leader(c: &mut Criterion) {
    let sc = scenario(true);
    let mut g = c.benchmark_group("leader_48");
    g.sample_size(10);
    g.bench_function("game", |b| {
        b.iter(|| run_decentralized(black_box(&sc), true).unwrap())
    });
    g.bench_function("centralized", |b| {
        b.iter(|| run_centralized(black_box(&sc)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, power_flow, nash, leader);
criterion_main!(benches);
