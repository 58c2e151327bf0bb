use gdifd_core::harness::{train, TrainConfig};
use gdifd_core::synth::{make_splits, BenchmarkConfig};
use std::time::Instant;

fn main() {
    let bench = BenchmarkConfig::default();
    let plan = make_splits(&bench, 40, 12, 20).unwrap();
    let config = TrainConfig {
        warmup_iters: 2,
        stage1_iters: 6,
        stage2_iters: 0,
        log_every: 100,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&config, &bench, &plan).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "8 iters ({} steps) in {:.2}s = {:.3}s/iter -> default 1300 iters ~ {:.1} min",
        out.steps_taken,
        dt,
        dt / 8.0,
        dt / 8.0 * 1300.0 / 60.0
    );
}
