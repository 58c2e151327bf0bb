use gdifd_core::harness::{evaluate, train, TrainConfig};
use gdifd_core::synth::{make_splits, BenchmarkConfig};
use std::time::Instant;

fn main() {
    let bench = BenchmarkConfig::default();
    let plan = make_splits(&bench, 120, 24, 64).unwrap();
    let config = TrainConfig { log_every: 100, seed: 0, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = train(&config, &bench, &plan).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let report = evaluate(&out.model, &config, &bench, &plan).unwrap();
    println!("train {:.0}s eval {:.0}s", train_secs, t0.elapsed().as_secs_f64() - train_secs);
    println!(
        "map {:.4} dsr {:.3} dir {:.3} binar {:.4} gate_mean {:.4}",
        report.map, report.dsr_probe_acc, report.dir_probe_acc, report.gate_binarization, report.gate_mean
    );
    for r in &out.metrics {
        println!(
            "  it {:4} total {:8.3} cls {:7.3} ctr {:6.3} reg {:5.3} adv {:.4} dcls {:.4} gate {:.5}",
            r.iteration, r.total, r.det_cls, r.det_ctr, r.det_reg, r.adv, r.domain_cls, r.gate
        );
    }
}
