use gdifd_core::harness::{evaluate, train, TrainConfig};
use gdifd_core::synth::{make_splits, BenchmarkConfig};
use std::time::Instant;

fn main() {
    let bench = BenchmarkConfig::default();
    let plan = make_splits(&bench, 200, 24, 64).unwrap();
    let base = TrainConfig {
        channels: 8,
        warmup_iters: 20,
        stage1_iters: 200,
        stage2_iters: 80,
        log_every: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    for (name, dsrl, dirl) in [("full", true, true), ("base", false, false)] {
        let config = TrainConfig { use_dsrl: dsrl, use_dirl: dirl, ..base.clone() };
        let t0 = Instant::now();
        let out = train(&config, &bench, &plan).unwrap();
        let report = evaluate(&out.model, &config, &bench, &plan).unwrap();
        println!(
            "{name}: {:.0}s map {:.4} dsr {:.3} dir {:.3} binar {:.3} gate_mean {:.3}",
            t0.elapsed().as_secs_f64(),
            report.map,
            report.dsr_probe_acc,
            report.dir_probe_acc,
            report.gate_binarization,
            report.gate_mean
        );
        for r in &out.metrics {
            println!(
                "  it {:4} lr {:.5} total {:.3} cls {:.3} ctr {:.3} reg {:.3} adv {:.3} dcls {:.3} gate {:.4}",
                r.iteration, r.lr, r.total, r.det_cls, r.det_ctr, r.det_reg, r.adv, r.domain_cls, r.gate
            );
        }
    }
}
