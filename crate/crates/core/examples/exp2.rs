//! Scratch experiment: tuned ablation configs at small scale.

use gdifd_core::harness::{evaluate, gate_channel_means, orthogonality_fraction, train, TrainConfig};
use gdifd_core::synth::{generate_range, make_splits, BenchmarkConfig, DetectionSample};

fn main() {
    let bench = BenchmarkConfig::default();
    let plan = make_splits(&bench, 60, 24, 48).unwrap();

    let tuned = TrainConfig {
        channels: 8,
        s_init: 0.9,
        lambda_grl: 0.2,
        lambda_d_adv: 0.5,
        lambda_d_cls: 0.3,
        warmup_iters: 50,
        stage1_iters: 400,
        stage2_iters: 150,
        log_every: 200,
        seed: 0,
        ..TrainConfig::default()
    };

    let variants: Vec<(&str, TrainConfig)> = vec![
        ("full", tuned.clone()),
        ("strong-grl", TrainConfig { lambda_grl: 0.5, lambda_d_adv: 1.0, ..tuned.clone() }),
        ("base", TrainConfig { use_dsrl: false, use_dirl: false, ..tuned.clone() }),
        ("no-gate-loss", TrainConfig { use_gate_loss: false, ..tuned.clone() }),
        ("no-special-init", TrainConfig { use_special_init: false, ..tuned.clone() }),
    ];

    for (name, config) in variants {
        let t0 = std::time::Instant::now();
        let out = match train(&config, &bench, &plan) {
            Ok(o) => o,
            Err(e) => {
                println!("{name}: TRAIN FAILED: {e}");
                continue;
            }
        };
        let train_s = t0.elapsed().as_secs_f64();
        let report = evaluate(&out.model, &config, &bench, &plan).unwrap();

        let samples: Vec<DetectionSample> = plan
            .val
            .iter()
            .flat_map(|&(d, r)| generate_range(&bench, d, r).unwrap())
            .collect();
        let refs: Vec<&DetectionSample> = samples.iter().collect();
        let ortho = orthogonality_fraction(&out.model, &refs, 8, 0.05).unwrap();
        let means = gate_channel_means(&out.model, &refs, 8).unwrap();
        let near_zero: usize =
            means.iter().map(|lv| lv.iter().filter(|&&m| m <= 0.05).count()).sum();
        let near_one: usize =
            means.iter().map(|lv| lv.iter().filter(|&&m| m >= 0.95).count()).sum();

        println!(
            "{name:>16}: map {:.4} dsr {:.3} dir {:.3} binar {:.3} gmean {:.4} ortho {:.3} nz {near_zero} n1 {near_one} ({train_s:.0}s)",
            report.map, report.dsr_probe_acc, report.dir_probe_acc,
            report.gate_binarization, report.gate_mean, ortho,
        );
        let last = out.metrics.last().unwrap();
        println!(
            "{:>16}  last: total {:.3} cls {:.3} adv {:.4} dcls {:.4} gate {:.5}",
            "", last.total, last.det_cls, last.adv, last.domain_cls, last.gate,
        );
        let l3 = &means[0];
        println!(
            "{:>16}  l3 gates: {}",
            "",
            l3.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>().join(" ")
        );
    }
}
