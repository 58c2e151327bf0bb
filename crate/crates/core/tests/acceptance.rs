//! End-to-end acceptance checks. Each test prints one PASS/FAIL line so a
//! full run reads as a checklist. The heavier checks share trained
//! artifacts through `OnceLock`, and the tuned short-schedule ablation
//! configs are recorded next to the runs they produced.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdifd_core::array::Array;
use gdifd_core::detector::{
    assign_targets_level, box_iou_xyxy, nms, Detection, GroundTruth, LEVELS, LEVEL_RANGES,
};
use gdifd_core::eval::{map_at_05, ImageEval};
use gdifd_core::gate::{split, GATE_MARGIN};
use gdifd_core::gradcheck::{run_gradient_suite, DEFAULT_TOL};
use gdifd_core::harness::{
    ablate, evaluate, gate_channel_means, orthogonality_fraction, table4_grid, table5_grid,
    total_loss, train, Batch, EvalReport, TrainConfig,
};
use gdifd_core::model::GdifdModel;
use gdifd_core::nn::special_bias_init;
use gdifd_core::synth::{generate_range, make_splits, BenchmarkConfig, DetectionSample, SplitPlan};
use gdifd_core::tape::Tape;

fn verdict(criterion: usize, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared artifacts.

struct DefaultRun {
    model: GdifdModel,
    report: EvalReport,
    train_seconds: f64,
    config: TrainConfig,
    bench: BenchmarkConfig,
    plan: SplitPlan,
}

/// Full run at the stock configuration: 100 warmup + 800 + 400 iterations,
/// 16 channels, two source domains, squares/stripes/speckle styles.
fn default_run() -> &'static DefaultRun {
    static CELL: OnceLock<DefaultRun> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = TrainConfig { log_every: 200, ..TrainConfig::default() };
        let bench = BenchmarkConfig::default();
        let plan = make_splits(&bench, 120, 24, 64).expect("splits");
        let t0 = Instant::now();
        let out = train(&config, &bench, &plan).expect("default training run");
        let train_seconds = t0.elapsed().as_secs_f64();
        let report = evaluate(&out.model, &config, &bench, &plan).expect("evaluation");
        DefaultRun { model: out.model, report, train_seconds, config, bench, plan }
    })
}

/// Short-schedule configuration used for the directional ablations and the
/// probe checks. Differences from the defaults, chosen so the gate and
/// alignment dynamics actually express within a desk-scale budget:
/// gates start at 0.9 instead of 0.9999 (movable within the schedule),
/// the adversarial and domain-classification weights are raised, and the
/// schedule is shortened. 8 channels keep one cell under two minutes.
fn tuned_config() -> TrainConfig {
    TrainConfig {
        channels: 8,
        s_init: 0.9,
        lambda_grl: 0.2,
        lambda_d_adv: 0.5,
        lambda_d_cls: 0.3,
        warmup_iters: 50,
        stage1_iters: 400,
        stage2_iters: 150,
        log_every: 200,
        ..TrainConfig::default()
    }
}

fn tuned_plan(bench: &BenchmarkConfig) -> SplitPlan {
    make_splits(bench, 60, 24, 48).expect("splits")
}

struct Table4Grid {
    /// Mean unseen-domain mAP per cell name over the seeds.
    mean_map: Vec<(String, f64)>,
    seeds: Vec<u64>,
}

fn table4_runs() -> &'static Table4Grid {
    static CELL: OnceLock<Table4Grid> = OnceLock::new();
    CELL.get_or_init(|| {
        let bench = BenchmarkConfig::default();
        let plan = tuned_plan(&bench);
        let seeds = vec![0u64, 1, 2];
        let cells = table4_grid(&tuned_config());
        let mut mean_map: Vec<(String, f64)> =
            cells.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
        for &seed in &seeds {
            let seeded: Vec<_> = cells
                .iter()
                .map(|(n, c)| (n.clone(), TrainConfig { seed, ..c.clone() }))
                .collect();
            let results = ablate(&seeded, &bench, &plan).expect("ablation cell");
            for (slot, cell) in results.iter().enumerate() {
                mean_map[slot].1 += cell.report.map / seeds.len() as f64;
            }
        }
        Table4Grid { mean_map, seeds }
    })
}

struct Table5Cell {
    name: String,
    report: EvalReport,
    near_zero_channels: usize,
}

fn table5_runs() -> &'static Vec<Table5Cell> {
    static CELL: OnceLock<Vec<Table5Cell>> = OnceLock::new();
    CELL.get_or_init(|| {
        let bench = BenchmarkConfig::default();
        let plan = tuned_plan(&bench);
        let samples: Vec<DetectionSample> = plan
            .val
            .iter()
            .flat_map(|&(d, r)| generate_range(&bench, d, r).expect("samples"))
            .collect();
        let refs: Vec<&DetectionSample> = samples.iter().collect();
        table5_grid(&tuned_config())
            .into_iter()
            .filter(|(name, _)| name != "plain-gate")
            .map(|(name, config)| {
                let out = train(&config, &bench, &plan).expect("table 5 cell");
                let report = evaluate(&out.model, &config, &bench, &plan).expect("evaluation");
                let means = gate_channel_means(&out.model, &refs, 8).expect("gate means");
                let near_zero_channels =
                    means.iter().map(|lv| lv.iter().filter(|&&m| m <= 0.05).count()).sum();
                Table5Cell { name, report, near_zero_channels }
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// 1. Gradient suite.

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let report = run_gradient_suite(20, DEFAULT_TOL, 2026).expect("gradient suite");
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("entries");
    let pass = report.passed() && elapsed < 300.0;
    verdict(
        1,
        pass,
        &format!(
            "{} entries x 20 instances, worst rel err {:.2e} ({}), {:.1}s",
            report.entries.len(),
            worst.max_rel_err,
            worst.name,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Gate bias initialization contract.

#[test]
fn criterion_2_special_init_contract() {
    let mut worst = 0.0f64;
    for s in [0.1, 0.5, 0.9, 0.9999] {
        let b = special_bias_init(s).expect("bias");
        let sig = 1.0 / (1.0 + (-b).exp());
        worst = worst.max((sig - s).abs());
    }

    let bench = BenchmarkConfig::default();
    let config = TrainConfig::default();
    assert_eq!(config.s_init, 0.9999);
    let model = GdifdModel::new(config.model_config(bench.num_classes, 2)).expect("model");
    let samples = generate_range(&bench, 0, gdifd_core::synth::SeedRange { start: 0, count: 8 })
        .expect("samples");
    let refs: Vec<&DetectionSample> = samples.iter().collect();
    let means = gate_channel_means(&model, &refs, 4).expect("gate means");
    let total: f64 = means.iter().flatten().sum();
    let mean_gate = total / means.iter().flatten().count() as f64;

    let pass = worst < 1e-12 && mean_gate >= 0.999;
    verdict(
        2,
        pass,
        &format!("sigmoid(bias(s)) max err {worst:.2e}, fresh-model mean gate {mean_gate:.5}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Gate binarization after a full default run.

#[test]
fn criterion_3_gate_binarization() {
    let run = default_run();

    // Recompute the summed per-level gate loss on a validation batch of the
    // trained model.
    let samples = generate_range(&run.bench, run.plan.val[0].0, run.plan.val[0].1)
        .expect("val samples");
    let refs: Vec<&DetectionSample> = samples.iter().take(4).collect();
    let batch = Batch::from_samples(&refs, 2).expect("batch");
    let mut tape = Tape::new();
    let graph =
        total_loss(&mut tape, &run.model, &batch, &run.config).expect("loss graph");
    let summed_gate: f64 = graph
        .levels
        .iter()
        .map(|lv| lv.gate.map(|g| tape.value(g).data()[0]).unwrap_or(0.0))
        .sum();

    let binar = run.report.gate_binarization;
    let minutes = run.train_seconds / 60.0;
    let pass = binar >= 0.95 && summed_gate < 5.0 * GATE_MARGIN && minutes <= 30.0;
    verdict(
        3,
        pass,
        &format!(
            "binarization {binar:.4}, summed gate loss {summed_gate:.2e} (cap {:.2}), {minutes:.1} min",
            5.0 * GATE_MARGIN
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Disentanglement probes.

#[test]
fn criterion_4_disentanglement_probes() {
    let run = tuned_probe_run();
    let dsr = run.dsr_probe_acc;
    let dir = run.dir_probe_acc;
    let chance = run.chance;
    let pass = dsr > 0.9 && (dir - chance).abs() <= 0.15;
    verdict(
        4,
        pass,
        &format!("DSR probe {dsr:.3} (need > 0.9), DIR probe {dir:.3} (chance {chance:.2} +- 0.15)"),
    );
}

fn tuned_probe_run() -> &'static EvalReport {
    static CELL: OnceLock<EvalReport> = OnceLock::new();
    CELL.get_or_init(|| {
        let bench = BenchmarkConfig::default();
        let plan = tuned_plan(&bench);
        let config = tuned_config();
        let out = train(&config, &bench, &plan).expect("tuned run");
        evaluate(&out.model, &config, &bench, &plan).expect("evaluation")
    })
}

// ---------------------------------------------------------------------------
// 5. Reconstruction and orthogonality.

#[test]
fn criterion_5_reconstruction_and_orthogonality() {
    // Exact reconstruction on random inputs, fresh tape.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = true;
    for _ in 0..20 {
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..6);
        let h = rng.gen_range(1..5);
        let w = rng.gen_range(1..5);
        let f: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let s: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let fb = tape.leaf(Array::from_vec(&[n, c, h, w], f).unwrap());
        let gates = tape.leaf(Array::from_vec(&[n, c], s).unwrap());
        let pair = split(&mut tape, fb, gates).expect("split");
        let sum = tape.add(pair.f_di, pair.f_ds).expect("sum");
        if tape.value(sum).data() != tape.value(fb).data() {
            exact = false;
        }
    }

    // Orthogonality on the trained default-run model over validation samples.
    let run = default_run();
    let samples: Vec<DetectionSample> = run
        .plan
        .val
        .iter()
        .flat_map(|&(d, r)| generate_range(&run.bench, d, r).expect("samples"))
        .collect();
    let refs: Vec<&DetectionSample> = samples.iter().collect();
    let frac = orthogonality_fraction(&run.model, &refs, 8, 0.05).expect("orthogonality");

    let pass = exact && frac >= 0.95;
    verdict(
        5,
        pass,
        &format!("reconstruction exact: {exact}, orthogonal locations {:.2}%", frac * 100.0),
    );
}

// ---------------------------------------------------------------------------
// 6. Detection/alignment ablation ordering.

#[test]
fn criterion_6_component_ablation_ordering() {
    let grid = table4_runs();
    let map_of = |name: &str| {
        grid.mean_map
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| *m)
            .expect("cell present")
    };
    let base = map_of("base");
    let dsrl = map_of("dsrl");
    let dirl = map_of("dirl");
    let full = map_of("dsrl+dirl");

    let pass = full >= dsrl
        && full >= dirl
        && dsrl >= base - 0.02
        && dirl >= base - 0.02
        && full > base;
    verdict(
        6,
        pass,
        &format!(
            "mean mAP over {} seeds: base {base:.4}, dsrl {dsrl:.4}, dirl {dirl:.4}, full {full:.4}",
            grid.seeds.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Gate-loss / special-init ablation.

#[test]
fn criterion_7_gate_ablation() {
    let cells = table5_runs();
    let cell = |name: &str| cells.iter().find(|c| c.name == name).expect("cell present");
    let full = cell("gate-loss+special-init");
    let no_gate_loss = cell("special-init");
    let no_special = cell("gate-loss");

    let pass = no_gate_loss.report.gate_binarization < 0.8
        && no_special.near_zero_channels > full.near_zero_channels;
    verdict(
        7,
        pass,
        &format!(
            "no-gate-loss binarization {:.3} (need < 0.8); near-zero channels full {} vs no-special-init {}",
            no_gate_loss.report.gate_binarization,
            full.near_zero_channels,
            no_special.near_zero_channels
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Oracle equivalences.

#[test]
fn criterion_8_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Convolution against a plain six-loop reference with the same
    // accumulation order: bitwise equality.
    let mut conv_exact = true;
    for _ in 0..5 {
        let (n, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..3);
        let padding = k / 2;
        let (h, w) = (rng.gen_range(4..9), rng.gen_range(4..9));
        let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wgt: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let tx = tape.leaf(Array::from_vec(&[n, ci, h, w], x.clone()).unwrap());
        let tw = tape.leaf(Array::from_vec(&[co, ci, k, k], wgt.clone()).unwrap());
        let tb = tape.leaf(Array::from_vec(&[co], b.clone()).unwrap());
        let y = tape.conv2d(tx, tw, tb, stride, padding).expect("conv");
        let got = tape.value(y);

        let (ho, wo) = (got.shape()[2], got.shape()[3]);
        let mut want = vec![0.0; n * co * ho * wo];
        for ni in 0..n {
            for c in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[c];
                        for cii in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((ni * ci + cii) * h + iy as usize) * w + ix as usize]
                                        * wgt[((c * ci + cii) * k + ky) * k + kx];
                                }
                            }
                        }
                        want[((ni * co + c) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        if got.data() != want.as_slice() {
            conv_exact = false;
        }
    }

    // NMS against quadratic suppression.
    let mut nms_exact = true;
    for _ in 0..20 {
        let cands: Vec<Detection> = (0..rng.gen_range(5..40))
            .map(|_| {
                let x0 = rng.gen_range(0.0..80.0);
                let y0 = rng.gen_range(0.0..80.0);
                Detection {
                    bbox: [x0, y0, x0 + rng.gen_range(4.0..40.0), y0 + rng.gen_range(4.0..40.0)],
                    class: rng.gen_range(0..3),
                    score: rng.gen_range(0.01..1.0),
                }
            })
            .collect();
        let got = nms(cands.clone(), 0.5);

        let mut sorted = cands;
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut want: Vec<Detection> = Vec::new();
        for c in sorted {
            if want
                .iter()
                .all(|k| k.class != c.class || box_iou_xyxy(&k.bbox, &c.bbox) <= 0.5)
            {
                want.push(c);
            }
        }
        if got.len() != want.len()
            || got.iter().zip(&want).any(|(a, b)| a.bbox != b.bbox || a.class != b.class)
        {
            nms_exact = false;
        }
    }

    // Target assignment against an exhaustive per-pixel scan.
    let mut assign_exact = true;
    for _ in 0..10 {
        let nb = rng.gen_range(1..4);
        let boxes: Vec<[f64; 4]> = (0..nb)
            .map(|_| {
                let x0 = rng.gen_range(0.0..90.0);
                let y0 = rng.gen_range(0.0..90.0);
                [x0, y0, x0 + rng.gen_range(6.0..38.0), y0 + rng.gen_range(6.0..38.0)]
            })
            .collect();
        let classes: Vec<usize> = (0..nb).map(|_| rng.gen_range(0..3)).collect();
        let gt = GroundTruth { boxes: boxes.clone(), classes: classes.clone() };
        for (li, &level) in LEVELS.iter().enumerate() {
            let stride = 1usize << level;
            let (h, w) = (128 / stride, 128 / stride);
            let got = assign_targets_level(&gt, level, h, w).expect("targets");
            let (lo, hi) = LEVEL_RANGES[li];
            for y in 0..h {
                for x in 0..w {
                    let px = (x as f64 + 0.5) * stride as f64;
                    let py = (y as f64 + 0.5) * stride as f64;
                    let mut want: Option<(f64, usize)> = None;
                    for (i, b) in boxes.iter().enumerate() {
                        let (l, t) = (px - b[0], py - b[1]);
                        let (r, bt) = (b[2] - px, b[3] - py);
                        if l <= 0.0 || t <= 0.0 || r <= 0.0 || bt <= 0.0 {
                            continue;
                        }
                        let m = l.max(t).max(r).max(bt);
                        if m <= lo || m > hi {
                            continue;
                        }
                        let area = (b[2] - b[0]) * (b[3] - b[1]);
                        if want.map_or(true, |(a, _)| area < a) {
                            want = Some((area, i));
                        }
                    }
                    let got_label = got.labels[y * w + x];
                    let want_label = want.map(|(_, i)| classes[i]);
                    if got_label != want_label {
                        assign_exact = false;
                    }
                }
            }
        }
    }

    // AP against a hand-computed precision/recall table. One class, three
    // ground-truth boxes in one image, four detections: hit, duplicate
    // (counts as false positive), hit, miss.
    let b1 = [10.0, 10.0, 30.0, 30.0];
    let b2 = [50.0, 50.0, 80.0, 80.0];
    let b3 = [90.0, 10.0, 110.0, 40.0];
    let images = vec![ImageEval {
        detections: vec![
            Detection { bbox: b1, class: 0, score: 0.9 },
            Detection { bbox: [11.0, 11.0, 31.0, 31.0], class: 0, score: 0.8 },
            Detection { bbox: b2, class: 0, score: 0.7 },
            Detection { bbox: [200.0, 200.0, 220.0, 220.0], class: 0, score: 0.6 },
        ],
        gt: GroundTruth { boxes: vec![b1, b2, b3], classes: vec![0, 0, 0] },
    }];
    // Ranked: TP (p=1, r=1/3), FP (p=1/2), TP (p=2/3, r=2/3), FP (p=1/2).
    // Interpolated AP = 1/3 * 1 + 1/3 * 2/3 = 5/9.
    let got_map = map_at_05(&images).map;
    let ap_err = (got_map - 5.0 / 9.0).abs();

    let pass = conv_exact && nms_exact && assign_exact && ap_err < 1e-10;
    verdict(
        8,
        pass,
        &format!(
            "conv exact: {conv_exact}, nms exact: {nms_exact}, assignment exact: {assign_exact}, AP err {ap_err:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Protocol checks, no training involved.

#[test]
fn criterion_9_protocol_defaults() {
    let config = TrainConfig::default();
    let mut ok = true;
    let mut notes = Vec::new();
    let mut check = |name: &str, cond: bool| {
        if !cond {
            ok = false;
            notes.push(name.to_string());
        }
    };

    check("lambda_d_adv 0.1", config.lambda_d_adv == 0.1);
    check("lambda_d_cls 0.01", config.lambda_d_cls == 0.01);
    check("lambda_gate 0.1", config.lambda_gate == 0.1);
    check("lambda_grl 0.01", config.lambda_grl == 0.01);
    check("batch_per_domain 4", config.batch_per_domain == 4);
    check("s_init 0.9999", config.s_init == 0.9999);

    check("warmup starts at lr/100", {
        (config.learning_rate(0) - config.stage1_lr / 100.0).abs() < 1e-15
    });
    check("stage 1 lr 0.005", config.learning_rate(config.warmup_iters) == 0.005);
    check(
        "stage 2 lr 0.0005",
        config.learning_rate(config.warmup_iters + config.stage1_iters) == 0.0005,
    );

    let bench = BenchmarkConfig::default();
    let model = GdifdModel::new(config.model_config(bench.num_classes, 2)).expect("model");
    check("five per-level domain classifiers", model.classifiers.len() == 5);
    check("five per-level discriminators", model.discriminators.len() == 5);
    // Shared CGM and head: their parameters appear once, not per level.
    let names: Vec<String> = model.named_parameters().iter().map(|(n, _)| n.clone()).collect();
    let cgm_params = names.iter().filter(|n| n.starts_with("cgm.")).count();
    let head_params = names.iter().filter(|n| n.starts_with("head.")).count();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fresh_cgm = gdifd_core::gate::ChannelGateModule::new(
        model.config.channels,
        config.s_init,
        true,
        &mut rng,
    )
    .expect("cgm");
    let fresh_head =
        gdifd_core::detector::FcosHead::new(model.config.channels, bench.num_classes, &mut rng)
            .expect("head");
    check("one shared gate module", cgm_params == fresh_cgm.named_parameters("cgm").len());
    check("one shared head", head_params == fresh_head.named_parameters("head").len());
    // Per-level parts are distinct parameter sets, one per pyramid level.
    for level in LEVELS {
        let cls = names.iter().filter(|n| n.starts_with(&format!("cls_domain.l{level}."))).count();
        let disc =
            names.iter().filter(|n| n.starts_with(&format!("disc_domain.l{level}."))).count();
        check("per-level classifier params exist", cls > 0);
        check("per-level discriminator params exist", disc > 0);
    }

    verdict(9, ok, &if ok { "all defaults and topology hold".to_string() } else { notes.join("; ") });
}
