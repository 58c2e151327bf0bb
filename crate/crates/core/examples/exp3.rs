//! Scratch experiment: can the per-level domain classifiers learn on a
//! frozen model under the alternating single-domain batch regime?

use gdifd_core::align::domain_cls_loss;
use gdifd_core::harness::{Batch, TrainConfig};
use gdifd_core::model::GdifdModel;
use gdifd_core::nn::SgdOptimizer;
use gdifd_core::synth::{generate_sample, BenchmarkConfig, DetectionSample};
use gdifd_core::tape::Tape;

fn batch_for(bench: &BenchmarkConfig, domain: usize, step: usize) -> Batch {
    let samples: Vec<DetectionSample> =
        (0..4).map(|k| generate_sample(bench, domain, (step * 4 + k) as u64).unwrap()).collect();
    let refs: Vec<&DetectionSample> = samples.iter().collect();
    Batch::from_samples(&refs, 2).unwrap()
}

fn cls_loss(model: &mut GdifdModel, batch: &Batch, step_opt: Option<&mut SgdOptimizer>) -> f64 {
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone());
    let levels = model.forward(&mut tape, images).unwrap();
    let mut total = None;
    for (slot, lv) in levels.iter().enumerate() {
        let l = domain_cls_loss(&mut tape, lv.f_ds, batch.domain, &model.classifiers[slot]).unwrap();
        total = Some(match total {
            Some(t) => tape.add(t, l).unwrap(),
            None => l,
        });
    }
    let total = total.unwrap();
    let v = tape.value(total).data()[0];
    if let Some(opt) = step_opt {
        tape.backward(total).unwrap();
        let mut params: Vec<_> =
            model.classifiers.iter_mut().flat_map(|c| c.parameters_mut()).collect();
        opt.step(&mut params, &tape).unwrap();
    }
    v
}

fn held_out(model: &mut GdifdModel, bench: &BenchmarkConfig) -> f64 {
    // Seeds 200.. are outside the training pool.
    let b0 = batch_for(bench, 0, 50);
    let b1 = batch_for(bench, 1, 50);
    (cls_loss(model, &b0, None) + cls_loss(model, &b1, None)) / 2.0
}

fn main() {
    let bench = BenchmarkConfig::default();
    let config = TrainConfig { channels: 8, s_init: 0.9, ..TrainConfig::default() };

    for (name, balanced, wd) in
        [("alternating wd=1e-4", false, 1e-4), ("alternating wd=0", false, 0.0), ("balanced wd=0", true, 0.0)]
    {
        let mut model = GdifdModel::new(config.model_config(bench.num_classes, 2)).unwrap();
        let mut opt = SgdOptimizer::new(0.005, 0.9, wd);
        println!("{name}");
        for step in 0..1500 {
            if balanced {
                // Diagnostic only: both domains inside one optimizer step.
                let b0 = batch_for(&bench, 0, step % 50);
                let b1 = batch_for(&bench, 1, step % 50);
                cls_loss(&mut model, &b0, Some(&mut opt));
                cls_loss(&mut model, &b1, Some(&mut opt));
            } else {
                let b = batch_for(&bench, step % 2, (step / 2) % 50);
                cls_loss(&mut model, &b, Some(&mut opt));
            }
            if step % 250 == 0 || step == 1499 {
                println!("  step {step:4} held-out dcls {:.4}", held_out(&mut model, &bench));
            }
        }
    }
}
