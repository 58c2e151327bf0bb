//! Scratch experiment: per-channel feature statistics by domain, and a
//! direct learnability check of the classifier stack on raw images.

use gdifd_core::align::{domain_cls_loss, DomainClassifier, DomainLabel};
use gdifd_core::harness::{Batch, TrainConfig};
use gdifd_core::model::GdifdModel;
use gdifd_core::nn::SgdOptimizer;
use gdifd_core::synth::{generate_sample, BenchmarkConfig, DetectionSample};
use gdifd_core::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch_for(bench: &BenchmarkConfig, domain: usize, start: u64) -> Batch {
    let samples: Vec<DetectionSample> =
        (0..8).map(|k| generate_sample(bench, domain, start + k).unwrap()).collect();
    let refs: Vec<&DetectionSample> = samples.iter().collect();
    Batch::from_samples(&refs, 2).unwrap()
}

fn main() {
    let bench = BenchmarkConfig::default();
    let config = TrainConfig { channels: 8, s_init: 0.9, ..TrainConfig::default() };
    let model = GdifdModel::new(config.model_config(bench.num_classes, 2)).unwrap();

    // Level-3 f_b statistics per domain.
    for domain in 0..2 {
        let batch = batch_for(&bench, domain, 0);
        let mut tape = Tape::new();
        let images = tape.constant(batch.images.clone());
        let levels = model.forward(&mut tape, images).unwrap();
        let fb = tape.value(levels[0].f_b);
        let s = fb.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        print!("domain {domain} f_b l3 per-channel mean/std:");
        for ch in 0..c {
            let mut vals = Vec::new();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                vals.extend_from_slice(&fb.data()[base..base + plane]);
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            print!(" {mean:.3}/{:.3}", var.sqrt());
        }
        println!();
    }

    // Raw-image learnability: balanced steps, classifier directly on pixels.
    let mut clf = DomainClassifier::new(3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = SgdOptimizer::new(0.005, 0.9, 0.0);
    println!("classifier on raw images, balanced steps:");
    for step in 0..300usize {
        let mut losses = [0.0; 2];
        for domain in 0..2 {
            let batch = batch_for(&bench, domain, (step as u64 % 20) * 8);
            let mut tape = Tape::new();
            let images = tape.constant(batch.images.clone());
            let loss = domain_cls_loss(
                &mut tape,
                images,
                DomainLabel::new(domain, 2).unwrap(),
                &clf,
            )
            .unwrap();
            losses[domain] = tape.value(loss).data()[0];
            tape.backward(loss).unwrap();
            let mut params: Vec<_> = clf.parameters_mut();
            opt.step(&mut params, &tape).unwrap();
        }
        if step % 50 == 0 || step == 299 {
            println!("  step {step:3} d0 {:.4} d1 {:.4}", losses[0], losses[1]);
        }
    }
}
