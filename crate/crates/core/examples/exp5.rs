//! Scratch experiment: gradient norms through the domain classifier stack.

use gdifd_core::align::{domain_cls_loss, DomainClassifier, DomainLabel};
use gdifd_core::harness::Batch;
use gdifd_core::synth::{generate_sample, DetectionSample, BenchmarkConfig};
use gdifd_core::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let bench = BenchmarkConfig::default();
    let samples: Vec<DetectionSample> =
        (0..4).map(|k| generate_sample(&bench, 0, k).unwrap()).collect();
    let refs: Vec<&DetectionSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, 2).unwrap();

    let clf = DomainClassifier::new(3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone());
    let loss = domain_cls_loss(&mut tape, images, DomainLabel::new(0, 2).unwrap(), &clf).unwrap();
    println!("loss {}", tape.value(loss).data()[0]);
    tape.backward(loss).unwrap();
    for (i, conv) in clf.convs.iter().enumerate() {
        let wt = tape.param_tensor(conv.weight.id()).unwrap();
        let bt = tape.param_tensor(conv.bias.id()).unwrap();
        let wn = tape.grad(wt).map(|g| g.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        let bn = tape.grad(bt).map(|g| g.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        println!("conv{i}: |gw| {:?} |gb| {:?}", wn, bn);
    }
}
