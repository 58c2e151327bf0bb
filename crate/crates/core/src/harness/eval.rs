//! Model evaluation: detection quality on the held-out domain, linear
//! probes measuring how much domain information the two feature halves
//! carry, and gate statistics.

use serde::Serialize;

use super::TrainConfig;
use crate::array::Array;
use crate::error::{Error, Result};
use crate::eval::{map_at_05, ImageEval};
use crate::model::GdifdModel;
use crate::probe::LogisticProbe;
use crate::synth::{generate_range, BenchmarkConfig, DetectionSample, SplitPlan};
use crate::tape::Tape;

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// mAP@0.5 on the unseen-domain test split.
    pub map: f64,
    pub per_class_ap: Vec<(usize, f64)>,
    /// Held-out accuracy of a fresh linear probe predicting the source
    /// domain from pooled f_ds features.
    pub dsr_probe_acc: f64,
    /// Same probe on pooled f_di features.
    pub dir_probe_acc: f64,
    /// Chance level 1/M for the probes.
    pub chance: f64,
    /// Fraction of gate entries within 0.05 of 0 or 1.
    pub gate_binarization: f64,
    pub gate_mean: f64,
    pub num_test_images: usize,
}

/// Frozen pooled features for a set of samples: per level, global average
/// pooling over H and W of each split half, concatenated across the five
/// levels into one row per sample. Also returns every gate entry seen.
pub struct SplitFeatures {
    pub di: Vec<Vec<f64>>,
    pub ds: Vec<Vec<f64>>,
    pub gates: Vec<f64>,
}

pub fn pooled_split_features(
    model: &GdifdModel,
    samples: &[&DetectionSample],
    batch_size: usize,
) -> Result<SplitFeatures> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut out = SplitFeatures { di: Vec::new(), ds: Vec::new(), gates: Vec::new() };
    for chunk in samples.chunks(batch_size) {
        let shape = chunk[0].image.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
        for s in chunk {
            data.extend_from_slice(s.image.data());
        }
        let images = Array::from_vec(&[chunk.len(), 3, h, w], data)?;
        let mut tape = Tape::new();
        let input = tape.constant(images);
        let levels = model.forward(&mut tape, input)?;
        let mut di_rows = vec![Vec::new(); chunk.len()];
        let mut ds_rows = vec![Vec::new(); chunk.len()];
        for lv in &levels {
            append_pooled(tape.value(lv.f_di), &mut di_rows);
            append_pooled(tape.value(lv.f_ds), &mut ds_rows);
            out.gates.extend_from_slice(tape.value(lv.gates).data());
        }
        out.di.extend(di_rows);
        out.ds.extend(ds_rows);
    }
    Ok(out)
}

/// Fraction of feature-map locations where the two halves are close to
/// orthogonal: sum_c f_di*f_ds divided by the squared norm of f_b stays
/// below `tol`. Locations with no feature mass count as orthogonal.
pub fn orthogonality_fraction(
    model: &GdifdModel,
    samples: &[&DetectionSample],
    batch_size: usize,
    tol: f64,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut ok = 0usize;
    let mut total = 0usize;
    for chunk in samples.chunks(batch_size) {
        let shape = chunk[0].image.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
        for s in chunk {
            data.extend_from_slice(s.image.data());
        }
        let images = Array::from_vec(&[chunk.len(), 3, h, w], data)?;
        let mut tape = Tape::new();
        let input = tape.constant(images);
        let levels = model.forward(&mut tape, input)?;
        for lv in &levels {
            let di = tape.value(lv.f_di);
            let ds = tape.value(lv.f_ds);
            let fb = tape.value(lv.f_b);
            let s = fb.shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            for b in 0..n {
                for loc in 0..plane {
                    let mut inner = 0.0;
                    let mut norm = 0.0;
                    for ch in 0..c {
                        let idx = (b * c + ch) * plane + loc;
                        inner += di.data()[idx] * ds.data()[idx];
                        norm += fb.data()[idx] * fb.data()[idx];
                    }
                    let ratio = if norm > 0.0 { inner / norm } else { 0.0 };
                    if ratio < tol {
                        ok += 1;
                    }
                    total += 1;
                }
            }
        }
    }
    Ok(ok as f64 / total as f64)
}

/// Mean gate value per `[level][channel]`, averaged over the samples.
pub fn gate_channel_means(
    model: &GdifdModel,
    samples: &[&DetectionSample],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let c = model.config.channels;
    let mut sums = vec![vec![0.0f64; c]; 5];
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size) {
        let shape = chunk[0].image.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
        for s in chunk {
            data.extend_from_slice(s.image.data());
        }
        let images = Array::from_vec(&[chunk.len(), 3, h, w], data)?;
        let mut tape = Tape::new();
        let input = tape.constant(images);
        let levels = model.forward(&mut tape, input)?;
        for (li, lv) in levels.iter().enumerate() {
            let gates = tape.value(lv.gates);
            for b in 0..chunk.len() {
                for ch in 0..c {
                    sums[li][ch] += gates.data()[b * c + ch];
                }
            }
        }
        count += chunk.len();
    }
    for level in &mut sums {
        for v in level.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(sums)
}

fn append_pooled(feat: &Array, rows: &mut [Vec<f64>]) {
    let s = feat.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    for (b, row) in rows.iter_mut().enumerate() {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let mean = feat.data()[base..base + plane].iter().sum::<f64>() / plane as f64;
            row.push(mean);
        }
    }
}

fn probe_rows(
    model: &GdifdModel,
    bench: &BenchmarkConfig,
    plan: &SplitPlan,
) -> Result<(SplitFeatures, Vec<usize>)> {
    let mut features = SplitFeatures { di: Vec::new(), ds: Vec::new(), gates: Vec::new() };
    let mut labels = Vec::new();
    for (slot, &(domain, range)) in plan.val.iter().enumerate() {
        let samples = generate_range(bench, domain, range)?;
        let refs: Vec<&DetectionSample> = samples.iter().collect();
        let f = pooled_split_features(model, &refs, 8)?;
        labels.extend(std::iter::repeat(slot).take(f.di.len()));
        features.di.extend(f.di);
        features.ds.extend(f.ds);
        features.gates.extend(f.gates);
    }
    Ok((features, labels))
}

/// Train a fresh probe on two thirds of the rows (interleaved per domain)
/// and report held-out accuracy on the remaining third.
fn probe_accuracy(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    let mut per_label_seen = vec![0usize; classes];
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut eval_x = Vec::new();
    let mut eval_y = Vec::new();
    for (row, &y) in rows.iter().zip(labels) {
        let k = per_label_seen[y];
        per_label_seen[y] += 1;
        if k % 3 == 2 {
            eval_x.push(row.clone());
            eval_y.push(y);
        } else {
            train_x.push(row.clone());
            train_y.push(y);
        }
    }
    if eval_x.is_empty() {
        return Err(Error::invalid(
            "validation split too small for probes: need at least 3 samples per domain",
        ));
    }
    let probe = LogisticProbe::fit(&train_x, &train_y, classes)?;
    Ok(probe.accuracy(&eval_x, &eval_y))
}

pub fn evaluate(
    model: &GdifdModel,
    config: &TrainConfig,
    bench: &BenchmarkConfig,
    plan: &SplitPlan,
) -> Result<EvalReport> {
    config.validate()?;
    bench.validate()?;
    plan.validate(bench)?;
    let m = plan.source_domains.len();
    if m != model.config.num_domains {
        return Err(Error::invalid(format!(
            "plan has {m} source domains but the model expects {}",
            model.config.num_domains
        )));
    }

    let test = generate_range(bench, plan.test.0, plan.test.1)?;
    if test.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let mut images_eval = Vec::with_capacity(test.len());
    for chunk in test.chunks(4) {
        let shape = chunk[0].image.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
        for s in chunk {
            data.extend_from_slice(s.image.data());
        }
        let images = Array::from_vec(&[chunk.len(), 3, h, w], data)?;
        let dets = model.detect(&images, config.eval_score_thresh, config.eval_nms_iou)?;
        for (s, d) in chunk.iter().zip(dets) {
            images_eval.push(ImageEval { detections: d, gt: s.gt.clone() });
        }
    }
    let map_report = map_at_05(&images_eval);

    let (features, labels) = probe_rows(model, bench, plan)?;
    let dsr = probe_accuracy(&features.ds, &labels, m)?;
    let dir = probe_accuracy(&features.di, &labels, m)?;
    let gate_mean = if features.gates.is_empty() {
        0.0
    } else {
        features.gates.iter().sum::<f64>() / features.gates.len() as f64
    };
    let near_binary = features.gates.iter().filter(|&&v| v <= 0.05 || v >= 0.95).count();
    let binarization = if features.gates.is_empty() {
        0.0
    } else {
        near_binary as f64 / features.gates.len() as f64
    };

    Ok(EvalReport {
        map: map_report.map,
        per_class_ap: map_report.per_class,
        dsr_probe_acc: dsr,
        dir_probe_acc: dir,
        chance: 1.0 / m as f64,
        gate_binarization: binarization,
        gate_mean,
        num_test_images: test.len(),
    })
}
