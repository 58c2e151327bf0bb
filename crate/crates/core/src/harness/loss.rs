//! The weighted multi-task training loss, summed over pyramid levels:
//! detection (focal + centerness + IoU) plus, per ablation flags, the
//! adversarial domain loss on f_di, the domain classification loss on f_ds,
//! and the gate loss.

use super::TrainConfig;
use crate::align::{domain_adv_loss, domain_cls_loss, DomainLabel};
use crate::array::Array;
use crate::detector::{assign_targets_level, detection_loss, GroundTruth};
use crate::error::{Error, Result};
use crate::gate::{gate_loss, GATE_MARGIN};
use crate::model::{GdifdModel, LevelForward};
use crate::synth::DetectionSample;
use crate::tape::{Tape, Tensor};

/// A single-source-domain training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`.
    pub images: Array,
    pub gts: Vec<GroundTruth>,
    /// Label in source-domain space (`num_domains` = M sources).
    pub domain: DomainLabel,
}

impl Batch {
    /// Stack samples into a batch with the sample's own domain index as the
    /// label. All samples must come from the same source domain; a
    /// mixed-domain batch is rejected.
    pub fn from_samples(samples: &[&DetectionSample], num_source_domains: usize) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("cannot build a batch from zero samples"))?;
        let label = DomainLabel::new(first.domain.index, num_source_domains)?;
        Self::with_label(samples, label)
    }

    /// Like [`Batch::from_samples`] but with an explicit label, for split
    /// plans whose source domains are not numbered 0..M.
    pub fn with_label(samples: &[&DetectionSample], label: DomainLabel) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("cannot build a batch from zero samples"))?;
        let domain_index = first.domain.index;
        if samples.iter().any(|s| s.domain.index != domain_index) {
            return Err(Error::invalid("mixed-domain batch"));
        }
        let shape = first.image.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut gts = Vec::with_capacity(samples.len());
        for s in samples {
            if s.image.shape() != shape {
                return Err(Error::shape(
                    "batch",
                    format!("image {:?} vs {:?}", s.image.shape(), shape),
                ));
            }
            data.extend_from_slice(s.image.data());
            gts.push(s.gt.clone());
        }
        Ok(Batch { images: Array::from_vec(&[samples.len(), 3, h, w], data)?, gts, domain: label })
    }
}

/// Raw (unweighted) loss tensors for one pyramid level. Terms switched off
/// by ablation flags are absent rather than zero.
#[derive(Clone, Copy, Debug)]
pub struct LevelTerms {
    pub level: usize,
    /// Gate signal `[B, C]` for this level, for gate statistics.
    pub gates: Tensor,
    pub det_cls: Tensor,
    pub det_ctr: Tensor,
    pub det_reg: Tensor,
    pub adv: Option<Tensor>,
    pub domain_cls: Option<Tensor>,
    pub gate: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Tensor,
    pub levels: Vec<LevelTerms>,
}

/// Plain numbers extracted from a [`LossGraph`] for logging. Per-term fields
/// hold raw (unweighted) sums over levels.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct LossValues {
    pub total: f64,
    pub det_cls: f64,
    pub det_ctr: f64,
    pub det_reg: f64,
    pub adv: f64,
    pub domain_cls: f64,
    pub gate: f64,
    pub gate_per_level: Vec<f64>,
}

impl LossGraph {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let mut v = LossValues {
            total: tape.value(self.total).item(),
            det_cls: 0.0,
            det_ctr: 0.0,
            det_reg: 0.0,
            adv: 0.0,
            domain_cls: 0.0,
            gate: 0.0,
            gate_per_level: Vec::with_capacity(self.levels.len()),
        };
        for lt in &self.levels {
            v.det_cls += tape.value(lt.det_cls).item();
            v.det_ctr += tape.value(lt.det_ctr).item();
            v.det_reg += tape.value(lt.det_reg).item();
            v.adv += lt.adv.map_or(0.0, |t| tape.value(t).item());
            v.domain_cls += lt.domain_cls.map_or(0.0, |t| tape.value(t).item());
            let g = lt.gate.map_or(0.0, |t| tape.value(t).item());
            v.gate += g;
            v.gate_per_level.push(g);
        }
        v
    }
}

impl LossValues {
    /// Recombine the raw terms with the config weights; must match `total`.
    pub fn weighted_sum(&self, config: &TrainConfig) -> f64 {
        self.det_cls
            + self.det_ctr
            + self.det_reg
            + config.lambda_d_adv * self.adv
            + config.lambda_d_cls * self.domain_cls
            + config.lambda_gate * self.gate
    }
}

/// Build the full training loss for one single-domain batch.
pub fn total_loss(
    tape: &mut Tape,
    model: &GdifdModel,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<LossGraph> {
    if batch.domain.num_domains != model.config.num_domains {
        return Err(Error::invalid(format!(
            "batch label space {} vs model's {} source domains",
            batch.domain.num_domains, model.config.num_domains
        )));
    }
    let images = tape.constant(batch.images.clone());
    let levels = model.forward(tape, images)?;
    let mut level_terms = Vec::with_capacity(levels.len());
    let mut total: Option<Tensor> = None;
    for (slot, lv) in levels.iter().enumerate() {
        let terms = level_loss(tape, model, lv, slot, batch, config)?;
        let mut level_sum = tape.add(terms.det_cls, terms.det_ctr)?;
        level_sum = tape.add(level_sum, terms.det_reg)?;
        if let Some(adv) = terms.adv {
            let w = tape.scale(adv, config.lambda_d_adv);
            level_sum = tape.add(level_sum, w)?;
        }
        if let Some(dcls) = terms.domain_cls {
            let w = tape.scale(dcls, config.lambda_d_cls);
            level_sum = tape.add(level_sum, w)?;
        }
        if let Some(gate) = terms.gate {
            let w = tape.scale(gate, config.lambda_gate);
            level_sum = tape.add(level_sum, w)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, level_sum)?,
            None => level_sum,
        });
        level_terms.push(terms);
    }
    Ok(LossGraph { total: total.expect("five levels"), levels: level_terms })
}

fn level_loss(
    tape: &mut Tape,
    model: &GdifdModel,
    lv: &LevelForward,
    slot: usize,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<LevelTerms> {
    let shape = tape.value(lv.head.ctr_map).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let targets: Vec<_> = batch
        .gts
        .iter()
        .map(|gt| assign_targets_level(gt, lv.level, h, w))
        .collect::<Result<_>>()?;
    let det = detection_loss(tape, &lv.head, &targets)?;

    let adv = if config.use_dirl {
        Some(domain_adv_loss(tape, lv.f_di, batch.domain, &model.discriminators[slot])?)
    } else {
        None
    };
    let domain_cls = if config.use_dsrl {
        Some(domain_cls_loss(tape, lv.f_ds, batch.domain, &model.classifiers[slot])?)
    } else {
        None
    };
    let gate = if config.use_dsrl && config.use_gate_loss {
        Some(gate_loss(tape, lv.gates, GATE_MARGIN)?)
    } else {
        None
    };
    Ok(LevelTerms {
        level: lv.level,
        gates: lv.gates,
        det_cls: det.cls,
        det_ctr: det.ctr,
        det_reg: det.reg,
        adv,
        domain_cls,
        gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_sample, BenchmarkConfig};

    // Standard init keeps the gates near 0.5 so the hinged gate loss is
    // nonzero and every term can be observed.
    fn setup() -> (GdifdModel, Batch, TrainConfig) {
        let bench = BenchmarkConfig::default();
        let s0 = generate_sample(&bench, 0, 100).unwrap();
        let s1 = generate_sample(&bench, 0, 101).unwrap();
        let batch = Batch::from_samples(&[&s0, &s1], 2).unwrap();
        let model = GdifdModel::new(ModelConfig {
            channels: 4,
            num_classes: 3,
            num_domains: 2,
            seed: 1,
            use_special_init: false,
            ..ModelConfig::default()
        })
        .unwrap();
        (model, batch, TrainConfig { channels: 4, ..TrainConfig::default() })
    }

    #[test]
    fn mixed_domain_batch_rejected() {
        let bench = BenchmarkConfig::default();
        let s0 = generate_sample(&bench, 0, 100).unwrap();
        let s1 = generate_sample(&bench, 1, 101).unwrap();
        let err = Batch::from_samples(&[&s0, &s1], 2).unwrap_err();
        assert!(err.to_string().contains("mixed-domain"), "{err}");
        assert!(Batch::from_samples(&[], 2).is_err());
    }

    #[test]
    fn unseen_domain_sample_rejected_for_training() {
        let bench = BenchmarkConfig::default();
        let s = generate_sample(&bench, 2, 100).unwrap();
        assert!(Batch::from_samples(&[&s], 2).is_err());
    }

    #[test]
    fn bookkeeping_total_equals_recombined_terms() {
        let (model, batch, config) = setup();
        let mut tape = Tape::new();
        let graph = total_loss(&mut tape, &model, &batch, &config).unwrap();
        assert_eq!(graph.levels.len(), 5);
        let values = graph.values(&tape);
        assert!(
            (values.total - values.weighted_sum(&config)).abs() < 1e-10,
            "total {} vs recombined {}",
            values.total,
            values.weighted_sum(&config)
        );
        assert_eq!(values.gate_per_level.len(), 5);
        assert!(values.total.is_finite() && values.total > 0.0);
    }

    #[test]
    fn ablation_flags_drop_terms() {
        let (model, batch, base) = setup();

        let mut tape = Tape::new();
        let no_dsrl = TrainConfig { use_dsrl: false, ..base.clone() };
        let graph = total_loss(&mut tape, &model, &batch, &no_dsrl).unwrap();
        let v = graph.values(&tape);
        assert_eq!(v.domain_cls, 0.0);
        assert_eq!(v.gate, 0.0);
        assert!(v.adv > 0.0);

        let mut tape = Tape::new();
        let no_dirl = TrainConfig { use_dirl: false, ..base.clone() };
        let graph = total_loss(&mut tape, &model, &batch, &no_dirl).unwrap();
        let v = graph.values(&tape);
        assert_eq!(v.adv, 0.0);
        assert!(v.domain_cls > 0.0 && v.gate > 0.0);

        let mut tape = Tape::new();
        let no_gate = TrainConfig { use_gate_loss: false, ..base.clone() };
        let graph = total_loss(&mut tape, &model, &batch, &no_gate).unwrap();
        let v = graph.values(&tape);
        assert_eq!(v.gate, 0.0);
        assert!(v.domain_cls > 0.0);
    }

    #[test]
    fn saturated_special_init_gates_sit_inside_the_hinge_margin() {
        let (_, batch, config) = setup();
        let model = GdifdModel::new(ModelConfig {
            channels: 4,
            num_classes: 3,
            num_domains: 2,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut tape = Tape::new();
        let graph = total_loss(&mut tape, &model, &batch, &config).unwrap();
        let v = graph.values(&tape);
        assert_eq!(v.gate, 0.0, "gates initialized at s_init should not be penalized");
    }

    #[test]
    fn dropped_terms_leave_their_parameters_without_gradients() {
        let (model, batch, base) = setup();
        let config = TrainConfig { use_dsrl: false, use_dirl: false, ..base };
        let mut tape = Tape::new();
        let graph = total_loss(&mut tape, &model, &batch, &config).unwrap();
        tape.backward(graph.total).unwrap();
        // Classifier and discriminator parameters never entered the graph.
        for c in &model.classifiers {
            for (_, p) in c.named_parameters("c") {
                assert!(tape.param_tensor(p.id()).is_none());
            }
        }
        // Detection head parameters did.
        let (_, head_param) = &model.head.named_parameters("h")[0];
        let t = tape.param_tensor(head_param.id()).unwrap();
        assert!(tape.grad(t).is_some());
    }

    #[test]
    fn per_level_independent_recomputation_matches() {
        // Rebuild each level's weighted sum from the stored term tensors and
        // compare against the graph total.
        let (model, batch, config) = setup();
        let mut tape = Tape::new();
        let graph = total_loss(&mut tape, &model, &batch, &config).unwrap();
        let mut recomputed = 0.0;
        for lt in &graph.levels {
            recomputed += tape.value(lt.det_cls).item()
                + tape.value(lt.det_ctr).item()
                + tape.value(lt.det_reg).item()
                + config.lambda_d_adv * lt.adv.map_or(0.0, |t| tape.value(t).item())
                + config.lambda_d_cls * lt.domain_cls.map_or(0.0, |t| tape.value(t).item())
                + config.lambda_gate * lt.gate.map_or(0.0, |t| tape.value(t).item());
        }
        assert!((tape.value(graph.total).item() - recomputed).abs() < 1e-10);
    }

    #[test]
    fn label_space_mismatch_rejected() {
        let (model, _, config) = setup();
        let bench = BenchmarkConfig::default();
        let s = generate_sample(&bench, 0, 100).unwrap();
        let batch3 = Batch::from_samples(&[&s], 3).unwrap();
        let mut tape = Tape::new();
        assert!(total_loss(&mut tape, &model, &batch3, &config).is_err());
    }
}
