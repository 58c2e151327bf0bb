//! Full model assembly: backbone FPN, one channel-gate module and one
//! detection head shared across all five pyramid levels, and per-level
//! (non-shared) domain classifiers and GRL discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{DomainClassifier, GrlDiscriminator};
use crate::array::Array;
use crate::detector::{detect, BackboneFpn, Detection, FcosHead, HeadOutputs, LevelMaps, LEVELS};
use crate::error::{Error, Result};
use crate::gate::{split, ChannelGateModule};
use crate::nn::Parameter;
use crate::tape::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_classes: usize,
    /// Source-domain count M seen by the classifiers/discriminators.
    pub num_domains: usize,
    pub s_init: f64,
    pub lambda_grl: f64,
    pub use_special_init: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            num_classes: 3,
            num_domains: 2,
            s_init: 0.9999,
            lambda_grl: 0.01,
            use_special_init: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("need at least one object class"));
        }
        if self.num_domains < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 source domains, got {}",
                self.num_domains
            )));
        }
        if !(self.s_init > 0.0 && self.s_init < 1.0) {
            return Err(Error::invalid(format!("s_init {} outside (0,1)", self.s_init)));
        }
        if self.lambda_grl < 0.0 {
            return Err(Error::invalid("lambda_grl must be non-negative"));
        }
        Ok(())
    }
}

/// Everything the loss needs from one pyramid level's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LevelForward {
    pub level: usize,
    pub stride: usize,
    /// Base features from the FPN.
    pub f_b: Tensor,
    /// Gate signal `[N, C]`.
    pub gates: Tensor,
    /// Domain-invariant half; feeds the detection head and the discriminator.
    pub f_di: Tensor,
    /// Domain-specific half; feeds the domain classifier.
    pub f_ds: Tensor,
    pub head: HeadOutputs,
}

#[derive(Debug)]
pub struct GdifdModel {
    pub config: ModelConfig,
    pub backbone: BackboneFpn,
    pub cgm: ChannelGateModule,
    pub head: FcosHead,
    pub classifiers: Vec<DomainClassifier>,
    pub discriminators: Vec<GrlDiscriminator>,
}

impl GdifdModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = BackboneFpn::new(config.channels, &mut rng);
        let cgm =
            ChannelGateModule::new(config.channels, config.s_init, config.use_special_init, &mut rng)?;
        let head = FcosHead::new(config.channels, config.num_classes, &mut rng)?;
        let mut classifiers = Vec::with_capacity(LEVELS.len());
        let mut discriminators = Vec::with_capacity(LEVELS.len());
        for _ in LEVELS {
            classifiers.push(DomainClassifier::new(config.channels, config.num_domains, &mut rng)?);
            discriminators.push(GrlDiscriminator::new(
                config.channels,
                config.num_domains,
                config.lambda_grl,
                &mut rng,
            )?);
        }
        let model = GdifdModel { config, backbone, cgm, head, classifiers, discriminators };
        model.assert_topology()?;
        Ok(model)
    }

    /// Run the shared trunk on a batch: base features per level, gate split,
    /// and head predictions on the domain-invariant half.
    pub fn forward(&self, tape: &mut Tape, images: Tensor) -> Result<Vec<LevelForward>> {
        let feats = self.backbone.forward(tape, images)?;
        let mut out = Vec::with_capacity(feats.levels.len());
        for lf in feats.levels {
            let gates = self.cgm.forward(tape, lf.feat)?;
            let pair = split(tape, lf.feat, gates)?;
            let head = self.head.forward(tape, pair.f_di, lf.stride)?;
            out.push(LevelForward {
                level: lf.level,
                stride: lf.stride,
                f_b: lf.feat,
                gates,
                f_di: pair.f_di,
                f_ds: pair.f_ds,
                head,
            });
        }
        Ok(out)
    }

    /// Decode detections for a batch of images, no gradients involved.
    pub fn detect(
        &self,
        images: &Array,
        score_thresh: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("detect", format!("want [N,3,H,W], got {:?}", shape)));
        }
        let (n, h, w) = (shape[0], shape[2] as f64, shape[3] as f64);
        let mut tape = Tape::new();
        let input = tape.constant(images.clone());
        let levels = self.forward(&mut tape, input)?;
        let maps: Vec<(usize, Array, Array, Array)> = levels
            .iter()
            .map(|lv| {
                (
                    lv.stride,
                    tape.value(lv.head.cls_map).clone(),
                    tape.value(lv.head.ctr_map).clone(),
                    tape.value(lv.head.reg_map).clone(),
                )
            })
            .collect();
        let level_maps: Vec<LevelMaps<'_>> = maps
            .iter()
            .map(|(stride, cls, ctr, reg)| LevelMaps { stride: *stride, cls, ctr, reg })
            .collect();
        Ok((0..n).map(|i| detect(&level_maps, i, score_thresh, nms_iou, w, h)).collect())
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.parameters_mut();
        out.extend(self.cgm.parameters_mut());
        out.extend(self.head.parameters_mut());
        for c in &mut self.classifiers {
            out.extend(c.parameters_mut());
        }
        for d in &mut self.discriminators {
            out.extend(d.net.parameters_mut());
        }
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, &Parameter)> {
        let mut out = self.backbone.named_parameters("backbone");
        out.extend(self.cgm.named_parameters("cgm"));
        out.extend(self.head.named_parameters("head"));
        for (i, c) in self.classifiers.iter().enumerate() {
            out.extend(c.named_parameters(&format!("cls_domain.l{}", LEVELS[i])));
        }
        for (i, d) in self.discriminators.iter().enumerate() {
            out.extend(d.net.named_parameters(&format!("disc_domain.l{}", LEVELS[i])));
        }
        out
    }

    /// Overwrite parameter values by name, e.g. when loading a checkpoint.
    /// Every model parameter must be present in the map.
    pub fn load_values(&mut self, values: &std::collections::HashMap<String, Array>) -> Result<()> {
        let names: Vec<String> = self.named_parameters().iter().map(|(n, _)| n.clone()).collect();
        let params = self.parameters_mut();
        debug_assert_eq!(names.len(), params.len());
        for (name, param) in names.iter().zip(params) {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if v.shape() != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    v.shape(),
                    param.value.shape()
                )));
            }
            param.value = v.clone();
        }
        Ok(())
    }

    /// Structural checks: one CGM and one head instance reused for all five
    /// levels, classifiers/discriminators distinct per level, and no
    /// parameter object aliased between any two submodules.
    pub fn assert_topology(&self) -> Result<()> {
        if self.classifiers.len() != LEVELS.len() || self.discriminators.len() != LEVELS.len() {
            return Err(Error::invalid(format!(
                "expected {} per-level classifier/discriminator pairs, got {}/{}",
                LEVELS.len(),
                self.classifiers.len(),
                self.discriminators.len()
            )));
        }
        for d in &self.discriminators {
            if (d.lambda_grl - self.config.lambda_grl).abs() > 0.0 {
                return Err(Error::invalid("discriminator lambda_grl drifted from config"));
            }
        }
        let named = self.named_parameters();
        let mut seen = std::collections::HashMap::new();
        for (name, p) in &named {
            if let Some(prev) = seen.insert(p.id(), name.clone()) {
                return Err(Error::invalid(format!("parameter aliasing: {prev} and {name}")));
            }
        }
        let expected = 18 + 14 + 10 + LEVELS.len() * 20;
        if named.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter tensors, found {}",
                named.len()
            )));
        }
        Ok(())
    }
}
