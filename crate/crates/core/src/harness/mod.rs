//! Training and evaluation harness: the weighted multi-task loss, the
//! per-domain round-robin SGD loop with warmup/two-stage learning rate,
//! metrics records, probes, ablation grids, and checkpoints.

mod checkpoint;
mod eval;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use eval::{
    evaluate, gate_channel_means, orthogonality_fraction, pooled_split_features, EvalReport,
};
pub use loss::{total_loss, Batch, LossGraph, LossValues, LevelTerms};
pub use train::{ablate, ablation_csv, table4_grid, table5_grid, train, AblationCell, TrainOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight on the adversarial (GRL discriminator) loss.
    pub lambda_d_adv: f64,
    /// Weight on the domain classification loss.
    pub lambda_d_cls: f64,
    /// Weight on the gate loss.
    pub lambda_gate: f64,
    pub s_init: f64,
    pub lambda_grl: f64,
    pub batch_per_domain: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub stage1_iters: usize,
    pub stage1_lr: f64,
    pub stage2_iters: usize,
    pub seed: u64,
    pub channels: usize,
    pub use_dsrl: bool,
    pub use_dirl: bool,
    pub use_gate_loss: bool,
    pub use_special_init: bool,
    pub log_every: usize,
    pub eval_score_thresh: f64,
    pub eval_nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_d_adv: 0.1,
            lambda_d_cls: 0.01,
            lambda_gate: 0.1,
            s_init: 0.9999,
            lambda_grl: 0.01,
            batch_per_domain: 4,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 100,
            stage1_iters: 800,
            stage1_lr: 0.005,
            stage2_iters: 400,
            seed: 0,
            channels: 16,
            use_dsrl: true,
            use_dirl: true,
            use_gate_loss: true,
            use_special_init: true,
            log_every: 25,
            eval_score_thresh: 0.05,
            eval_nms_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d_adv", self.lambda_d_adv),
            ("lambda_d_cls", self.lambda_d_cls),
            ("lambda_gate", self.lambda_gate),
            ("lambda_grl", self.lambda_grl),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.s_init > 0.0 && self.s_init < 1.0) {
            return Err(Error::Config(format!("s_init {} outside (0,1)", self.s_init)));
        }
        if self.batch_per_domain == 0 {
            return Err(Error::Config("batch_per_domain must be positive".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if !(self.stage1_lr > 0.0) {
            return Err(Error::Config(format!("stage1_lr must be positive, got {}", self.stage1_lr)));
        }
        if self.stage1_iters == 0 {
            return Err(Error::Config("stage1_iters must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(self.eval_score_thresh >= 0.0 && self.eval_score_thresh < 1.0) {
            return Err(Error::Config("eval_score_thresh outside [0,1)".into()));
        }
        if !(self.eval_nms_iou > 0.0 && self.eval_nms_iou < 1.0) {
            return Err(Error::Config("eval_nms_iou outside (0,1)".into()));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.stage1_iters + self.stage2_iters
    }

    pub fn stage2_lr(&self) -> f64 {
        self.stage1_lr / 10.0
    }

    /// Warmup ramps linearly from stage1_lr/100 to stage1_lr, then stage 1
    /// holds stage1_lr, then stage 2 holds stage1_lr/10.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration < self.warmup_iters {
            let lo = self.stage1_lr / 100.0;
            lo + (self.stage1_lr - lo) * iteration as f64 / self.warmup_iters as f64
        } else if iteration < self.warmup_iters + self.stage1_iters {
            self.stage1_lr
        } else {
            self.stage2_lr()
        }
    }

    pub fn model_config(&self, num_classes: usize, num_source_domains: usize) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            num_classes,
            num_domains: num_source_domains,
            s_init: self.s_init,
            lambda_grl: self.lambda_grl,
            use_special_init: self.use_special_init,
            seed: self.seed,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// One logged snapshot of training state. Loss fields hold raw per-term
/// values averaged over the source-domain steps of the logged iteration;
/// probe and mAP fields are filled only when an evaluation ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub det_cls: f64,
    pub det_ctr: f64,
    pub det_reg: f64,
    pub adv: f64,
    pub domain_cls: f64,
    pub gate: f64,
    /// Raw gate loss per pyramid level (levels 3..7 in order).
    pub gate_per_level: Vec<f64>,
    /// Fraction of gate entries within 0.05 of 0 or 1.
    pub gate_binarization: f64,
    pub dsr_probe_acc: Option<f64>,
    pub dir_probe_acc: Option<f64>,
    pub unseen_map: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_contract() {
        let cfg = TrainConfig::default();
        assert!(cfg.learning_rate(0) < cfg.stage1_lr);
        assert!((cfg.learning_rate(0) - cfg.stage1_lr / 100.0).abs() < 1e-15);
        assert_eq!(cfg.learning_rate(cfg.warmup_iters), cfg.stage1_lr);
        assert_eq!(cfg.learning_rate(cfg.warmup_iters + 10), cfg.stage1_lr);
        let stage2_start = cfg.warmup_iters + cfg.stage1_iters;
        assert_eq!(cfg.learning_rate(stage2_start), cfg.stage1_lr / 10.0);
        assert_eq!(cfg.learning_rate(cfg.total_iters() + 5), cfg.stage1_lr / 10.0);
        // Monotone non-decreasing through warmup.
        for i in 1..cfg.warmup_iters {
            assert!(cfg.learning_rate(i) >= cfg.learning_rate(i - 1));
        }
    }

    #[test]
    fn defaults_match_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lambda_d_adv, 0.1);
        assert_eq!(cfg.lambda_d_cls, 0.01);
        assert_eq!(cfg.lambda_gate, 0.1);
        assert_eq!(cfg.s_init, 0.9999);
        assert_eq!(cfg.lambda_grl, 0.01);
        assert_eq!(cfg.batch_per_domain, 4);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.stage2_lr(), cfg.stage1_lr / 10.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = TrainConfig { seed: 11, stage1_iters: 50, ..TrainConfig::default() };
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        // Unspecified keys fall back to defaults.
        let partial = TrainConfig::from_toml("stage1_lr = 0.01\nseed = 3\n").unwrap();
        assert_eq!(partial.stage1_lr, 0.01);
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.momentum, 0.9);
        assert!(TrainConfig::from_toml("momentum = 1.5").is_err());
        assert!(TrainConfig::from_toml("s_init = 0.0").is_err());
    }
}
