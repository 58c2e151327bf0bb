//! The training loop: one SGD step per source domain per iteration, in a
//! fixed round-robin, with per-epoch reshuffled sample order and the
//! warmup/stage-1/stage-2 learning rate schedule. Also the ablation driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, EvalReport};
use super::loss::{total_loss, Batch, LossValues};
use super::{MetricsRecord, TrainConfig};
use crate::align::DomainLabel;
use crate::error::{Error, Result};
use crate::model::GdifdModel;
use crate::nn::SgdOptimizer;
use crate::synth::{generate_range, splitmix64, BenchmarkConfig, DetectionSample, SplitPlan};
use crate::tape::Tape;

#[derive(Debug)]
pub struct TrainOutput {
    pub model: GdifdModel,
    pub metrics: Vec<MetricsRecord>,
    /// Total optimizer steps taken (iterations x source domains).
    pub steps_taken: usize,
}

/// Deterministic per-domain batch sampler: walks a permutation of the pool,
/// reshuffling with a (seed, slot, epoch)-keyed RNG when exhausted.
struct DomainSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    slot: u64,
}

impl DomainSampler {
    fn new(pool_len: usize, seed: u64, slot: u64) -> Self {
        let mut s = DomainSampler { order: (0..pool_len).collect(), pos: 0, epoch: 0, seed, slot };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let key = splitmix64(self.seed ^ (self.slot << 40) ^ self.epoch.wrapping_mul(0x9E37));
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos == self.order.len() {
                self.pos = 0;
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn binarization_fraction(entries: &[f64]) -> f64 {
    if entries.is_empty() {
        return 0.0;
    }
    let near = entries.iter().filter(|&&v| v <= 0.05 || v >= 0.95).count();
    near as f64 / entries.len() as f64
}

pub fn train(
    config: &TrainConfig,
    bench: &BenchmarkConfig,
    plan: &SplitPlan,
) -> Result<TrainOutput> {
    config.validate()?;
    bench.validate()?;
    plan.validate(bench)?;
    let m = plan.source_domains.len();
    let mut model = GdifdModel::new(config.model_config(bench.num_classes, m))?;

    let mut pools: Vec<Vec<DetectionSample>> = Vec::with_capacity(m);
    let mut samplers: Vec<DomainSampler> = Vec::with_capacity(m);
    for (slot, &(domain, range)) in plan.train.iter().enumerate() {
        let pool = generate_range(bench, domain, range)?;
        samplers.push(DomainSampler::new(pool.len(), config.seed, slot as u64));
        pools.push(pool);
    }

    let mut opt = SgdOptimizer::new(config.stage1_lr, config.momentum, config.weight_decay);
    let mut metrics = Vec::new();
    let mut steps_taken = 0usize;
    let total_iters = config.total_iters();
    for iteration in 0..total_iters {
        opt.learning_rate = config.learning_rate(iteration);
        let log_now = iteration % config.log_every == 0 || iteration + 1 == total_iters;
        let mut step_values: Vec<LossValues> = Vec::with_capacity(m);
        let mut gate_entries: Vec<f64> = Vec::new();
        for slot in 0..m {
            let idxs = samplers[slot].next_batch(config.batch_per_domain);
            let refs: Vec<&DetectionSample> = idxs.iter().map(|&i| &pools[slot][i]).collect();
            let batch = Batch::with_label(&refs, DomainLabel::new(slot, m)?)?;
            let mut tape = Tape::new();
            let graph = total_loss(&mut tape, &model, &batch, config)?;
            let values = graph.values(&tape);
            if !values.total.is_finite() {
                return Err(Error::invalid(format!(
                    "loss diverged at iteration {iteration} (domain slot {slot}): {}",
                    values.total
                )));
            }
            tape.backward(graph.total)?;
            opt.step(&mut model.parameters_mut(), &tape)?;
            steps_taken += 1;
            // The detection losses saturate under their log clamps, so a
            // blown-up model can keep producing finite loss values. Catch
            // divergence at the weights as well.
            for (name, p) in model.named_parameters() {
                if !p.value.data().iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "parameters diverged at iteration {iteration} \
                         (domain slot {slot}, first bad tensor {name})"
                    )));
                }
            }
            if log_now {
                for lt in &graph.levels {
                    gate_entries.extend_from_slice(tape.value(lt.gates).data());
                }
                step_values.push(values);
            }
        }
        if log_now {
            metrics.push(average_record(iteration, opt.learning_rate, &step_values, &gate_entries));
        }
    }
    Ok(TrainOutput { model, metrics, steps_taken })
}

fn average_record(
    iteration: usize,
    lr: f64,
    step_values: &[LossValues],
    gate_entries: &[f64],
) -> MetricsRecord {
    let n = step_values.len().max(1) as f64;
    let levels = step_values.first().map_or(0, |v| v.gate_per_level.len());
    let mut rec = MetricsRecord {
        iteration,
        lr,
        total: 0.0,
        det_cls: 0.0,
        det_ctr: 0.0,
        det_reg: 0.0,
        adv: 0.0,
        domain_cls: 0.0,
        gate: 0.0,
        gate_per_level: vec![0.0; levels],
        gate_binarization: binarization_fraction(gate_entries),
        dsr_probe_acc: None,
        dir_probe_acc: None,
        unseen_map: None,
    };
    for v in step_values {
        rec.total += v.total / n;
        rec.det_cls += v.det_cls / n;
        rec.det_ctr += v.det_ctr / n;
        rec.det_reg += v.det_reg / n;
        rec.adv += v.adv / n;
        rec.domain_cls += v.domain_cls / n;
        rec.gate += v.gate / n;
        for (acc, g) in rec.gate_per_level.iter_mut().zip(&v.gate_per_level) {
            *acc += g / n;
        }
    }
    rec
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationCell {
    pub name: String,
    pub config: TrainConfig,
    pub report: EvalReport,
    pub final_metrics: MetricsRecord,
}

/// Detection-vs-alignment grid: both switches off (plain detector), each
/// alone, both together.
pub fn table4_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [
        ("base", false, false),
        ("dsrl", true, false),
        ("dirl", false, true),
        ("dsrl+dirl", true, true),
    ]
    .into_iter()
    .map(|(name, dsrl, dirl)| {
        (name.to_string(), TrainConfig { use_dsrl: dsrl, use_dirl: dirl, ..base.clone() })
    })
    .collect()
}

/// Gate-shaping grid: gate loss and special bias init toggled with both
/// representation losses kept on.
pub fn table5_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [
        ("plain-gate", false, false),
        ("gate-loss", true, false),
        ("special-init", false, true),
        ("gate-loss+special-init", true, true),
    ]
    .into_iter()
    .map(|(name, gate, init)| {
        (
            name.to_string(),
            TrainConfig {
                use_dsrl: true,
                use_dirl: true,
                use_gate_loss: gate,
                use_special_init: init,
                ..base.clone()
            },
        )
    })
    .collect()
}

/// Train and evaluate every cell of a grid with the shared benchmark and
/// split plan. Cells run sequentially and independently.
pub fn ablate(
    cells: &[(String, TrainConfig)],
    bench: &BenchmarkConfig,
    plan: &SplitPlan,
) -> Result<Vec<AblationCell>> {
    let mut out = Vec::with_capacity(cells.len());
    for (name, config) in cells {
        let trained = train(config, bench, plan)?;
        let report = evaluate(&trained.model, config, bench, plan)?;
        let final_metrics = trained
            .metrics
            .last()
            .cloned()
            .ok_or_else(|| Error::invalid("training produced no metrics"))?;
        out.push(AblationCell { name: name.clone(), config: config.clone(), report, final_metrics });
    }
    Ok(out)
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Summary table, one row per cell, with each cell's full config embedded as
/// a JSON column for auditability.
pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from(
        "name,use_dsrl,use_dirl,use_gate_loss,use_special_init,unseen_map,\
         dsr_probe_acc,dir_probe_acc,gate_binarization,final_total_loss,config\n",
    );
    for c in cells {
        let config_json = serde_json::to_string(&c.config).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            csv_escape(&c.name),
            c.config.use_dsrl,
            c.config.use_dirl,
            c.config.use_gate_loss,
            c.config.use_special_init,
            c.report.map,
            c.report.dsr_probe_acc,
            c.report.dir_probe_acc,
            c.report.gate_binarization,
            c.final_metrics.total,
            csv_escape(&config_json),
        ));
    }
    out
}
