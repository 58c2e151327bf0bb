//! Command-line front end: gradient checks, benchmark generation, training,
//! evaluation, ablation grids, and gate inspection.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gdifd_core::gradcheck::{run_gradient_suite, DEFAULT_TOL};
use gdifd_core::harness::{
    ablate, ablation_csv, evaluate, load_checkpoint, save_checkpoint, table4_grid, table5_grid,
    train, MetricsRecord, TrainConfig,
};
use gdifd_core::synth::{
    generate_sample, make_splits, save_png, style_separability, BenchmarkConfig, SplitPlan,
};
use gdifd_core::Tape;

#[derive(Parser)]
#[command(name = "gdifd", about = "Gated feature disentanglement on a toy detector", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference gradient suite and print one line per op.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Relative error tolerance.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 2026)]
        seed: u64,
    },
    /// Generate benchmark samples as PNGs plus a ground-truth manifest.
    Gen {
        /// Benchmark config TOML; defaults to the built-in 3-domain setup.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Samples per domain.
        #[arg(long, default_value_t = 4)]
        per_domain: u64,
        /// Also measure pairwise style separability probes.
        #[arg(long)]
        separability: bool,
    },
    /// Train a model and write metrics, a summary table, and a checkpoint.
    Train {
        /// Training config TOML; defaults mirror the paper protocol.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmark config TOML.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        splits: SplitArgs,
        #[command(flatten)]
        overrides: Overrides,
        /// Skip the post-training evaluation pass.
        #[arg(long)]
        no_eval: bool,
    },
    /// Evaluate a checkpoint on a freshly generated split plan.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the report JSON here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        splits: SplitArgs,
    },
    /// Train and evaluate an ablation grid, one cell at a time.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bench: Option<PathBuf>,
        /// Which grid: detection/alignment switches, gate shaping, or both.
        #[arg(long, value_parser = ["table4", "table5", "both"], default_value = "table4")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        splits: SplitArgs,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Dump per-level channel gate values for one sample as CSV + PGM strips.
    DumpGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Domain index styled into the probe sample.
        #[arg(long, default_value_t = 0)]
        domain: usize,
        /// Sample seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 120)]
    train_per_domain: u64,
    #[arg(long, default_value_t = 24)]
    val_per_domain: u64,
    #[arg(long, default_value_t = 64)]
    test_count: u64,
}

/// Flag overrides applied on top of the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    warmup_iters: Option<usize>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    no_dsrl: bool,
    #[arg(long)]
    no_dirl: bool,
    #[arg(long)]
    no_gate_loss: bool,
    #[arg(long)]
    no_special_init: bool,
}

impl Overrides {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.channels {
            c.channels = v;
        }
        if let Some(v) = self.warmup_iters {
            c.warmup_iters = v;
        }
        if let Some(v) = self.stage1_iters {
            c.stage1_iters = v;
        }
        if let Some(v) = self.stage2_iters {
            c.stage2_iters = v;
        }
        if let Some(v) = self.stage1_lr {
            c.stage1_lr = v;
        }
        if let Some(v) = self.log_every {
            c.log_every = v;
        }
        if self.no_dsrl {
            c.use_dsrl = false;
        }
        if self.no_dirl {
            c.use_dirl = false;
        }
        if self.no_gate_loss {
            c.use_gate_loss = false;
        }
        if self.no_special_init {
            c.use_special_init = false;
        }
        c
    }
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_toml(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_bench_config(path: &Option<PathBuf>) -> Result<BenchmarkConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(BenchmarkConfig::from_toml(&text)?)
        }
        None => Ok(BenchmarkConfig::default()),
    }
}

fn plan_for(bench: &BenchmarkConfig, splits: &SplitArgs) -> Result<SplitPlan> {
    Ok(make_splits(bench, splits.train_per_domain, splits.val_per_domain, splits.test_count)?)
}

fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "iteration,lr,total,det_cls,det_ctr,det_reg,adv,domain_cls,gate,gate_binarization\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}\n",
            r.iteration,
            r.lr,
            r.total,
            r.det_cls,
            r.det_ctr,
            r.det_reg,
            r.adv,
            r.domain_cls,
            r.gate,
            r.gate_binarization
        ));
    }
    out
}

fn write_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut jsonl = String::new();
    for r in records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    fs::write(dir.join("metrics.jsonl"), jsonl)?;
    fs::write(dir.join("summary.csv"), metrics_csv(records))?;
    Ok(())
}

fn cmd_gradcheck(instances: usize, tol: f64, seed: u64) -> Result<()> {
    let report = run_gradient_suite(instances, tol, seed)?;
    for e in &report.entries {
        println!(
            "{:26} instances {:3} coords {:6} max_rel_err {:.3e} {}",
            e.name,
            e.instances,
            e.coords_checked,
            e.max_rel_err,
            if e.passed { "pass" } else { "FAIL" }
        );
    }
    if !report.passed() {
        bail!("gradient suite failed");
    }
    println!("all {} entries passed (tol {tol:.1e})", report.entries.len());
    Ok(())
}

fn cmd_gen(config: Option<PathBuf>, out: PathBuf, per_domain: u64, separability: bool) -> Result<()> {
    let bench = load_bench_config(&config)?;
    fs::create_dir_all(&out)?;
    let mut manifest = String::new();
    for d in 0..bench.domains.len() {
        for seed in 0..per_domain {
            let sample = generate_sample(&bench, d, seed)?;
            let name = format!("{}_s{seed}.png", bench.domains[d].name);
            save_png(&sample.image, &out.join(&name))?;
            manifest.push_str(&serde_json::to_string(&serde_json::json!({
                "file": name,
                "domain": d,
                "seed": seed,
                "boxes": sample.gt.boxes,
                "classes": sample.gt.classes,
            }))?);
            manifest.push('\n');
        }
    }
    fs::write(out.join("manifest.jsonl"), manifest)?;
    fs::write(out.join("bench.toml"), bench.to_toml()?)?;
    println!("wrote {} samples per domain for {} domains to {}", per_domain, bench.domains.len(), out.display());
    if separability {
        for ((a, b), acc) in style_separability(&bench, 18)? {
            println!("separability {} vs {}: {:.3}", bench.domains[a].name, bench.domains[b].name, acc);
        }
    }
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    bench: Option<PathBuf>,
    out: PathBuf,
    splits: SplitArgs,
    overrides: Overrides,
    no_eval: bool,
) -> Result<()> {
    let config = overrides.apply(load_train_config(&config)?);
    let bench = load_bench_config(&bench)?;
    let plan = plan_for(&bench, &splits)?;
    fs::create_dir_all(&out)?;
    // Manifest first, so the exact setup survives an interrupted run.
    fs::write(out.join("train.toml"), config.to_toml()?)?;
    fs::write(out.join("bench.toml"), bench.to_toml()?)?;
    fs::write(out.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;

    let result = train(&config, &bench, &plan)?;
    write_metrics(&out, &result.metrics)?;
    save_checkpoint(out.join("checkpoint.json"), &result.model, &config, &bench)?;
    println!(
        "trained {} iterations ({} steps); checkpoint at {}",
        config.total_iters(),
        result.steps_taken,
        out.join("checkpoint.json").display()
    );
    if !no_eval {
        let report = evaluate(&result.model, &config, &bench, &plan)?;
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(out.join("eval.json"), &json)?;
        println!("{json}");
    }
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, out: Option<PathBuf>, splits: SplitArgs) -> Result<()> {
    let (model, ckpt) = load_checkpoint(&checkpoint)?;
    let plan = plan_for(&ckpt.benchmark, &splits)?;
    let report = evaluate(&model, &ckpt.train_config, &ckpt.benchmark, &plan)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = out {
        fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_ablate(
    config: Option<PathBuf>,
    bench: Option<PathBuf>,
    grid: String,
    out: PathBuf,
    splits: SplitArgs,
    overrides: Overrides,
) -> Result<()> {
    let base = overrides.apply(load_train_config(&config)?);
    let bench = load_bench_config(&bench)?;
    let plan = plan_for(&bench, &splits)?;
    let mut cells = Vec::new();
    if grid == "table4" || grid == "both" {
        cells.extend(table4_grid(&base));
    }
    if grid == "table5" || grid == "both" {
        cells.extend(table5_grid(&base));
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("base.toml"), base.to_toml()?)?;
    fs::write(out.join("bench.toml"), bench.to_toml()?)?;
    let results = ablate(&cells, &bench, &plan)?;
    let csv = ablation_csv(&results);
    fs::write(out.join("ablation.csv"), &csv)?;
    let mut jsonl = String::new();
    for cell in &results {
        jsonl.push_str(&serde_json::to_string(cell)?);
        jsonl.push('\n');
    }
    fs::write(out.join("cells.jsonl"), jsonl)?;
    print!("{csv}");
    Ok(())
}

/// 8-bit binary PGM with each gate drawn as a `cell`-pixel square.
fn gate_strip_pgm(gates: &[f64], cell: usize) -> Vec<u8> {
    let w = gates.len() * cell;
    let mut out = format!("P5\n{} {}\n255\n", w, cell).into_bytes();
    let mut row = Vec::with_capacity(w);
    for &g in gates {
        let v = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
        row.extend(std::iter::repeat(v).take(cell));
    }
    for _ in 0..cell {
        out.extend_from_slice(&row);
    }
    out
}

fn cmd_dump_gates(checkpoint: PathBuf, out: PathBuf, domain: usize, seed: u64) -> Result<()> {
    let (model, ckpt) = load_checkpoint(&checkpoint)?;
    if domain >= ckpt.benchmark.domains.len() {
        bail!("domain {domain} out of range ({} styles)", ckpt.benchmark.domains.len());
    }
    let sample = generate_sample(&ckpt.benchmark, domain, seed)?;
    let shape = sample.image.shape().to_vec();
    let image =
        gdifd_core::Array::from_vec(&[1, 3, shape[1], shape[2]], sample.image.data().to_vec())?;
    let mut tape = Tape::new();
    let input = tape.constant(image);
    let levels = model.forward(&mut tape, input)?;

    fs::create_dir_all(&out)?;
    let mut csv = String::from("level,stride,channel_gates\n");
    for lv in &levels {
        let gates: Vec<f64> = tape.value(lv.gates).data().to_vec();
        let list = gates.iter().map(|g| format!("{g:.6}")).collect::<Vec<_>>().join(";");
        csv.push_str(&format!("{},{},{}\n", lv.level, lv.stride, list));
        fs::write(out.join(format!("gates_l{}.pgm", lv.level)), gate_strip_pgm(&gates, 12))?;
    }
    fs::write(out.join("gates.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gradcheck { instances, tol, seed } => cmd_gradcheck(instances, tol, seed),
        Command::Gen { config, out, per_domain, separability } => {
            cmd_gen(config, out, per_domain, separability)
        }
        Command::Train { config, bench, out, splits, overrides, no_eval } => {
            cmd_train(config, bench, out, splits, overrides, no_eval)
        }
        Command::Eval { checkpoint, out, splits } => cmd_eval(checkpoint, out, splits),
        Command::Ablate { config, bench, grid, out, splits, overrides } => {
            cmd_ablate(config, bench, grid, out, splits, overrides)
        }
        Command::DumpGates { checkpoint, out, domain, seed } => {
            cmd_dump_gates(checkpoint, out, domain, seed)
        }
    }
}
