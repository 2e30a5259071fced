use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use promoe::backbone::{apply_label_dropout, predict, Conditioning};
use promoe::data::generate_batch;
use promoe::diffusion::{add_noise, sample_training_times, Schedule};
use promoe::gradcheck::{suite, Scope};
use promoe::harness::ablate::{self, Preset};
use promoe::harness::train::{model_diversity, standard_experts};
use promoe::harness::{sample, train, write_samples, Checkpoint, RunConfig, TrainScalar, Variant};
use promoe::metrics::{export_assignments, usage_stats};
use promoe::rng::{normal_tensor, stream, Purpose};

#[derive(Parser)]
#[command(name = "promoe", version, about = "Prototypical MoE diffusion transformers at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics.csv, config.json and checkpoints.
    Train(RunArgs),
    /// Sample from a checkpoint's EMA weights and score with the data oracle.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// ops, layer or full
        #[arg(long, default_value = "full")]
        scope: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation preset and write one CSV row per cell.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// activation, load-balance, rcl, lambda, experts or variants
        #[arg(long)]
        preset: String,
    },
    /// Expert diversity and parameter counts of a checkpoint.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Singular directions compared per expert.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route one seeded training batch through a checkpoint and write
    /// assignments.csv.
    ExportAssignments {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// promoe, dense, tc_moe, kmeans_router or cls_router
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(v) = &self.variant {
            let v: Variant = v.parse()?;
            if v != cfg.variant() {
                cfg = cfg.with_variant(v);
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(w) = self.cfg_scale {
            cfg.sampler.cfg_scale = w;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<TrainScalar>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let run = train(&cfg)?;
    println!(
        "{} seed {} steps {}: final loss {:.6} usage entropy {:.4} diversity {}",
        cfg.variant().name(),
        cfg.seed,
        cfg.steps,
        run.final_loss(100),
        run.final_entropy(100),
        run.mean_diversity().map_or("n/a".to_string(), |d| format!("{d:.4}")),
    );
    if let Some(d) = &cfg.output_dir {
        println!("wrote {}", d.display());
    }
    Ok(())
}

fn cmd_sample(args: &RunArgs, checkpoint: &Path, n: usize) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = args.apply(ck.config.clone())?;
    cfg.model = ck.config.model;
    let (_, ema, router) = ck.into_run()?;
    let samples = sample(&cfg, &ema, &router, n, cfg.sampler.cfg_scale)?;
    let r = &samples.report;
    match r.accuracy {
        Some(a) => println!("{n} samples at cfg {}: oracle accuracy {a:.4}", r.cfg_scale),
        None => println!("no samples drawn"),
    }
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("samples"));
    write_samples(&dir, &samples)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(scope: &str, out: Option<&Path>) -> Result<()> {
    let scope: Scope = scope.parse()?;
    let report = suite(scope)?;
    for e in &report {
        println!(
            "{} {:<28} rel {:.3e} (tol {:.0e})",
            if e.passed { "PASS" } else { "FAIL" },
            e.check.name,
            e.check.rel_error,
            e.tolerance
        );
    }
    if let Some(p) = out {
        write_json(p, &serde_json::to_value(&report)?)?;
    }
    let failed = report.iter().filter(|e| !e.passed).count();
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", report.len());
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs, preset: &str) -> Result<()> {
    let preset: Preset = preset.parse()?;
    let cfg = args.config()?;
    let rows = ablate::run(preset, &cfg, args.out.as_deref())?;
    println!("{}", ablate::ABLATION_HEADER);
    for r in rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn cmd_metrics(checkpoint: &Path, k: Option<usize>, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let k = k.unwrap_or(ck.config.subspace_k);
    let step = ck.step;
    let cfg = ck.config.clone();
    let (model, ema, _) = ck.into_run()?;
    let layers: Vec<_> = model.blocks.iter().map(|b| standard_experts(&b.ffn).map(|e| e.len())).collect();
    let report = json!({
        "step": step,
        "variant": cfg.variant().name(),
        "k": k,
        "parameters": promoe::params::count(&model),
        "standard_experts": layers,
        "diversity": model_diversity(&model, k)?,
        "ema_diversity": model_diversity(&ema, k)?,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_export(args: &RunArgs, checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let step = ck.step;
    let mut cfg = args.apply(ck.config.clone())?;
    cfg.model = ck.config.model;
    let (_, ema, mut router) = ck.into_run()?;
    let m = &cfg.model;
    let schedule = Schedule::for_objective(cfg.objective);
    let s = step as u64;
    let batch = generate_batch::<TrainScalar, _>(&cfg.data, cfg.batch_size, &mut stream(cfg.seed, Purpose::Data, s))?;
    let labels = apply_label_dropout(
        &batch.labels,
        m.label_dropout_prob,
        m.null_label(),
        &mut stream(cfg.seed, Purpose::LabelDropout, s),
    );
    let t = sample_training_times(&schedule, cfg.timesteps, cfg.batch_size, &mut stream(cfg.seed, Purpose::Timestep, s));
    let eps = normal_tensor(&mut stream(cfg.seed, Purpose::Noise, s), batch.images.shape(), 1.0);
    let x_t = add_noise(&batch.images, &eps, &t, &schedule)?;
    let t_model: Vec<f64> = t.iter().map(|&v| schedule.model_time(v)).collect();
    let (_, routing) = predict(&ema, m, &mut router, &x_t, &t_model, &labels, Conditioning::Training)?;
    if routing.is_empty() {
        bail!("the {} variant has no routed layers", cfg.variant().name());
    }
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let path = dir.join("assignments.csv");
    std::fs::create_dir_all(&dir)?;
    let records: Vec<_> = routing.iter().enumerate().map(|(l, r)| (step, l, r)).collect();
    export_assignments(&path, &records)?;
    for (l, r) in routing.iter().enumerate() {
        println!("layer {l}: usage entropy {:.4}", usage_stats(r).entropy);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample { run, checkpoint, n } => cmd_sample(run, checkpoint, *n),
        Command::Gradcheck { scope, out } => cmd_gradcheck(scope, out.as_deref()),
        Command::Ablate { run, preset } => cmd_ablate(run, preset),
        Command::Metrics { checkpoint, k, out } => cmd_metrics(checkpoint, *k, out.as_deref()),
        Command::ExportAssignments { run, checkpoint } => cmd_export(run, checkpoint),
    }
}
