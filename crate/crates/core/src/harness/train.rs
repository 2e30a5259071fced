//! The seeded training loop.

use std::io::Write;
use std::path::Path;

use crate::backbone::{apply_label_dropout, denoise, patchify, Conditioning, FfnParams, ForwardOptions, MiniDiT, RouterState};
use crate::data::generate_batch;
use crate::diffusion::{add_noise, sample_training_times, Schedule};
use crate::error::{Error, Result};
use crate::experts::ExpertFfn;
use crate::losses::{diffusion_loss, make_target};
use crate::metrics::{expert_diversity, usage_stats, DiversityReport};
use crate::moe::RoutingLog;
use crate::params::{bind, grads, ParamTree};
use crate::rng::{normal_tensor, stream, Purpose};
use crate::router::kmeans_update;
use crate::tensor::{Real, Tensor};
use crate::Tape;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::{ema_decay_at, ema_update, Adam};

/// Parameter precision used for training.
pub type TrainScalar = f32;

pub const METRICS_HEADER: &str = "step,loss,diffusion,rcl,load_balance,cls,usage_entropy,diversity";

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub diffusion: f64,
    pub rcl: f64,
    pub load_balance: f64,
    pub cls: f64,
    /// Mean normalized usage entropy over routed layers (NaN for dense).
    pub usage_entropy: f64,
    /// Mean expert subspace similarity over layers, on evaluation steps.
    pub diversity: Option<f64>,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let div = self.diversity.map(|d| d.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.loss, self.diffusion, self.rcl, self.load_balance, self.cls, self.usage_entropy, div
        )
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub config: RunConfig,
    pub model: MiniDiT<Tensor<T>>,
    pub ema: MiniDiT<Tensor<T>>,
    pub router: RouterState<T>,
    pub records: Vec<StepRecord>,
    /// Per-layer diversity of the final weights (empty for dense).
    pub diversity: Vec<DiversityReport>,
    /// Routing logs of the last training step.
    pub last_routing: Vec<RoutingLog>,
}

impl<T: Real> TrainRun<T> {
    /// Mean diffusion loss over the last `n` steps.
    pub fn final_loss(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.diffusion).sum::<f64>() / tail.len().max(1) as f64
    }

    /// Mean usage entropy over the last `n` steps.
    pub fn final_entropy(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.usage_entropy).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn mean_diversity(&self) -> Option<f64> {
        (!self.diversity.is_empty())
            .then(|| self.diversity.iter().map(|d| d.mean).sum::<f64>() / self.diversity.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::from_run(self.records.len(), &self.config, &self.model, &self.ema, &self.router)
    }
}

/// Standard (routed) experts of a block, if it has any.
pub fn standard_experts<T>(ffn: &FfnParams<Tensor<T>>) -> Option<&[ExpertFfn<Tensor<T>>]> {
    match ffn {
        FfnParams::Dense(_) => None,
        FfnParams::Promoe(p) => Some(&p.pool.standard),
        FfnParams::TcMoe(p) => Some(&p.pool.standard),
        FfnParams::Kmeans(p) => Some(&p.standard),
        FfnParams::Cls(p) => Some(&p.pool.standard),
    }
}

pub fn model_diversity<T: Real>(model: &MiniDiT<Tensor<T>>, k: usize) -> Result<Vec<DiversityReport>> {
    model
        .blocks
        .iter()
        .filter_map(|b| standard_experts(&b.ffn))
        .map(|experts| expert_diversity(experts, k))
        .collect()
}

fn non_finite_params<T: Real>(model: &MiniDiT<Tensor<T>>) -> Vec<String> {
    let mut out = Vec::new();
    model.visit("", &mut |name, t| {
        if !t.is_finite() {
            out.push(name.to_string());
        }
    });
    out
}

struct Outputs {
    metrics: std::io::BufWriter<std::fs::File>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
        let path = dir.join("metrics.csv");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut metrics = std::io::BufWriter::new(f);
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { metrics })
    }

    fn row(&mut self, dir: &Path, r: &StepRecord) -> Result<()> {
        writeln!(self.metrics, "{}", r.csv_row()).map_err(|e| Error::io(dir.join("metrics.csv"), e))
    }
}

pub fn checkpoint_name(step: Option<usize>) -> String {
    match step {
        Some(s) => format!("checkpoint_{s:06}.bin"),
        None => "checkpoint_final.bin".to_string(),
    }
}

/// Trains with `f32` parameters; see [`train_with`].
pub fn train(cfg: &RunConfig) -> Result<TrainRun<TrainScalar>> {
    train_with(cfg, |_| {})
}

/// Runs the loop, calling `observe` after every step.
pub fn train_with<F: FnMut(&StepRecord)>(cfg: &RunConfig, mut observe: F) -> Result<TrainRun<TrainScalar>> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mcfg = &cfg.model;
    let schedule = Schedule::for_objective(cfg.objective);
    let mut model = MiniDiT::<Tensor<TrainScalar>>::init(mcfg, seed)?;
    let mut ema = model.clone();
    let mut router = RouterState::new(mcfg.depth);
    let mut opt = Adam::new(cfg.optimizer);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut last_routing = Vec::new();
    let dir = cfg.output_dir.clone();
    let mut outputs = match &dir {
        Some(d) => Some(Outputs::create(d, cfg)?),
        None => None,
    };
    let kmeans = matches!(mcfg.layer, crate::backbone::LayerKind::KmeansRouter { .. });

    for step in 0..cfg.steps {
        let s = step as u64;
        let batch = generate_batch::<TrainScalar, _>(&cfg.data, cfg.batch_size, &mut stream(seed, Purpose::Data, s))?;
        let labels = apply_label_dropout(
            &batch.labels,
            mcfg.label_dropout_prob,
            mcfg.null_label(),
            &mut stream(seed, Purpose::LabelDropout, s),
        );
        let t = sample_training_times(&schedule, cfg.timesteps, cfg.batch_size, &mut stream(seed, Purpose::Timestep, s));
        let eps: Tensor<TrainScalar> = normal_tensor(&mut stream(seed, Purpose::Noise, s), batch.images.shape(), 1.0);
        let x_t = add_noise(&batch.images, &eps, &t, &schedule)?;
        let target = patchify(&make_target(cfg.objective, &batch.images, &eps)?, mcfg.patch_size)?;
        let t_model: Vec<f64> = t.iter().map(|&v| schedule.model_time(v)).collect();

        let mut tape = Tape::new();
        let bound = bind(&model, &mut tape);
        let opts = ForwardOptions {
            conditioning: Conditioning::Training,
            superclass: Some(&batch.superclass),
            record_ffn_inputs: kmeans,
            seed,
        };
        let out = denoise(&mut tape, &bound, mcfg, &mut router, &x_t, &t_model, &labels, opts)?;
        let target = tape.constant(target);
        let diff = diffusion_loss(&mut tape, out.pred, target)?;
        let loss = tape.add(diff, out.aux)?;

        let loss_v = tape.value(loss).item().as_f64();
        let diff_v = tape.value(diff).item().as_f64();
        let mean_of = |f: fn(&RoutingLog) -> f64| {
            if out.routing.is_empty() {
                0.0
            } else {
                out.routing.iter().map(f).sum::<f64>() / out.routing.len() as f64
            }
        };
        let (rcl, lb, cls) = (mean_of(|r| r.rcl), mean_of(|r| r.load_balance), mean_of(|r| r.cls));
        if !loss_v.is_finite() {
            let detail = format!(
                "loss {loss_v}, diffusion {diff_v}, rcl {rcl}, load_balance {lb}, cls {cls}; non-finite parameters: {:?}",
                non_finite_params(&model)
            );
            if let Some(d) = &dir {
                let p = d.join(format!("nonfinite_step{step:06}.txt"));
                std::fs::write(&p, &detail).map_err(|e| Error::io(&p, e))?;
            }
            return Err(Error::NonFinite { step, detail });
        }

        tape.backward(loss)?;
        let g = grads(&bound, &tape);
        drop(tape);
        opt.update(&mut model, &g)?;
        ema_update(&mut ema, &model, ema_decay_at(cfg.ema_decay, cfg.ema_warmup, s));

        if kmeans {
            for (l, log) in out.routing.iter().enumerate() {
                if let Some(state) = router.kmeans[l].as_ref() {
                    let x: Tensor<TrainScalar> = out.ffn_inputs[l].cast();
                    router.kmeans[l] = Some(kmeans_update(&x, &log.gating.indices, state)?);
                }
            }
        }

        let usage_entropy = if out.routing.is_empty() {
            f64::NAN
        } else {
            out.routing.iter().map(|r| usage_stats(r).entropy).sum::<f64>() / out.routing.len() as f64
        };
        let is_last = step + 1 == cfg.steps;
        let eval = is_last || (cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0);
        let diversity = if eval {
            let reports = model_diversity(&model, cfg.subspace_k)?;
            (!reports.is_empty()).then(|| reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64)
        } else {
            None
        };
        let record = StepRecord {
            step,
            loss: loss_v,
            diffusion: diff_v,
            rcl,
            load_balance: lb,
            cls,
            usage_entropy,
            diversity,
        };
        if let (Some(o), Some(d)) = (outputs.as_mut(), &dir) {
            o.row(d, &record)?;
        }
        observe(&record);
        if step % 500 == 0 || is_last {
            log::info!(
                "step {step}: loss {loss_v:.5} (diffusion {diff_v:.5}, rcl {rcl:.4}) entropy {usage_entropy:.3}"
            );
        }
        records.push(record);
        last_routing = out.routing;

        if let Some(d) = &dir {
            if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 && !is_last {
                Checkpoint::from_run(step + 1, cfg, &model, &ema, &router).save(&d.join(checkpoint_name(Some(step + 1))))?;
            }
        }
    }

    if let (Some(mut o), Some(d)) = (outputs, &dir) {
        o.metrics.flush().map_err(|e| Error::io(d.join("metrics.csv"), e))?;
        Checkpoint::from_run(cfg.steps, cfg, &model, &ema, &router).save(&d.join(checkpoint_name(None)))?;
    }
    let diversity = model_diversity(&model, cfg.subspace_k)?;
    Ok(TrainRun {
        config: cfg.clone(),
        model,
        ema,
        router,
        records,
        diversity,
        last_routing,
    })
}
