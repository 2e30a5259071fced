//! Sampling from a trained run and scoring with the data oracle.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{MiniDiT, RouterState};
use crate::data::oracle_classify;
use crate::diffusion::{ddpm_sample, initial_noise, rf_euler_sample, ModelDenoiser, Schedule};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::router::PartitionSource;
use crate::rng::{stream, Purpose};
use crate::tensor::{Real, Tensor};

use super::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub n: usize,
    pub cfg_scale: f64,
    pub steps: usize,
    pub objective: Objective,
    pub accuracy: Option<f64>,
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Partition source of the first routed layer, per network call.
    pub sources: Vec<PartitionSource>,
    /// Unconditional-token counts per network call.
    pub uncond_tokens: Vec<usize>,
}

impl SampleReport {
    pub fn used_batch_mask(&self) -> bool {
        self.sources.contains(&PartitionSource::BatchMask)
    }
}

pub struct Samples<T> {
    /// `[n, C, H, W]`
    pub images: Tensor<T>,
    pub report: SampleReport,
}

/// Draws `n` samples with labels `i mod num_classes` from `model` (normally
/// the EMA weights). Batches follow `cfg.batch_size`.
pub fn sample<T: Real>(
    cfg: &RunConfig,
    model: &MiniDiT<Tensor<T>>,
    router: &RouterState<T>,
    n: usize,
    cfg_scale: f64,
) -> Result<Samples<T>> {
    let mcfg = &cfg.model;
    let mut sampler = cfg.sampler;
    sampler.cfg_scale = cfg_scale;
    sampler.validate()?;
    let schedule = Schedule::for_objective(cfg.objective);
    let shape = [mcfg.channels, mcfg.image_size, mcfg.image_size];
    let labels: Vec<usize> = (0..n).map(|i| i % mcfg.num_classes).collect();
    let mut den = ModelDenoiser::new(model, mcfg, router.clone());
    let mut parts = Vec::new();
    for (b, chunk) in labels.chunks(cfg.batch_size.max(1)).enumerate() {
        let mut rng = stream(cfg.seed, Purpose::Sampler, b as u64);
        let x = initial_noise::<T, _>(&mut rng, chunk.len(), &shape);
        let out = match cfg.objective {
            Objective::Rf => rf_euler_sample(&mut den, x, chunk, sampler.steps, cfg_scale)?,
            Objective::Ddpm => ddpm_sample(&mut den, &schedule, x, chunk, &sampler, &mut rng)?,
        };
        parts.push(out);
    }
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    let images = if parts.is_empty() {
        Tensor::zeros(full)
    } else {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?
    };
    let predicted = if n == 0 { Vec::new() } else { oracle_classify(&images, &cfg.data)? };
    let accuracy = (n > 0).then(|| predicted.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64);
    Ok(Samples {
        images,
        report: SampleReport {
            n,
            cfg_scale,
            steps: sampler.steps,
            objective: cfg.objective,
            accuracy,
            labels,
            predicted,
            sources: den.sources,
            uncond_tokens: den.uncond_tokens,
        },
    })
}

/// Writes `report.json`, `samples.bin` (raw little-endian f32, `[n, C, H, W]`)
/// and `samples.csv` (`index,label,predicted`).
pub fn write_samples<T: Real>(dir: &Path, samples: &Samples<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("report.json");
    let json = serde_json::to_string_pretty(&samples.report).map_err(|e| Error::Json { path: p.clone(), source: e })?;
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("samples.bin");
    let bytes: Vec<u8> = samples
        .images
        .data()
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect();
    std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("samples.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
    let r = &samples.report;
    let io = |e| Error::io(&p, e);
    writeln!(f, "index,label,predicted").map_err(io)?;
    for (i, (l, q)) in r.labels.iter().zip(&r.predicted).enumerate() {
        writeln!(f, "{i},{l},{q}").map_err(io)?;
    }
    f.flush().map_err(io)
}
