//! Run configuration, loaded from JSON with CLI overrides applied on top.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{LayerKind, MiniDiTConfig};
use crate::data::SynthSpec;
use crate::diffusion::{SamplerConfig, TimestepSampling};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::moe::{ProMoeLayerConfig, TcMoeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// FFN-slot variants selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Promoe,
    Dense,
    TcMoe,
    KmeansRouter,
    ClsRouter,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Promoe,
        Variant::Dense,
        Variant::TcMoe,
        Variant::KmeansRouter,
        Variant::ClsRouter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Promoe => "promoe",
            Variant::Dense => "dense",
            Variant::TcMoe => "tc_moe",
            Variant::KmeansRouter => "kmeans_router",
            Variant::ClsRouter => "cls_router",
        }
    }

    /// Default layer for this variant; routed variants use 12 standard
    /// experts and one shared expert.
    pub fn default_layer(self) -> LayerKind {
        match self {
            Variant::Promoe => LayerKind::Promoe(ProMoeLayerConfig::default()),
            Variant::Dense => LayerKind::Dense,
            Variant::TcMoe => LayerKind::TcMoe(TcMoeConfig::default()),
            Variant::KmeansRouter => LayerKind::KmeansRouter {
                n_experts: 12,
                n_shared: 1,
            },
            Variant::ClsRouter => LayerKind::ClsRouter { n_shared: 1 },
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "variant",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: MiniDiTConfig,
    pub objective: Objective,
    pub timesteps: TimestepSampling,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + n) / (10 + n))` at update `n`.
    pub ema_warmup: bool,
    pub seed: u64,
    pub data: SynthSpec,
    pub sampler: SamplerConfig,
    /// Steps between diversity evaluations (the final step is always evaluated).
    pub eval_interval: usize,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Singular directions compared per expert.
    pub subspace_k: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MiniDiTConfig::default(),
            objective: Objective::Rf,
            timesteps: TimestepSampling::LogitNormal,
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            steps: 5000,
            ema_decay: 0.9999,
            ema_warmup: true,
            seed: 0,
            data: SynthSpec::default(),
            sampler: SamplerConfig::default(),
            eval_interval: 1000,
            checkpoint_interval: 0,
            subspace_k: crate::metrics::DEFAULT_SUBSPACE_K,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn variant(&self) -> Variant {
        match self.model.layer {
            LayerKind::Dense => Variant::Dense,
            LayerKind::Promoe(_) => Variant::Promoe,
            LayerKind::TcMoe(_) => Variant::TcMoe,
            LayerKind::KmeansRouter { .. } => Variant::KmeansRouter,
            LayerKind::ClsRouter { .. } => Variant::ClsRouter,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        if self.variant() != v {
            self.model.layer = v.default_layer();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.sampler.validate()?;
        if self.model.num_classes != self.data.num_classes
            || self.model.num_superclasses != self.data.num_superclasses
            || self.model.image_size != self.data.image_size
            || self.model.patch_size != self.data.patch_size
            || self.model.channels != 1
        {
            return Err(Error::Config("model and data shapes disagree".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"steps": 7, "model": {"layer": {"variant": "dense"}}}"#).unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.variant(), Variant::Dense);
        assert_eq!(partial.batch_size, 32);
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(RunConfig::default().with_variant(v).variant(), v);
        }
        assert!(matches!("moe".parse::<Variant>(), Err(Error::Unknown { .. })));
    }
}
