//! Named ablation matrices run with shared seeds.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::backbone::LayerKind;
use crate::error::{Error, Result};
use crate::moe::ProMoeLayerConfig;
use crate::router::ScoreActivation;

use super::config::{RunConfig, Variant};
use super::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Identity, sigmoid and softmax score activations.
    Activation,
    /// RCL alone vs RCL plus the load-balance loss.
    LoadBalance,
    /// RCL weight 0 vs 1.
    Rcl,
    /// RCL weight over {1, 2, 5, 10}.
    Lambda,
    /// {4, 8, 14, 16} total experts, one shared and one unconditional each.
    Experts,
    /// Every layer variant.
    Variants,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Activation,
        Preset::LoadBalance,
        Preset::Rcl,
        Preset::Lambda,
        Preset::Experts,
        Preset::Variants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Activation => "activation",
            Preset::LoadBalance => "load-balance",
            Preset::Rcl => "rcl",
            Preset::Lambda => "lambda",
            Preset::Experts => "experts",
            Preset::Variants => "variants",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "ablation preset",
                name: s.to_string(),
            })
    }
}

fn promoe_cfg(base: &RunConfig) -> ProMoeLayerConfig {
    match &base.model.layer {
        LayerKind::Promoe(c) => *c,
        _ => ProMoeLayerConfig::default(),
    }
}

fn with_promoe(base: &RunConfig, f: impl FnOnce(&mut ProMoeLayerConfig)) -> RunConfig {
    let mut c = promoe_cfg(base);
    f(&mut c);
    let mut cfg = base.clone();
    cfg.model.layer = LayerKind::Promoe(c);
    cfg
}

/// The `(cell name, config)` matrix of `preset`; every cell keeps `base.seed`.
pub fn cells(preset: Preset, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match preset {
        Preset::Activation => [
            ("identity", ScoreActivation::Identity),
            ("sigmoid", ScoreActivation::Sigmoid),
            ("softmax", ScoreActivation::Softmax),
        ]
        .into_iter()
        .map(|(n, a)| (n.to_string(), with_promoe(base, |c| c.activation = a)))
        .collect(),
        Preset::LoadBalance => [("rcl", 0.0), ("rcl+lb", 0.01)]
            .into_iter()
            .map(|(n, w)| (n.to_string(), with_promoe(base, |c| c.load_balance_weight = w)))
            .collect(),
        Preset::Rcl => [0.0, 1.0]
            .into_iter()
            .map(|l| (format!("lambda={l}"), with_promoe(base, |c| c.rcl.lambda_rcl = l)))
            .collect(),
        Preset::Lambda => [1.0, 2.0, 5.0, 10.0]
            .into_iter()
            .map(|l| (format!("lambda={l}"), with_promoe(base, |c| c.rcl.lambda_rcl = l)))
            .collect(),
        Preset::Experts => [4, 8, 14, 16]
            .into_iter()
            .map(|total| {
                let cfg = with_promoe(base, |c| {
                    c.n_shared = 1;
                    c.n_uncond = 1;
                    c.n_experts = total - 2;
                });
                let name = match &cfg.model.layer {
                    LayerKind::Promoe(c) => c.to_string(),
                    _ => unreachable!(),
                };
                (name, cfg)
            })
            .collect(),
        Preset::Variants => Variant::ALL
            .into_iter()
            .map(|v| (v.name().to_string(), base.clone().with_variant(v)))
            .collect(),
    }
}

pub const ABLATION_HEADER: &str = "preset,cell,variant,seed,steps,final_loss,usage_entropy,diversity";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub cell: String,
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    /// Mean diffusion loss over the final 100 steps.
    pub final_loss: f64,
    pub usage_entropy: f64,
    pub diversity: Option<f64>,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.preset,
            self.cell,
            self.variant,
            self.seed,
            self.steps,
            self.final_loss,
            self.usage_entropy,
            self.diversity.map(|d| d.to_string()).unwrap_or_default()
        )
    }
}

/// Trains every cell in order. With `out` set, rows are appended to
/// `out/ablation_<preset>.csv` as they finish and each cell's run artifacts
/// go to `out/<cell>/`.
pub fn run(preset: Preset, base: &RunConfig, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut csv = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("ablation_{}.csv", preset.name()));
            let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{ABLATION_HEADER}").map_err(|e| Error::io(&p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut rows = Vec::new();
    for (cell, mut cfg) in cells(preset, base) {
        cfg.output_dir = out.map(|d| d.join(cell.replace(['=', '+'], "_")));
        log::info!("ablation {}: cell {cell}", preset.name());
        let r = train(&cfg)?;
        let row = AblationRow {
            preset: preset.name().to_string(),
            variant: cfg.variant().name().to_string(),
            cell,
            seed: cfg.seed,
            steps: cfg.steps,
            final_loss: r.final_loss(100),
            usage_entropy: r.final_entropy(100),
            diversity: r.mean_diversity(),
        };
        if let Some((p, f)) = csv.as_mut() {
            writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(&*p, e))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_share_seed_and_sizes() {
        let base = RunConfig {
            seed: 7,
            ..Default::default()
        };
        let sizes: Vec<usize> = Preset::ALL.iter().map(|&p| cells(p, &base).len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 4, 4, 5]);
        for p in Preset::ALL {
            for (_, c) in cells(p, &base) {
                assert_eq!(c.seed, 7);
                c.validate().unwrap();
            }
        }
        let names: Vec<String> = cells(Preset::Experts, &base).into_iter().map(|c| c.0).collect();
        assert_eq!(names, vec!["E4A1S1U1", "E8A1S1U1", "E14A1S1U1", "E16A1S1U1"]);
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn rcl_preset_rows() {
        let base = RunConfig {
            steps: 2,
            batch_size: 4,
            model: crate::backbone::MiniDiTConfig {
                depth: 1,
                hidden: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let rows = run(Preset::Rcl, &base, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].seed, rows[1].seed);
        assert_eq!(rows[0].cell, "lambda=0");
        assert!(rows.iter().all(|r| r.final_loss.is_finite()));
    }
}
