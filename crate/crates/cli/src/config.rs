//! Run configuration: config file, command-line overrides and the resolved
//! form written next to every run.

use std::fs;
use std::path::{Path, PathBuf};

use msplat_core::{AdamConfig, BandSet, DensifyConfig, Flags, LossConfig, Strategy, TrainConfig, TrainPlan};
use serde::{Deserialize, Serialize};

use crate::fail::{Fail, FailExt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Joint + SpecDelay + MSAD.
    JointOptimized,
    Separate,
    Split,
    Joint,
}

impl Preset {
    pub fn resolve(self) -> (Strategy, Flags) {
        match self {
            Preset::JointOptimized => (
                Strategy::Joint,
                Flags {
                    spec_delay: true,
                    msad: true,
                    ..Flags::default()
                },
            ),
            Preset::Separate => (Strategy::Separate, Flags::default()),
            Preset::Split => (Strategy::Split, Flags::default()),
            Preset::Joint => (Strategy::Joint, Flags::default()),
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub strategy: Strategy,
    pub bands: Option<BandSet>,
    pub flags: Flags,
    pub schedule_scale: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub densify: DensifyConfig,
    pub log_checksums: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            output_dir: None,
            strategy: Strategy::Joint,
            bands: None,
            flags: Flags::default(),
            schedule_scale: 0.01,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            densify: DensifyConfig::default(),
            log_checksums: false,
        }
    }
}

impl RunConfig {
    /// Reads a TOML or JSON config, chosen by extension.
    pub fn load(path: &Path) -> Result<RunConfig, Fail> {
        let text = fs::read_to_string(path).config(format!("cannot read config {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).config(format!("bad config {}", path.display()))
        } else {
            toml::from_str(&text).config(format!("bad config {}", path.display()))
        }
    }

    /// Training config for a manifest holding `available` bands.
    pub fn train_config(&self, available: &BandSet) -> Result<TrainConfig, Fail> {
        let bands = self.bands.clone().unwrap_or_else(|| available.clone());
        if let Some(b) = bands.iter().find(|b| !available.contains(*b)) {
            return Err(Fail::config(format!("band {b} is not in the manifest ({})", available.label())));
        }
        let plan = TrainPlan::new(self.strategy, bands, self.schedule_scale, self.flags, self.seed)?;
        let cfg = TrainConfig {
            plan,
            loss: self.loss.clone(),
            adam: self.adam.clone(),
            densify: self.densify.clone(),
            log_checksums: self.log_checksums,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
