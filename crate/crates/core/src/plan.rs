//! Training plans and the schedule rules derived from them.
//!
//! Every iteration constant is given at full scale (a 120,000 iteration
//! joint run) and multiplied by `schedule_scale`, rounded to the nearest
//! integer with a minimum of 1. Iterations are counted from 0.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::band::{Band, BandSet};
use crate::error::{Error, Result};
use crate::optim::FreezeMask;

/// Full-scale iteration constants.
pub mod milestones {
    pub const STAGE_ITERATIONS: u64 = 30_000;
    pub const JOINT_ITERATIONS: u64 = 120_000;
    pub const INIT_COLOR_ONLY: u64 = 500;
    pub const SPEC_DELAY_END: u64 = 30_000;
    pub const PAUSE_START: u64 = 29_000;
    pub const PAUSE_END: u64 = 32_000;
    pub const ADC_END: u64 = 25_000;
    pub const EXT_ADC_END: u64 = 60_000;
    pub const SPLIT_EXT_ADC_END: u64 = 45_000;
    pub const DEGREE_INTERVAL: u64 = 1_000;
}

use milestones::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Separate,
    Split,
    Joint,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Separate => "separate",
            Strategy::Split => "split",
            Strategy::Joint => "joint",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "separate" => Ok(Strategy::Separate),
            "split" => Ok(Strategy::Split),
            "joint" => Ok(Strategy::Joint),
            other => Err(Error::InvalidPlan(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Improvement modules of the joint strategy (ExtADC also applies to Split).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    pub spec_delay: bool,
    pub ext_adc: bool,
    pub msad: bool,
    pub sig: bool,
}

impl Flags {
    /// Parses a comma separated list such as `specdelay,msad`.
    pub fn parse_list(s: &str) -> Result<Flags> {
        let mut f = Flags::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "specdelay" => f.spec_delay = true,
                "extadc" => f.ext_adc = true,
                "msad" => f.msad = true,
                "sig" => f.sig = true,
                other => return Err(Error::InvalidPlan(format!("unknown flag `{other}`"))),
            }
        }
        Ok(f)
    }
}

/// Densification variant selecting the ADC window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdcVariant {
    Default,
    ExtAdc,
    Msad,
}

impl fmt::Display for AdcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdcVariant::Default => "default",
            AdcVariant::ExtAdc => "extadc",
            AdcVariant::Msad => "msad",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub bands: BandSet,
    pub schedule_scale: f64,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub seed: u64,
}

/// Iteration window in which densification runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdcWindow {
    /// First iteration that may densify.
    pub start: u64,
    /// Last iteration that may densify (inclusive).
    pub end: u64,
    pub interval: u64,
    /// Half-open range during which densification is skipped.
    pub pause: Option<(u64, u64)>,
}

impl AdcWindow {
    pub fn contains(&self, it: u64) -> bool {
        it >= self.start && it <= self.end
    }

    pub fn is_paused(&self, it: u64) -> bool {
        self.pause.is_some_and(|(a, b)| it >= a && it < b)
    }

    /// True when a densify event is due after iteration `it`.
    pub fn is_boundary(&self, it: u64) -> bool {
        self.contains(it) && it % self.interval == 0 && !self.is_paused(it)
    }
}

impl TrainPlan {
    pub fn new(strategy: Strategy, bands: BandSet, schedule_scale: f64, flags: Flags, seed: u64) -> Result<Self> {
        let plan = TrainPlan {
            strategy,
            bands,
            schedule_scale,
            flags,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Joint + SpecDelay + MSAD.
    pub fn joint_optimized(bands: BandSet, schedule_scale: f64, seed: u64) -> Result<Self> {
        TrainPlan::new(
            Strategy::Joint,
            bands,
            schedule_scale,
            Flags {
                spec_delay: true,
                msad: true,
                ..Flags::default()
            },
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.schedule_scale > 0.0 && self.schedule_scale.is_finite()) {
            return Err(Error::InvalidPlan("schedule_scale must be positive".into()));
        }
        let f = self.flags;
        if self.strategy != Strategy::Joint && (f.sig || f.spec_delay || f.msad) {
            return Err(Error::InvalidPlan(format!(
                "SIG, SpecDelay and MSAD require the joint strategy (got {})",
                self.strategy
            )));
        }
        if self.strategy == Strategy::Separate && f.ext_adc {
            return Err(Error::InvalidPlan("ExtADC applies to split or joint".into()));
        }
        let needs_rgb = self.strategy == Strategy::Split || f.spec_delay || f.sig;
        if needs_rgb && !self.bands.contains(Band::Rgb) {
            return Err(Error::InvalidPlan("this plan needs the RGB band".into()));
        }
        Ok(())
    }

    /// Scales a full-scale iteration count.
    pub fn scaled(&self, iterations: u64) -> u64 {
        ((iterations as f64 * self.schedule_scale).round() as u64).max(1)
    }

    /// Iterations of one Separate model or one Split stage.
    pub fn stage_iterations(&self) -> u64 {
        self.scaled(STAGE_ITERATIONS)
    }

    /// Iterations of a Joint run.
    pub fn joint_iterations(&self) -> u64 {
        self.scaled(JOINT_ITERATIONS)
    }

    /// Total optimizer iterations summed over all models of the plan.
    pub fn total_iterations(&self) -> u64 {
        match self.strategy {
            Strategy::Joint => self.joint_iterations(),
            Strategy::Separate => self.stage_iterations() * self.bands.len() as u64,
            Strategy::Split => self.stage_iterations() * self.bands.len() as u64,
        }
    }

    pub fn init_color_only(&self) -> u64 {
        self.scaled(INIT_COLOR_ONLY)
    }

    pub fn spec_delay_end(&self) -> u64 {
        self.scaled(SPEC_DELAY_END)
    }

    /// Densification pause around the introduction of spectral bands.
    pub fn pause_window(&self) -> Option<(u64, u64)> {
        self.flags
            .spec_delay
            .then(|| (self.scaled(PAUSE_START), self.scaled(PAUSE_END)))
    }

    /// Geometry-frozen warm-up after spectral bands are introduced.
    pub fn color_only_window(&self) -> Option<(u64, u64)> {
        self.flags
            .spec_delay
            .then(|| (self.scaled(SPEC_DELAY_END), self.scaled(PAUSE_END)))
    }

    /// Active SH degree at iteration `it` of a model's own schedule.
    pub fn active_degree(&self, it: u64) -> usize {
        ((it / self.scaled(DEGREE_INTERVAL)) as usize).min(crate::sh::MAX_DEGREE)
    }

    pub fn adc_variant(&self) -> AdcVariant {
        if self.flags.msad {
            AdcVariant::Msad
        } else if self.flags.ext_adc {
            AdcVariant::ExtAdc
        } else {
            AdcVariant::Default
        }
    }
}

/// Last densify iteration and interval for `variant`.
///
/// For the Split strategy with ExtADC the window is 45,000 (scaled) in the
/// global iteration count of the two-stage pipeline.
pub fn adc_window(plan: &TrainPlan, variant: AdcVariant, densify_interval: u64) -> (u64, u64) {
    let end = match (plan.strategy, variant) {
        (Strategy::Split, AdcVariant::ExtAdc) => plan.scaled(SPLIT_EXT_ADC_END),
        (_, AdcVariant::Default) => plan.scaled(ADC_END),
        (_, AdcVariant::ExtAdc | AdcVariant::Msad) => plan.scaled(EXT_ADC_END),
    };
    (end, plan.scaled(densify_interval))
}

/// Band sampling pools: training image indices per band.
#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub by_band: Vec<(Band, Vec<usize>)>,
}

impl Pools {
    pub fn get(&self, band: Band) -> &[usize] {
        self.by_band
            .iter()
            .find(|(b, _)| *b == band)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Picks the training image and band for joint iteration `it`.
///
/// The band is uniform over the plan's bands (RGB only during the spectral
/// delay), then the image is uniform within that band's pool.
pub fn sample_step<R: Rng>(plan: &TrainPlan, it: u64, rng: &mut R, pools: &Pools) -> Result<(usize, Band)> {
    let band = if plan.flags.spec_delay && it < plan.spec_delay_end() {
        Band::Rgb
    } else {
        let bands = plan.bands.bands();
        bands[rng.random_range(0..bands.len())]
    };
    let pool = pools.get(band);
    if pool.is_empty() {
        return Err(Error::InvalidPlan(format!("no training images for band {band}")));
    }
    Ok((pool[rng.random_range(0..pool.len())], band))
}

/// Picks the training image for a single-band stage.
pub fn sample_stage_step<R: Rng>(band: Band, rng: &mut R, pools: &Pools) -> Result<usize> {
    let pool = pools.get(band);
    if pool.is_empty() {
        return Err(Error::InvalidPlan(format!("no training images for band {band}")));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Parameter groups frozen at joint iteration `it` when rendering `band`.
pub fn freeze_mask(plan: &TrainPlan, it: u64, band: Band) -> FreezeMask {
    let init = it < plan.init_color_only();
    let sig = plan.flags.sig && band != Band::Rgb;
    let warmup = plan.color_only_window().is_some_and(|(a, b)| it >= a && it < b);
    if init || sig || warmup {
        FreezeMask::geometry()
    } else {
        FreezeMask::NONE
    }
}
