//! Training runs for the three strategies, evaluation and the study drivers.
//!
//! Every run is sequential at the step level: sample a view, render it,
//! compute the loss and its gradient, accumulate densification statistics,
//! take an optimizer step with the scheduled freeze mask, then densify or
//! reset opacities when the schedule says so.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::band::{Band, BandSet};
use crate::cloud::{logit, GaussianCloud, Primitive, SCALE_FLOOR};
use crate::densify::{reset_opacity, DensifyConfig, DensifyMode, DensifyState};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::grad::backward;
use crate::manifest::{SceneManifest, Split};
use crate::metrics::{loss, psnr, ssim, LossConfig};
use crate::optim::{AdamConfig, AdamState, FreezeMask, Group};
use crate::plan::{
    adc_window, freeze_mask, sample_stage_step, sample_step, AdcVariant, AdcWindow, Flags, Pools, Strategy, TrainPlan,
};
use crate::raster::render;
use crate::sh::{C0, MAX_DEGREE};

/// Initial opacity of every seeded primitive.
pub const INIT_OPACITY: f64 = 0.1;

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub plan: TrainPlan,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub densify: DensifyConfig,
    /// Record geometry checksums around every optimizer step.
    #[serde(default)]
    pub log_checksums: bool,
}

impl TrainConfig {
    pub fn new(plan: TrainPlan) -> Self {
        TrainConfig {
            plan,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            densify: DensifyConfig::default(),
            log_checksums: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.loss.validate()?;
        self.densify.validate()
    }
}

/// Seed of the model for `band`, independent of which other bands run.
pub fn derive_seed(seed: u64, band: Band) -> u64 {
    splitmix64(seed ^ splitmix64(band.rank() as u64 + 1))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean distance of each point to its (up to) three nearest neighbours.
pub fn knn_scales(points: &[nalgebra::Vector3<f64>], fallback: f64) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            if d.is_empty() {
                return fallback;
            }
            d.sort_by(f64::total_cmp);
            let k = d.len().min(3);
            d[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

/// Draws every degree-0 coefficient of `channels` uniformly so that decoded
/// colors span [0, 1]; higher degrees are zeroed.
pub fn randomize_dc<R: Rng>(cloud: &mut GaussianCloud, channels: std::ops::Range<usize>, rng: &mut R) {
    let bound = 0.5 / C0;
    for i in 0..cloud.len() {
        for ch in channels.clone() {
            let block = cloud.sh_block_mut(i, ch);
            block.iter_mut().for_each(|c| *c = 0.0);
            block[0] = rng.random_range(-bound..=bound);
        }
    }
}

/// One primitive per seed point with isotropic k-NN scales, identity
/// rotation, opacity 0.1 and random base colors.
pub fn init_cloud<R: Rng>(manifest: &SceneManifest, bands: &BandSet, rng: &mut R) -> Result<GaussianCloud> {
    if manifest.init_points.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let points: Vec<_> = manifest.init_points.iter().map(|p| p.pos).collect();
    let scales = knn_scales(&points, 0.01 * manifest.extent());
    let mut cloud = GaussianCloud::empty(bands.clone());
    let stride = cloud.sh_stride();
    for (p, s) in points.iter().zip(&scales) {
        cloud.push(Primitive {
            mean: *p,
            rotation: nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: nalgebra::Vector3::repeat(s.max(SCALE_FLOOR).ln()),
            logit_opacity: logit(INIT_OPACITY),
            sh: vec![0.0; stride],
        });
    }
    let channels = cloud.channels();
    randomize_dc(&mut cloud, 0..channels, rng);
    Ok(cloud)
}

fn train_pools(manifest: &SceneManifest, bands: &BandSet) -> Result<Pools> {
    for b in bands.iter() {
        if !manifest.bands.contains(b) {
            return Err(Error::BandMismatch(format!("band {b} is not in the manifest")));
        }
    }
    let by_band = bands.iter().map(|b| (b, manifest.indices(b, Split::Train))).collect();
    // decode every image up front so I/O errors surface before training
    for k in 0..manifest.views.len() {
        if bands.contains(manifest.views[k].camera.band) {
            manifest.image(k)?;
        }
    }
    Ok(Pools { by_band })
}

/// Human-readable row label, e.g. `Joint + SIG + SpecDelay + MSAD`.
pub fn plan_label(strategy: Strategy, flags: Flags) -> String {
    let mut s = match strategy {
        Strategy::Separate => "Separate",
        Strategy::Split => "Split",
        Strategy::Joint => "Joint",
    }
    .to_string();
    for (on, name) in [
        (flags.sig, "SIG"),
        (flags.spec_delay, "SpecDelay"),
        (flags.ext_adc, "ExtADC"),
        (flags.msad, "MSAD"),
    ] {
        if on {
            s.push_str(" + ");
            s.push_str(name);
        }
    }
    s
}

/// Strategy and flag combinations of the ablation table, in row order.
pub fn ablation_rows() -> Vec<(String, Strategy, Flags)> {
    let f = |sig, spec_delay, ext_adc, msad| Flags {
        spec_delay,
        ext_adc,
        msad,
        sig,
    };
    let rows = [
        (Strategy::Separate, f(false, false, false, false)),
        (Strategy::Split, f(false, false, false, false)),
        (Strategy::Split, f(false, false, true, false)),
        (Strategy::Joint, f(true, false, false, false)),
        (Strategy::Joint, f(true, false, true, false)),
        (Strategy::Joint, f(true, false, false, true)),
        (Strategy::Joint, f(true, true, false, false)),
        (Strategy::Joint, f(true, true, true, false)),
        (Strategy::Joint, f(true, true, false, true)),
        (Strategy::Joint, f(false, false, false, false)),
        (Strategy::Joint, f(false, false, true, false)),
        (Strategy::Joint, f(false, false, false, true)),
        (Strategy::Joint, f(false, true, false, false)),
        (Strategy::Joint, f(false, true, true, false)),
        (Strategy::Joint, f(false, true, false, true)),
    ];
    rows.into_iter().map(|(s, fl)| (plan_label(s, fl), s, fl)).collect()
}

/// RGB alone plus RGB with every non-empty combination of spectral bands.
pub fn rgb_subsets() -> Vec<BandSet> {
    let spectral = [Band::G, Band::R, Band::Re, Band::Nir];
    (0u32..16)
        .map(|mask| {
            let mut bands = vec![Band::Rgb];
            bands.extend(spectral.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &b)| b));
            BandSet::new(&bands).expect("non-empty")
        })
        .collect()
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else if v.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
        Null(()),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!("bad psnr `{s}`"))),
        Raw::Null(()) => Ok(f64::NAN),
    }
}

fn ser_opt<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_f64(*v)
    }
}

fn de_opt<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: Band,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    #[serde(serialize_with = "ser_opt", deserialize_with = "de_opt")]
    pub ssim: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    #[serde(serialize_with = "ser_opt", deserialize_with = "de_opt")]
    pub ssim: f64,
}

/// Validation metrics of one run. `All` is the unweighted mean over bands.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub label: String,
    pub bands: Vec<BandMetrics>,
    #[serde(rename = "All")]
    pub all: Aggregate,
    /// Primitive count of each trained model, keyed by its band label.
    pub primitives: Vec<(String, usize)>,
}

impl Metrics {
    pub fn band(&self, band: Band) -> Option<&BandMetrics> {
        self.bands.iter().find(|m| m.band == band)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

impl PartialEq for Metrics {
    /// Bitwise comparison, so NaN placeholders compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.to_json().ok() == other.to_json().ok()
    }
}

/// Renders every `split` view of each band with the model holding it.
pub fn evaluate(manifest: &SceneManifest, models: &[GaussianCloud], bands: &BandSet, split: Split, label: &str) -> Result<Metrics> {
    let mut out = Vec::new();
    for band in bands.iter() {
        let model = models
            .iter()
            .find(|m| m.bands().contains(band))
            .ok_or(Error::UnknownBand(band))?;
        let idx = manifest.indices(band, split);
        let mut p = 0.0;
        let mut s = 0.0;
        for &k in &idx {
            let img = render(model, &manifest.views[k].camera, MAX_DEGREE).clamped();
            let truth = manifest.image(k)?;
            p += psnr(&img, truth)?;
            s += ssim(&img, truth)?;
        }
        let n = idx.len() as f64;
        out.push(BandMetrics {
            band,
            psnr: if idx.is_empty() { f64::NAN } else { p / n },
            ssim: if idx.is_empty() { f64::NAN } else { s / n },
            n_images: idx.len(),
        });
    }
    let k = out.len() as f64;
    let all = Aggregate {
        psnr: out.iter().map(|m| m.psnr).sum::<f64>() / k,
        ssim: out.iter().map(|m| m.ssim).sum::<f64>() / k,
    };
    Ok(Metrics {
        label: label.to_string(),
        bands: out,
        all,
        primitives: models.iter().map(|m| (m.bands().label(), m.len())).collect(),
    })
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Trained models: one per band for Separate and Split, one for Joint.
    pub models: Vec<GaussianCloud>,
    pub metrics: Metrics,
    pub events: Vec<Event>,
}

fn frozen_names(mask: FreezeMask) -> Vec<String> {
    Group::ALL
        .iter()
        .filter(|&&g| mask.is_frozen(g))
        .map(|g| g.to_string())
        .collect()
}

/// Optimizer, densification state and schedule bookkeeping of one model.
struct Model {
    label: String,
    cloud: GaussianCloud,
    adam: AdamState,
    dens: DensifyState,
    window: AdcWindow,
    variant: AdcVariant,
    reset_interval: u64,
    extent: f64,
    freeze: FreezeMask,
    events: Vec<Event>,
}

impl Model {
    fn new(cloud: GaussianCloud, cfg: &TrainConfig, extent: f64, window: AdcWindow, variant: AdcVariant, mode: DensifyMode) -> Self {
        let label = cloud.bands().label();
        let adam = AdamState::new(&cloud, &cfg.adam, extent);
        let dens = DensifyState::new(mode, cfg.densify.clone(), cloud.len());
        Model {
            label,
            adam,
            dens,
            window,
            variant,
            reset_interval: cfg.plan.scaled(cfg.densify.opacity_reset_interval),
            extent,
            freeze: FreezeMask::NONE,
            events: Vec::new(),
            cloud,
        }
    }

    /// One optimization step on view `k`. `local` indexes the model's own
    /// schedule, `global` is what goes into the log.
    #[allow(clippy::too_many_arguments)]
    fn step<R: Rng>(
        &mut self,
        manifest: &SceneManifest,
        cfg: &TrainConfig,
        k: usize,
        local: u64,
        global: u64,
        degree: usize,
        freeze: FreezeMask,
        rng: &mut R,
    ) -> Result<()> {
        let camera = &manifest.views[k].camera;
        let truth = manifest.image(k)?;
        let rendered = render(&self.cloud, camera, degree);
        let (value, d_pixels) = loss(&rendered, truth, &cfg.loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(global));
        }
        let grads = backward(&self.cloud, camera, degree, &d_pixels)?;
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss(global));
        }
        self.dens.accumulate(&grads, camera.band)?;
        if freeze != self.freeze {
            self.events.push(Event::Freeze {
                iter: global,
                model: self.label.clone(),
                frozen: frozen_names(freeze),
            });
            self.freeze = freeze;
        }
        let before = cfg.log_checksums.then(|| self.cloud.geometry_checksum());
        self.adam.step(&mut self.cloud, &grads, freeze)?;
        let after = cfg.log_checksums.then(|| self.cloud.geometry_checksum());
        self.events.push(Event::Render {
            iter: global,
            model: self.label.clone(),
            band: camera.band,
            image: k,
            degree,
            loss: value,
            geometry_before: before,
            geometry_after: after,
        });

        if self.window.is_boundary(local) {
            let r = self
                .dens
                .densify_step(&mut self.cloud, &mut self.adam, local, &self.window, self.extent, rng)?;
            self.events.push(Event::Densify {
                iter: global,
                model: self.label.clone(),
                cloned: r.cloned,
                split: r.split,
                pruned: r.pruned,
                total: r.total,
                variant: self.variant.to_string(),
            });
        }
        let reset_due = local > 0 && local % self.reset_interval == 0;
        if reset_due && self.window.contains(local) && !self.window.is_paused(local) {
            reset_opacity(&mut self.cloud, &mut self.adam, cfg.densify.reset_opacity);
            self.events.push(Event::OpacityReset {
                iter: global,
                model: self.label.clone(),
            });
        }
        Ok(())
    }
}

fn default_window(cfg: &TrainConfig) -> AdcWindow {
    let plan = &cfg.plan;
    let (end, interval) = adc_window(plan, AdcVariant::Default, cfg.densify.densify_interval);
    AdcWindow {
        start: plan.init_color_only(),
        end,
        interval,
        pause: None,
    }
}

/// Trains a single-band model for one stage of `stage_iterations()`.
fn run_stage(
    manifest: &SceneManifest,
    cfg: &TrainConfig,
    pools: &Pools,
    model: &mut Model,
    band: Band,
    offset: u64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let plan = &cfg.plan;
    for local in 0..plan.stage_iterations() {
        let k = sample_stage_step(band, rng, pools)?;
        let freeze = if local < plan.init_color_only() {
            FreezeMask::geometry()
        } else {
            FreezeMask::NONE
        };
        model.step(manifest, cfg, k, local, offset + local, plan.active_degree(local), freeze, rng)?;
    }
    Ok(())
}

fn check_strategy(cfg: &TrainConfig, expected: Strategy) -> Result<()> {
    cfg.validate()?;
    if cfg.plan.strategy != expected {
        return Err(Error::InvalidPlan(format!(
            "expected a {expected} plan, got {}",
            cfg.plan.strategy
        )));
    }
    Ok(())
}

fn eval_events(metrics: &Metrics, iter: u64, model_of: impl Fn(Band) -> String) -> Vec<Event> {
    metrics
        .bands
        .iter()
        .map(|m| Event::Eval {
            iter,
            model: model_of(m.band),
            band: m.band,
            psnr: crate::metrics::psnr_json(m.psnr),
            ssim: m.ssim,
        })
        .collect()
}

/// One independent model per band.
pub fn run_separate(manifest: &SceneManifest, cfg: &TrainConfig) -> Result<RunOutcome> {
    check_strategy(cfg, Strategy::Separate)?;
    let plan = &cfg.plan;
    let pools = train_pools(manifest, &plan.bands)?;
    let extent = manifest.extent();
    let models: Vec<Model> = plan
        .bands
        .bands()
        .par_iter()
        .map(|&band| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, band));
            let cloud = init_cloud(manifest, &BandSet::single(band), &mut rng)?;
            let mut model = Model::new(cloud, cfg, extent, default_window(cfg), AdcVariant::Default, DensifyMode::Adc);
            run_stage(manifest, cfg, &pools, &mut model, band, 0, &mut rng)?;
            Ok(model)
        })
        .collect::<Result<_>>()?;
    finish(manifest, cfg, models, plan.stage_iterations())
}

fn finish(manifest: &SceneManifest, cfg: &TrainConfig, models: Vec<Model>, end: u64) -> Result<RunOutcome> {
    let plan = &cfg.plan;
    let mut events = Vec::new();
    let mut clouds = Vec::new();
    for m in models {
        events.extend(m.events);
        clouds.push(m.cloud);
    }
    let label = plan_label(plan.strategy, plan.flags);
    let metrics = evaluate(manifest, &clouds, &plan.bands, Split::Val, &label)?;
    events.extend(eval_events(&metrics, end, |b| {
        clouds
            .iter()
            .find(|c| c.bands().contains(b))
            .map(|c| c.bands().label())
            .unwrap_or_default()
    }));
    Ok(RunOutcome {
        models: clouds,
        metrics,
        events,
    })
}

/// Spectral models that inherit the geometry of the trained RGB model, with
/// freshly randomized base colors.
pub fn split_models(rgb: &GaussianCloud, bands: &BandSet, seed: u64) -> Vec<(GaussianCloud, ChaCha8Rng)> {
    bands
        .spectral()
        .map(|band| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, band));
            let mut cloud = GaussianCloud::with_geometry_of(rgb, BandSet::single(band));
            randomize_dc(&mut cloud, 0..1, &mut rng);
            (cloud, rng)
        })
        .collect()
}

/// RGB model first, then its geometry copied into one model per spectral
/// band, each trained for a second stage.
pub fn run_split(manifest: &SceneManifest, cfg: &TrainConfig) -> Result<RunOutcome> {
    check_strategy(cfg, Strategy::Split)?;
    let plan = &cfg.plan;
    let pools = train_pools(manifest, &plan.bands)?;
    let extent = manifest.extent();
    let stage = plan.stage_iterations();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, Band::Rgb));
    let cloud = init_cloud(manifest, &BandSet::single(Band::Rgb), &mut rng)?;
    let mut rgb = Model::new(cloud, cfg, extent, default_window(cfg), AdcVariant::Default, DensifyMode::Adc);
    run_stage(manifest, cfg, &pools, &mut rgb, Band::Rgb, 0, &mut rng)?;

    let variant = if plan.flags.ext_adc { AdcVariant::ExtAdc } else { AdcVariant::Default };
    let mut window = default_window(cfg);
    if variant == AdcVariant::ExtAdc {
        // the extended window is given in global iterations of the pipeline
        window.end = adc_window(plan, variant, cfg.densify.densify_interval).0.saturating_sub(stage);
    }
    let geometry = rgb.cloud.geometry_checksum();
    let spectral: Vec<Model> = split_models(&rgb.cloud, &plan.bands, plan.seed)
        .into_par_iter()
        .map(|(cloud, mut rng)| {
            let band = cloud.bands().bands()[0];
            let mut model = Model::new(cloud, cfg, extent, window, variant, DensifyMode::Adc);
            model.events.push(Event::Split {
                iter: stage,
                model: model.label.clone(),
                geometry,
            });
            run_stage(manifest, cfg, &pools, &mut model, band, stage, &mut rng)?;
            Ok(model)
        })
        .collect::<Result<_>>()?;
    let end = if spectral.is_empty() { stage } else { 2 * stage };
    let mut models = vec![rgb];
    models.extend(spectral);
    finish(manifest, cfg, models, end)
}

/// One shared model over all bands, each step rendering a single band.
pub fn run_joint(manifest: &SceneManifest, cfg: &TrainConfig) -> Result<RunOutcome> {
    check_strategy(cfg, Strategy::Joint)?;
    let plan = &cfg.plan;
    let pools = train_pools(manifest, &plan.bands)?;
    let extent = manifest.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let cloud = init_cloud(manifest, &plan.bands, &mut rng)?;

    let variant = plan.adc_variant();
    let (end, interval) = adc_window(plan, variant, cfg.densify.densify_interval);
    let window = AdcWindow {
        start: plan.init_color_only(),
        end,
        interval,
        pause: plan.pause_window(),
    };
    let mode = if plan.flags.msad {
        DensifyMode::Msad(plan.bands.clone())
    } else {
        DensifyMode::Adc
    };
    let mut model = Model::new(cloud, cfg, extent, window, variant, mode);
    let delayed: Vec<Band> = plan.bands.spectral().collect();
    for it in 0..plan.joint_iterations() {
        if plan.flags.spec_delay && it == plan.spec_delay_end() && !delayed.is_empty() {
            for &b in &delayed {
                let range = model.cloud.band_channels(b).expect("band in cloud");
                randomize_dc(&mut model.cloud, range, &mut rng);
            }
            model.events.push(Event::Reinit {
                iter: it,
                model: model.label.clone(),
                bands: delayed.clone(),
            });
        }
        let (k, band) = sample_step(plan, it, &mut rng, &pools)?;
        let freeze = freeze_mask(plan, it, band);
        model.step(manifest, cfg, k, it, it, plan.active_degree(it), freeze, &mut rng)?;
    }
    finish(manifest, cfg, vec![model], plan.joint_iterations())
}

/// Dispatches on the plan's strategy.
pub fn run(manifest: &SceneManifest, cfg: &TrainConfig) -> Result<RunOutcome> {
    match cfg.plan.strategy {
        Strategy::Separate => run_separate(manifest, cfg),
        Strategy::Split => run_split(manifest, cfg),
        Strategy::Joint => run_joint(manifest, cfg),
    }
}

/// Joint + SpecDelay + MSAD on each band subset, all with the base seed.
pub fn run_band_subset_study(manifest: &SceneManifest, subsets: &[BandSet], cfg: &TrainConfig) -> Result<Vec<(BandSet, Metrics)>> {
    subsets
        .iter()
        .map(|bands| {
            if !bands.contains(Band::Rgb) {
                return Err(Error::InvalidPlan(format!("subset {} lacks RGB", bands.label())));
            }
            let mut c = cfg.clone();
            c.plan = TrainPlan::joint_optimized(bands.clone(), cfg.plan.schedule_scale, cfg.plan.seed)?;
            Ok((bands.clone(), run_joint(manifest, &c)?.metrics))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::InitPoint;
    use crate::sh::SH_COEFFS;
    use nalgebra::Vector3;
    use std::collections::BTreeMap;

    fn manifest_with_points(points: &[[f64; 3]]) -> SceneManifest {
        SceneManifest::new(
            BandSet::all(),
            Vec::new(),
            points
                .iter()
                .map(|p| InitPoint {
                    pos: Vector3::from(*p),
                    colors: BTreeMap::new(),
                })
                .collect(),
            ".".into(),
        )
        .unwrap()
    }

    #[test]
    fn tetrahedron_scales_are_edge_length() {
        let s = 2f64.sqrt();
        let pts = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        let m = manifest_with_points(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = init_cloud(&m, &BandSet::all(), &mut rng).unwrap();
        // brute-force oracle: all pairwise distances equal the edge length
        let edge = (Vector3::from(pts[0]) - Vector3::from(pts[1])).norm();
        assert!((edge - 2.0 * s).abs() < 1e-12);
        for i in 0..4 {
            for a in 0..3 {
                assert!((c.scale(i)[a] - edge).abs() < 1e-12);
            }
            assert!((c.opacity(i) - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_has_zero_higher_sh() {
        let m = manifest_with_points(&[[0.0, 0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = init_cloud(&m, &BandSet::all(), &mut rng).unwrap();
        assert_eq!(c.len(), 1);
        for ch in 0..c.channels() {
            let b = c.sh_block(0, ch);
            assert!(b[0].abs() <= 0.5 / C0);
            assert!(b[1..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(c.sh.len(), 7 * SH_COEFFS);
    }

    #[test]
    fn init_is_seeded() {
        let m = manifest_with_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let a = init_cloud(&m, &BandSet::all(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_cloud(&m, &BandSet::all(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let empty = manifest_with_points(&[]);
        assert!(matches!(
            init_cloud(&empty, &BandSet::all(), &mut ChaCha8Rng::seed_from_u64(3)),
            Err(Error::EmptyPointCloud)
        ));
    }

    #[test]
    fn derived_seeds_differ_per_band() {
        let seeds: Vec<u64> = Band::ALL.iter().map(|&b| derive_seed(7, b)).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(derive_seed(7, Band::Nir), seeds[4]);
    }

    #[test]
    fn table_structure() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 15);
        assert_eq!(rows[0].0, "Separate");
        assert_eq!(rows[8].0, "Joint + SIG + SpecDelay + MSAD");
        assert_eq!(rows[14].0, "Joint + SpecDelay + MSAD");
        let subsets = rgb_subsets();
        assert_eq!(subsets.len(), 16);
        assert!(subsets.iter().all(|s| s.contains(Band::Rgb)));
        assert_eq!(subsets[0], BandSet::single(Band::Rgb));
        assert_eq!(subsets[15], BandSet::all());
    }

    #[test]
    fn metrics_json_handles_inf() {
        let m = Metrics {
            label: "Joint".into(),
            bands: vec![BandMetrics {
                band: Band::G,
                psnr: f64::INFINITY,
                ssim: 1.0,
                n_images: 1,
            }],
            all: Aggregate {
                psnr: f64::INFINITY,
                ssim: 1.0,
            },
            primitives: vec![("G".into(), 3)],
        };
        let text = m.to_json().unwrap();
        assert!(text.contains("\"inf\""));
        let back: Metrics = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
