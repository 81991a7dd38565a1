//! Adaptive density control: gradient statistics, clone/split/prune and
//! opacity reset.
//!
//! Plain ADC averages the screen-space gradient norm over every view a
//! primitive was visible in. The multi-spectral variant keeps one average per
//! band and densifies when any of them crosses the threshold, so a structure
//! that only shows up in one band is not diluted by the others.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::band::{Band, BandSet};
use crate::cloud::{logit, GaussianCloud, Primitive};
use crate::error::{Error, Result};
use crate::grad::ParamGrads;
use crate::optim::{AdamState, Group};
use crate::plan::AdcWindow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    /// Mean screen gradient norm above which a primitive is densified.
    pub grad_threshold: f64,
    /// Clone/split boundary as a fraction of the scene extent.
    pub percent_dense: f64,
    /// Scale divisor applied to split children.
    pub split_factor: f64,
    pub prune_opacity: f64,
    /// Full-scale densify interval (scaled by the plan).
    pub densify_interval: u64,
    /// Full-scale opacity reset interval (scaled by the plan).
    pub opacity_reset_interval: u64,
    /// Opacity ceiling applied by a reset.
    pub reset_opacity: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 0.0075,
            percent_dense: 0.01,
            split_factor: 1.6,
            prune_opacity: 0.005,
            densify_interval: 100,
            opacity_reset_interval: 3000,
            reset_opacity: 0.01,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_threshold >= 0.0
            && self.percent_dense > 0.0
            && self.split_factor > 1.0
            && (0.0..1.0).contains(&self.prune_opacity)
            && self.densify_interval > 0
            && self.opacity_reset_interval > 0
            && self.reset_opacity > 0.0
            && self.reset_opacity < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPlan(format!("invalid densify config {self:?}")))
        }
    }
}

/// Which statistics drive the densify decision.
#[derive(Clone, Debug, PartialEq)]
pub enum DensifyMode {
    /// One accumulator over all views.
    Adc,
    /// One accumulator per band of the set.
    Msad(BandSet),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct DensifyState {
    mode: DensifyMode,
    config: DensifyConfig,
    len: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl DensifyState {
    pub fn new(mode: DensifyMode, config: DensifyConfig, primitives: usize) -> Self {
        let slots = match &mode {
            DensifyMode::Adc => 1,
            DensifyMode::Msad(bands) => bands.len(),
        };
        DensifyState {
            mode,
            config,
            len: primitives,
            sums: vec![0.0; primitives * slots],
            counts: vec![0; primitives * slots],
        }
    }

    pub fn mode(&self) -> &DensifyMode {
        &self.mode
    }

    pub fn config(&self) -> &DensifyConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn slots(&self) -> usize {
        match &self.mode {
            DensifyMode::Adc => 1,
            DensifyMode::Msad(bands) => bands.len(),
        }
    }

    /// Adds the screen gradient norms of one rendered view.
    pub fn accumulate(&mut self, grads: &ParamGrads, band: Band) -> Result<()> {
        if grads.len() != self.len {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} accumulators",
                grads.len(),
                self.len
            )));
        }
        let slot = match &self.mode {
            DensifyMode::Adc => 0,
            DensifyMode::Msad(bands) => bands.index_of(band).ok_or(Error::UnknownBand(band))?,
        };
        let slots = self.slots();
        for i in 0..self.len {
            if grads.visible[i] {
                self.sums[i * slots + slot] += grads.screen_grad_norm[i];
                self.counts[i * slots + slot] += 1;
            }
        }
        Ok(())
    }

    /// Mean accumulated gradient per slot of primitive `i` (0 when unseen).
    pub fn means(&self, i: usize) -> Vec<f64> {
        let slots = self.slots();
        (0..slots)
            .map(|s| {
                let c = self.counts[i * slots + s];
                if c == 0 {
                    0.0
                } else {
                    self.sums[i * slots + s] / c as f64
                }
            })
            .collect()
    }

    pub fn is_triggered(&self, i: usize) -> bool {
        self.means(i).iter().any(|&m| m > self.config.grad_threshold)
    }

    fn reset(&mut self, primitives: usize) {
        let slots = self.slots();
        self.len = primitives;
        self.sums = vec![0.0; primitives * slots];
        self.counts = vec![0; primitives * slots];
    }

    /// Clones small and splits large triggered primitives, prunes nearly
    /// transparent ones and resets the statistics.
    ///
    /// Kept originals stay in order, clones and then split children are
    /// appended in parent order. The optimizer moments follow the same
    /// permutation, new primitives start with zero moments.
    pub fn densify_step<R: Rng>(
        &mut self,
        cloud: &mut GaussianCloud,
        adam: &mut AdamState,
        iteration: u64,
        window: &AdcWindow,
        extent: f64,
        rng: &mut R,
    ) -> Result<DensifyReport> {
        if !window.is_boundary(iteration) {
            return Err(Error::CalledOutsideWindow(iteration));
        }
        if cloud.len() != self.len {
            return Err(Error::ShapeMismatch(format!(
                "cloud has {} primitives, accumulators {}",
                cloud.len(),
                self.len
            )));
        }
        let boundary = self.config.percent_dense * extent;
        let shrink = self.config.split_factor.ln();
        let mut keep = Vec::with_capacity(cloud.len());
        let mut clones = Vec::new();
        let mut children = Vec::new();
        let mut split = 0;
        for i in 0..cloud.len() {
            if !self.is_triggered(i) {
                keep.push(i);
                continue;
            }
            if cloud.scale(i).max() <= boundary {
                keep.push(i);
                clones.push(cloud.primitive(i));
            } else {
                split += 1;
                let parent = cloud.primitive(i);
                let rot = cloud.rotation_matrix(i);
                let scale = cloud.scale(i);
                for _ in 0..2 {
                    let z = nalgebra::Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    let mut child: Primitive = parent.clone();
                    child.mean = parent.mean + rot * scale.component_mul(&z);
                    child.log_scale = parent.log_scale.add_scalar(-shrink);
                    children.push(child);
                }
            }
        }
        let cloned = clones.len();
        let appended = clones.len() + children.len();
        let mut next = cloud.gather(&keep);
        for p in clones.into_iter().chain(children) {
            next.push(p);
        }
        adam.resize(&keep, appended, cloud.sh_stride())?;

        let survivors: Vec<usize> = (0..next.len())
            .filter(|&i| next.opacity(i) >= self.config.prune_opacity)
            .collect();
        let pruned = next.len() - survivors.len();
        if pruned > 0 {
            next = next.gather(&survivors);
            adam.resize(&survivors, 0, cloud.sh_stride())?;
        }
        *cloud = next;
        self.reset(cloud.len());
        Ok(DensifyReport {
            cloned,
            split,
            pruned,
            total: cloud.len(),
        })
    }
}

/// Caps every opacity at `value` and clears the opacity moments.
pub fn reset_opacity(cloud: &mut GaussianCloud, adam: &mut AdamState, value: f64) {
    let cap = logit(value);
    for o in &mut cloud.logit_opacities {
        *o = o.min(cap);
    }
    adam.reset_moments(Group::Opacities);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Primitive;
    use crate::optim::AdamConfig;
    use nalgebra::{Vector3, Vector4};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window() -> AdcWindow {
        AdcWindow {
            start: 0,
            end: 100,
            interval: 1,
            pause: None,
        }
    }

    fn prim(x: f64, scale: f64, opacity: f64, channels: usize) -> Primitive {
        Primitive {
            mean: Vector3::new(x, 0.0, 0.0),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(scale.ln()),
            logit_opacity: logit(opacity),
            sh: vec![0.1; channels * 16],
        }
    }

    fn cloud(prims: &[(f64, f64)]) -> GaussianCloud {
        let mut c = GaussianCloud::empty(BandSet::all());
        for (i, &(scale, op)) in prims.iter().enumerate() {
            c.push(prim(i as f64, scale, op, 7));
        }
        c
    }

    fn grads(c: &GaussianCloud, norms: &[f64]) -> ParamGrads {
        let mut g = ParamGrads::zeros(c);
        g.screen_grad_norm = norms.to_vec();
        g.visible = vec![true; norms.len()];
        g
    }

    #[test]
    fn msad_catches_single_band_signal() {
        let c = cloud(&[(0.1, 0.5)]);
        let cfg = DensifyConfig {
            grad_threshold: 0.0002,
            ..DensifyConfig::default()
        };
        let mut adc = DensifyState::new(DensifyMode::Adc, cfg.clone(), 1);
        let mut msad = DensifyState::new(DensifyMode::Msad(BandSet::all()), cfg, 1);
        for band in Band::ALL {
            let norm = if band == Band::Nir { 0.0006 } else { 0.0001 };
            for _ in 0..4 {
                adc.accumulate(&grads(&c, &[norm]), band).unwrap();
                msad.accumulate(&grads(&c, &[norm]), band).unwrap();
            }
        }
        // overall mean (4 * 0.0001 + 0.0006) / 5 = 0.0002, not above threshold
        assert!(!adc.is_triggered(0));
        assert!(msad.is_triggered(0));
        assert!((msad.means(0)[Band::Nir.rank()] - 0.0006).abs() < 1e-15);
    }

    #[test]
    fn invisible_views_do_not_count() {
        let c = cloud(&[(0.1, 0.5)]);
        let mut st = DensifyState::new(DensifyMode::Adc, DensifyConfig::default(), 1);
        st.accumulate(&grads(&c, &[0.001]), Band::G).unwrap();
        let mut g = grads(&c, &[0.0]);
        g.visible[0] = false;
        st.accumulate(&g, Band::G).unwrap();
        assert_eq!(st.means(0), vec![0.001]);
    }

    #[test]
    fn clone_split_and_prune() {
        // small & hot -> clone, large & hot -> split, cold & transparent -> prune
        let mut c = cloud(&[(0.001, 0.5), (0.5, 0.5), (0.1, 0.001), (0.1, 0.5)]);
        let mut adam = AdamState::new(&c, &AdamConfig::default(), 1.0);
        let mut st = DensifyState::new(DensifyMode::Adc, DensifyConfig::default(), 4);
        st.accumulate(&grads(&c, &[1.0, 1.0, 0.0, 0.0]), Band::Rgb).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = st.densify_step(&mut c, &mut adam, 1, &window(), 1.0, &mut rng).unwrap();
        assert_eq!(r, DensifyReport { cloned: 1, split: 1, pruned: 1, total: 5 });
        assert_eq!(c.len(), 5);
        // order: kept 0, 3, clone of 0, two children of 1
        assert_eq!(c.means[0], Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(c.means[1], Vector3::new(3.0, 0.0, 0.0));
        assert_eq!(c.means[2], Vector3::new(0.0, 0.0, 0.0));
        let child = c.scale(3);
        assert!((child[0] - 0.5 / 1.6).abs() < 1e-12);
        assert_eq!(st.len(), 5);
        assert!(st.means(0).iter().all(|&m| m == 0.0));
        assert_eq!(adam.moments(Group::Means).0.len(), 15);
    }

    #[test]
    fn outside_window_is_an_error() {
        let mut c = cloud(&[(0.1, 0.5)]);
        let mut adam = AdamState::new(&c, &AdamConfig::default(), 1.0);
        let mut st = DensifyState::new(DensifyMode::Adc, DensifyConfig::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = st.densify_step(&mut c, &mut adam, 101, &window(), 1.0, &mut rng);
        assert!(matches!(err, Err(Error::CalledOutsideWindow(101))));
    }

    #[test]
    fn unknown_band_for_msad() {
        let c = cloud(&[(0.1, 0.5)]);
        let mut st = DensifyState::new(DensifyMode::Msad(BandSet::single(Band::Rgb)), DensifyConfig::default(), 1);
        assert!(matches!(
            st.accumulate(&grads(&c, &[0.1]), Band::Nir),
            Err(Error::UnknownBand(Band::Nir))
        ));
    }

    #[test]
    fn opacity_reset_caps() {
        let mut c = cloud(&[(0.1, 0.9), (0.1, 0.001)]);
        let mut adam = AdamState::new(&c, &AdamConfig::default(), 1.0);
        reset_opacity(&mut c, &mut adam, 0.01);
        assert!((c.opacity(0) - 0.01).abs() < 1e-12);
        assert!((c.opacity(1) - 0.001).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn count_invariant(
            prims in prop::collection::vec((0.001f64..0.5, 0.001f64..0.99, 0.0f64..0.001), 1..20),
            seed in any::<u64>(),
        ) {
            let mut c = cloud(&prims.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>());
            let n = c.len();
            let mut adam = AdamState::new(&c, &AdamConfig::default(), 1.0);
            let mut st = DensifyState::new(DensifyMode::Msad(BandSet::all()), DensifyConfig::default(), n);
            let norms: Vec<f64> = prims.iter().map(|p| p.2).collect();
            st.accumulate(&grads(&c, &norms), Band::Re).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = st.densify_step(&mut c, &mut adam, 5, &window(), 1.0, &mut rng).unwrap();
            prop_assert_eq!(r.total, n + r.cloned + r.split - r.pruned);
            prop_assert_eq!(c.len(), r.total);
            prop_assert_eq!(adam.moments(Group::Sh).0.len(), c.sh.len());
            prop_assert!(c.is_finite());
        }
    }
}
