//! Adam over the parameter groups of a [`GaussianCloud`].

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::grad::ParamGrads;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Means,
    Rotations,
    Scales,
    Opacities,
    Sh,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Means, Group::Rotations, Group::Scales, Group::Opacities, Group::Sh];

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Group::Means => "means",
            Group::Rotations => "rotations",
            Group::Scales => "scales",
            Group::Opacities => "opacities",
            Group::Sh => "sh",
        })
    }
}

/// Set of frozen parameter groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FreezeMask(u8);

impl FreezeMask {
    pub const NONE: FreezeMask = FreezeMask(0);

    /// Means, rotations, scales and opacities.
    pub fn geometry() -> FreezeMask {
        FreezeMask::of(&[Group::Means, Group::Rotations, Group::Scales, Group::Opacities])
    }

    pub fn of(groups: &[Group]) -> FreezeMask {
        FreezeMask(groups.iter().fold(0, |m, g| m | (1 << g.index())))
    }

    pub fn is_frozen(self, g: Group) -> bool {
        self.0 & (1 << g.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Learning rates and Adam constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    /// Multiplied by the scene extent.
    pub lr_means: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_means: 0.005,
            lr_sh: 0.005,
            lr_opacity: 0.05,
            lr_scale: 0.005,
            lr_rotation: 0.001,
            betas: (0.9, 0.999),
            epsilon: 1e-15,
        }
    }
}

impl AdamConfig {
    /// Every group at one rate.
    pub fn uniform(lr: f64) -> Self {
        AdamConfig {
            lr_means: lr,
            lr_sh: lr,
            lr_opacity: lr,
            lr_scale: lr,
            lr_rotation: lr,
            ..Default::default()
        }
    }

    /// Per-group rates with the means rate scaled by `extent`.
    pub fn group_rates(&self, extent: f64) -> [f64; 5] {
        [
            self.lr_means * extent,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_sh,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates applied to this group.
    step: u64,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Adam state for one cloud.
///
/// Each group keeps its own update counter, so a group that stays frozen for
/// a while starts with a fresh bias correction when it is released.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    groups: [Moments; 5],
    rates: [f64; 5],
    betas: (f64, f64),
    epsilon: f64,
    /// Optimizer steps taken (frozen or not).
    pub steps: u64,
}

fn group_width(g: Group, sh_stride: usize) -> usize {
    match g {
        Group::Means | Group::Scales => 3,
        Group::Rotations => 4,
        Group::Opacities => 1,
        Group::Sh => sh_stride,
    }
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud, cfg: &AdamConfig, extent: f64) -> Self {
        let n = cloud.len();
        let stride = cloud.sh_stride();
        AdamState {
            groups: Group::ALL.map(|g| Moments::zeros(n * group_width(g, stride))),
            rates: cfg.group_rates(extent),
            betas: cfg.betas,
            epsilon: cfg.epsilon,
            steps: 0,
        }
    }

    pub fn rate(&self, g: Group) -> f64 {
        self.rates[g.index()]
    }

    pub fn group_steps(&self, g: Group) -> u64 {
        self.groups[g.index()].step
    }

    /// First and second moments of a group, flattened per primitive.
    pub fn moments(&self, g: Group) -> (&[f64], &[f64]) {
        let m = &self.groups[g.index()];
        (&m.m, &m.v)
    }

    fn primitives(&self) -> usize {
        self.groups[Group::Means.index()].m.len() / 3
    }

    /// Applies one Adam update to the unfrozen groups, then renormalizes the
    /// quaternions.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &ParamGrads, freeze: FreezeMask) -> Result<()> {
        let n = cloud.len();
        if grads.len() != n || grads.d_sh.len() != cloud.sh.len() || self.primitives() != n {
            return Err(Error::ShapeMismatch(format!(
                "cloud has {n} primitives, gradients {}, optimizer {}",
                grads.len(),
                self.primitives()
            )));
        }
        self.steps += 1;
        for g in Group::ALL {
            if freeze.is_frozen(g) {
                continue;
            }
            let lr = self.rates[g.index()];
            let (b1, b2, eps) = (self.betas.0, self.betas.1, self.epsilon);
            let mom = &mut self.groups[g.index()];
            mom.step += 1;
            let bc1 = 1.0 - b1.powi(mom.step as i32);
            let bc2 = 1.0 - b2.powi(mom.step as i32);
            let mut update = |param: &mut f64, grad: f64, k: usize| {
                let m = &mut mom.m[k];
                let v = &mut mom.v[k];
                *m = b1 * *m + (1.0 - b1) * grad;
                *v = b2 * *v + (1.0 - b2) * grad * grad;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *param -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            match g {
                Group::Means => step_vec3(&mut cloud.means, &grads.d_means, &mut update),
                Group::Scales => step_vec3(&mut cloud.log_scales, &grads.d_log_scales, &mut update),
                Group::Rotations => {
                    for (i, (q, d)) in cloud.rotations.iter_mut().zip(&grads.d_rotations).enumerate() {
                        for a in 0..4 {
                            update(&mut q[a], d[a], i * 4 + a);
                        }
                    }
                }
                Group::Opacities => {
                    for (i, (o, d)) in cloud.logit_opacities.iter_mut().zip(&grads.d_logit_opacities).enumerate() {
                        update(o, *d, i);
                    }
                }
                Group::Sh => {
                    for (k, (c, d)) in cloud.sh.iter_mut().zip(&grads.d_sh).enumerate() {
                        update(c, *d, k);
                    }
                }
            }
        }
        if !freeze.is_frozen(Group::Rotations) {
            cloud.normalize_rotations();
        }
        Ok(())
    }

    /// Zeroes the moments of one group, keeping its step counter.
    pub fn reset_moments(&mut self, g: Group) {
        let mom = &mut self.groups[g.index()];
        mom.m.iter_mut().for_each(|x| *x = 0.0);
        mom.v.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Gathers the moments of the primitives in `keep`, then appends
    /// `append` zero-moment slots. Step counters are preserved.
    pub fn resize(&mut self, keep: &[usize], append: usize, sh_stride: usize) -> Result<()> {
        let n = self.primitives();
        if let Some(&bad) = keep.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        for g in Group::ALL {
            let w = group_width(g, sh_stride);
            let mom = &mut self.groups[g.index()];
            let gather = |src: &[f64]| {
                let mut out = Vec::with_capacity((keep.len() + append) * w);
                for &i in keep {
                    out.extend_from_slice(&src[i * w..(i + 1) * w]);
                }
                out.resize((keep.len() + append) * w, 0.0);
                out
            };
            mom.m = gather(&mom.m);
            mom.v = gather(&mom.v);
        }
        Ok(())
    }
}

fn step_vec3<F: FnMut(&mut f64, f64, usize)>(params: &mut [Vector3<f64>], grads: &[Vector3<f64>], update: &mut F) {
    for (i, (p, d)) in params.iter_mut().zip(grads).enumerate() {
        for a in 0..3 {
            update(&mut p[a], d[a], i * 3 + a);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::band::{Band, BandSet};
    use crate::cloud::Primitive;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> GaussianCloud {
        let mut c = GaussianCloud::empty(BandSet::single(Band::G));
        for _ in 0..n {
            c.push(Primitive {
                mean: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: Vector3::repeat(-2.0),
                logit_opacity: 0.3,
                sh: (0..16).map(|_| rng.random_range(-0.2..0.2)).collect(),
            });
        }
        c
    }

    fn random_grads(c: &GaussianCloud, rng: &mut ChaCha8Rng) -> ParamGrads {
        let mut g = ParamGrads::zeros(c);
        g.d_means.iter_mut().for_each(|v| *v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        g.d_rotations.iter_mut().for_each(|v| *v = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        g.d_log_scales.iter_mut().for_each(|v| *v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        g.d_logit_opacities.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        g.d_sh.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        g
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = cloud(3, &mut rng);
        let before = c.clone();
        let mut st = AdamState::new(&c, &AdamConfig::default(), 1.0);
        let g = ParamGrads::zeros(&c);
        st.step(&mut c, &g, FreezeMask::NONE).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = cloud(1, &mut rng);
        c.logit_opacities[0] = 0.0;
        let mut st = AdamState::new(&c, &AdamConfig::uniform(0.005), 1.0);
        let mut g = ParamGrads::zeros(&c);
        g.d_logit_opacities[0] = 1.0;
        st.step(&mut c, &g, FreezeMask::NONE).unwrap();
        assert!((c.logit_opacities[0] + 0.005).abs() < 1e-12);
    }

    #[test]
    fn first_step_magnitude_is_lr_per_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = cloud(4, &mut rng);
        let before = c.clone();
        let mut st = AdamState::new(&c, &AdamConfig::default(), 1.0);
        let g = random_grads(&c, &mut rng);
        st.step(&mut c, &g, FreezeMask::of(&[Group::Rotations])).unwrap();
        let lr = st.rate(Group::Sh);
        for k in 0..c.sh.len() {
            let delta = c.sh[k] - before.sh[k];
            assert!((delta + lr * g.d_sh[k].signum()).abs() < 1e-12);
        }
    }

    #[test]
    fn freezing_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = cloud(5, &mut rng);
        let before = c.clone();
        let mut st = AdamState::new(&c, &AdamConfig::default(), 1.0);
        for _ in 0..100 {
            let g = random_grads(&c, &mut rng);
            st.step(&mut c, &g, FreezeMask::geometry()).unwrap();
        }
        assert_eq!(c.geometry_bytes(), before.geometry_bytes());
        assert_ne!(c.sh, before.sh);
        assert!(st.moments(Group::Means).0.iter().all(|&v| v == 0.0));
        assert_eq!(st.group_steps(Group::Means), 0);
        assert_eq!(st.group_steps(Group::Sh), 100);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c0 = cloud(4, &mut rng);
        let g = random_grads(&c0, &mut rng);
        let run = || {
            let mut c = c0.clone();
            let mut st = AdamState::new(&c, &AdamConfig::default(), 2.0);
            st.step(&mut c, &g, FreezeMask::NONE).unwrap();
            st.step(&mut c, &g, FreezeMask::NONE).unwrap();
            (c, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn quaternions_renormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut c = cloud(3, &mut rng);
        let mut st = AdamState::new(&c, &AdamConfig::uniform(0.1), 1.0);
        let g = random_grads(&c, &mut rng);
        st.step(&mut c, &g, FreezeMask::NONE).unwrap();
        for q in &c.rotations {
            assert!((q.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = cloud(3, &mut rng);
        let mut st = AdamState::new(&c, &AdamConfig::default(), 1.0);
        let g = random_grads(&c, &mut rng);
        st.step(&mut c, &g, FreezeMask::NONE).unwrap();
        let stride = c.sh_stride();

        let mut same = st.clone();
        same.resize(&[0, 1, 2], 0, stride).unwrap();
        assert_eq!(same, st);

        let mut empty = st.clone();
        empty.resize(&[], 5, stride).unwrap();
        assert_eq!(empty.primitives(), 5);
        assert!(empty.moments(Group::Sh).1.iter().all(|&v| v == 0.0));
        assert_eq!(empty.group_steps(Group::Sh), 1);

        // Clone of primitive 1: original keeps its moments, the copy starts at zero.
        let mut cloned = st.clone();
        cloned.resize(&[0, 1, 2], 1, stride).unwrap();
        let (m_old, _) = st.moments(Group::Means);
        let (m_new, _) = cloned.moments(Group::Means);
        assert_eq!(&m_new[3..6], &m_old[3..6]);
        assert_eq!(&m_new[9..12], &[0.0, 0.0, 0.0]);

        assert!(matches!(
            st.clone().resize(&[7], 0, stride),
            Err(Error::IndexOutOfRange { index: 7, len: 3 })
        ));
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut c = cloud(3, &mut rng);
        let other = cloud(2, &mut rng);
        let mut st = AdamState::new(&c, &AdamConfig::default(), 1.0);
        assert!(st.step(&mut c, &ParamGrads::zeros(&other), FreezeMask::NONE).is_err());
    }
}
