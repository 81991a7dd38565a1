//! The optimizable Gaussian scene.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::band::{Band, BandSet};
use crate::sh::SH_COEFFS;

/// Lower bound applied to every realized scale, in world units.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotmat(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Parameters of one primitive, detached from a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub mean: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    /// `channels x 16` coefficients.
    pub sh: Vec<f64>,
}

/// Structure-of-arrays Gaussian scene.
///
/// SH coefficients are stored per primitive, per scalar channel, 16 per
/// channel. The channel layout stacks the bands of `bands` in canonical order
/// (RGB contributes three channels, every other band one).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    bands: BandSet,
    pub means: Vec<Vector3<f64>>,
    /// Unnormalized quaternions `(w, x, y, z)`; renormalized after each step.
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub logit_opacities: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianCloud {
    pub fn empty(bands: BandSet) -> Self {
        GaussianCloud {
            bands,
            means: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            logit_opacities: Vec::new(),
            sh: Vec::new(),
        }
    }

    pub fn bands(&self) -> &BandSet {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Scalar channels per primitive.
    pub fn channels(&self) -> usize {
        self.bands.total_channels()
    }

    /// SH floats per primitive.
    pub fn sh_stride(&self) -> usize {
        self.channels() * SH_COEFFS
    }

    /// Coefficients of channel `ch` of primitive `i`.
    pub fn sh_block(&self, i: usize, ch: usize) -> &[f64] {
        let start = i * self.sh_stride() + ch * SH_COEFFS;
        &self.sh[start..start + SH_COEFFS]
    }

    pub fn sh_block_mut(&mut self, i: usize, ch: usize) -> &mut [f64] {
        let start = i * self.sh_stride() + ch * SH_COEFFS;
        &mut self.sh[start..start + SH_COEFFS]
    }

    /// Channel range of `band` inside each primitive's SH record.
    pub fn band_channels(&self, band: Band) -> Option<std::ops::Range<usize>> {
        let off = self.bands.channel_offset(band)?;
        Some(off..off + band.channel_count())
    }

    pub fn push(&mut self, p: Primitive) {
        assert_eq!(p.sh.len(), self.sh_stride(), "SH record length");
        self.means.push(p.mean);
        self.rotations.push(p.rotation);
        self.log_scales.push(p.log_scale);
        self.logit_opacities.push(p.logit_opacity);
        self.sh.extend_from_slice(&p.sh);
    }

    pub fn primitive(&self, i: usize) -> Primitive {
        let stride = self.sh_stride();
        Primitive {
            mean: self.means[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            logit_opacity: self.logit_opacities[i],
            sh: self.sh[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// New cloud holding the primitives at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> GaussianCloud {
        let mut out = GaussianCloud::empty(self.bands.clone());
        for &i in indices {
            out.push(self.primitive(i));
        }
        out
    }

    /// Realized scales, floored at [`SCALE_FLOOR`].
    pub fn scale(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(|s| s.exp().max(SCALE_FLOOR))
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.logit_opacities[i])
    }

    pub fn rotation_matrix(&self, i: usize) -> Matrix3<f64> {
        quat_to_rotmat(&self.rotations[i])
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = self.rotation_matrix(i);
        let s = Matrix3::from_diagonal(&self.scale(i));
        let m = r * s;
        m * m.transpose()
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > 0.0 {
                *q /= n;
            } else {
                *q = Vector4::new(1.0, 0.0, 0.0, 0.0);
            }
        }
    }

    /// Raw bytes of the structural parameters (means, rotations, scales,
    /// opacities), little-endian.
    pub fn geometry_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 11 * 8);
        for i in 0..self.len() {
            for v in self.means[i].iter().chain(self.rotations[i].iter()).chain(self.log_scales[i].iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&self.logit_opacities[i].to_le_bytes());
        }
        out
    }

    /// FNV-1a hash of [`GaussianCloud::geometry_bytes`].
    pub fn geometry_checksum(&self) -> u64 {
        fnv1a(&self.geometry_bytes())
    }

    /// True when all parameters are finite.
    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.rotations.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.log_scales.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.logit_opacities.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite())
    }

    /// Copies the structural parameters of `other` into a cloud with this
    /// cloud's band layout; SH is left zeroed.
    pub fn with_geometry_of(other: &GaussianCloud, bands: BandSet) -> GaussianCloud {
        let stride = bands.total_channels() * SH_COEFFS;
        GaussianCloud {
            bands,
            means: other.means.clone(),
            rotations: other.rotations.clone(),
            log_scales: other.log_scales.clone(),
            logit_opacities: other.logit_opacities.clone(),
            sh: vec![0.0; other.len() * stride],
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_prim(channels: usize) -> Primitive {
        Primitive {
            mean: Vector3::zeros(),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::zeros(),
            logit_opacity: 0.0,
            sh: vec![0.0; channels * SH_COEFFS],
        }
    }

    #[test]
    fn sh_layout() {
        let mut c = GaussianCloud::empty(BandSet::all());
        c.push(unit_prim(7));
        c.push(unit_prim(7));
        assert_eq!(c.sh.len(), 2 * 7 * 16);
        c.sh_block_mut(1, 6)[0] = 3.0;
        assert_eq!(c.sh[16 * 7 + 16 * 6], 3.0);
        assert_eq!(c.band_channels(Band::Nir), Some(6..7));
        assert_eq!(c.band_channels(Band::Rgb), Some(0..3));
    }

    #[test]
    fn scale_floor_applies() {
        let mut c = GaussianCloud::empty(BandSet::single(Band::G));
        let mut p = unit_prim(1);
        p.log_scale = Vector3::new(-100.0, 0.0, 1.0);
        c.push(p);
        assert_eq!(c.scale(0).x, SCALE_FLOOR);
    }

    #[test]
    fn quaternion_identity() {
        let r = quat_to_rotmat(&Vector4::new(2.0, 0.0, 0.0, 0.0));
        assert!((r - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn normalize_rotations_unit() {
        let mut c = GaussianCloud::empty(BandSet::single(Band::G));
        let mut p = unit_prim(1);
        p.rotation = Vector4::new(3.0, -1.0, 2.0, 0.5);
        c.push(p);
        c.normalize_rotations();
        assert!((c.rotations[0].norm() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn covariance_is_spd_above_floor(
            q in proptest::array::uniform4(-1.0f64..1.0),
            ls in proptest::array::uniform3(SCALE_FLOOR.ln()..2.0f64),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let mut c = GaussianCloud::empty(BandSet::single(Band::G));
            let mut p = unit_prim(1);
            p.rotation = Vector4::from(q);
            p.log_scale = Vector3::from(ls);
            c.push(p);
            let cov = c.covariance(0);
            prop_assert!((cov - cov.transpose()).abs().max() <= 1e-12 * cov.abs().max());
            // Cholesky on a scaled copy so the 1e-12 floor is well conditioned.
            let scale = 1.0 / c.scale(0).min().powi(2);
            let scaled = cov * scale;
            prop_assert!(scaled.cholesky().is_some());
        }
    }
}
