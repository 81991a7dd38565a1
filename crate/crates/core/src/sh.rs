//! Real spherical harmonics up to degree 3.
//!
//! Coefficients are ordered by degree then order: `Y00; Y1-1 Y10 Y11;
//! Y2-2 .. Y22; Y3-3 .. Y33`, with the sign conventions used by common
//! Gaussian splatting implementations. Colors decode as `dot(basis, c) + 0.5`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Coefficients per scalar channel (degree 3).
pub const SH_COEFFS: usize = 16;
pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
pub const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

const UNIT_TOL: f64 = 1e-9;

/// Number of coefficients used at `degree`.
pub const fn coeffs_for_degree(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// SH coefficient that makes a degree-0 block decode to `color`.
pub fn dc_from_color(color: f64) -> f64 {
    (color - 0.5) / C0
}

/// Basis values for a unit `direction`.
pub fn eval_sh_basis(direction: &Vector3<f64>) -> Result<[f64; SH_COEFFS]> {
    let n = direction.norm();
    if !((n - 1.0).abs() <= UNIT_TOL) {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(sh_basis(direction))
}

/// Basis polynomials evaluated at `d` without a unit-length check.
pub fn sh_basis(d: &Vector3<f64>) -> [f64; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        C0,
        -C1 * y,
        C1 * z,
        -C1 * x,
        C2[0] * x * y,
        C2[1] * y * z,
        C2[2] * (2.0 * zz - xx - yy),
        C2[3] * x * z,
        C2[4] * (xx - yy),
        C3[0] * y * (3.0 * xx - yy),
        C3[1] * x * y * z,
        C3[2] * y * (4.0 * zz - xx - yy),
        C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        C3[4] * x * (4.0 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to the
/// components of `d` (treated as independent variables).
pub fn sh_basis_jacobian(d: &Vector3<f64>) -> [[f64; 3]; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -C1, 0.0],
        [0.0, 0.0, C1],
        [-C1, 0.0, 0.0],
        [C2[0] * y, C2[0] * x, 0.0],
        [0.0, C2[1] * z, C2[1] * y],
        [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z],
        [C2[3] * z, 0.0, C2[3] * x],
        [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0],
        [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y],
        [
            -2.0 * C3[2] * x * y,
            C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * C3[2] * y * z,
        ],
        [
            -6.0 * C3[3] * x * z,
            -6.0 * C3[3] * y * z,
            C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * C3[4] * x * y,
            8.0 * C3[4] * x * z,
        ],
        [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)],
        [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0],
    ]
}

/// `dot(basis, coeffs) + 0.5` over the first `(degree + 1)^2` terms, with no
/// clamping.
#[inline]
pub fn decode_raw(basis: &[f64; SH_COEFFS], coeffs: &[f64], degree: usize) -> f64 {
    let n = coeffs_for_degree(degree.min(MAX_DEGREE));
    basis[..n].iter().zip(&coeffs[..n]).map(|(b, c)| b * c).sum::<f64>() + 0.5
}

/// Decoded color in [0, 1] for a unit `direction`.
pub fn decode_color(coeffs: &[f64], direction: &Vector3<f64>, active_degree: usize) -> Result<f64> {
    let basis = eval_sh_basis(direction)?;
    Ok(decode_raw(&basis, coeffs, active_degree).clamp(0.0, 1.0))
}
