//! Analytic backward pass of the renderer and a finite-difference oracle.
//!
//! The forward pass is recomputed (projection, sort, tile lists). Sort order,
//! culling, support boxes, the alpha ceiling and the early stop are treated
//! as piecewise constant: no gradient flows through them.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::cloud::{GaussianCloud, SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::image::SpectralImage;
use crate::raster::{trace_pixel, Frame};
use crate::sh::{self, SH_COEFFS};

/// Gradients for every parameter of a [`GaussianCloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub d_means: Vec<Vector3<f64>>,
    pub d_rotations: Vec<Vector4<f64>>,
    pub d_log_scales: Vec<Vector3<f64>>,
    pub d_logit_opacities: Vec<f64>,
    /// Same layout as [`GaussianCloud::sh`].
    pub d_sh: Vec<f64>,
    /// Norm of the loss gradient with respect to the projected mean, in
    /// NDC-scaled units (pixel gradient times half the image size).
    pub screen_grad_norm: Vec<f64>,
    /// Whether the primitive survived culling in this view.
    pub visible: Vec<bool>,
}

impl ParamGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        ParamGrads {
            d_means: vec![Vector3::zeros(); n],
            d_rotations: vec![Vector4::zeros(); n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_logit_opacities: vec![0.0; n],
            d_sh: vec![0.0; cloud.sh.len()],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_means.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.d_means.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_rotations.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_logit_opacities.iter().all(|x| x.is_finite())
            && self.d_sh.iter().all(|x| x.is_finite())
            && self.screen_grad_norm.iter().all(|x| x.is_finite())
    }
}

/// Per-primitive gradients with respect to screen-space quantities.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }
}

/// Backpropagates `d_pixels` (gradient of the loss with respect to the
/// rendered image) to every cloud parameter.
pub fn backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    active_degree: usize,
    d_pixels: &SpectralImage,
) -> Result<ParamGrads> {
    if d_pixels.band() != camera.band
        || d_pixels.width() != camera.width
        || d_pixels.height() != camera.height
    {
        return Err(Error::ShapeMismatch(format!(
            "pixel gradient is {}x{} {}, camera renders {}x{} {}",
            d_pixels.width(),
            d_pixels.height(),
            d_pixels.band(),
            camera.width,
            camera.height,
            camera.band
        )));
    }
    let frame = Frame::build(cloud, camera, active_degree);
    let screen = screen_gradients(&frame, d_pixels);

    let mut grads = ParamGrads::zeros(cloud);
    let channels = match cloud.band_channels(camera.band) {
        Some(r) => r,
        None => return Ok(grads),
    };
    let half_w = camera.width as f64 / 2.0;
    let half_h = camera.height as f64 / 2.0;
    for (k, (p, parts)) in frame.prims.iter().zip(&frame.parts).enumerate() {
        let i = p.primitive_index;
        let g = &screen[k];
        grads.visible[i] = true;
        grads.screen_grad_norm[i] = Vector2::new(g.mean2d.x * half_w, g.mean2d.y * half_h).norm();

        // Color through SH decode and view direction.
        let view_norm = parts.view.norm();
        let dir = parts.view / view_norm;
        let jac = sh::sh_basis_jacobian(&dir);
        let n_coeffs = sh::coeffs_for_degree(active_degree.min(sh::MAX_DEGREE));
        let mut d_dir = Vector3::zeros();
        for (slot, ch) in channels.clone().enumerate() {
            if !(p.raw_color[slot] > 0.0) {
                continue;
            }
            let dc = g.color[slot];
            if dc == 0.0 {
                continue;
            }
            let base = i * cloud.sh_stride() + ch * SH_COEFFS;
            let coeffs = cloud.sh_block(i, ch);
            for m in 0..n_coeffs {
                grads.d_sh[base + m] += dc * parts.basis[m];
                let w = dc * coeffs[m];
                d_dir += Vector3::new(jac[m][0], jac[m][1], jac[m][2]) * w;
            }
        }
        let mut d_mean = (d_dir - dir * dir.dot(&d_dir)) / view_norm;

        // Opacity through the sigmoid.
        grads.d_logit_opacities[i] = g.opacity * p.opacity * (1.0 - p.opacity);

        // Conic -> screen covariance.
        let d_cov2d = -(p.conic * g.conic * p.conic);
        let jm = parts.jacobian;
        let d_cov_cam: Matrix3<f64> = jm.transpose() * d_cov2d * jm;
        let d_jac: Matrix2x3<f64> = 2.0 * d_cov2d * jm * parts.cov_cam;
        let w = camera.rotation;
        let d_sigma = w.transpose() * d_cov_cam * w;

        // Mean through the pinhole projection and the Jacobian.
        let (fx, fy) = (camera.fx, camera.fy);
        let (x, y, z) = (parts.p_cam.x, parts.p_cam.y, parts.p_cam.z);
        let z2 = z * z;
        let z3 = z2 * z;
        let gu = g.mean2d.x;
        let gv = g.mean2d.y;
        let d_pcam = Vector3::new(
            gu * fx / z - d_jac[(0, 2)] * fx / z2,
            gv * fy / z - d_jac[(1, 2)] * fy / z2,
            -gu * fx * x / z2 - gv * fy * y / z2 - d_jac[(0, 0)] * fx / z2 - d_jac[(1, 1)] * fy / z2
                + d_jac[(0, 2)] * 2.0 * fx * x / z3
                + d_jac[(1, 2)] * 2.0 * fy * y / z3,
        );
        d_mean += w.transpose() * d_pcam;
        grads.d_means[i] = d_mean;

        // Sigma = (R S)(R S)^T.
        let s = Matrix3::from_diagonal(&parts.scale);
        let l = parts.rot * s;
        let d_l = 2.0 * d_sigma * l;
        let d_rot = d_l * s;
        let rt_dl = parts.rot.transpose() * d_l;
        let ls = cloud.log_scales[i];
        grads.d_log_scales[i] = Vector3::from_fn(|a, _| {
            if ls[a].exp() < SCALE_FLOOR {
                0.0
            } else {
                rt_dl[(a, a)] * parts.scale[a]
            }
        });
        grads.d_rotations[i] = quat_backward(&cloud.rotations[i], &d_rot);
    }
    Ok(grads)
}

/// Accumulates per-primitive screen gradients, tile by tile, then reduces in
/// tile order so results do not depend on scheduling.
fn screen_gradients(frame: &Frame, d_pixels: &SpectralImage) -> Vec<ScreenGrad> {
    let ch = frame.channels;
    let per_tile: Vec<Vec<ScreenGrad>> = (0..frame.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = frame.tile_rect(t);
            let list = &frame.tiles[t];
            let mut acc = vec![ScreenGrad::default(); list.len()];
            let mut seq = Vec::new();
            for py in y0..y1 {
                for px in x0..x1 {
                    let base = d_pixels.index(px, py, 0);
                    let dpix = &d_pixels.data()[base..base + ch];
                    if dpix.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    trace_pixel(&frame.prims, list, px, py, &mut seq);
                    let mut suffix = [0.0f64; 3];
                    for c in seq.iter().rev() {
                        let p = &frame.prims[list[c.slot]];
                        let a = &mut acc[c.slot];
                        let weight = c.alpha * c.transmittance;
                        let mut d_alpha = 0.0;
                        for k in 0..ch {
                            a.color[k] += dpix[k] * weight;
                            d_alpha += dpix[k] * (p.color[k] * c.transmittance - suffix[k] / (1.0 - c.alpha));
                        }
                        for k in 0..ch {
                            suffix[k] += p.color[k] * weight;
                        }
                        if c.saturated {
                            continue;
                        }
                        a.opacity += d_alpha * c.falloff;
                        let d_q = d_alpha * p.opacity * c.falloff * -0.5;
                        // q = d^T A d with d = pixel - mean.
                        a.mean2d += -2.0 * d_q * (p.conic * c.offset);
                        a.conic += d_q * c.offset * c.offset.transpose();
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![ScreenGrad::default(); frame.prims.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (slot, g) in acc.iter().enumerate() {
            out[frame.tiles[t][slot]].add(g);
        }
    }
    out
}

/// Gradient with respect to the raw quaternion given the gradient with
/// respect to the rotation matrix it produces.
fn quat_backward(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let d = Vector4::new(
        2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]),
        2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]),
        2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]),
        2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]),
    );
    (d - u * u.dot(&d)) / n
}

/// Selects one scalar parameter of a cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSelector {
    Mean(usize, usize),
    Rotation(usize, usize),
    LogScale(usize, usize),
    LogitOpacity(usize),
    /// Primitive, channel, coefficient.
    Sh(usize, usize, usize),
}

impl ParamSelector {
    pub fn get_mut(self, cloud: &mut GaussianCloud) -> &mut f64 {
        match self {
            ParamSelector::Mean(i, a) => &mut cloud.means[i][a],
            ParamSelector::Rotation(i, a) => &mut cloud.rotations[i][a],
            ParamSelector::LogScale(i, a) => &mut cloud.log_scales[i][a],
            ParamSelector::LogitOpacity(i) => &mut cloud.logit_opacities[i],
            ParamSelector::Sh(i, ch, m) => &mut cloud.sh_block_mut(i, ch)[m],
        }
    }

    /// Reads the matching entry of `grads`.
    pub fn grad(self, cloud: &GaussianCloud, grads: &ParamGrads) -> f64 {
        match self {
            ParamSelector::Mean(i, a) => grads.d_means[i][a],
            ParamSelector::Rotation(i, a) => grads.d_rotations[i][a],
            ParamSelector::LogScale(i, a) => grads.d_log_scales[i][a],
            ParamSelector::LogitOpacity(i) => grads.d_logit_opacities[i],
            ParamSelector::Sh(i, ch, m) => grads.d_sh[i * cloud.sh_stride() + ch * SH_COEFFS + m],
        }
    }

    /// Every scalar parameter of `cloud`.
    pub fn all(cloud: &GaussianCloud) -> Vec<ParamSelector> {
        let mut out = Vec::new();
        for i in 0..cloud.len() {
            out.extend((0..3).map(|a| ParamSelector::Mean(i, a)));
            out.extend((0..4).map(|a| ParamSelector::Rotation(i, a)));
            out.extend((0..3).map(|a| ParamSelector::LogScale(i, a)));
            out.push(ParamSelector::LogitOpacity(i));
            for ch in 0..cloud.channels() {
                out.extend((0..SH_COEFFS).map(|m| ParamSelector::Sh(i, ch, m)));
            }
        }
        out
    }
}

/// Central finite difference of `loss_fn` with respect to one parameter.
pub fn fd_gradient<F>(cloud: &GaussianCloud, loss_fn: F, param: ParamSelector, step: f64) -> f64
where
    F: Fn(&GaussianCloud) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = cloud.clone();
    let x0 = *param.get_mut(&mut work);
    *param.get_mut(&mut work) = x0 + step;
    let up = loss_fn(&work);
    *param.get_mut(&mut work) = x0 - step;
    let down = loss_fn(&work);
    (up - down) / (2.0 * step)
}

/// `sum(d_pixels * render(cloud))`, the linear functional whose gradient is
/// what [`backward`] computes.
pub fn pixel_functional(
    cloud: &GaussianCloud,
    camera: &Camera,
    active_degree: usize,
    d_pixels: &SpectralImage,
) -> f64 {
    let img = crate::raster::render(cloud, camera, active_degree);
    img.data().iter().zip(d_pixels.data()).map(|(a, b)| a * b).sum()
}
