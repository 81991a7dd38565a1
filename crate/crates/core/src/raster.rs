//! Forward rendering: EWA projection, global depth sort and front-to-back
//! alpha compositing over 16x16 pixel tiles.
//!
//! Every primitive contributes only to pixels whose centers fall inside its
//! screen-space box of half-width `3 * sqrt(lambda_max(cov2d))`. Tiling is a
//! pure acceleration structure; a pixel sees exactly the same contributor
//! sequence whether it is rendered by tile or by a full scan.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::band::Band;
use crate::camera::Camera;
use crate::cloud::GaussianCloud;
use crate::image::SpectralImage;
use crate::sh;

/// Primitives closer than this (camera-space z) are culled.
pub const NEAR_CLIP: f64 = 0.01;
/// Low-pass dilation added to the diagonal of every screen covariance (px^2).
pub const LOW_PASS: f64 = 0.3;
/// Ceiling on the per-pixel alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;
/// Support half-width in standard deviations.
pub const SUPPORT_SIGMAS: f64 = 3.0;

/// A primitive after projection into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Screen covariance including the low-pass dilation.
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// Decoded color per channel of the camera band, clamped below at 0.
    pub color: [f64; 3],
    /// Decoded color before clamping.
    pub raw_color: [f64; 3],
    pub opacity: f64,
    pub primitive_index: usize,
    /// Support half-width in pixels.
    pub radius: f64,
    /// Inclusive pixel bounds `[x0, x1] x [y0, y1]` of the support, clipped
    /// to the image.
    pub bounds: [usize; 4],
}

impl ProjectedGaussian {
    #[inline]
    pub fn covers(&self, px: usize, py: usize) -> bool {
        px >= self.bounds[0] && px <= self.bounds[1] && py >= self.bounds[2] && py <= self.bounds[3]
    }
}

/// Intermediate quantities of the projection of one primitive.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionParts {
    pub p_cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// `W Sigma W^T`.
    pub cov_cam: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub scale: Vector3<f64>,
    /// Unnormalized view vector `mu - camera_center`.
    pub view: Vector3<f64>,
    pub basis: [f64; sh::SH_COEFFS],
}

/// Projects primitive `i`, returning `None` when it is culled.
pub(crate) fn project_one(
    cloud: &GaussianCloud,
    camera: &Camera,
    i: usize,
    active_degree: usize,
) -> Option<(ProjectedGaussian, ProjectionParts)> {
    let channels = cloud.band_channels(camera.band)?;
    let mean = cloud.means[i];
    let p_cam = camera.world_to_camera(&mean);
    let z = p_cam.z;
    if !(z > NEAR_CLIP) {
        return None;
    }
    let rot = cloud.rotation_matrix(i);
    let scale = cloud.scale(i);
    let l = rot * Matrix3::from_diagonal(&scale);
    let cov_world = l * l.transpose();
    let w = camera.rotation;
    let cov_cam = w * cov_world * w.transpose();
    let (fx, fy) = (camera.fx, camera.fy);
    let jacobian = Matrix2x3::new(
        fx / z,
        0.0,
        -fx * p_cam.x / (z * z),
        0.0,
        fy / z,
        -fy * p_cam.y / (z * z),
    );
    let mut cov2d = jacobian * cov_cam * jacobian.transpose();
    cov2d[(0, 0)] += LOW_PASS;
    cov2d[(1, 1)] += LOW_PASS;
    // Exact symmetry keeps the conic symmetric bit-for-bit.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)] / det, -off / det, -off / det, cov2d[(0, 0)] / det);
    let mean2d = Vector2::new(fx * p_cam.x / z + camera.cx, fy * p_cam.y / z + camera.cy);

    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = SUPPORT_SIGMAS * lambda_max.sqrt();
    let x0 = (mean2d.x - radius).ceil().max(0.0);
    let x1 = (mean2d.x + radius).floor().min(camera.width as f64 - 1.0);
    let y0 = (mean2d.y - radius).ceil().max(0.0);
    let y1 = (mean2d.y + radius).floor().min(camera.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }

    let view = mean - camera.center();
    let basis = sh::sh_basis(&(view / view.norm()));
    let mut raw_color = [0.0; 3];
    let mut color = [0.0; 3];
    for (k, ch) in channels.enumerate() {
        raw_color[k] = sh::decode_raw(&basis, cloud.sh_block(i, ch), active_degree);
        color[k] = raw_color[k].max(0.0);
    }
    let projected = ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        depth: z,
        color,
        raw_color,
        opacity: cloud.opacity(i),
        primitive_index: i,
        radius,
        bounds: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    };
    let parts = ProjectionParts {
        p_cam,
        jacobian,
        cov_cam,
        rot,
        scale,
        view,
        basis,
    };
    Some((projected, parts))
}

/// Projects every primitive of `cloud` into `camera`, dropping culled ones.
/// Colors are decoded for the camera's band. Output keeps storage order.
pub fn project(cloud: &GaussianCloud, camera: &Camera, active_degree: usize) -> Vec<ProjectedGaussian> {
    (0..cloud.len())
        .filter_map(|i| project_one(cloud, camera, i, active_degree).map(|(p, _)| p))
        .collect()
}

/// Sorts by ascending depth, ties broken by primitive index.
pub fn depth_sort(prims: &mut [ProjectedGaussian]) {
    prims.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.primitive_index.cmp(&b.primitive_index))
    });
}

/// Projected, depth-sorted primitives with per-tile lists.
pub(crate) struct Frame {
    pub prims: Vec<ProjectedGaussian>,
    pub parts: Vec<ProjectionParts>,
    /// Per tile, indices into `prims` in depth order.
    pub tiles: Vec<Vec<usize>>,
    pub tiles_x: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Frame {
    pub fn build(cloud: &GaussianCloud, camera: &Camera, active_degree: usize) -> Frame {
        let mut both: Vec<(ProjectedGaussian, ProjectionParts)> = (0..cloud.len())
            .filter_map(|i| project_one(cloud, camera, i, active_degree))
            .collect();
        both.sort_by(|a, b| {
            a.0.depth
                .total_cmp(&b.0.depth)
                .then(a.0.primitive_index.cmp(&b.0.primitive_index))
        });
        let (prims, parts): (Vec<_>, Vec<_>) = both.into_iter().unzip();
        let tiles_x = camera.width.div_ceil(TILE_SIZE);
        let tiles_y = camera.height.div_ceil(TILE_SIZE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, p) in prims.iter().enumerate() {
            let [x0, x1, y0, y1] = p.bounds;
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    tiles[ty * tiles_x + tx].push(k);
                }
            }
        }
        Frame {
            prims,
            parts,
            tiles,
            tiles_x,
            width: camera.width,
            height: camera.height,
            channels: camera.band.channel_count(),
        }
    }

    /// Pixel rectangle `(x0, x1, y0, y1)` (exclusive ends) of tile `t`.
    pub fn tile_rect(&self, t: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(self.width), y0, (y0 + TILE_SIZE).min(self.height))
    }
}

/// One term of a pixel's compositing sequence.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    /// Index into the tile list the pixel was traced with.
    pub slot: usize,
    /// Effective alpha after the falloff and ceiling.
    pub alpha: f64,
    /// Gaussian falloff `exp(-q/2)`.
    pub falloff: f64,
    /// Offset `pixel - mean2d`.
    pub offset: Vector2<f64>,
    /// True when the ceiling was active.
    pub saturated: bool,
    /// Transmittance before this term.
    pub transmittance: f64,
}

/// Traces the compositing sequence of pixel `(px, py)` over `list`.
pub(crate) fn trace_pixel(
    prims: &[ProjectedGaussian],
    list: &[usize],
    px: usize,
    py: usize,
    out: &mut Vec<Contribution>,
) {
    out.clear();
    let pixel = Vector2::new(px as f64, py as f64);
    let mut t = 1.0;
    for (slot, &k) in list.iter().enumerate() {
        let p = &prims[k];
        if !p.covers(px, py) {
            continue;
        }
        let d = pixel - p.mean2d;
        let q = (d.transpose() * p.conic * d)[(0, 0)];
        let falloff = (-0.5 * q).exp();
        let raw = p.opacity * falloff;
        let saturated = raw > ALPHA_MAX;
        let alpha = if saturated { ALPHA_MAX } else { raw };
        out.push(Contribution {
            slot,
            alpha,
            falloff,
            offset: d,
            saturated,
            transmittance: t,
        });
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
}

/// Renders `cloud` from `camera` in the camera's band on a black background.
///
/// Values are not clamped above; apply [`SpectralImage::clamped`] before
/// writing out.
pub fn render(cloud: &GaussianCloud, camera: &Camera, active_degree: usize) -> SpectralImage {
    let frame = Frame::build(cloud, camera, active_degree);
    render_frame(&frame, camera.band)
}

pub(crate) fn render_frame(frame: &Frame, band: Band) -> SpectralImage {
    let ch = frame.channels;
    let tiles: Vec<Vec<f64>> = (0..frame.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = frame.tile_rect(t);
            let list = &frame.tiles[t];
            let mut buf = vec![0.0; (x1 - x0) * (y1 - y0) * ch];
            let mut seq = Vec::new();
            for py in y0..y1 {
                for px in x0..x1 {
                    trace_pixel(&frame.prims, list, px, py, &mut seq);
                    let base = ((py - y0) * (x1 - x0) + (px - x0)) * ch;
                    for c in &seq {
                        let p = &frame.prims[list[c.slot]];
                        let w = c.alpha * c.transmittance;
                        for k in 0..ch {
                            buf[base + k] += p.color[k] * w;
                        }
                    }
                }
            }
            buf
        })
        .collect();
    let mut img = SpectralImage::zeros(band, frame.width, frame.height);
    for (t, buf) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = frame.tile_rect(t);
        let row = (x1 - x0) * ch;
        for py in y0..y1 {
            let dst = img.index(x0, py, 0);
            let src = (py - y0) * row;
            img.data_mut()[dst..dst + row].copy_from_slice(&buf[src..src + row]);
        }
    }
    img
}

/// Hash of every discrete decision the renderer makes (culling, color
/// clamps, scale floors, per-pixel contributor sequences, alpha ceilings and
/// early stops). Two parameter settings with equal signatures lie on the same
/// smooth piece of the rendering function.
pub fn gate_signature(cloud: &GaussianCloud, camera: &Camera, active_degree: usize) -> u64 {
    let frame = Frame::build(cloud, camera, active_degree);
    let mut bytes = Vec::new();
    for (p, parts) in frame.prims.iter().zip(&frame.parts) {
        bytes.extend_from_slice(&(p.primitive_index as u64).to_le_bytes());
        for k in 0..frame.channels {
            bytes.push((p.raw_color[k] > 0.0) as u8);
        }
        for (s, ls) in parts.scale.iter().zip(cloud.log_scales[p.primitive_index].iter()) {
            bytes.push((ls.exp() < *s) as u8);
        }
        bytes.extend(p.bounds.iter().flat_map(|b| (*b as u64).to_le_bytes()));
    }
    let mut seq = Vec::new();
    for (t, list) in frame.tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = frame.tile_rect(t);
        for py in y0..y1 {
            for px in x0..x1 {
                trace_pixel(&frame.prims, list, px, py, &mut seq);
                bytes.extend_from_slice(&(seq.len() as u32).to_le_bytes());
                for c in &seq {
                    bytes.extend_from_slice(&(list[c.slot] as u32).to_le_bytes());
                    bytes.push(c.saturated as u8);
                }
            }
        }
    }
    crate::cloud::fnv1a(&bytes)
}
