//! Training loss and image quality metrics.
//!
//! The loss is `(1 - lambda) * L1 + lambda * (1 - SSIM) / 2`. SSIM uses an
//! 11x11 Gaussian window (sigma 1.5) over the valid region only (no padding),
//! computed per channel and averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SpectralImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the D-SSIM term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::SchemaViolation(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-region separable correlation of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-region map back onto the
/// full plane.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for k in 0..SSIM_WINDOW {
                rows[(y + k) * ow + x] += taps[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += taps[k] * v;
            }
        }
    }
    out
}

/// Per-channel SSIM statistics over the valid region.
struct SsimChannel {
    map: Vec<f64>,
    /// d mean(SSIM map) / d x, when requested.
    grad: Option<Vec<f64>>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> SsimChannel {
    let taps = gaussian_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let sxx = filter_valid(&xx, w, h, &taps);
    let syy = filter_valid(&yy, w, h, &taps);
    let sxy = filter_valid(&xy, w, h, &taps);
    let n = mx.len();
    let mut map = vec![0.0; n];
    let mut g_m = vec![0.0; if want_grad { n } else { 0 }];
    let mut g_sxx = g_m.clone();
    let mut g_sxy = g_m.clone();
    let inv_n = 1.0 / n as f64;
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let vx = sxx[p] - ux * ux;
        let vy = syy[p] - uy * uy;
        let cxy = sxy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        map[p] = s;
        if want_grad {
            let d_ux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
            let d_vx = -s / b2;
            let d_cxy = 2.0 * a1 / (b1 * b2);
            g_m[p] = inv_n * (d_ux - 2.0 * ux * d_vx - uy * d_cxy);
            g_sxx[p] = inv_n * d_vx;
            g_sxy[p] = inv_n * d_cxy;
        }
    }
    let grad = want_grad.then(|| {
        let am = filter_valid_adjoint(&g_m, w, h, &taps);
        let axx = filter_valid_adjoint(&g_sxx, w, h, &taps);
        let axy = filter_valid_adjoint(&g_sxy, w, h, &taps);
        (0..w * h).map(|q| am[q] + 2.0 * x[q] * axx[q] + y[q] * axy[q]).collect()
    });
    SsimChannel { map, grad }
}

fn check_pair(a: &SpectralImage, b: &SpectralImage) -> Result<()> {
    a.same_shape(b)
}

fn check_ssim_size(a: &SpectralImage) -> Result<()> {
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width(),
            height: a.height(),
        });
    }
    Ok(())
}

/// Per-channel SSIM maps over the valid region.
pub fn ssim_maps(a: &SpectralImage, b: &SpectralImage) -> Result<Vec<Vec<f64>>> {
    check_pair(a, b)?;
    check_ssim_size(a)?;
    Ok((0..a.channels())
        .map(|c| ssim_channel(&a.channel_plane(c), &b.channel_plane(c), a.width(), a.height(), false).map)
        .collect())
}

/// Mean SSIM, averaged over channels.
pub fn ssim(a: &SpectralImage, b: &SpectralImage) -> Result<f64> {
    if a == b {
        check_ssim_size(a)?;
        return Ok(1.0);
    }
    let maps = ssim_maps(a, b)?;
    let per: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64)
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Peak signal-to-noise ratio for [0, 1] images; `+inf` when identical.
pub fn psnr(a: &SpectralImage, b: &SpectralImage) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Training loss of `rendered` against `truth` and its gradient with respect
/// to `rendered`.
pub fn loss(rendered: &SpectralImage, truth: &SpectralImage, cfg: &LossConfig) -> Result<(f64, SpectralImage)> {
    check_pair(rendered, truth)?;
    let n = rendered.data().len() as f64;
    let lambda = cfg.lambda;
    let mut grad = SpectralImage::zeros(rendered.band(), rendered.width(), rendered.height());
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data_mut().iter_mut().zip(rendered.data()).zip(truth.data()) {
        let d = r - t;
        l1 += d.abs();
        *g = (1.0 - lambda) * d.signum() * (d != 0.0) as u8 as f64 / n;
    }
    l1 /= n;
    let mut total = (1.0 - lambda) * l1;
    if lambda > 0.0 {
        check_ssim_size(rendered)?;
        let ch = rendered.channels();
        let (w, h) = (rendered.width(), rendered.height());
        let mut ssim_sum = 0.0;
        for c in 0..ch {
            let s = ssim_channel(&rendered.channel_plane(c), &truth.channel_plane(c), w, h, true);
            ssim_sum += s.map.iter().sum::<f64>() / s.map.len() as f64;
            let gs = s.grad.expect("gradient requested");
            // d/dx of lambda * (1 - mean_c ssim_c) / 2.
            let scale = -lambda * 0.5 / ch as f64;
            for (q, v) in gs.iter().enumerate() {
                grad.data_mut()[q * ch + c] += scale * v;
            }
        }
        let ssim_mean = if rendered == truth { 1.0 } else { ssim_sum / ch as f64 };
        total += lambda * (1.0 - ssim_mean) * 0.5;
    }
    Ok((total, grad))
}

/// PSNR for JSON output: infinity becomes the string `"inf"`.
pub fn psnr_json(v: f64) -> serde_json::Value {
    if v.is_infinite() {
        serde_json::Value::String("inf".into())
    } else {
        serde_json::json!(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::band::Band;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(band: Band, w: usize, h: usize, rng: &mut ChaCha8Rng) -> SpectralImage {
        let n = w * h * band.channel_count();
        SpectralImage::from_data(band, w, h, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kernel_sums_to_one() {
        let t = gaussian_taps();
        let sum2d: f64 = t.iter().flat_map(|a| t.iter().map(move |b| a * b)).sum();
        assert!((sum2d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(Band::Rgb, 16, 16, &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let (l, g) = loss(&a, &a, &LossConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn psnr_constant_offsets() {
        let a = SpectralImage::filled(Band::G, 16, 16, 0.2);
        let b = SpectralImage::filled(Band::G, 16, 16, 0.7);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
        let c = SpectralImage::filled(Band::G, 16, 16, 0.3);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_black_vs_white() {
        let a = SpectralImage::filled(Band::G, 16, 16, 0.0);
        let b = SpectralImage::filled(Band::G, 16, 16, 1.0);
        let expected = (SSIM_C1 * SSIM_C2) / ((1.0 + SSIM_C1) * SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1e-4).abs() < 1e-7);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = random(Band::Rgb, 20, 17, &mut rng);
            let b = random(Band::Rgb, 20, 17, &mut rng);
            assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            for m in ssim_maps(&a, &b).unwrap() {
                assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn errors() {
        let a = SpectralImage::zeros(Band::G, 10, 16);
        assert!(matches!(ssim(&a, &a.clone()), Err(Error::ImageTooSmall { .. })));
        let b = SpectralImage::zeros(Band::G, 12, 16);
        assert!(matches!(psnr(&a, &b), Err(Error::ShapeMismatch(_))));
        let c = SpectralImage::zeros(Band::R, 10, 16);
        assert!(matches!(loss(&a, &c, &LossConfig::default()), Err(Error::BandMismatch(_))));
    }

    #[test]
    fn pure_l1() {
        let a = SpectralImage::filled(Band::G, 16, 16, 0.5);
        let t = SpectralImage::zeros(Band::G, 16, 16);
        let (l, _) = loss(&a, &t, &LossConfig { lambda: 0.0 }).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for band in [Band::G, Band::Rgb] {
            let r = random(band, 16, 16, &mut rng);
            let t = random(band, 16, 16, &mut rng);
            let cfg = LossConfig::default();
            let (_, g) = loss(&r, &t, &cfg).unwrap();
            for _ in 0..20 {
                let q = rng.random_range(0..r.data().len());
                let h = 1e-6;
                let mut up = r.clone();
                up.data_mut()[q] += h;
                let mut dn = r.clone();
                dn.data_mut()[q] -= h;
                let fd = (loss(&up, &t, &cfg).unwrap().0 - loss(&dn, &t, &cfg).unwrap().0) / (2.0 * h);
                let an = g.data()[q];
                let rel = (fd - an).abs() / an.abs().max(fd.abs());
                assert!(rel < 1e-4, "band {band} pixel {q}: fd {fd} analytic {an}");
            }
        }
    }
}
