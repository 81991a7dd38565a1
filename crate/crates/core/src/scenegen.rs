//! Synthetic multi-spectral scenes with known ground truth.
//!
//! The ground truth is a patch of terrain: flat Gaussians with
//! view-independent colors scattered over a ground square (world up is +y),
//! seen from cameras on a high circular orbit, much like a drone survey. The
//! seed points handed to training are the true means plus Gaussian noise,
//! colored by sampling the rendered images, as a structure-from-motion
//! reconstruction would provide.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::band::{Band, BandSet};
use crate::camera::Camera;
use crate::cloud::{logit, GaussianCloud, Primitive};
use crate::error::{Error, Result};
use crate::image::SpectralImage;
use crate::manifest::{split_for_index, InitPoint, SceneManifest, View};
use crate::raster::render;
use crate::sh::{dc_from_color, SH_COEFFS};

/// How band colors relate to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// Every channel drawn independently.
    Independent,
    /// All channels are affine functions of one material scalar.
    Correlated,
    /// Correlated, plus a checker of small primitives that matches the
    /// surface under it in every band except NIR, where it forms a
    /// high-contrast pattern.
    NirDetail,
}

impl fmt::Display for ColorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorMode::Independent => "independent",
            ColorMode::Correlated => "correlated",
            ColorMode::NirDetail => "nir_detail",
        })
    }
}

impl FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "independent" => Ok(ColorMode::Independent),
            "correlated" => Ok(ColorMode::Correlated),
            "nir_detail" => Ok(ColorMode::NirDetail),
            other => Err(Error::InvalidSpec(format!("unknown color mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub primitive_count: usize,
    /// Half-size of the region holding the primitives.
    pub extent: f64,
    pub camera_count: usize,
    pub orbit_radius: f64,
    pub image_size: usize,
    pub mode: ColorMode,
    pub bands: BandSet,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            primitive_count: 50,
            extent: 1.0,
            camera_count: 8,
            orbit_radius: 4.0,
            image_size: 64,
            mode: ColorMode::Correlated,
            bands: BandSet::all(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitive_count < 1 {
            return Err(Error::InvalidSpec("primitive_count must be at least 1".into()));
        }
        if self.camera_count < 2 {
            return Err(Error::InvalidSpec("camera_count must be at least 2".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidSpec("image_size must be at least 16".into()));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::InvalidSpec("extent must be positive".into()));
        }
        if !(self.orbit_radius > 2.0 * self.extent) {
            return Err(Error::InvalidSpec("orbit_radius must exceed twice the extent".into()));
        }
        if self.mode == ColorMode::NirDetail && !self.bands.contains(Band::Nir) {
            return Err(Error::InvalidSpec("nir_detail needs the NIR band".into()));
        }
        Ok(())
    }
}

/// Layout of the NIR detail checkerboard (x, y, z counts).
pub const DETAIL_GRID: [usize; 3] = [6, 1, 6];

/// Generated scene: ground truth, the manifest (images held in memory) and,
/// for `nir_detail`, the box containing the detail cluster.
#[derive(Clone, Debug)]
pub struct Scene {
    pub truth: GaussianCloud,
    pub manifest: SceneManifest,
    pub detail_region: Option<(Vector3<f64>, Vector3<f64>)>,
}

/// Affine band response of a material scalar `m`.
pub fn material_color(band: Band, m: f64) -> Vec<f64> {
    match band {
        Band::Rgb => vec![0.15 + 0.6 * m, 0.1 + 0.75 * m, 0.3 + 0.45 * m],
        Band::G => vec![0.15 + 0.7 * m],
        Band::R => vec![0.25 + 0.5 * m],
        Band::Re => vec![0.3 + 0.6 * m],
        Band::Nir => vec![0.2 + 0.8 * m],
    }
}

fn push_colored(cloud: &mut GaussianCloud, mut p: Primitive, colors: &BTreeMap<Band, Vec<f64>>) {
    let bands = cloud.bands().clone();
    p.sh = vec![0.0; cloud.sh_stride()];
    for band in bands.iter() {
        let off = bands.channel_offset(band).expect("band in set");
        for (c, v) in colors[&band].iter().enumerate() {
            p.sh[(off + c) * SH_COEFFS] = dc_from_color(*v);
        }
    }
    cloud.push(p);
}

fn band_colors<R: Rng>(spec: &SceneSpec, m: f64, rng: &mut R) -> BTreeMap<Band, Vec<f64>> {
    spec.bands
        .iter()
        .map(|b| {
            let c = match spec.mode {
                ColorMode::Independent => (0..b.channel_count()).map(|_| rng.random_range(0.1..0.9)).collect(),
                _ => material_color(b, m),
            };
            (b, c)
        })
        .collect()
}

/// Flat, slightly tilted primitives scattered over the ground square
/// `[-extent, extent]^2`, avoiding a disc of radius `hole.1` around `hole.0`.
fn terrain<R: Rng>(spec: &SceneSpec, hole: Option<(Vector3<f64>, f64)>, rng: &mut R) -> GaussianCloud {
    let mut cloud = GaussianCloud::empty(spec.bands.clone());
    let e = spec.extent;
    while cloud.len() < spec.primitive_count {
        let mean = Vector3::new(
            rng.random_range(-e..e),
            0.05 * e * rng.random_range(-1.0..1.0),
            rng.random_range(-e..e),
        );
        if hole.is_some_and(|(c, r)| (mean - c).norm() < r) {
            continue;
        }
        let size: f64 = e * rng.random_range(0.1..0.2);
        let log_scale = Vector3::new(
            (size * rng.random_range(0.8..1.25)).ln(),
            (0.3 * size).ln(),
            (size * rng.random_range(0.8..1.25)).ln(),
        );
        let tilt = 0.15;
        let rotation = Vector4::new(
            1.0,
            tilt * rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            tilt * rng.random_range(-1.0..1.0),
        )
        .normalize();
        let opacity = rng.random_range(0.6..0.95);
        let m: f64 = rng.random();
        let colors = band_colors(spec, m, rng);
        let p = Primitive {
            mean,
            rotation,
            log_scale,
            logit_opacity: logit(opacity),
            sh: Vec::new(),
        };
        push_colored(&mut cloud, p, &colors);
    }
    cloud
}

/// Center of the NIR detail patch on the ground plane.
fn detail_center(e: f64) -> Vector3<f64> {
    Vector3::new(0.45 * e, 0.0, 0.45 * e)
}

/// Adds an opaque ground tile and, on top of it, a checkerboard of small
/// primitives that share the tile's color in every band except NIR. Returns
/// the bounding box of the checkerboard.
fn add_detail<R: Rng>(spec: &SceneSpec, cloud: &mut GaussianCloud, rng: &mut R) -> (Vector3<f64>, Vector3<f64>) {
    let e = spec.extent;
    let center = detail_center(e);
    let m: f64 = rng.random();
    let tile_colors = band_colors(spec, m, rng);
    let tile = Primitive {
        mean: center - Vector3::new(0.0, 0.02 * e, 0.0),
        rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        log_scale: Vector3::new((0.8 * e).ln(), (0.02 * e).ln(), (0.8 * e).ln()),
        logit_opacity: logit(0.995),
        sh: Vec::new(),
    };
    push_colored(cloud, tile, &tile_colors);

    let spacing = 0.11 * e;
    let n = DETAIL_GRID;
    let half = Vector3::new((n[0] - 1) as f64, 0.0, (n[2] - 1) as f64) * (spacing / 2.0);
    for i in 0..n[0] {
        for k in 0..n[2] {
            let pos = center - half + Vector3::new(i as f64, 0.0, k as f64) * spacing + Vector3::new(0.0, 0.01 * e, 0.0);
            let nir = if (i + k) % 2 == 0 { 0.95 } else { 0.05 };
            let mut colors = tile_colors.clone();
            if let Some(c) = colors.get_mut(&Band::Nir) {
                c[0] = nir;
            }
            let p = Primitive {
                mean: pos,
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: Vector3::new((0.04 * e).ln(), (0.01 * e).ln(), (0.04 * e).ln()),
                logit_opacity: logit(0.95),
                sh: Vec::new(),
            };
            push_colored(cloud, p, &colors);
        }
    }
    let margin = Vector3::new(spacing, 0.1 * e, spacing);
    (center - half - margin, center + half + margin)
}

/// Cameras of `band` on a circular orbit, looking down at the origin from
/// 70 degrees of elevation. Each band sits at its own azimuth phase, as the
/// sensors of a multi-camera rig do.
pub fn orbit_cameras(spec: &SceneSpec, band: Band) -> Result<Vec<Camera>> {
    let size = spec.image_size;
    // field of view holding a disc of 1.5 extents
    let f = 0.5 * size as f64 * spec.orbit_radius / (1.5 * spec.extent);
    let el = 70f64.to_radians();
    let phase = band.rank() as f64 / Band::ALL.len() as f64;
    (0..spec.camera_count)
        .map(|k| {
            let az = std::f64::consts::TAU * (k as f64 + phase) / spec.camera_count as f64;
            let eye = spec.orbit_radius * Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), f, f, size, size, band)
        })
        .collect()
}

fn band_file(band: Band, k: usize) -> PathBuf {
    PathBuf::from(format!("images/{}_{k:03}.png", band.name().to_ascii_lowercase()))
}

/// Nearest-pixel color of `p` in the first view of `band` that sees it.
fn reproject(p: &Vector3<f64>, band: Band, views: &[(Camera, SpectralImage)]) -> Vec<f64> {
    for (cam, img) in views.iter().filter(|(c, _)| c.band == band) {
        let q = cam.world_to_camera(p);
        if q.z <= 0.0 {
            continue;
        }
        let u = (cam.fx * q.x / q.z + cam.cx).round();
        let v = (cam.fy * q.y / q.z + cam.cy).round();
        if u >= 0.0 && v >= 0.0 && (u as usize) < cam.width && (v as usize) < cam.height {
            return (0..img.channels()).map(|c| img.get(u as usize, v as usize, c)).collect();
        }
    }
    vec![0.5; band.channel_count()]
}

/// Builds the ground-truth cloud and renders the manifest images.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let detail = spec.mode == ColorMode::NirDetail;
    let hole = detail.then(|| (detail_center(spec.extent), 0.5 * spec.extent));
    let mut truth = terrain(spec, hole, &mut rng);
    // the ground tile is seeded like any other primitive
    let seeded = truth.len() + detail as usize;
    let detail_region = detail.then(|| add_detail(spec, &mut truth, &mut rng));

    let mut rendered = Vec::new();
    let mut views = Vec::new();
    for band in spec.bands.iter() {
        for (k, cam) in orbit_cameras(spec, band)?.into_iter().enumerate() {
            let img = render(&truth, &cam, 0).quantized();
            views.push(View {
                camera: cam.clone(),
                image: band_file(band, k),
                split: split_for_index(k),
            });
            rendered.push((cam, img));
        }
    }

    // seed points: perturbed true means; the detail cluster contributes only
    // every eighth primitive, as a sparse reconstruction would
    let noise = Normal::new(0.0, 0.01 * spec.extent).expect("positive sigma");
    let mut init_points = Vec::new();
    for i in 0..truth.len() {
        if i >= seeded && (i - seeded) % 8 != 0 {
            continue;
        }
        let pos = truth.means[i] + Vector3::from_fn(|_, _| noise.sample(&mut rng));
        let colors = spec.bands.iter().map(|b| (b, reproject(&pos, b, &rendered))).collect();
        init_points.push(InitPoint { pos, colors });
    }

    let mut manifest = SceneManifest::new(spec.bands.clone(), views, init_points, PathBuf::from("."))?;
    for (k, (_, img)) in rendered.into_iter().enumerate() {
        manifest.set_image(k, img)?;
    }
    Ok(Scene {
        truth,
        manifest,
        detail_region,
    })
}

/// Mean absolute 4-neighbour Laplacian over interior pixels and channels.
pub fn laplacian_energy(img: &SpectralImage) -> f64 {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..ch {
                let l = img.get(x - 1, y, c) + img.get(x + 1, y, c) + img.get(x, y - 1, c) + img.get(x, y + 1, c)
                    - 4.0 * img.get(x, y, c);
                sum += l.abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}
