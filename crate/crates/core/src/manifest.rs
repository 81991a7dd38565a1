//! Scene manifests: cameras, image files, train/validation split and the
//! sparse seed point cloud, stored as JSON next to the PNG images.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::band::{Band, BandSet};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{check_color, probe_png, SpectralImage};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Every image whose per-band index is a multiple of this goes to validation.
pub const VALIDATION_STRIDE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Split assigned to the `index`-th image of a band.
pub fn split_for_index(index: usize) -> Split {
    if index % VALIDATION_STRIDE == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    band: Band,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
    image: PathBuf,
    split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointRecord {
    pos: [f64; 3],
    colors: BTreeMap<Band, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    bands: Vec<Band>,
    cameras: Vec<CameraRecord>,
    init_points: Vec<PointRecord>,
}

/// One image of the capture.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    /// Path relative to the manifest directory.
    pub image: PathBuf,
    pub split: Split,
}

/// A seed point with optional per-band colors.
#[derive(Clone, Debug, PartialEq)]
pub struct InitPoint {
    pub pos: Vector3<f64>,
    pub colors: BTreeMap<Band, Vec<f64>>,
}

#[derive(Debug)]
pub struct SceneManifest {
    pub bands: BandSet,
    pub views: Vec<View>,
    pub init_points: Vec<InitPoint>,
    root: PathBuf,
    images: Vec<OnceLock<SpectralImage>>,
}

impl Clone for SceneManifest {
    fn clone(&self) -> Self {
        SceneManifest {
            bands: self.bands.clone(),
            views: self.views.clone(),
            init_points: self.init_points.clone(),
            root: self.root.clone(),
            images: self.images.clone(),
        }
    }
}

/// Manifests compare by content; loaded image caches are ignored.
impl PartialEq for SceneManifest {
    fn eq(&self, other: &Self) -> bool {
        self.bands == other.bands && self.views == other.views && self.init_points == other.init_points
    }
}

impl SceneManifest {
    /// In-memory manifest rooted at `root`; images are read from disk on
    /// first access unless supplied through [`SceneManifest::set_image`].
    pub fn new(bands: BandSet, views: Vec<View>, init_points: Vec<InitPoint>, root: PathBuf) -> Result<Self> {
        let m = SceneManifest {
            bands,
            images: (0..views.len()).map(|_| OnceLock::new()).collect(),
            views,
            init_points,
            root,
        };
        m.validate_records()?;
        Ok(m)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: PathBuf) {
        self.root = root;
    }

    pub fn image_path(&self, k: usize) -> PathBuf {
        self.root.join(&self.views[k].image)
    }

    /// Supplies the decoded image for view `k`.
    pub fn set_image(&mut self, k: usize, img: SpectralImage) -> Result<()> {
        let view = self.views.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.views.len(),
        })?;
        check_image_shape(&view.camera, &img)?;
        self.images[k] = OnceLock::from(img);
        Ok(())
    }

    /// Image of view `k`, decoded on first access.
    pub fn image(&self, k: usize) -> Result<&SpectralImage> {
        let cell = self.images.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.images.len(),
        })?;
        if let Some(img) = cell.get() {
            return Ok(img);
        }
        let view = &self.views[k];
        let img = SpectralImage::load_png(&self.image_path(k), view.camera.band)?;
        check_image_shape(&view.camera, &img)?;
        Ok(cell.get_or_init(|| img))
    }

    /// Indices of the views of `band` in `split`, in manifest order.
    pub fn indices(&self, band: Band, split: Split) -> Vec<usize> {
        self.views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.camera.band == band && v.split == split)
            .map(|(k, _)| k)
            .collect()
    }

    /// Scene extent: 1.1 times the largest distance of a camera center from
    /// the mean camera center.
    pub fn extent(&self) -> f64 {
        if self.views.is_empty() {
            return 1.0;
        }
        let centers: Vec<Vector3<f64>> = self.views.iter().map(|v| v.camera.center()).collect();
        let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
        let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        if r > 0.0 {
            1.1 * r
        } else {
            1.0
        }
    }

    fn validate_records(&self) -> Result<()> {
        for (k, v) in self.views.iter().enumerate() {
            if !self.bands.contains(v.camera.band) {
                return Err(Error::SchemaViolation(format!(
                    "camera {k} has band {} outside the manifest bands {}",
                    v.camera.band,
                    self.bands.label()
                )));
            }
            v.camera
                .validate()
                .map_err(|e| Error::SchemaViolation(format!("camera {k}: {e}")))?;
            if v.image.is_absolute() {
                return Err(Error::SchemaViolation(format!("camera {k}: image path must be relative")));
            }
        }
        for (k, p) in self.init_points.iter().enumerate() {
            if !p.pos.iter().all(|x| x.is_finite()) {
                return Err(Error::SchemaViolation(format!("init point {k} is not finite")));
            }
            for (band, c) in &p.colors {
                if !self.bands.contains(*band) || c.len() != band.channel_count() || !c.iter().all(|x| x.is_finite()) {
                    return Err(Error::SchemaViolation(format!("init point {k}: bad colors for band {band}")));
                }
            }
        }
        Ok(())
    }

    fn to_record(&self) -> ManifestRecord {
        ManifestRecord {
            bands: self.bands.bands().to_vec(),
            cameras: self
                .views
                .iter()
                .map(|v| {
                    let c = &v.camera;
                    let r = c.rotation;
                    CameraRecord {
                        band: c.band,
                        fx: c.fx,
                        fy: c.fy,
                        cx: c.cx,
                        cy: c.cy,
                        width: c.width,
                        height: c.height,
                        rotation: [
                            r[(0, 0)], r[(0, 1)], r[(0, 2)],
                            r[(1, 0)], r[(1, 1)], r[(1, 2)],
                            r[(2, 0)], r[(2, 1)], r[(2, 2)],
                        ],
                        translation: c.translation.into(),
                        image: v.image.clone(),
                        split: v.split,
                    }
                })
                .collect(),
            init_points: self
                .init_points
                .iter()
                .map(|p| PointRecord {
                    pos: p.pos.into(),
                    colors: p.colors.clone(),
                })
                .collect(),
        }
    }

    /// Canonical JSON text of the manifest.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_record())?;
        s.push('\n');
        Ok(s)
    }

    /// Parses manifest JSON without touching image files.
    pub fn from_json(text: &str, root: PathBuf) -> Result<Self> {
        let rec: ManifestRecord =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        let bands = BandSet::new(&rec.bands).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        if bands.len() != rec.bands.len() || bands.bands() != rec.bands.as_slice() {
            return Err(Error::SchemaViolation("bands must be unique and in canonical order".into()));
        }
        let views = rec
            .cameras
            .into_iter()
            .map(|c| View {
                camera: Camera {
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    rotation: Matrix3::from_row_slice(&c.rotation),
                    translation: Vector3::from(c.translation),
                    width: c.width,
                    height: c.height,
                    band: c.band,
                },
                image: c.image,
                split: c.split,
            })
            .collect();
        let init_points = rec
            .init_points
            .into_iter()
            .map(|p| InitPoint {
                pos: Vector3::from(p.pos),
                colors: p.colors,
            })
            .collect();
        SceneManifest::new(bands, views, init_points, root)
    }

    /// Writes `manifest.json` plus every image already held in memory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (k, cell) in self.images.iter().enumerate() {
            if let Some(img) = cell.get() {
                let path = dir.join(&self.views[k].image);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)?;
                }
                img.save_png(&path)?;
            }
        }
        fs::write(dir.join(MANIFEST_FILE), self.to_json()?)?;
        Ok(())
    }
}

/// Loads and validates a manifest. `path` may name the JSON file or the
/// directory holding `manifest.json`. Image headers are checked here, pixel
/// data is decoded on first access.
pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(Error::MissingFile(file));
    }
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&file)?;
    let m = SceneManifest::from_json(&text, root)?;
    for k in 0..m.views.len() {
        let p = m.image_path(k);
        let header = probe_png(&p)?;
        let cam = &m.views[k].camera;
        check_color(&header, cam.band, &p)?;
        if header.width != cam.width || header.height != cam.height {
            return Err(Error::DimensionMismatch(format!(
                "{} is {}x{}, camera expects {}x{}",
                p.display(),
                header.width,
                header.height,
                cam.width,
                cam.height
            )));
        }
    }
    Ok(m)
}

fn check_image_shape(cam: &Camera, img: &SpectralImage) -> Result<()> {
    if img.band() != cam.band {
        return Err(Error::BandMismatch(format!("image band {} for camera band {}", img.band(), cam.band)));
    }
    if img.width() != cam.width || img.height() != cam.height {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, camera expects {}x{}",
            img.width(),
            img.height(),
            cam.width,
            cam.height
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(band: Band) -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            20.0,
            20.0,
            16,
            16,
            band,
        )
        .unwrap()
    }

    fn minimal(dir: &Path) -> SceneManifest {
        let mut m = SceneManifest::new(
            BandSet::single(Band::Rgb),
            vec![View {
                camera: camera(Band::Rgb),
                image: PathBuf::from("images/rgb_000.png"),
                split: Split::Val,
            }],
            vec![InitPoint {
                pos: Vector3::new(0.1, 0.2, 0.3),
                colors: BTreeMap::from([(Band::Rgb, vec![0.25, 0.5, 0.75])]),
            }],
            dir.to_path_buf(),
        )
        .unwrap();
        m.set_image(0, SpectralImage::filled(Band::Rgb, 16, 16, 0.4).quantized()).unwrap();
        m
    }

    #[test]
    fn minimal_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = minimal(dir.path());
        m.save(dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.bands, BandSet::single(Band::Rgb));
        assert_eq!(loaded.image(0).unwrap(), m.image(0).unwrap());
        assert_eq!(loaded.to_json().unwrap(), m.to_json().unwrap());
    }

    #[test]
    fn gray_image_for_rgb_camera() {
        let dir = tempfile::tempdir().unwrap();
        let m = minimal(dir.path());
        m.save(dir.path()).unwrap();
        SpectralImage::filled(Band::G, 16, 16, 0.4)
            .save_png(&dir.path().join("images/rgb_000.png"))
            .unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::BandMismatch(_))));
    }

    #[test]
    fn wrong_size_image() {
        let dir = tempfile::tempdir().unwrap();
        let m = minimal(dir.path());
        m.save(dir.path()).unwrap();
        SpectralImage::filled(Band::Rgb, 8, 16, 0.4)
            .save_png(&dir.path().join("images/rgb_000.png"))
            .unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::MissingFile(_))));
        let m = minimal(dir.path());
        fs::write(dir.path().join(MANIFEST_FILE), m.to_json().unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn schema_violations() {
        let root = PathBuf::from(".");
        assert!(matches!(
            SceneManifest::from_json("{\"bands\": [\"RGB\"]}", root.clone()),
            Err(Error::SchemaViolation(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let text = minimal(dir.path()).to_json().unwrap().replace("\"RGB\"", "\"UV\"");
        assert!(matches!(SceneManifest::from_json(&text, root.clone()), Err(Error::SchemaViolation(_))));
        let text = minimal(dir.path()).to_json().unwrap().replace("\"split\"", "\"extra\": 1, \"split\"");
        assert!(matches!(SceneManifest::from_json(&text, root), Err(Error::SchemaViolation(_))));
    }

    #[test]
    fn validation_rule() {
        assert_eq!(split_for_index(0), Split::Val);
        assert_eq!(split_for_index(9), Split::Train);
        assert_eq!(split_for_index(10), Split::Val);
        let vals = (0..100).filter(|&i| split_for_index(i) == Split::Val).count();
        assert_eq!(vals, 10);
    }
}
