//! Calibrated pinhole cameras.
//!
//! Camera space follows the usual computer-vision convention: x to the right,
//! y down, z forward. Pixel centers sit at integer coordinates.

use nalgebra::{Matrix3, Vector3};

use crate::band::Band;
use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub band: Band,
}

impl Camera {
    /// Builds and validates a camera.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
        band: Band,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            band,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` giving the approximate
    /// world up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        band: Band,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up is parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
            band,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let rtr = r.transpose() * r;
        let ortho_err = (rtr - Matrix3::identity()).abs().max();
        if !ortho_err.is_finite() || ortho_err > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (max deviation {ortho_err:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!("rotation determinant is {det}")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidCamera("principal point outside the image".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("translation is not finite".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Same pose and intrinsics observed in another band.
    pub fn with_band(&self, band: Band) -> Camera {
        Camera { band, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            60.0,
            60.0,
            64,
            64,
            Band::Rgb,
        )
        .unwrap()
    }

    #[test]
    fn look_at_places_target_on_axis() {
        let c = cam();
        let p = c.world_to_camera(&Vector3::zeros());
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((p.z - 4.0).abs() < 1e-12);
        assert!((c.center() - Vector3::new(0.0, 0.0, -4.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_rotation() {
        let mut c = cam();
        c.rotation[(0, 0)] *= 1.01;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation = -c.rotation;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_bad_intrinsics() {
        let mut c = cam();
        c.fx = 0.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.cx = 64.0;
        assert!(c.validate().is_err());
    }
}
