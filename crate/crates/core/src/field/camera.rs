use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Pinhole camera. The pose maps world to camera coordinates,
/// `x_cam = R·x_world + t`; the camera looks down `+z`, image `y` points down.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

/// A world-space ray with unit direction. `depth_scale` converts distance
/// along the ray into camera-space z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub depth_scale: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (deviation {err:.3e})"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, with a horizontal field of view
    /// of `fov_x` radians and the principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Projects a world point to continuous pixel coordinates and its
    /// camera-space depth. Returns `None` for points at or behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// Ray through continuous pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let norm = d_cam.norm();
        Ray {
            origin: self.center(),
            dir: self.rotation.transpose() * (d_cam / norm),
            depth_scale: 1.0 / norm,
        }
    }

    /// Ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Back-projects pixel `(x, y)` at camera-space depth `z`.
    pub fn unproject(&self, x: usize, y: usize, z: f64) -> Vec3 {
        let c = Vec3::new(
            (x as f64 + 0.5 - self.cx) / self.fx * z,
            (y as f64 + 0.5 - self.cy) / self.fy * z,
            z,
        );
        self.rotation.transpose() * (c - self.translation)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_center() {
        let cam = Camera::look_at(
            Vec3::new(3.0, -2.0, 1.5),
            Vec3::zeros(),
            Vec3::z(),
            1.0,
            64,
            48,
        )
        .unwrap();
        let (u, v, z) = cam.project(&Vec3::zeros()).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 24.0).abs() < 1e-9);
        assert!((z - cam.center().norm()).abs() < 1e-9);
        // world up appears toward the top of the image
        let (_, v_up, _) = cam.project(&Vec3::new(0.0, 0.0, 0.1)).unwrap();
        assert!(v_up < 24.0);
    }

    #[test]
    fn rays_and_unprojection_agree() {
        let cam = Camera::look_at(Vec3::new(0.0, -4.0, 2.0), Vec3::zeros(), Vec3::z(), 0.9, 20, 20).unwrap();
        let p = cam.unproject(5, 13, 3.5);
        let (u, v, z) = cam.project(&p).unwrap();
        assert!((u - 5.5).abs() < 1e-9 && (v - 13.5).abs() < 1e-9 && (z - 3.5).abs() < 1e-9);
        let ray = cam.pixel_ray(5, 13);
        let t = 3.5 / ray.depth_scale;
        assert!((ray.origin + ray.dir * t - p).norm() < 1e-9);
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotations() {
        let r = Matrix3::identity();
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, r, Vec3::zeros(), 4, 4).is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, r * 1.01, Vec3::zeros(), 4, 4).is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, r, Vec3::zeros(), 4, 4).is_ok());
    }
}
