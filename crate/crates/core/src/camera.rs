//! Arcball camera poses and primary-ray generation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("ry = {0} outside [-89, 89]")]
    Elevation(f64),
    #[error("dz = {0} outside [1.2, 4.0]")]
    Distance(f64),
    #[error("non-finite pose component")]
    NonFinite,
}

pub const RY_LIMIT: f64 = 89.0;
pub const DZ_RANGE: (f64, f64) = (1.2, 4.0);
/// Orbit radii (in bounding-box diagonals) used when sampling poses.
pub const ORBIT_RADII: [f64; 4] = [1.5, 2.0, 2.5, 3.0];
pub const DEFAULT_FOV_DEG: f64 = 40.0;

/// Orbit pose: azimuth `rx` about world-up, elevation `ry`, distance `dz`
/// in units of the volume's bounding-box diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rx: f64,
    pub ry: f64,
    pub dz: f64,
}

impl CameraPose {
    /// Wraps `rx` into [0, 360) and validates the rest.
    pub fn new(rx: f64, ry: f64, dz: f64) -> Result<Self, PoseError> {
        Self { rx, ry, dz }.validated()
    }

    pub fn validated(self) -> Result<Self, PoseError> {
        if !(self.rx.is_finite() && self.ry.is_finite() && self.dz.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        if self.ry.abs() > RY_LIMIT {
            return Err(PoseError::Elevation(self.ry));
        }
        if !(DZ_RANGE.0..=DZ_RANGE.1).contains(&self.dz) {
            return Err(PoseError::Distance(self.dz));
        }
        let mut rx = self.rx.rem_euclid(360.0);
        if rx >= 360.0 {
            rx = 0.0;
        }
        Ok(Self { rx, ry: self.ry, dz: self.dz })
    }
}

/// Uniform azimuth and elevation on one of the discrete orbit radii.
pub fn sample_pose(rng: &mut impl Rng) -> CameraPose {
    let rx = rng.random_range(0.0..360.0);
    let ry = rng.random_range(-RY_LIMIT..=RY_LIMIT);
    let dz = ORBIT_RADII[rng.random_range(0..ORBIT_RADII.len())];
    CameraPose { rx, ry, dz }
}

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Pinhole camera looking at the center of a volume whose voxel centers
/// occupy `[0, dims-1]` on each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub eye: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half: f64,
    width: usize,
    height: usize,
}

pub fn volume_center(dims: [usize; 3]) -> Vec3 {
    dims.map(|d| (d as f64 - 1.0) * 0.5)
}

pub fn volume_diagonal(dims: [usize; 3]) -> f64 {
    dims.iter().map(|&d| (d as f64 - 1.0).powi(2)).sum::<f64>().sqrt()
}

impl Camera {
    pub fn new(pose: &CameraPose, dims: [usize; 3], img: (usize, usize), fov_deg: f64) -> Self {
        let center = volume_center(dims);
        let dist = pose.dz * volume_diagonal(dims);
        let (ax, el) = (pose.rx.to_radians(), pose.ry.to_radians());
        let offset = [dist * el.cos() * ax.sin(), dist * el.sin(), dist * el.cos() * ax.cos()];
        let eye = [center[0] + offset[0], center[1] + offset[1], center[2] + offset[2]];
        let forward = normalize(sub(center, eye));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        Self {
            eye,
            forward,
            right,
            up,
            tan_half: (fov_deg.to_radians() * 0.5).tan(),
            width: img.0.max(1),
            height: img.1.max(1),
        }
    }

    /// Unit direction through the center of pixel `(i, j)`, row 0 on top.
    #[inline]
    pub fn direction(&self, i: usize, j: usize) -> Vec3 {
        let aspect = self.width as f64 / self.height as f64;
        let x = ((i as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * self.tan_half * aspect;
        let y = (1.0 - (j as f64 + 0.5) / self.height as f64 * 2.0) * self.tan_half;
        normalize([
            self.forward[0] + x * self.right[0] + y * self.up[0],
            self.forward[1] + x * self.right[1] + y * self.up[1],
            self.forward[2] + x * self.right[2] + y * self.up[2],
        ])
    }
}

/// One ray per pixel, row-major from the top-left.
pub fn pose_to_rays(
    pose: &CameraPose,
    dims: [usize; 3],
    img: (usize, usize),
    fov_deg: f64,
) -> Vec<(Vec3, Vec3)> {
    let cam = Camera::new(pose, dims, img, fov_deg);
    let mut rays = Vec::with_capacity(img.0 * img.1);
    for j in 0..img.1 {
        for i in 0..img.0 {
            rays.push((cam.eye, cam.direction(i, j)));
        }
    }
    rays
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    const DIMS: [usize; 3] = [33, 25, 41];

    fn dist_to_line(p: Vec3, o: Vec3, d: Vec3) -> f64 {
        let v = sub(p, o);
        let t = v[0] * d[0] + v[1] * d[1] + v[2] * d[2];
        let q = [o[0] + t * d[0] - p[0], o[1] + t * d[1] - p[1], o[2] + t * d[2] - p[2]];
        (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
    }

    #[test]
    fn center_pixel_hits_volume_center() {
        let pose = CameraPose::new(0.0, 0.0, 2.0).unwrap();
        let rays = pose_to_rays(&pose, DIMS, (65, 65), DEFAULT_FOV_DEG);
        let (o, d) = rays[32 * 65 + 32];
        assert!(dist_to_line(volume_center(DIMS), o, d) < 1e-5);
        for pose in [CameraPose::new(123.0, -45.0, 3.3).unwrap(), CameraPose::new(300.0, 89.0, 1.2).unwrap()] {
            let rays = pose_to_rays(&pose, DIMS, (9, 9), DEFAULT_FOV_DEG);
            let (o, d) = rays[4 * 9 + 4];
            assert!(dist_to_line(volume_center(DIMS), o, d) < 1e-5);
        }
    }

    #[test]
    fn opposite_azimuth_reflects_eye() {
        let a = Camera::new(&CameraPose::new(0.0, 0.0, 2.0).unwrap(), DIMS, (4, 4), 40.0);
        let b = Camera::new(&CameraPose::new(180.0, 0.0, 2.0).unwrap(), DIMS, (4, 4), 40.0);
        let c = volume_center(DIMS);
        for k in [0, 2] {
            assert!((b.eye[k] - (2.0 * c[k] - a.eye[k])).abs() < 1e-9);
        }
        assert!((b.eye[1] - a.eye[1]).abs() < 1e-9);
    }

    #[test]
    fn directions_are_unit() {
        let pose = CameraPose::new(77.0, 33.0, 1.7).unwrap();
        for (_, d) in pose_to_rays(&pose, DIMS, (17, 11), 50.0) {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn azimuth_wraps_by_full_turn() {
        let a = CameraPose::new(40.0, 10.0, 2.0).unwrap();
        let b = CameraPose::new(400.0, 10.0, 2.0).unwrap();
        let ra = pose_to_rays(&a, DIMS, (8, 6), 40.0);
        let rb = pose_to_rays(&b, DIMS, (8, 6), 40.0);
        for ((oa, da), (ob, db)) in ra.iter().zip(&rb) {
            for k in 0..3 {
                assert!((oa[k] - ob[k]).abs() < 1e-6 && (da[k] - db[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pose_validation() {
        assert_eq!(CameraPose::new(0.0, 90.0, 2.0), Err(PoseError::Elevation(90.0)));
        assert_eq!(CameraPose::new(0.0, 0.0, 4.5), Err(PoseError::Distance(4.5)));
        assert_eq!(CameraPose::new(-30.0, 0.0, 2.0).unwrap().rx, 330.0);
    }

    #[test]
    fn sampled_poses_in_bounds_and_reproducible() {
        let mut rng = rng_for(3, 0);
        let poses: Vec<_> = (0..1000).map(|_| sample_pose(&mut rng)).collect();
        let mut radii = std::collections::BTreeSet::new();
        for p in &poses {
            assert!(p.validated().is_ok());
            assert!((0.0..360.0).contains(&p.rx));
            radii.insert((p.dz * 10.0) as i64);
        }
        assert_eq!(radii.len(), 4);
        let mut again = rng_for(3, 0);
        let replay: Vec<_> = (0..1000).map(|_| sample_pose(&mut again)).collect();
        assert_eq!(poses, replay);
    }
}
