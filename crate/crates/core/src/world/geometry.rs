//! Camera geometry: pitch/yaw rotations, pinhole projection, and the
//! delta-to-target solve.
//!
//! Conventions: world is z-up, the zero pose looks along +x. Yaw is applied
//! about world z first (positive = turn left, toward +y), then pitch about
//! the camera lateral axis (positive = look up). Camera frame is x-right,
//! y-up, z-forward.

use crate::error::{Error, Result};
use crate::world::CameraState;

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

/// Orthonormal camera basis (right, up, forward) in world coordinates for a
/// pitch/yaw pose in degrees.
pub fn camera_basis(pitch_deg: f64, yaw_deg: f64) -> [Vec3; 3] {
    let p = pitch_deg.to_radians();
    let y = yaw_deg.to_radians();
    let forward = [p.cos() * y.cos(), p.cos() * y.sin(), p.sin()];
    let right = [y.sin(), -y.cos(), 0.0];
    let up = cross(right, forward);
    [right, up, forward]
}

/// World direction of a camera-frame vector.
pub fn cam_to_world(basis: &[Vec3; 3], v: Vec3) -> Vec3 {
    [
        basis[0][0] * v[0] + basis[1][0] * v[1] + basis[2][0] * v[2],
        basis[0][1] * v[0] + basis[1][1] * v[1] + basis[2][1] * v[2],
        basis[0][2] * v[0] + basis[1][2] * v[1] + basis[2][2] * v[2],
    ]
}

/// Camera-frame coordinates of a world vector.
pub fn world_to_cam(basis: &[Vec3; 3], v: Vec3) -> Vec3 {
    [dot(basis[0], v), dot(basis[1], v), dot(basis[2], v)]
}

/// Pinhole intrinsics in pixels for a horizontal FOV and raster dims.
///
/// Pixel centers sit on the integer grid, so the principal point (cx, cy)
/// coincides with the center of pixel (rows/2, cols/2) and the optical axis
/// passes exactly through it.
pub fn intrinsics(fov_h_deg: f64, raster: (usize, usize)) -> (f64, f64, f64, f64) {
    let (h, w) = raster;
    let fx = (w as f64 / 2.0) / (fov_h_deg.to_radians() / 2.0).tan();
    let fy = fx;
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    (fx, fy, cx, cy)
}

/// Projects a world point into pixel coordinates (u along columns, v along
/// rows). Returns `None` when the point is not strictly in front of the
/// image plane.
pub fn project(
    camera: &CameraState,
    pivot: Vec3,
    point: Vec3,
) -> Option<(f64, f64, f64)> {
    let basis = camera_basis(camera.pitch, camera.yaw);
    let p = world_to_cam(&basis, sub(point, pivot));
    if p[2] <= 1e-12 {
        return None;
    }
    let (fx, fy, cx, cy) = intrinsics(camera.fov_h, camera.raster_dims);
    let u = cx + fx * p[0] / p[2];
    let v = cy - fy * p[1] / p[2];
    Some((u, v, p[2]))
}

/// True when the projection of `point` lands inside the raster.
pub fn in_frustum(camera: &CameraState, pivot: Vec3, point: Vec3) -> bool {
    match project(camera, pivot, point) {
        Some((u, v, _)) => {
            let (h, w) = camera.raster_dims;
            u >= -0.5 && u <= w as f64 - 0.5 && v >= -0.5 && v <= h as f64 - 0.5
        }
        None => false,
    }
}

/// Wraps an angle in degrees to (-180, 180].
pub fn wrap_deg(a: f64) -> f64 {
    let mut x = a % 360.0;
    if x <= -180.0 {
        x += 360.0;
    } else if x > 180.0 {
        x -= 360.0;
    }
    x
}

/// Unclamped pitch/yaw deltas (degrees) that place `target` on the optical
/// axis. The yaw delta is wrapped to the minimal-magnitude solution.
pub fn camera_delta_to(camera: &CameraState, pivot: Vec3, target: Vec3) -> Result<(f64, f64)> {
    let d = sub(target, pivot);
    let n = norm(d);
    if n < 1e-12 {
        return Err(Error::DegenerateGeometry(
            "target coincides with the head pivot".into(),
        ));
    }
    let pitch_t = d[2].atan2((d[0] * d[0] + d[1] * d[1]).sqrt()).to_degrees();
    let yaw_t = d[1].atan2(d[0]).to_degrees();
    Ok((pitch_t - camera.pitch, wrap_deg(yaw_t - camera.yaw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cam() -> CameraState {
        CameraState::default_head()
    }

    #[test]
    fn basis_is_orthonormal() {
        for &(p, y) in &[(0.0, 0.0), (30.0, -45.0), (-60.0, 90.0), (12.5, 173.0)] {
            let b = camera_basis(p, y);
            for i in 0..3 {
                assert_abs_diff_eq!(norm(b[i]), 1.0, epsilon = 1e-12);
                for j in (i + 1)..3 {
                    assert_abs_diff_eq!(dot(b[i], b[j]), 0.0, epsilon = 1e-12);
                }
            }
            // up x right = forward in this (image-style) frame
            let f = cross(b[1], b[0]);
            for k in 0..3 {
                assert_abs_diff_eq!(f[k], b[2][k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_pose_looks_along_x() {
        let b = camera_basis(0.0, 0.0);
        assert_abs_diff_eq!(b[2][0], 1.0, epsilon = 1e-12);
        // positive pitch looks up
        let b = camera_basis(30.0, 0.0);
        assert!(b[2][2] > 0.0);
        // positive yaw turns left (toward +y)
        let b = camera_basis(0.0, 30.0);
        assert!(b[2][1] > 0.0);
    }

    #[test]
    fn delta_to_target_on_axis_is_zero() {
        let c = cam();
        let (dp, dy) = camera_delta_to(&c, [0.0, 0.0, 1.0], [2.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(dp, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dy, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn delta_to_bearing_45_left() {
        // atan2 oracle: target bearing 45 deg left at camera height.
        let c = cam();
        let (dp, dy) = camera_delta_to(&c, [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(dp, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dy, 45.0, epsilon = 1e-12);
    }

    #[test]
    fn delta_to_equal_forward_and_vertical() {
        let c = cam();
        let (dp, dy) = camera_delta_to(&c, [0.0, 0.0, 1.0], [1.0, 0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(dp, 45.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dy, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn coincident_target_is_degenerate() {
        let c = cam();
        assert!(camera_delta_to(&c, [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn wrap_is_minimal_magnitude() {
        assert_abs_diff_eq!(wrap_deg(190.0), -170.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_deg(-190.0), 170.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_deg(180.0), 180.0, epsilon = 1e-12);
    }
}
