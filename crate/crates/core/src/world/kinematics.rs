//! Serial-chain forward kinematics for the desk-scale arm.
//!
//! The arm is a yaw joint at the base followed by three pitch joints in the
//! resulting vertical plane. Link lengths are published in `ArmConfig`.

use crate::config::ArmConfig;
use crate::world::geometry::Vec3;

/// End-effector position and wrist pitch (radians) for a joint vector.
pub fn forward_kinematics(joints: &[f64], arm: &ArmConfig) -> (Vec3, f64) {
    assert_eq!(joints.len(), 4, "arm has 4 revolute joints");
    let [l0, l1, l2, l3] = arm.link_lengths;
    let (t0, t1, t2, t3) = (joints[0], joints[1], joints[2], joints[3]);
    let a1 = t1;
    let a2 = t1 + t2;
    let a3 = t1 + t2 + t3;
    let radial = l1 * a1.cos() + l2 * a2.cos() + l3 * a3.cos();
    let height = l0 + l1 * a1.sin() + l2 * a2.sin() + l3 * a3.sin();
    let pos = [
        arm.base[0] + radial * t0.cos(),
        arm.base[1] + radial * t0.sin(),
        arm.base[2] + height,
    ];
    (pos, a3)
}

/// Analytic position Jacobian (3 x 4), column per joint.
pub fn jacobian(joints: &[f64], arm: &ArmConfig) -> [[f64; 4]; 3] {
    let [_, l1, l2, l3] = arm.link_lengths;
    let (t0, t1, t2, t3) = (joints[0], joints[1], joints[2], joints[3]);
    let a1 = t1;
    let a2 = t1 + t2;
    let a3 = t1 + t2 + t3;
    let radial = l1 * a1.cos() + l2 * a2.cos() + l3 * a3.cos();
    // dradial/dtheta_i and dheight/dtheta_i for the pitch joints
    let dr = [
        -(l1 * a1.sin() + l2 * a2.sin() + l3 * a3.sin()),
        -(l2 * a2.sin() + l3 * a3.sin()),
        -(l3 * a3.sin()),
    ];
    let dh = [
        l1 * a1.cos() + l2 * a2.cos() + l3 * a3.cos(),
        l2 * a2.cos() + l3 * a3.cos(),
        l3 * a3.cos(),
    ];
    let (c0, s0) = (t0.cos(), t0.sin());
    let mut j = [[0.0; 4]; 3];
    j[0][0] = -radial * s0;
    j[1][0] = radial * c0;
    j[2][0] = 0.0;
    for (i, (drk, dhk)) in dr.iter().zip(dh.iter()).enumerate() {
        j[0][i + 1] = drk * c0;
        j[1][i + 1] = drk * s0;
        j[2][i + 1] = *dhk;
    }
    j
}

/// Clamps each joint to the limits published in `ArmConfig`.
pub fn clamp_joints(joints: &mut [f64], arm: &ArmConfig) {
    for (q, (lo, hi)) in joints.iter_mut().zip(arm.joint_limits.iter()) {
        *q = q.clamp(*lo, *hi);
    }
}

/// Coordinate-descent inverse kinematics toward `target`; returns the joint
/// vector after `iters` sweeps.
pub fn ik_coordinate_descent(
    start: &[f64],
    target: Vec3,
    arm: &ArmConfig,
    iters: usize,
) -> Vec<f64> {
    let mut q = start.to_vec();
    let err = |q: &[f64]| {
        let (p, _) = forward_kinematics(q, arm);
        let d = [p[0] - target[0], p[1] - target[1], p[2] - target[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    };
    let mut step = 0.3f64;
    for _ in 0..iters {
        let mut improved = false;
        for k in 0..4 {
            let base_err = err(&q);
            for dir in [-1.0, 1.0] {
                let mut cand = q.clone();
                cand[k] = (cand[k] + dir * step).clamp(arm.joint_limits[k].0, arm.joint_limits[k].1);
                if err(&cand) < base_err {
                    q = cand;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-5 {
                break;
            }
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn home_pose_matches_published_geometry() {
        let arm = ArmConfig::default();
        let (p, wrist) = forward_kinematics(&[0.0; 4], &arm);
        let reach: f64 = arm.link_lengths[1] + arm.link_lengths[2] + arm.link_lengths[3];
        assert!((p[0] - (arm.base[0] + reach)).abs() < 1e-12);
        assert!((p[1] - arm.base[1]).abs() < 1e-12);
        assert!((p[2] - (arm.base[2] + arm.link_lengths[0])).abs() < 1e-12);
        assert_eq!(wrist, 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arm = ArmConfig::default();
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut rand = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let h = 1e-6;
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rand() * 1.2).collect();
            let jac = jacobian(&q, &arm);
            for k in 0..4 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let (pp, _) = forward_kinematics(&qp, &arm);
                let (pm, _) = forward_kinematics(&qm, &arm);
                for axis in 0..3 {
                    let fd = (pp[axis] - pm[axis]) / (2.0 * h);
                    let an = jac[axis][k];
                    let denom = an.abs().max(1e-6);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-5,
                        "joint {k} axis {axis}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn ik_reaches_workspace_targets() {
        let arm = ArmConfig::default();
        for target in [[0.5, 0.1, 0.75], [0.6, -0.2, 0.72], [0.45, 0.3, 0.9]] {
            let q = ik_coordinate_descent(&[0.0, 0.5, -0.8, 0.2], target, &arm, 200);
            let (p, _) = forward_kinematics(&q, &arm);
            let e = ((p[0] - target[0]).powi(2)
                + (p[1] - target[1]).powi(2)
                + (p[2] - target[2]).powi(2))
            .sqrt();
            assert!(e < 0.01, "target {target:?} err {e}");
        }
    }
}
