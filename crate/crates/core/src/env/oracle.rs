//! Scripted state-based expert used for demonstration generation.
//!
//! The oracle runs a phase machine over privileged scene state: LOOK at the
//! task anchor, REMOVE the occluder when one was placed, REACH via
//! coordinate-descent inverse kinematics, GRASP, MANIPULATE (transport,
//! joint drive, or pour), RELEASE, plus container sub-chains for the
//! sequential families. Episodes whose end-effector error stagnates are
//! flagged and dropped from the demo set by the caller.

use crate::config::{ArmConfig, EnvConfig};
use crate::world::geometry::{self, Vec3};
use crate::world::kinematics::{forward_kinematics, ik_coordinate_descent};
use crate::world::{ContainerKind, Scene};

use super::{task_anchor, EpisodeState, TaskFamily, TaskSpec, D_BODY};

/// Safe wrist-tilt ceiling while the holder may be misaligned (below the
/// pour threshold of 60 degrees).
const TILT_SAFE_RAD: f64 = 0.9;
/// Final pour tilt, past the threshold with margin.
const TILT_POUR_RAD: f64 = 1.25;
/// Fingertip convergence radius for reach goals, meters.
const REACH_TOL_M: f64 = 0.015;
/// Steps without end-effector improvement before the failure flag is set.
const STAGNATION_STEPS: usize = 100;

#[derive(Debug, Clone)]
enum Goal {
    /// Center the camera on a scene-tracked anchor.
    Look(Anchor),
    /// Drive the fingertip to a point.
    Reach(Anchor),
    Close,
    Open,
    /// Carry the attached object to a world point.
    Transport(Vec3),
    /// Drive a container joint to a fraction of its limit.
    Drive { container: String, target_openness: f64 },
    /// Two-stage tilt toward the receptacle (see `pour_targets`).
    Pour,
    /// Emit zero actions for the stabilization hold.
    Hold(usize),
}

#[derive(Debug, Clone)]
enum Anchor {
    Task,
    Object(String),
    Handle(String),
}

fn resolve(anchor: &Anchor, task: &TaskSpec, scene: &Scene) -> Vec3 {
    match anchor {
        Anchor::Task => task_anchor(task, scene),
        Anchor::Object(id) => scene.object(id).expect("oracle anchor").grasp_point,
        Anchor::Handle(id) => scene.container(id).expect("oracle handle").handle_point(),
    }
}

/// Coordinate-descent IK with restarts from a handful of canonical
/// postures; plain descent from the current pose occasionally stalls in a
/// local minimum near the table edge.
pub fn multi_start_ik(current: &[f64], target: Vec3, arm: &ArmConfig) -> Vec<f64> {
    let fk_err = |q: &[f64]| {
        let (p, _) = forward_kinematics(q, arm);
        geometry::norm(geometry::sub(p, target))
    };
    let mut best = ik_coordinate_descent(current, target, arm, 50);
    if fk_err(&best) > REACH_TOL_M / 2.0 {
        let restarts: [[f64; 4]; 3] =
            [[0.0; 4], [0.4, -0.5, 0.8, -0.8], [-0.4, -0.5, 0.8, -0.8]];
        for start in restarts {
            let cand = ik_coordinate_descent(&start, target, arm, 200);
            if fk_err(&cand) < fk_err(&best) {
                best = cand;
            }
        }
    }
    best
}

pub struct Oracle {
    plan: Vec<Goal>,
    idx: usize,
    best_reach_err: f64,
    stagnant: usize,
    /// Joint-space solution the current reach goal has committed to;
    /// re-solving every step can flip between IK branches and stall.
    cached_q: Option<Vec<f64>>,
    /// Consecutive drive steps without joint progress; forces a re-seat
    /// on the handle when the pull loses traction.
    drive_stall: usize,
    last_openness: f64,
    /// Set on IK stagnation; the episode should be discarded.
    pub failed: bool,
}

impl Oracle {
    pub fn new(task: &TaskSpec, state: &EpisodeState) -> Self {
        let mut plan = Vec::new();
        if let Some(occ) = &state.occluder_id {
            // move the occluder aside before looking for the target
            let aside = {
                let scene = &state.scene;
                let p = scene.object(occ).unwrap().pose.position;
                let ray = geometry::normalize(geometry::sub(p, scene.head_pivot));
                let lateral = geometry::normalize(geometry::cross(ray, [0.0, 0.0, 1.0]));
                geometry::add(p, geometry::scale(lateral, 0.25))
            };
            plan.push(Goal::Look(Anchor::Object(occ.clone())));
            plan.push(Goal::Reach(Anchor::Object(occ.clone())));
            plan.push(Goal::Close);
            plan.push(Goal::Transport(aside));
            plan.push(Goal::Open);
        }
        plan.push(Goal::Look(Anchor::Task));
        let hold = task.hold_duration + 5;
        match task.family {
            TaskFamily::Pick => {
                plan.push(Goal::Reach(Anchor::Object(task.target_object_id.clone())));
                plan.push(Goal::Close);
                let lift = {
                    let o = state.scene.object(&task.target_object_id).unwrap();
                    let top = state.scene.surfaces[0].top_z();
                    [o.pose.position[0], o.pose.position[1], top + o.size + 0.10]
                };
                plan.push(Goal::Transport(lift));
                plan.push(Goal::Hold(hold));
            }
            TaskFamily::Reorient => {
                plan.push(Goal::Reach(Anchor::Object(task.target_object_id.clone())));
                plan.push(Goal::Close);
                // yaw is driven by the base joint inside act()
                plan.push(Goal::Hold(hold));
            }
            TaskFamily::OpenDrawer | TaskFamily::OpenCabinet => {
                let c = task.container_id.clone().unwrap();
                plan.push(Goal::Reach(Anchor::Handle(c.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Drive { container: c, target_openness: 0.97 });
                plan.push(Goal::Open);
                plan.push(Goal::Hold(hold));
            }
            TaskFamily::CloseDrawer | TaskFamily::CloseCabinet => {
                let c = task.container_id.clone().unwrap();
                plan.push(Goal::Reach(Anchor::Handle(c.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Drive { container: c, target_openness: 0.02 });
                plan.push(Goal::Open);
                plan.push(Goal::Hold(hold));
            }
            TaskFamily::OpenCloseDrawer | TaskFamily::OpenCloseCabinet => {
                let c = task.container_id.clone().unwrap();
                plan.push(Goal::Reach(Anchor::Handle(c.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Drive { container: c.clone(), target_openness: 0.97 });
                plan.push(Goal::Drive { container: c, target_openness: 0.02 });
                plan.push(Goal::Open);
                plan.push(Goal::Hold(hold));
            }
            TaskFamily::FetchFromDrawer | TaskFamily::FetchFromCabinet => {
                let c = task.container_id.clone().unwrap();
                let place = task.place_target.unwrap();
                plan.push(Goal::Reach(Anchor::Handle(c.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Drive { container: c.clone(), target_openness: 0.97 });
                plan.push(Goal::Open);
                plan.push(Goal::Look(Anchor::Object(task.target_object_id.clone())));
                plan.push(Goal::Reach(Anchor::Object(task.target_object_id.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Transport(place));
                plan.push(Goal::Open);
                plan.push(Goal::Look(Anchor::Handle(c.clone())));
                plan.push(Goal::Reach(Anchor::Handle(c.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Drive { container: c, target_openness: 0.02 });
                plan.push(Goal::Open);
                plan.push(Goal::Hold(hold));
            }
            TaskFamily::PickAndPlace => {
                plan.push(Goal::Reach(Anchor::Object(task.target_object_id.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Transport(task.place_target.unwrap()));
                plan.push(Goal::Open);
                plan.push(Goal::Hold(hold));
            }
            TaskFamily::Pour => {
                plan.push(Goal::Reach(Anchor::Object(task.target_object_id.clone())));
                plan.push(Goal::Close);
                plan.push(Goal::Pour);
                plan.push(Goal::Hold(hold));
            }
        }
        Oracle {
            plan,
            idx: 0,
            best_reach_err: f64::INFINITY,
            stagnant: 0,
            cached_q: None,
            drive_stall: 0,
            last_openness: -1.0,
            failed: false,
        }
    }

    fn advance(&mut self) {
        self.idx += 1;
        self.best_reach_err = f64::INFINITY;
        self.stagnant = 0;
        self.cached_q = None;
    }

    fn note_reach_err(&mut self, err: f64) {
        if err < self.best_reach_err - 1e-6 {
            self.best_reach_err = err;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant >= STAGNATION_STEPS {
                self.failed = true;
            }
        }
    }

    /// Joint deltas (uncapped; the env caps them) toward an IK solution for
    /// `target`, preserving the current gripper.
    fn reach_action(
        &mut self,
        state: &EpisodeState,
        target: Vec3,
        arm: &ArmConfig,
    ) -> [f64; D_BODY] {
        let arrived = self
            .cached_q
            .as_ref()
            .map(|q| {
                q.iter()
                    .zip(&state.proprio.arm_joints)
                    .all(|(a, b)| (a - b).abs() < 1e-9)
            })
            .unwrap_or(true);
        if arrived {
            self.cached_q = Some(multi_start_ik(&state.proprio.arm_joints, target, arm));
        }
        let q = self.cached_q.clone().unwrap();
        let mut a = [0.0; D_BODY];
        for k in 0..4 {
            a[k] = q[k] - state.proprio.arm_joints[k];
        }
        let tip = forward_kinematics(&state.proprio.arm_joints, arm).0;
        self.note_reach_err(geometry::norm(geometry::sub(tip, target)));
        a
    }

    /// One action pair. `(zeros, zeros)` once the plan is exhausted.
    pub fn act(
        &mut self,
        state: &EpisodeState,
        task: &TaskSpec,
        env: &EnvConfig,
        arm: &ArmConfig,
    ) -> ([f64; 2], [f64; D_BODY]) {
        let mut head = [0.0; 2];
        let mut body = [0.0; D_BODY];
        loop {
            let Some(goal) = self.plan.get(self.idx).cloned() else {
                return (head, body);
            };
            match goal {
                Goal::Look(anchor) => {
                    let p = resolve(&anchor, task, &state.scene);
                    let Ok((dp, dy)) =
                        geometry::camera_delta_to(&state.camera, state.scene.head_pivot, p)
                    else {
                        self.advance();
                        continue;
                    };
                    let lim = state.camera.limits;
                    let at_limit = (state.camera.pitch <= lim.0 && dp < 0.0)
                        || (state.camera.pitch >= lim.1 && dp > 0.0);
                    let at_limit_y = (state.camera.yaw <= lim.2 && dy < 0.0)
                        || (state.camera.yaw >= lim.3 && dy > 0.0);
                    if (dp.abs() < 0.2 || at_limit) && (dy.abs() < 0.2 || at_limit_y) {
                        self.advance();
                        continue;
                    }
                    head = [
                        dp.clamp(-env.head_step_cap, env.head_step_cap),
                        dy.clamp(-env.head_step_cap, env.head_step_cap),
                    ];
                    return (head, body);
                }
                Goal::Reach(anchor) => {
                    let p = resolve(&anchor, task, &state.scene);
                    let tip = forward_kinematics(&state.proprio.arm_joints, arm).0;
                    if geometry::norm(geometry::sub(tip, p)) < REACH_TOL_M {
                        self.advance();
                        continue;
                    }
                    body = self.reach_action(state, p, arm);
                    return (head, body);
                }
                Goal::Close => {
                    if state.proprio.gripper < env.gripper_close_threshold {
                        self.advance();
                        continue;
                    }
                    body[4] = -arm.gripper_delta_cap;
                    return (head, body);
                }
                Goal::Open => {
                    if state.proprio.gripper > env.gripper_open_threshold {
                        self.advance();
                        continue;
                    }
                    body[4] = arm.gripper_delta_cap;
                    return (head, body);
                }
                Goal::Transport(p) => {
                    let Some(id) = &state.proprio.attached_object else {
                        // the grasp slipped; retry the reach by failing out
                        self.failed = true;
                        return (head, body);
                    };
                    let obj = state.scene.object(id).unwrap().pose.position;
                    if geometry::norm(geometry::sub(obj, p)) < 0.01 {
                        self.advance();
                        continue;
                    }
                    // aim the fingertip so the carried object lands on p
                    let tip = forward_kinematics(&state.proprio.arm_joints, arm).0;
                    let offset = geometry::sub(obj, tip);
                    let tip_target = geometry::sub(p, offset);
                    body = self.reach_action(state, tip_target, arm);
                    return (head, body);
                }
                Goal::Drive { container, target_openness } => {
                    let c = state.scene.container(&container).unwrap().clone();
                    let openness = c.joint.openness();
                    let done = openness >= target_openness - 1e-9 && target_openness > 0.5
                        || openness <= target_openness + 1e-9 && target_openness <= 0.5;
                    if done {
                        self.advance();
                        continue;
                    }
                    let handle = c.handle_point();
                    let tip = forward_kinematics(&state.proprio.arm_joints, arm).0;
                    let near =
                        geometry::norm(geometry::sub(tip, handle)) < env.grasp_distance * 0.8;
                    let closed = state.proprio.gripper < env.gripper_close_threshold;
                    if let Some(id) = state.proprio.attached_object.clone() {
                        // grabbed a stray object at the handle (drawer
                        // contents sit close to the front panel); park it
                        // away from the pull path, then come back
                        let p = state.scene.object(&id).unwrap().pose.position;
                        let aside =
                            [0.40, if p[1] > 0.0 { p[1] - 0.35 } else { p[1] + 0.35 }, p[2]];
                        self.plan.insert(self.idx, Goal::Close);
                        self.plan
                            .insert(self.idx, Goal::Reach(Anchor::Handle(container.clone())));
                        self.plan.insert(self.idx, Goal::Open);
                        self.plan.insert(self.idx, Goal::Transport(aside));
                        self.best_reach_err = f64::INFINITY;
                        self.stagnant = 0;
                        self.cached_q = None;
                        self.drive_stall = 0;
                        self.last_openness = -1.0;
                        continue;
                    }
                    if !near {
                        // lost the handle: release, re-approach, re-grip
                        if closed {
                            body[4] = arm.gripper_delta_cap;
                        } else {
                            body = self.reach_action(state, handle, arm);
                        }
                        return (head, body);
                    }
                    // the projected drag can fall behind the fingertip when
                    // the IK path curves; if the joint stops progressing,
                    // re-seat on the true handle before pulling again
                    if self.drive_stall > 10 {
                        if geometry::norm(geometry::sub(tip, handle)) > 0.005 {
                            body[4] = arm.gripper_delta_cap;
                            if !closed {
                                body = self.reach_action(state, handle, arm);
                                body[4] = arm.gripper_delta_cap;
                            }
                            return (head, body);
                        }
                        self.drive_stall = 0;
                        self.last_openness = -1.0;
                    }
                    if !closed {
                        body[4] = -arm.gripper_delta_cap;
                        return (head, body);
                    }
                    if (openness - self.last_openness).abs() < 1e-6 {
                        self.drive_stall += 1;
                    } else {
                        self.drive_stall = 0;
                        // joint progress is goal progress, even when the
                        // fingertip error itself plateaus
                        self.stagnant = 0;
                    }
                    self.last_openness = openness;
                    // contact: target the handle of a slightly advanced
                    // joint. For drawers the advance is measured from the
                    // fingertip's implied slide so an overshoot cannot
                    // freeze the pull.
                    let dir = if openness < target_openness { 1.0 } else { -1.0 };
                    let mut ahead = c.clone();
                    match c.kind {
                        ContainerKind::Drawer => {
                            let mut at_zero = c.clone();
                            at_zero.joint.value = 0.0;
                            let implied = geometry::dot(
                                geometry::sub(tip, at_zero.handle_point()),
                                c.front_dir(),
                            )
                            .clamp(0.0, c.joint.limit);
                            ahead.joint.value =
                                (implied + dir * 0.02).clamp(0.0, c.joint.limit);
                        }
                        ContainerKind::Cabinet => {
                            ahead.joint.value =
                                (c.joint.value + dir * 0.06).clamp(0.0, c.joint.limit);
                        }
                    }
                    body = self.reach_action(state, ahead.handle_point(), arm);
                    return (head, body);
                }
                Goal::Pour => {
                    let done = super::instant_criterion(state, task, env);
                    if done {
                        self.advance();
                        continue;
                    }
                    let rid = task.receptacle_id.clone().unwrap();
                    let holder = state.scene.object(&task.target_object_id).unwrap();
                    let recept = state.scene.object(&rid).unwrap().pose.position;
                    let tip = forward_kinematics(&state.proprio.arm_joints, arm).0;
                    let offset = geometry::sub(holder.pose.position, tip);
                    // fingertip xy that aligns the holder lip over the
                    // receptacle, hovering above it
                    let hover = [
                        recept[0] - offset[0],
                        recept[1] - offset[1],
                        recept[2] + 0.12 - offset[2],
                    ];
                    let aligned = {
                        let dx = holder.pose.position[0] - recept[0];
                        let dy = holder.pose.position[1] - recept[1];
                        (dx * dx + dy * dy).sqrt() < 0.02
                    };
                    let tilt = forward_kinematics(&state.proprio.arm_joints, arm).1;
                    if !aligned && tilt.abs() < TILT_SAFE_RAD {
                        // approach with a safe tilt
                        body = self.reach_with_tilt(state, hover, TILT_SAFE_RAD * 0.5, arm);
                    } else if aligned && tilt < TILT_POUR_RAD {
                        // tilt the wrist only; alignment is preserved up to
                        // the wrist-link arc, which the hover offset absorbs
                        body = self.reach_with_tilt(state, hover, TILT_POUR_RAD, arm);
                    } else {
                        body = self.reach_with_tilt(state, hover, TILT_POUR_RAD, arm);
                    }
                    return (head, body);
                }
                Goal::Hold(n) => {
                    if n == 0 {
                        self.advance();
                        continue;
                    }
                    self.plan[self.idx] = Goal::Hold(n - 1);
                    // reorient keeps driving the base joint during the hold
                    if task.family == TaskFamily::Reorient {
                        if let (Some(target), Some(o)) = (
                            task.orientation_target_yaw,
                            state.scene.object(&task.target_object_id),
                        ) {
                            let err = super::wrap_angle(target - o.pose.yaw);
                            if err.abs() > 0.02 {
                                body[0] = err;
                                self.plan[self.idx] = Goal::Hold(n); // not burning hold steps
                            }
                        }
                    }
                    return (head, body);
                }
            }
        }
    }

    /// Coordinate descent over the three proximal joints with the wrist
    /// joint slaved to a target tilt (q3 = tilt - q1 - q2).
    fn reach_with_tilt(
        &mut self,
        state: &EpisodeState,
        target: Vec3,
        tilt: f64,
        arm: &ArmConfig,
    ) -> [f64; D_BODY] {
        let slave = |q: &[f64; 3]| -> Vec<f64> {
            let q3 = (tilt - q[1] - q[2]).clamp(arm.joint_limits[3].0, arm.joint_limits[3].1);
            vec![q[0], q[1], q[2], q3]
        };
        let err = |q: &[f64; 3]| {
            let (p, _) = forward_kinematics(&slave(q), arm);
            let d = geometry::sub(p, target);
            geometry::dot(d, d)
        };
        let mut q = [
            state.proprio.arm_joints[0],
            state.proprio.arm_joints[1],
            state.proprio.arm_joints[2],
        ];
        let mut step = 0.2;
        for _ in 0..60 {
            let mut improved = false;
            for k in 0..3 {
                let base = err(&q);
                for dir in [-1.0, 1.0] {
                    let mut cand = q;
                    cand[k] = (cand[k] + dir * step)
                        .clamp(arm.joint_limits[k].0, arm.joint_limits[k].1);
                    if err(&cand) < base {
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
        let solution = slave(&q);
        let mut a = [0.0; D_BODY];
        for k in 0..4 {
            a[k] = solution[k] - state.proprio.arm_joints[k];
        }
        let tip = forward_kinematics(&state.proprio.arm_joints, arm).0;
        self.note_reach_err(geometry::norm(geometry::sub(tip, target)));
        a
    }

    pub fn done(&self) -> bool {
        self.idx >= self.plan.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{check_success, reset, step, Status, Visibility};

    fn rollout(family: TaskFamily, vis: Visibility, seed: u64) -> Option<Status> {
        let env = EnvConfig::default();
        let arm = ArmConfig::default();
        let (task, mut state) = reset(family, vis, &env, seed).ok()?;
        let mut oracle = Oracle::new(&task, &state);
        while !state.terminated && check_success(&state, &task) == Status::Pending {
            let (h, b) = oracle.act(&state, &task, &env, &arm);
            if oracle.failed {
                return Some(Status::Failed);
            }
            step(&mut state, &task, h, &b, &env, &arm).unwrap();
        }
        Some(check_success(&state, &task))
    }

    #[test]
    fn oracle_completes_unoccluded_pick() {
        let mut wins = 0;
        let mut total = 0;
        for seed in 0..12 {
            if let Some(v) = rollout(TaskFamily::Pick, Visibility::Unoccluded, 1000 + seed) {
                total += 1;
                if v == Status::Success {
                    wins += 1;
                }
            }
        }
        assert!(total >= 8, "too few episodes resolved: {total}");
        assert!(wins * 10 >= total * 9, "{wins}/{total} pick successes");
    }

    #[test]
    fn oracle_completes_open_drawer() {
        let mut wins = 0;
        let mut total = 0;
        for seed in 0..10 {
            if let Some(v) = rollout(TaskFamily::OpenDrawer, Visibility::Unoccluded, 2000 + seed)
            {
                total += 1;
                if v == Status::Success {
                    wins += 1;
                }
            }
        }
        assert!(total >= 3, "too few drawer episodes: {total}");
        assert!(wins * 10 >= total * 9, "{wins}/{total} open_drawer successes");
    }

    #[test]
    fn look_phase_centers_the_anchor() {
        let env = EnvConfig::default();
        let arm = ArmConfig::default();
        let (task, mut state) =
            reset(TaskFamily::Pick, Visibility::OutOfView, &env, 3000).unwrap();
        let mut oracle = Oracle::new(&task, &state);
        for _ in 0..60 {
            let (h, b) = oracle.act(&state, &task, &env, &arm);
            if h == [0.0; 2] {
                break;
            }
            step(&mut state, &task, h, &b, &env, &arm).unwrap();
        }
        let anchor = task_anchor(&task, &state.scene);
        let (dp, dy) =
            geometry::camera_delta_to(&state.camera, state.scene.head_pivot, anchor).unwrap();
        let lim = state.camera.limits;
        let clamped_p = state.camera.pitch <= lim.0 || state.camera.pitch >= lim.1;
        let clamped_y = state.camera.yaw <= lim.2 || state.camera.yaw >= lim.3;
        assert!(dp.abs() < 2.0 || clamped_p, "pitch residual {dp}");
        assert!(dy.abs() < 2.0 || clamped_y, "yaw residual {dy}");
    }

    #[test]
    fn occluded_physical_oracle_moves_the_occluder_aside() {
        let env = EnvConfig::default();
        let arm = ArmConfig::default();
        let mut found = None;
        for seed in 0..40 {
            if let Ok(v) = reset(TaskFamily::Pick, Visibility::OccludedPhysical, &env, 4000 + seed)
            {
                found = Some(v);
                break;
            }
        }
        let (task, mut state) = found.expect("an occluded episode");
        let mut oracle = Oracle::new(&task, &state);
        for _ in 0..task.horizon {
            if state.terminated || check_success(&state, &task) != Status::Pending {
                break;
            }
            let (h, b) = oracle.act(&state, &task, &env, &arm);
            if oracle.failed {
                break;
            }
            step(&mut state, &task, h, &b, &env, &arm).unwrap();
        }
        // occluder ends up off the camera-target ray
        let occ = state.scene.object("occluder").unwrap().pose.position;
        let anchor = task_anchor(&task, &state.scene);
        let ray = geometry::normalize(geometry::sub(anchor, state.scene.head_pivot));
        let rel = geometry::sub(occ, state.scene.head_pivot);
        let along = geometry::dot(rel, ray);
        let closest = geometry::sub(rel, geometry::scale(ray, along));
        assert!(
            geometry::norm(closest) > 0.10,
            "occluder still {:.3} m from the ray",
            geometry::norm(closest)
        );
    }
}
