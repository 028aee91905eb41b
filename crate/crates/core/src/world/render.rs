//! Observation rendering: per-pixel analytic ray casting against sphere and
//! oriented-box primitives with z-buffer occlusion.
//!
//! Depth stores the Euclidean range along the pixel ray, so
//! `pivot + depth * R * ray_dir` lands exactly on the generating surface.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::ArmConfig;
use crate::world::geometry::{self, Vec3};
use crate::world::kinematics;
use crate::world::{
    CameraState, Category, Color, ContainerKind, ProprioState, Scene, DEPTH_EMPTY,
    INTERIOR_VISIBILITY_GATE, SEMANTIC_CHANNELS,
};

/// Instance-raster code for pixels covered by scene structure (table slabs,
/// container casings).
pub const INSTANCE_STRUCTURE: i32 = -2;
/// Instance-raster code for empty pixels.
pub const INSTANCE_EMPTY: i32 = -1;
/// Instance codes at and above this value denote container bodies
/// (`CONTAINER_INSTANCE_BASE + container index`).
pub const CONTAINER_INSTANCE_BASE: i32 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub pitch: f64,
    pub yaw: f64,
    pub pivot: Vec3,
}

/// Rendered sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// H x W x C one-hot category + one-hot color + graspable flag.
    pub semantic_raster: Array3<f32>,
    /// H x W Euclidean range in meters; `DEPTH_EMPTY` where nothing is hit.
    pub depth_raster: Array2<f32>,
    /// H x W x 3 unit ray directions in the camera frame.
    pub ray_dirs: Array3<f32>,
    /// (fx, fy, cx, cy) in pixels.
    pub intrinsics: (f64, f64, f64, f64),
    pub camera_pose: CameraPose,
    /// H x W object-instance codes (see `INSTANCE_*`).
    pub instance_raster: Array2<i32>,
    pub wrist_observation: Option<Box<Observation>>,
}

impl Observation {
    pub fn count_instance_pixels(&self, code: i32) -> usize {
        self.instance_raster.iter().filter(|&&c| c == code).count()
    }

    /// Pixel count of the object at `object_index` in the scene.
    pub fn count_object_pixels(&self, object_index: usize) -> usize {
        self.count_instance_pixels(object_index as i32)
    }
}

enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Box rotated by `yaw` about world z.
    Box { center: Vec3, yaw: f64, half: Vec3 },
}

struct Primitive {
    shape: Shape,
    semantics: Option<(Category, Color, bool)>,
    instance: i32,
}

const WALL_T: f64 = 0.012;

fn container_primitives(scene: &Scene, out: &mut Vec<Primitive>) {
    for (ci, c) in scene.containers.iter().enumerate() {
        let code = CONTAINER_INSTANCE_BASE + ci as i32;
        let b = c.body_pose.position;
        let yaw = c.body_pose.yaw;
        let [hx, hy, hz] = c.half_extent;
        let front = c.front_dir();
        let lat = [-yaw.sin(), yaw.cos(), 0.0];
        let local = |dx: f64, dy: f64, dz: f64| -> Vec3 {
            [
                b[0] + front[0] * dx + lat[0] * dy,
                b[1] + front[1] * dx + lat[1] * dy,
                b[2] + dz,
            ]
        };
        let mut wall = |center: Vec3, half: Vec3| {
            out.push(Primitive {
                shape: Shape::Box { center, yaw, half },
                semantics: None,
                instance: code,
            });
        };
        // shared casing walls: back, left, right, bottom
        wall(local(-hx, 0.0, 0.0), [WALL_T / 2.0, hy, hz]);
        wall(local(0.0, hy, 0.0), [hx, WALL_T / 2.0, hz]);
        wall(local(0.0, -hy, 0.0), [hx, WALL_T / 2.0, hz]);
        wall(local(0.0, 0.0, -hz), [hx, hy, WALL_T / 2.0]);
        match c.kind {
            ContainerKind::Drawer => {
                // sliding front panel; drawers are open-topped
                let panel = local(hx + c.joint.value, 0.0, 0.0);
                wall(panel, [WALL_T / 2.0, hy, hz]);
            }
            ContainerKind::Cabinet => {
                // top face plus a door hinged on the front-left edge
                wall(local(0.0, 0.0, hz), [hx, hy, WALL_T / 2.0]);
                let a = c.joint.value;
                let hinge = local(hx, hy, 0.0);
                let door_yaw = yaw + a;
                let d_door = [door_yaw.sin(), -door_yaw.cos(), 0.0];
                let center = geometry::add(hinge, geometry::scale(d_door, hy));
                out.push(Primitive {
                    shape: Shape::Box {
                        center,
                        yaw: door_yaw,
                        half: [WALL_T / 2.0, hy, hz],
                    },
                    semantics: None,
                    instance: code,
                });
            }
        }
    }
}

fn scene_primitives(scene: &Scene) -> Vec<Primitive> {
    let mut prims = Vec::new();
    for s in &scene.surfaces {
        prims.push(Primitive {
            shape: Shape::Box {
                center: [s.center[0], s.center[1], s.center[2] - s.thickness / 2.0],
                yaw: 0.0,
                half: [s.half_extent[0], s.half_extent[1], s.thickness / 2.0],
            },
            semantics: None,
            instance: INSTANCE_STRUCTURE,
        });
    }
    container_primitives(scene, &mut prims);
    for (oi, o) in scene.objects.iter().enumerate() {
        if scene.hidden_in_container(&o.id) {
            continue;
        }
        prims.push(Primitive {
            shape: Shape::Sphere {
                center: o.pose.position,
                radius: o.size,
            },
            semantics: Some((o.category, o.color, o.graspable)),
            instance: oi as i32,
        });
    }
    prims
}

fn ray_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = geometry::sub(center, origin);
    let b = geometry::dot(dir, oc);
    let disc = b * b - (geometry::dot(oc, oc) - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let t = b - disc.sqrt();
    (t > 1e-9).then_some(t)
}

fn ray_box(origin: Vec3, dir: Vec3, center: Vec3, yaw: f64, half: Vec3) -> Option<f64> {
    let (s, c) = yaw.sin_cos();
    let rel = geometry::sub(origin, center);
    let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let mut t1 = (-half[k] - o[k]) * inv;
        let mut t2 = (half[k] - o[k]) * inv;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        tmin = tmin.max(t1);
        tmax = tmax.min(t2);
        if tmin > tmax {
            return None;
        }
    }
    (tmin > 1e-9).then_some(tmin)
}

fn raster_pass(
    prims: &[Primitive],
    pivot: Vec3,
    pitch: f64,
    yaw: f64,
    fov_h: f64,
    dims: (usize, usize),
) -> (Array3<f32>, Array2<f32>, Array3<f32>, Array2<i32>) {
    let (h, w) = dims;
    let (fx, fy, cx, cy) = geometry::intrinsics(fov_h, dims);
    let basis = geometry::camera_basis(pitch, yaw);
    let mut semantic = Array3::<f32>::zeros((h, w, SEMANTIC_CHANNELS));
    let mut depth = Array2::<f32>::from_elem((h, w), DEPTH_EMPTY);
    let mut rays = Array3::<f32>::zeros((h, w, 3));
    let mut instance = Array2::<i32>::from_elem((h, w), INSTANCE_EMPTY);
    for i in 0..h {
        for j in 0..w {
            let dir_cam = geometry::normalize([
                (j as f64 - cx) / fx,
                -((i as f64 - cy) / fy),
                1.0,
            ]);
            for k in 0..3 {
                rays[[i, j, k]] = dir_cam[k] as f32;
            }
            let dir = geometry::cam_to_world(&basis, dir_cam);
            let mut best: Option<(f64, &Primitive)> = None;
            for p in prims {
                let t = match p.shape {
                    Shape::Sphere { center, radius } => ray_sphere(pivot, dir, center, radius),
                    Shape::Box { center, yaw, half } => ray_box(pivot, dir, center, yaw, half),
                };
                if let Some(t) = t {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, p));
                    }
                }
            }
            if let Some((t, p)) = best {
                depth[[i, j]] = t as f32;
                instance[[i, j]] = p.instance;
                if let Some((cat, col, graspable)) = p.semantics {
                    semantic[[i, j, cat.index()]] = 1.0;
                    semantic[[i, j, Category::ALL.len() + col.index()]] = 1.0;
                    if graspable {
                        semantic[[i, j, SEMANTIC_CHANNELS - 1]] = 1.0;
                    }
                }
            }
        }
    }
    (semantic, depth, rays, instance)
}

/// Renders the head-camera observation. Pure function of (scene, camera);
/// an empty scene yields all-empty rasters.
pub fn render(scene: &Scene, camera: &CameraState) -> Observation {
    let prims = scene_primitives(scene);
    let (semantic_raster, depth_raster, ray_dirs, instance_raster) = raster_pass(
        &prims,
        scene.head_pivot,
        camera.pitch,
        camera.yaw,
        camera.fov_h,
        camera.raster_dims,
    );
    Observation {
        semantic_raster,
        depth_raster,
        ray_dirs,
        intrinsics: geometry::intrinsics(camera.fov_h, camera.raster_dims),
        camera_pose: CameraPose {
            pitch: camera.pitch,
            yaw: camera.yaw,
            pivot: scene.head_pivot,
        },
        instance_raster,
        wrist_observation: None,
    }
}

/// Renders the head observation plus a nested wrist observation taken from
/// the end-effector frame.
pub fn render_with_wrist(
    scene: &Scene,
    camera: &CameraState,
    proprio: &ProprioState,
    arm: &ArmConfig,
) -> Observation {
    let mut obs = render(scene, camera);
    let (ee, wrist_pitch) = kinematics::forward_kinematics(&proprio.arm_joints, arm);
    let pivot = geometry::add(ee, arm.wrist_camera_offset);
    let prims = scene_primitives(scene);
    let wrist_pitch_deg = wrist_pitch.to_degrees().clamp(-89.0, 89.0);
    let wrist_yaw_deg = proprio.arm_joints[0].to_degrees();
    let (semantic_raster, depth_raster, ray_dirs, instance_raster) = raster_pass(
        &prims,
        pivot,
        wrist_pitch_deg,
        wrist_yaw_deg,
        camera.fov_h,
        camera.raster_dims,
    );
    obs.wrist_observation = Some(Box::new(Observation {
        semantic_raster,
        depth_raster,
        ray_dirs,
        intrinsics: geometry::intrinsics(camera.fov_h, camera.raster_dims),
        camera_pose: CameraPose {
            pitch: wrist_pitch_deg,
            yaw: wrist_yaw_deg,
            pivot,
        },
        instance_raster,
        wrist_observation: None,
    }));
    obs
}

/// Interior-gate check used by the renderer; exported for tests.
pub fn interior_visible(openness: f64) -> bool {
    openness > INTERIOR_VISIBILITY_GATE
}
