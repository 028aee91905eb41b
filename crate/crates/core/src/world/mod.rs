//! Deterministic synthetic 3D world: scenes, articulated containers, a
//! pitch/yaw head camera, and observation rendering.

pub mod geometry;
pub mod kinematics;
pub mod render;
pub mod sample;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::Result;
use geometry::Vec3;

/// Depth value written to pixels no primitive covers. Excluded from every
/// geometric invariant.
pub const DEPTH_EMPTY: f32 = -1.0;

/// Openness fraction above which a container's interior is rendered.
pub const INTERIOR_VISIBILITY_GATE: f64 = 0.15;

/// Object catalog. Fixed order; raster channel layout depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Category {
    Cup,
    Plate,
    Apple,
    Bottle,
    Basket,
    Mug,
    Bowl,
    Banana,
    Orange,
    Jar,
    Can,
    Carton,
    Book,
    Sponge,
    Soap,
    Toothbrush,
    Towel,
    Fork,
    Spoon,
    Pot,
    Vase,
    Lemon,
}

impl Category {
    pub const ALL: [Category; 22] = [
        Category::Cup,
        Category::Plate,
        Category::Apple,
        Category::Bottle,
        Category::Basket,
        Category::Mug,
        Category::Bowl,
        Category::Banana,
        Category::Orange,
        Category::Jar,
        Category::Can,
        Category::Carton,
        Category::Book,
        Category::Sponge,
        Category::Soap,
        Category::Toothbrush,
        Category::Towel,
        Category::Fork,
        Category::Spoon,
        Category::Pot,
        Category::Vase,
        Category::Lemon,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("in catalog")
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Cup => "cup",
            Category::Plate => "plate",
            Category::Apple => "apple",
            Category::Bottle => "bottle",
            Category::Basket => "basket",
            Category::Mug => "mug",
            Category::Bowl => "bowl",
            Category::Banana => "banana",
            Category::Orange => "orange",
            Category::Jar => "jar",
            Category::Can => "can",
            Category::Carton => "carton",
            Category::Book => "book",
            Category::Sponge => "sponge",
            Category::Soap => "soap",
            Category::Toothbrush => "toothbrush",
            Category::Towel => "towel",
            Category::Fork => "fork",
            Category::Spoon => "spoon",
            Category::Pot => "pot",
            Category::Vase => "vase",
            Category::Lemon => "lemon",
        }
    }

    /// Containers that can hold discrete liquid units.
    pub fn liquid_capacity(self) -> u32 {
        match self {
            Category::Cup | Category::Mug | Category::Bottle | Category::Bowl => 10,
            Category::Jar | Category::Pot | Category::Vase => 10,
            _ => 0,
        }
    }

    pub fn graspable(self) -> bool {
        !matches!(self, Category::Basket)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
        Color::Black,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("in palette")
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
        }
    }
}

/// Number of semantic raster channels: one-hot categories, one-hot colors,
/// and a graspable flag.
pub const SEMANTIC_CHANNELS: usize = Category::ALL.len() + Color::ALL.len() + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoomType {
    Kitchen,
    Living,
    Dining,
    Bathroom,
}

impl RoomType {
    pub const ALL: [RoomType; 4] = [
        RoomType::Kitchen,
        RoomType::Living,
        RoomType::Dining,
        RoomType::Bathroom,
    ];

    /// Household activity-frequency distribution used by scene sampling.
    pub const PROBS: [f64; 4] = [0.32, 0.18, 0.29, 0.21];
}

/// Where an object rests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportRef {
    Surface(usize),
    Container(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: String,
    pub category: Category,
    pub color: Color,
    /// Bounding-sphere radius in meters.
    pub size: f64,
    pub pose: Pose,
    pub grasp_point: Vec3,
    pub graspable: bool,
    pub liquid_units: u32,
    pub capacity: u32,
    pub support: SupportRef,
}

impl ObjectInstance {
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let p = self.pose.position;
        let r = self.size;
        ([p[0] - r, p[1] - r, p[2] - r], [p[0] + r, p[1] + r, p[2] + r])
    }
}

/// Axis-aligned support slab; `center` is the middle of the top face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub center: Vec3,
    pub half_extent: [f64; 2],
    pub thickness: f64,
}

impl Surface {
    pub fn top_z(&self) -> f64 {
        self.center[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointKind {
    Prismatic,
    Revolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticulatedJoint {
    pub kind: JointKind,
    /// Meters for prismatic joints, radians for revolute joints.
    pub value: f64,
    pub limit: f64,
    pub axis: Vec3,
}

impl ArticulatedJoint {
    pub fn openness(&self) -> f64 {
        (self.value / self.limit).clamp(0.0, 1.0)
    }
}

/// value' = clamp(value + delta, 0, limit).
pub fn step_joint(joint: &ArticulatedJoint, delta: f64) -> ArticulatedJoint {
    ArticulatedJoint {
        value: (joint.value + delta).clamp(0.0, joint.limit),
        ..joint.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContainerKind {
    Drawer,
    Cabinet,
}

/// Articulated container. Drawers slide a front panel (and their interior
/// objects) along the joint axis; cabinets swing a door about a vertical
/// hinge. Interior dimensions are fixed per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub id: String,
    pub kind: ContainerKind,
    pub joint: ArticulatedJoint,
    pub interior_objects: Vec<String>,
    pub body_pose: Pose,
    /// Casing half extents (x: depth toward the camera, y: width, z: height)
    /// in the container's local frame.
    pub half_extent: Vec3,
}

impl Container {
    /// Outward (front) direction in world coordinates.
    pub fn front_dir(&self) -> Vec3 {
        let y = self.body_pose.yaw;
        [y.cos(), y.sin(), 0.0]
    }

    fn lateral_dir(&self) -> Vec3 {
        let y = self.body_pose.yaw;
        [-y.sin(), y.cos(), 0.0]
    }

    /// Current handle point; continuous in the joint value.
    pub fn handle_point(&self) -> Vec3 {
        let front = self.front_dir();
        let c = self.body_pose.position;
        match self.kind {
            ContainerKind::Drawer => {
                // handle sits on the sliding front panel
                let out = self.half_extent[0] + self.joint.value + 0.02;
                geometry::add(c, geometry::scale(front, out))
            }
            ContainerKind::Cabinet => {
                // handle on the swinging door's outer edge
                let ang = self.joint.value;
                let w = self.half_extent[1];
                let lat = self.lateral_dir();
                let hinge = geometry::add(
                    geometry::add(c, geometry::scale(front, self.half_extent[0])),
                    geometry::scale(lat, w),
                );
                // door swings outward about the hinge
                let door = geometry::add(
                    geometry::scale(lat, -(2.0 * w) * ang.cos() * 0.95),
                    geometry::scale(front, (2.0 * w) * ang.sin() * 0.95),
                );
                geometry::add(hinge, door)
            }
        }
    }

    /// Point at the center of the interior cavity.
    pub fn interior_point(&self) -> Vec3 {
        self.body_pose.position
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room_type: RoomType,
    pub surfaces: Vec<Surface>,
    pub objects: Vec<ObjectInstance>,
    pub containers: Vec<Container>,
    pub head_pivot: Vec3,
    pub rng_seed: u64,
    /// Cumulative liquid units that missed every receptacle.
    pub spilled_units: u32,
}

impl Scene {
    pub fn object(&self, id: &str) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: &str) -> Option<&mut ObjectInstance> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn container(&self, id: &str) -> Option<&Container> {
        self.containers.iter().find(|c| c.id == id)
    }

    pub fn container_mut(&mut self, id: &str) -> Option<&mut Container> {
        self.containers.iter_mut().find(|c| c.id == id)
    }

    /// True when `id` sits inside a container whose openness is at or below
    /// the interior visibility gate.
    pub fn hidden_in_container(&self, id: &str) -> bool {
        self.containers.iter().any(|c| {
            c.interior_objects.iter().any(|o| o == id)
                && c.joint.openness() <= INTERIOR_VISIBILITY_GATE
        })
    }

    /// Canonical sorted-key serialization; stable bytes for determinism
    /// tests.
    pub fn to_canonical_bytes(&self) -> Result<Vec<u8>> {
        Ok(canonical::to_canonical_json(self)?.into_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    /// Degrees; positive looks up.
    pub pitch: f64,
    /// Degrees; positive turns left.
    pub yaw: f64,
    /// (pitch_lo, pitch_hi, yaw_lo, yaw_hi) in degrees.
    pub limits: (f64, f64, f64, f64),
    pub fov_h: f64,
    /// (rows, cols).
    pub raster_dims: (usize, usize),
}

impl CameraState {
    /// Default 2-DoF head: pitch in [-60, 60], yaw in [-90, 90], 90 deg
    /// horizontal FOV, 48x48 raster.
    pub fn default_head() -> Self {
        CameraState {
            pitch: 0.0,
            yaw: 0.0,
            limits: (-60.0, 60.0, -90.0, 90.0),
            fov_h: 90.0,
            raster_dims: (48, 48),
        }
    }

    pub fn with_angles(&self, pitch: f64, yaw: f64) -> Self {
        let mut c = self.clone();
        c.pitch = pitch.clamp(self.limits.0, self.limits.1);
        c.yaw = yaw.clamp(self.limits.2, self.limits.3);
        c
    }
}

/// Component-wise addition then clamping to the head limits. The flag
/// reports whether any axis saturated.
pub fn apply_head_delta(camera: &CameraState, delta: (f64, f64)) -> (CameraState, bool) {
    let p = camera.pitch + delta.0;
    let y = camera.yaw + delta.1;
    let pc = p.clamp(camera.limits.0, camera.limits.1);
    let yc = y.clamp(camera.limits.2, camera.limits.3);
    let clamped = (pc - p).abs() > 0.0 || (yc - y).abs() > 0.0;
    let mut out = camera.clone();
    out.pitch = pc;
    out.yaw = yc;
    (out, clamped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprioState {
    /// Arm joint angles in radians.
    pub arm_joints: Vec<f64>,
    /// 0 = closed, 1 = open.
    pub gripper: f64,
    pub attached_object: Option<String>,
    /// (pitch, yaw) degrees.
    pub head: (f64, f64),
}

impl ProprioState {
    pub fn home(d_arm: usize) -> Self {
        ProprioState {
            arm_joints: vec![0.0; d_arm],
            gripper: 1.0,
            attached_object: None,
            head: (0.0, 0.0),
        }
    }
}

/// Result of one discrete pour step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PourOutcome {
    /// Tilt below the pour threshold; nothing happened.
    None,
    /// One unit moved from holder to receptacle.
    Transferred,
    /// One unit left the holder and missed the receptacle.
    Spilled,
}

/// Tilt angle (radians) beyond which a held liquid container releases one
/// unit per step.
pub const POUR_TILT_RAD: f64 = std::f64::consts::PI / 3.0;

/// Horizontal lip alignment required for a poured unit to land in the
/// receptacle (meters).
pub const POUR_ALIGN_M: f64 = 0.05;

/// One discrete pour step: a unit leaves the holder when the wrist tilt
/// exceeds the threshold; it lands in the receptacle when the horizontal lip
/// distance is under the alignment bound, otherwise it spills.
pub fn pour_step(
    holder: &mut ObjectInstance,
    receptacle: &mut ObjectInstance,
    wrist_pitch: f64,
) -> PourOutcome {
    if holder.liquid_units == 0 || wrist_pitch.abs() <= POUR_TILT_RAD {
        return PourOutcome::None;
    }
    holder.liquid_units -= 1;
    let dx = holder.pose.position[0] - receptacle.pose.position[0];
    let dy = holder.pose.position[1] - receptacle.pose.position[1];
    if (dx * dx + dy * dy).sqrt() < POUR_ALIGN_M && receptacle.liquid_units < receptacle.capacity {
        receptacle.liquid_units += 1;
        PourOutcome::Transferred
    } else {
        PourOutcome::Spilled
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_step_clamps() {
        let j = ArticulatedJoint {
            kind: JointKind::Prismatic,
            value: 0.2,
            limit: 0.4,
            axis: [1.0, 0.0, 0.0],
        };
        let j2 = step_joint(&j, 0.17);
        assert!((j2.value - 0.37).abs() < 1e-12);
        assert!((j2.openness() - 0.925).abs() < 1e-12);
        let j3 = step_joint(&j, -1.0);
        assert_eq!(j3.value, 0.0);
        let j4 = step_joint(&j, 0.0);
        assert_eq!(j4.value, j.value);
    }

    #[test]
    fn head_delta_clamps_and_flags() {
        let c = CameraState::default_head();
        let (c2, f) = apply_head_delta(&c, (0.0, 0.0));
        assert_eq!(c2, c);
        assert!(!f);

        let at_limit = c.with_angles(60.0, 0.0);
        let (c3, f3) = apply_head_delta(&at_limit, (10.0, 0.0));
        assert_eq!(c3.pitch, 60.0);
        assert!(f3);

        let (c4, f4) = apply_head_delta(&c, (5.0, -5.0));
        assert_eq!(c4.pitch, 5.0);
        assert_eq!(c4.yaw, -5.0);
        assert!(!f4);
    }

    fn liquid_obj(id: &str, units: u32, pos: Vec3) -> ObjectInstance {
        ObjectInstance {
            id: id.into(),
            category: Category::Cup,
            color: Color::Red,
            size: 0.04,
            pose: Pose { position: pos, yaw: 0.0 },
            grasp_point: [pos[0], pos[1], pos[2] + 0.04],
            graspable: true,
            liquid_units: units,
            capacity: 10,
            support: SupportRef::Surface(0),
        }
    }

    #[test]
    fn pour_transfers_when_aligned_and_tilted() {
        let mut holder = liquid_obj("a", 10, [0.5, 0.0, 0.8]);
        let mut rec = liquid_obj("b", 0, [0.52, 0.0, 0.74]);
        for _ in 0..9 {
            assert_eq!(pour_step(&mut holder, &mut rec, 1.2), PourOutcome::Transferred);
        }
        assert_eq!(holder.liquid_units, 1);
        assert_eq!(rec.liquid_units, 9);
    }

    #[test]
    fn pour_noop_below_threshold() {
        let mut holder = liquid_obj("a", 10, [0.5, 0.0, 0.8]);
        let mut rec = liquid_obj("b", 0, [0.52, 0.0, 0.74]);
        assert_eq!(pour_step(&mut holder, &mut rec, 30f64.to_radians()), PourOutcome::None);
        assert_eq!(holder.liquid_units, 10);
    }

    #[test]
    fn pour_conserves_units() {
        // alternating aligned / misaligned pours; holder + receptacle +
        // spilled must account for every unit.
        let mut holder = liquid_obj("a", 10, [0.5, 0.0, 0.8]);
        let mut rec = liquid_obj("b", 0, [0.52, 0.0, 0.74]);
        let mut spilled = 0u32;
        for i in 0..10 {
            holder.pose.position = if i % 2 == 0 {
                [0.52, 0.0, 0.8]
            } else {
                [0.8, 0.3, 0.8]
            };
            match pour_step(&mut holder, &mut rec, 1.5) {
                PourOutcome::Spilled => spilled += 1,
                PourOutcome::Transferred => {}
                PourOutcome::None => panic!("should pour"),
            }
        }
        assert_eq!(holder.liquid_units, 0);
        assert_eq!(rec.liquid_units + spilled, 10);
        assert_eq!(rec.liquid_units, 5);
    }

    #[test]
    fn handle_point_continuous_in_joint_value() {
        for kind in [ContainerKind::Drawer, ContainerKind::Cabinet] {
            let limit = match kind {
                ContainerKind::Drawer => 0.25,
                ContainerKind::Cabinet => std::f64::consts::FRAC_PI_2,
            };
            let mut c = Container {
                id: "c0".into(),
                kind,
                joint: ArticulatedJoint {
                    kind: match kind {
                        ContainerKind::Drawer => JointKind::Prismatic,
                        ContainerKind::Cabinet => JointKind::Revolute,
                    },
                    value: 0.0,
                    limit,
                    axis: [1.0, 0.0, 0.0],
                },
                interior_objects: vec![],
                body_pose: Pose { position: [0.7, 0.2, 0.5], yaw: 0.3 },
                half_extent: [0.12, 0.15, 0.1],
            };
            let mut prev = c.handle_point();
            let steps = 200;
            for i in 1..=steps {
                c.joint.value = limit * i as f64 / steps as f64;
                let h = c.handle_point();
                let d = geometry::norm(geometry::sub(h, prev));
                assert!(d < 0.02, "handle jumped by {d}");
                prev = h;
            }
        }
    }
}
