//! Scene sampling: room types, rest-stable object placement with rejection
//! sampling, and articulated containers.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::world::geometry::{add, scale, Vec3};
use crate::world::{
    ArticulatedJoint, Category, Color, Container, ContainerKind, JointKind, ObjectInstance, Pose,
    RoomType, Scene, Surface, SupportRef,
};

/// Deterministic per-purpose RNG stream.
pub fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    // splitmix64 over (seed, salt) to decorrelate nearby seeds
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn room_pool(room: RoomType, catalog: &[Category]) -> Vec<Category> {
    use Category::*;
    let pool: &[Category] = match room {
        RoomType::Kitchen => &[
            Cup, Plate, Mug, Bowl, Pot, Jar, Can, Bottle, Apple, Banana, Orange, Sponge, Lemon,
        ],
        RoomType::Living => &[Book, Vase, Can, Cup, Carton, Towel, Mug],
        RoomType::Dining => &[Plate, Fork, Spoon, Cup, Bottle, Bowl, Basket, Apple, Orange],
        RoomType::Bathroom => &[Soap, Toothbrush, Towel, Cup, Sponge, Bottle],
    };
    let filtered: Vec<Category> = pool.iter().copied().filter(|c| catalog.contains(c)).collect();
    if filtered.is_empty() {
        catalog.to_vec()
    } else {
        filtered
    }
}

fn aabbs_overlap(a: (Vec3, Vec3), b: (Vec3, Vec3)) -> bool {
    (0..3).all(|k| a.0[k] < b.1[k] && b.0[k] < a.1[k])
}

fn container_aabb(c: &Container) -> (Vec3, Vec3) {
    // conservative: circumscribe the yawed box
    let r = (c.half_extent[0].max(c.half_extent[1])) * std::f64::consts::SQRT_2;
    let p = c.body_pose.position;
    (
        [p[0] - r, p[1] - r, p[2] - c.half_extent[2]],
        [p[0] + r, p[1] + r, p[2] + c.half_extent[2]],
    )
}

fn make_object(
    id: String,
    category: Category,
    color: Color,
    size: f64,
    position: Vec3,
    support: SupportRef,
    rng: &mut ChaCha8Rng,
) -> ObjectInstance {
    let capacity = category.liquid_capacity();
    let liquid_units = if capacity > 0 && rng.gen_bool(0.5) {
        rng.gen_range(4..=capacity)
    } else {
        0
    };
    ObjectInstance {
        id,
        category,
        color,
        size,
        pose: Pose {
            position,
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        },
        grasp_point: [position[0], position[1], position[2] + size],
        graspable: category.graspable(),
        liquid_units,
        capacity,
        support,
    }
}

/// Samples a scene. Deterministic for a fixed (config, seed) pair.
pub fn sample_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    let mut rng = derive_rng(seed, 0x5ce9e5);

    let room_type = {
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = RoomType::Bathroom;
        for (rt, p) in RoomType::ALL.iter().zip(RoomType::PROBS.iter()) {
            acc += p;
            if x < acc {
                chosen = *rt;
                break;
            }
        }
        chosen
    };

    let table = Surface {
        center: config.table_center,
        half_extent: config.table_half_extent,
        thickness: config.table_thickness,
    };
    let table_top = table.top_z();

    // containers first: they occupy fixed slots on the far band of the table
    let n_containers = rng.gen_range(config.container_count.0..=config.container_count.1);
    let mut slots = [-0.28f64, 0.0, 0.28];
    slots.shuffle(&mut rng);
    let mut containers = Vec::new();
    let mut objects: Vec<ObjectInstance> = Vec::new();
    for ci in 0..n_containers.min(slots.len()) {
        let kind = if rng.gen_bool(0.5) {
            ContainerKind::Drawer
        } else {
            ContainerKind::Cabinet
        };
        let (half_extent, limit, jkind): (Vec3, f64, JointKind) = match kind {
            ContainerKind::Drawer => ([0.13, 0.16, 0.08], 0.24, JointKind::Prismatic),
            ContainerKind::Cabinet => {
                ([0.12, 0.15, 0.10], 100f64.to_radians(), JointKind::Revolute)
            }
        };
        let yaw = std::f64::consts::PI; // front faces the camera
        let position = [0.85, slots[ci], table_top + half_extent[2]];
        let open = rng.gen_bool(config.container_open_prob);
        let value = if open { rng.gen_range(0.5..1.0) * limit } else { 0.0 };
        let id = format!("cont{ci}");
        let mut container = Container {
            id: id.clone(),
            kind,
            joint: ArticulatedJoint {
                kind: jkind,
                value,
                limit,
                axis: [yaw.cos(), yaw.sin(), 0.0],
            },
            interior_objects: Vec::new(),
            body_pose: Pose { position, yaw },
            half_extent,
        };
        // interior objects rest on the container floor
        let n_interior = rng.gen_range(
            config.interior_objects_per_container.0..=config.interior_objects_per_container.1,
        );
        let pool = room_pool(room_type, &config.catalog);
        for ii in 0..n_interior {
            let category = *pool.choose(&mut rng).expect("non-empty pool");
            let color = *config.colors.choose(&mut rng).expect("non-empty colors");
            let size = rng
                .gen_range(config.size_range.0..config.size_range.1)
                .min(half_extent[2] - 0.015);
            let lateral = rng.gen_range(-half_extent[1] * 0.5..half_extent[1] * 0.5);
            let mut pos = [
                position[0],
                position[1] + lateral,
                position[2] - half_extent[2] + 0.012 + size,
            ];
            if kind == ContainerKind::Drawer {
                // drawer contents slide with the joint
                pos = add(pos, scale(container.front_dir(), container.joint.value));
            }
            let oid = format!("obj{}", objects.len());
            let obj = make_object(
                oid.clone(),
                category,
                color,
                size,
                pos,
                SupportRef::Container(id.clone()),
                &mut rng,
            );
            container.interior_objects.push(oid);
            objects.push(obj);
            let _ = ii;
        }
        containers.push(container);
    }

    // free objects on the table with rejection sampling against overlap
    let n_objects = rng.gen_range(config.object_count.0..=config.object_count.1);
    let pool = room_pool(room_type, &config.catalog);
    for _ in 0..n_objects {
        let category = *pool.choose(&mut rng).expect("non-empty pool");
        let color = *config.colors.choose(&mut rng).expect("non-empty colors");
        let size = rng.gen_range(config.size_range.0..config.size_range.1);
        let mut placed = false;
        for _attempt in 0..config.max_placement_attempts {
            let x = rng.gen_range(config.placement_x.0..config.placement_x.1);
            let y = rng.gen_range(config.placement_y.0..config.placement_y.1);
            let pos = [x, y, table_top + size];
            let cand_aabb = ([x - size, y - size, pos[2] - size], [x + size, y + size, pos[2] + size]);
            let collides = objects
                .iter()
                .filter(|o| matches!(o.support, SupportRef::Surface(_)))
                .any(|o| aabbs_overlap(cand_aabb, o.aabb()))
                || containers.iter().any(|c| aabbs_overlap(cand_aabb, container_aabb(c)));
            if !collides {
                let oid = format!("obj{}", objects.len());
                objects.push(make_object(
                    oid,
                    category,
                    color,
                    size,
                    pos,
                    SupportRef::Surface(0),
                    &mut rng,
                ));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                object: format!("{} ({})", category.name(), color.name()),
                attempts: config.max_placement_attempts,
            });
        }
    }

    let scene = Scene {
        room_type,
        surfaces: vec![table],
        objects,
        containers,
        head_pivot: config.head_pivot,
        rng_seed: seed,
        spilled_units: 0,
    };
    debug_assert!(scene.objects.iter().all(|o| {
        let (lo, hi) = o.aabb();
        let p = scene.head_pivot;
        !(p[0] > lo[0] && p[0] < hi[0] && p[1] > lo[1] && p[1] < hi[1] && p[2] > lo[2] && p[2] < hi[2])
    }));
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SceneConfig::default();
        let a = sample_scene(&cfg, 42).unwrap();
        let b = sample_scene(&cfg, 42).unwrap();
        assert_eq!(a.to_canonical_bytes().unwrap(), b.to_canonical_bytes().unwrap());
        let c = sample_scene(&cfg, 43).unwrap();
        assert_ne!(a.to_canonical_bytes().unwrap(), c.to_canonical_bytes().unwrap());
    }

    #[test]
    fn degenerate_count_range_is_exact() {
        let cfg = SceneConfig {
            object_count: (3, 3),
            container_count: (0, 0),
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = sample_scene(&cfg, seed).unwrap();
            assert_eq!(s.objects.len(), 3);
        }
    }

    #[test]
    fn free_objects_do_not_interpenetrate() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = sample_scene(&cfg, seed).unwrap();
            let free: Vec<&ObjectInstance> = s
                .objects
                .iter()
                .filter(|o| matches!(o.support, SupportRef::Surface(_)))
                .collect();
            for i in 0..free.len() {
                for j in (i + 1)..free.len() {
                    assert!(
                        !aabbs_overlap(free[i].aabb(), free[j].aabb()),
                        "seed {seed}: {} and {} overlap",
                        free[i].id,
                        free[j].id
                    );
                }
            }
        }
    }

    #[test]
    fn room_type_frequencies_near_published_mix() {
        let cfg = SceneConfig::default();
        let n = 4000;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            let s = sample_scene(&cfg, seed as u64).unwrap();
            let idx = RoomType::ALL.iter().position(|&r| r == s.room_type).unwrap();
            counts[idx] += 1;
        }
        for (c, p) in counts.iter().zip(RoomType::PROBS.iter()) {
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() < 0.03, "freq {f} vs {p}");
        }
    }

    #[test]
    fn interior_objects_reference_their_container() {
        let cfg = SceneConfig {
            container_count: (2, 2),
            ..SceneConfig::default()
        };
        let s = sample_scene(&cfg, 7).unwrap();
        for c in &s.containers {
            for oid in &c.interior_objects {
                let o = s.object(oid).expect("interior object exists");
                assert_eq!(o.support, SupportRef::Container(c.id.clone()));
            }
        }
    }
}
