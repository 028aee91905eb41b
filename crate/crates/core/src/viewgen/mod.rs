//! Image / language / camera-movement dataset generation.
//!
//! Each record pairs an initial observation with a language instruction and
//! the ground-truth camera-movement chunk that recenters the task anchor.
//! The pipeline is: sample a scene, bind a task template, compute the
//! optimal (anchor-centered) view, perturb it under the modality's
//! visibility contract, and split the recovered delta into a capped chunk.
//!
//! Artifacts on disk:
//! - `manifest.jsonl` — one canonical JSON line per record, index order;
//! - `rasters.avpk` — magic `AVPK`, version `u32` LE, record count `u64` LE,
//!   then per-record `f32` LE rasters (semantic H*W*C, depth H*W, rays
//!   H*W*3, row-major) at the offsets recorded in the manifest.

pub mod templates;
pub mod vocab;

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_line;
use crate::config::ViewgenConfig;
use crate::world::geometry::{self, Vec3};
use crate::world::render::{render, Observation};
use crate::world::sample::{derive_rng, sample_scene};
use crate::world::{CameraState, Scene};
use crate::{Error, Result};
pub use templates::{AtomicAction, Augmentation, BoundTask, Modality, TaskTemplate};

pub const AVPK_MAGIC: [u8; 4] = *b"AVPK";
pub const AVPK_VERSION: u32 = 1;

/// Distinct scene-seed domains per split, so no scene sampled for a test
/// split can collide with a training scene.
const SEED_DOMAIN_TRAIN: u64 = 1_000_000;
const SEED_DOMAIN_TEST1: u64 = 2_000_000;
const SEED_DOMAIN_TEST2: u64 = 3_000_000;
const SEED_DOMAIN_RETRY: u64 = 10_000_000;
/// Scene-resample attempts per record before giving up.
const MAX_SCENE_ATTEMPTS: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test1,
    Test2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub tokens: Vec<usize>,
    pub modality: Modality,
    pub target_object_id: String,
    pub stage2_target_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub scene_seed: u64,
    /// (pitch, yaw) degrees.
    pub initial_camera: (f64, f64),
    pub target_camera: (f64, f64),
    pub total_delta: (f64, f64),
    pub gt_chunk: Vec<[f64; 2]>,
    /// Per-step cap truncated the chunk; the episode needs more than one
    /// chunk to finish.
    pub saturated: bool,
    /// Head limits prevented exact centering; the anchor is merely
    /// in-frustum at the target view.
    pub clamp_limited: bool,
    pub instruction: Instruction,
    pub split: Split,
    /// Byte offset of this record's rasters in the blob, when stored.
    pub blob_offset: Option<u64>,
}

/// Camera pose that centers `anchor`, reached from the canonical zero pose
/// and clamped to head limits. The flag reports clamp-limited centering.
/// Anchors that cannot even enter the frustum under the limits are
/// rejected.
pub fn optimal_view(scene: &Scene, anchor: Vec3) -> Result<(CameraState, bool)> {
    let zero = CameraState::default_head();
    let (dp, dy) = geometry::camera_delta_to(&zero, scene.head_pivot, anchor)?;
    let (cam, clamped) = crate::world::apply_head_delta(&zero, (dp, dy));
    if !geometry::in_frustum(&cam, scene.head_pivot, anchor) {
        return Err(Error::Rejection(format!(
            "anchor bearing ({dp:.1}, {dy:.1}) deg unreachable within head limits"
        )));
    }
    Ok((cam, clamped))
}

fn anchor_pixels(scene: &Scene, camera: &CameraState, instance: i32) -> usize {
    render(scene, camera).count_instance_pixels(instance)
}

/// Samples an initial view around `optimal` until the modality's visibility
/// contract holds: visual centering needs the anchor at least partially in
/// frame, directive and commonsense prompts need it fully out of frame.
pub fn perturb_view(
    scene: &Scene,
    optimal: &CameraState,
    anchor_instance: i32,
    modality: Modality,
    cfg: &ViewgenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CameraState> {
    let (pr, yr) = cfg.centering_perturb;
    for _ in 0..cfg.max_perturb_attempts {
        let cand = match modality {
            Modality::VisualCentering => {
                let dp = rng.gen_range(-pr..=pr);
                let dy = rng.gen_range(-yr..=yr);
                optimal.with_angles(optimal.pitch + dp, optimal.yaw + dy)
            }
            Modality::SpatialDirective | Modality::CommonSense => {
                // push one axis past the frustum edge by a sampled margin,
                // jitter the other within the centering range
                let margin = rng.gen_range(cfg.out_of_frame_margin.0..=cfg.out_of_frame_margin.1);
                let off = optimal.fov_h / 2.0 + margin;
                let sign = if rng.gen_range(0..2) == 0 { 1.0 } else { -1.0 };
                if rng.gen_range(0..2) == 0 {
                    let dy = rng.gen_range(-yr..=yr);
                    optimal.with_angles(optimal.pitch + sign * off, optimal.yaw + dy)
                } else {
                    let dp = rng.gen_range(-pr..=pr);
                    optimal.with_angles(optimal.pitch + dp, optimal.yaw + sign * off)
                }
            }
        };
        let px = anchor_pixels(scene, &cand, anchor_instance);
        let ok = match modality {
            Modality::VisualCentering => px >= 1,
            Modality::SpatialDirective | Modality::CommonSense => px == 0,
        };
        // a degenerate perturbation that lands back on the optimal pose is
        // useless for directive prompts but fine for centering
        if ok {
            return Ok(cand);
        }
    }
    Err(Error::InfeasiblePerturbation {
        modality: format!("{modality:?}"),
        attempts: cfg.max_perturb_attempts,
    })
}

/// Splits `total` into `k` identical per-axis steps of
/// `clamp(total/k, ±cap)`. The flag marks saturation on either axis.
pub fn make_gt_chunk(total: (f64, f64), k: usize, cap: f64) -> (Vec<[f64; 2]>, bool) {
    assert!(k >= 1 && cap > 0.0);
    let step_p = (total.0 / k as f64).clamp(-cap, cap);
    let step_y = (total.1 / k as f64).clamp(-cap, cap);
    let saturated = (total.0 / k as f64).abs() > cap || (total.1 / k as f64).abs() > cap;
    (vec![[step_p, step_y]; k], saturated)
}

/// Directive surface form from the dominant axis of the ground-truth motion.
/// Positive yaw turns left, positive pitch looks up.
pub fn directive_word(total: (f64, f64)) -> &'static str {
    if total.1.abs() >= total.0.abs() {
        if total.1 >= 0.0 {
            "left"
        } else {
            "right"
        }
    } else if total.0 >= 0.0 {
        "up"
    } else {
        "down"
    }
}

fn scene_seed_for(split: Split, index: usize, attempt: u64) -> u64 {
    let domain = match split {
        Split::Train | Split::Val => SEED_DOMAIN_TRAIN,
        Split::Test1 => SEED_DOMAIN_TEST1,
        Split::Test2 => SEED_DOMAIN_TEST2,
    };
    domain + index as u64 + SEED_DOMAIN_RETRY * attempt
}

fn pick_template(
    modality: Modality,
    cfg: &ViewgenConfig,
    rng: &mut ChaCha8Rng,
) -> &'static TaskTemplate {
    match modality {
        Modality::SpatialDirective => templates::template("directive_find"),
        Modality::CommonSense => {
            const IDS: [&str; 5] = [
                "commonsense_drink",
                "commonsense_fruit",
                "commonsense_read",
                "commonsense_clean",
                "commonsense_eat_with",
            ];
            templates::template(IDS[rng.gen_range(0..IDS.len())])
        }
        Modality::VisualCentering => {
            if rng.gen_range(0.0..1.0) < cfg.augmentation_prob {
                const AUG: [&str; 2] = ["conditional_pick", "container_take_out"];
                templates::template(AUG[rng.gen_range(0..AUG.len())])
            } else {
                const IDS: [&str; 3] = [
                    "center_pick_color",
                    "center_pick_ordinal",
                    "center_pick_superlative",
                ];
                templates::template(IDS[rng.gen_range(0..IDS.len())])
            }
        }
    }
}

/// One fully bound record; loops over scene seeds until the template binds
/// and the perturbation contract is satisfiable. Takes the scene
/// distribution explicitly so evaluation sweeps can generate records under
/// shifted layouts or swapped catalogs.
pub fn generate_record(
    index: usize,
    split: Split,
    modality: Modality,
    scene_cfg: &crate::config::SceneConfig,
    cfg: &ViewgenConfig,
    seed: u64,
) -> Result<(DatasetRecord, Scene)> {
    let mut rng = derive_rng(seed, 0x76670000 + index as u64);
    let mut last_err = None;
    for attempt in 0..MAX_SCENE_ATTEMPTS {
        let scene_seed = scene_seed_for(split, index, attempt);
        let scene = match sample_scene(scene_cfg, scene_seed) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let tpl = pick_template(modality, cfg, &mut rng);
        let bound = match templates::instantiate_template(tpl, &scene, &mut rng) {
            Ok(b) => b,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let (target, clamp_limited) = match optimal_view(&scene, bound.anchor) {
            Ok(v) => v,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let initial = match perturb_view(
            &scene,
            &target,
            bound.anchor_instance,
            modality,
            cfg,
            &mut rng,
        ) {
            Ok(c) => c,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let total = (target.pitch - initial.pitch, target.yaw - initial.yaw);
        let (gt_chunk, saturated) = make_gt_chunk(total, cfg.k, cfg.per_step_cap);
        let dir = match modality {
            Modality::SpatialDirective => Some(directive_word(total)),
            _ => None,
        };
        let text = templates::finalize_text(&bound, dir);
        let (tokens, _unk) = vocab::tokenize(&text);
        let record = DatasetRecord {
            index,
            scene_seed,
            initial_camera: (initial.pitch, initial.yaw),
            target_camera: (target.pitch, target.yaw),
            total_delta: total,
            gt_chunk,
            saturated,
            clamp_limited,
            instruction: Instruction {
                text,
                tokens,
                modality,
                target_object_id: bound.target_object_id.clone(),
                stage2_target_id: bound.stage2_target_id.clone(),
            },
            split,
            blob_offset: None,
        };
        return Ok((record, scene));
    }
    Err(last_err.unwrap_or_else(|| {
        Error::Rejection(format!("record {index}: no viable scene"))
    }))
}

fn sample_modality(mix: [f64; 3], rng: &mut ChaCha8Rng) -> Modality {
    let u: f64 = rng.gen_range(0.0..1.0) * (mix[0] + mix[1] + mix[2]);
    if u < mix[0] {
        Modality::VisualCentering
    } else if u < mix[0] + mix[1] {
        Modality::SpatialDirective
    } else {
        Modality::CommonSense
    }
}

fn raster_bytes(obs: &Observation) -> Vec<u8> {
    let mut out = Vec::new();
    for v in obs.semantic_raster.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in obs.depth_raster.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in obs.ray_dirs.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Generates `n_records` records deterministically from `seed` and writes
/// Reads `manifest.jsonl` back from a dataset directory.
pub fn load_manifest(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    text.lines()
        .map(|line| serde_json::from_str(line).map_err(|e| Error::Config(e.to_string())))
        .collect()
}

/// `manifest.jsonl` plus `rasters.avpk` under `out_dir`. Returns the records
/// in index order.
pub fn generate_dataset(
    n_records: usize,
    cfg: &ViewgenConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<DatasetRecord>> {
    if n_records == 0 {
        return Err(Error::Config("n_records must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let n_test1 = ((n_records as f64) * cfg.test1_fraction).round() as usize;
    let n_test2 = ((n_records as f64) * cfg.test2_fraction).round() as usize;
    let n_trainval = n_records.saturating_sub(n_test1 + n_test2);

    let mut records = Vec::with_capacity(n_records);
    let mut scenes = Vec::with_capacity(n_records);
    for index in 0..n_records {
        // split and modality are fixed per index so parallel workers need
        // no shared state
        let mut meta_rng = derive_rng(seed, 0x6d657400 + index as u64);
        let (split, modality) = if index < n_trainval {
            let split = if meta_rng.gen_range(0.0..1.0) < cfg.val_fraction {
                Split::Val
            } else {
                Split::Train
            };
            (split, sample_modality(cfg.modality_mix, &mut meta_rng))
        } else if index < n_trainval + n_test1 {
            (Split::Test1, Modality::SpatialDirective)
        } else {
            (Split::Test2, Modality::CommonSense)
        };
        let (record, scene) = generate_record(
            index,
            split,
            modality,
            &crate::config::SceneConfig::default(),
            cfg,
            seed,
        )?;
        records.push(record);
        scenes.push(scene);
    }

    // blob first, so offsets are known when the manifest is written
    let blob_path = out_dir.join("rasters.avpk");
    let mut blob = std::fs::File::create(&blob_path)?;
    blob.write_all(&AVPK_MAGIC)?;
    blob.write_all(&AVPK_VERSION.to_le_bytes())?;
    let stored = if cfg.store_rasters { n_records as u64 } else { 0 };
    blob.write_all(&stored.to_le_bytes())?;
    if cfg.store_rasters {
        let mut offset = (AVPK_MAGIC.len() + 4 + 8) as u64;
        for (record, scene) in records.iter_mut().zip(&scenes) {
            let zero = CameraState::default_head();
            let cam = zero.with_angles(record.initial_camera.0, record.initial_camera.1);
            let bytes = raster_bytes(&render(scene, &cam));
            record.blob_offset = Some(offset);
            blob.write_all(&bytes)?;
            offset += bytes.len() as u64;
        }
    }
    blob.flush()?;

    let mut manifest = std::fs::File::create(out_dir.join("manifest.jsonl"))?;
    for record in &records {
        manifest.write_all(to_canonical_line(record)?.as_bytes())?;
    }
    manifest.flush()?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SceneConfig;

    fn test_cfg() -> ViewgenConfig {
        ViewgenConfig::default()
    }

    #[test]
    fn gt_chunk_uniform_and_saturation() {
        let (chunk, sat) = make_gt_chunk((10.0, -6.0), 5, 6.0);
        assert!(!sat);
        assert_eq!(chunk, vec![[2.0, -1.2]; 5]);
        let (chunk, sat) = make_gt_chunk((60.0, 0.0), 5, 6.0);
        assert!(sat);
        assert_eq!(chunk, vec![[6.0, 0.0]; 5]);
    }

    #[test]
    fn gt_chunk_sum_matches_clamped_total_over_grid() {
        for k in [1usize, 4, 8] {
            for tp in (-10..=10).map(|i| i as f64 * 7.3) {
                for ty in (-10..=10).map(|i| i as f64 * 5.1) {
                    let cap = 6.0;
                    let (chunk, sat) = make_gt_chunk((tp, ty), k, cap);
                    let sum_p: f64 = chunk.iter().map(|s| s[0]).sum();
                    let sum_y: f64 = chunk.iter().map(|s| s[1]).sum();
                    let want_p = tp.signum() * tp.abs().min(k as f64 * cap);
                    let want_y = ty.signum() * ty.abs().min(k as f64 * cap);
                    assert!((sum_p - want_p).abs() < 1e-9, "k={k} tp={tp}");
                    assert!((sum_y - want_y).abs() < 1e-9, "k={k} ty={ty}");
                    assert_eq!(sat, tp.abs() > k as f64 * cap || ty.abs() > k as f64 * cap);
                }
            }
        }
    }

    #[test]
    fn optimal_view_centers_anchor_at_principal_point() {
        let scene = sample_scene(&SceneConfig::default(), 11).unwrap();
        let anchor = scene.objects[0].grasp_point;
        let (cam, clamp_limited) = optimal_view(&scene, anchor).unwrap();
        let (u, v, _) = geometry::project(&cam, scene.head_pivot, anchor).unwrap();
        if !clamp_limited {
            let (_, _, cx, cy) = geometry::intrinsics(cam.fov_h, cam.raster_dims);
            assert!((u - cx).abs() < 0.5 && (v - cy).abs() < 0.5, "({u}, {v})");
        } else {
            assert!(geometry::in_frustum(&cam, scene.head_pivot, anchor));
        }
    }

    #[test]
    fn directive_word_follows_sign_convention() {
        assert_eq!(directive_word((0.0, 40.0)), "left");
        assert_eq!(directive_word((0.0, -40.0)), "right");
        assert_eq!(directive_word((30.0, 5.0)), "up");
        assert_eq!(directive_word((-30.0, -5.0)), "down");
    }

    #[test]
    fn generate_is_deterministic() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = test_cfg();
        generate_dataset(12, &cfg, 42, dir1.path()).unwrap();
        generate_dataset(12, &cfg, 42, dir2.path()).unwrap();
        for name in ["manifest.jsonl", "rasters.avpk"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
    }

    #[test]
    fn modality_visibility_contract_holds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_cfg();
        let records = generate_dataset(16, &cfg, 7, dir.path()).unwrap();
        let zero = CameraState::default_head();
        for r in &records {
            let scene = sample_scene(&SceneConfig::default(), r.scene_seed).unwrap();
            let cam = zero.with_angles(r.initial_camera.0, r.initial_camera.1);
            let obs = render(&scene, &cam);
            // anchor instance: container code for container tasks, object
            // index otherwise
            let code = match scene.object_index(&r.instruction.target_object_id) {
                Some(i) => i as i32,
                None => {
                    let ci = scene
                        .containers
                        .iter()
                        .position(|c| c.id == r.instruction.target_object_id)
                        .unwrap();
                    crate::world::render::CONTAINER_INSTANCE_BASE + ci as i32
                }
            };
            let px = obs.count_instance_pixels(code);
            match r.instruction.modality {
                Modality::VisualCentering => assert!(px >= 1, "record {}", r.index),
                _ => assert_eq!(px, 0, "record {}", r.index),
            }
        }
    }

    #[test]
    fn splits_partition_and_scene_seeds_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_dataset(30, &test_cfg(), 3, dir.path()).unwrap();
        let seeds = |s: Split| -> std::collections::BTreeSet<u64> {
            records
                .iter()
                .filter(|r| r.split == s)
                .map(|r| r.scene_seed)
                .collect()
        };
        let train: std::collections::BTreeSet<u64> =
            seeds(Split::Train).union(&seeds(Split::Val)).copied().collect();
        let t1 = seeds(Split::Test1);
        let t2 = seeds(Split::Test2);
        assert!(!t1.is_empty() && !t2.is_empty());
        assert!(train.is_disjoint(&t1) && train.is_disjoint(&t2));
        for r in &records {
            match r.split {
                Split::Test1 => assert_eq!(r.instruction.modality, Modality::SpatialDirective),
                Split::Test2 => assert_eq!(r.instruction.modality, Modality::CommonSense),
                _ => {}
            }
        }
    }

    #[test]
    fn vocabulary_closure_no_unk_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_dataset(24, &test_cfg(), 9, dir.path()).unwrap();
        for r in &records {
            assert!(
                !r.instruction.tokens.contains(&crate::model::features::TOKEN_UNK),
                "UNK in '{}'",
                r.instruction.text
            );
            let (_, unk) = vocab::tokenize(&r.instruction.text);
            assert_eq!(unk, 0);
        }
    }

    #[test]
    fn blob_header_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_cfg();
        cfg.store_rasters = true;
        let records = generate_dataset(4, &cfg, 5, dir.path()).unwrap();
        let blob = std::fs::read(dir.path().join("rasters.avpk")).unwrap();
        assert_eq!(&blob[0..4], b"AVPK");
        assert_eq!(u32::from_le_bytes(blob[4..8].try_into().unwrap()), AVPK_VERSION);
        assert_eq!(u64::from_le_bytes(blob[8..16].try_into().unwrap()), 4);
        let (h, w) = CameraState::default_head().raster_dims;
        let per = (h * w * (crate::world::SEMANTIC_CHANNELS + 1 + 3) * 4) as u64;
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.blob_offset, Some(16 + per * i as u64));
        }
        assert_eq!(blob.len() as u64, 16 + per * 4);
        // without rasters the header still lands on disk, offsets absent
        let dir2 = tempfile::tempdir().unwrap();
        cfg.store_rasters = false;
        let records = generate_dataset(2, &cfg, 5, dir2.path()).unwrap();
        let blob = std::fs::read(dir2.path().join("rasters.avpk")).unwrap();
        assert_eq!(blob.len(), 16);
        assert!(records.iter().all(|r| r.blob_offset.is_none()));
    }

    #[test]
    fn target_camera_consistent_with_delta() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_dataset(10, &test_cfg(), 13, dir.path()).unwrap();
        for r in &records {
            assert!((r.initial_camera.0 + r.total_delta.0 - r.target_camera.0).abs() < 1e-9);
            assert!((r.initial_camera.1 + r.total_delta.1 - r.target_camera.1).abs() < 1e-9);
        }
    }
}
