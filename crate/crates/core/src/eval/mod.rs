//! Evaluation protocols: closed-loop perception, manipulation rollouts
//! under the four camera modes, the ablation grid, and the generalization
//! sweep.
//!
//! Two invariants are load-bearing here and tested below. First, protocol
//! separation: perception evaluation never moves the arm, and the fixed
//! camera modes never change the camera state. Second, determinism: the
//! same model, config, and seed produce a byte-identical report, so runs
//! can be compared across machines by hashing the artifact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_json;
use crate::config::{SceneConfig, StackConfig};
use crate::env::demo::Demonstration;
use crate::env::{self, EpisodeState, TaskFamily, TaskSpec, Visibility};
use crate::model::diffusion::{self, ActionCaps};
use crate::model::state::ModelState;
use crate::train::{self, TrainRun};
use crate::viewgen::{self, DatasetRecord, Modality, Split};
use crate::world::render::{render, Observation};
use crate::world::sample::{derive_rng, sample_scene};
use crate::world::{apply_head_delta, CameraState, ProprioState};
use crate::{Error, Result};

/// Seed spacing between episode slots, so retry seeds inside one slot
/// cannot collide with a neighbouring slot.
const EPISODE_SEED_STRIDE: u64 = 7919;
/// Reset retries per episode slot before the slot is abandoned.
const MAX_RESET_RETRIES: u64 = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub successes: usize,
    pub episodes: usize,
}

impl Condition {
    pub fn rate(&self) -> f64 {
        if self.episodes == 0 {
            f64::NAN
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

/// One evaluation run. Serialized canonically, so a byte comparison of two
/// reports is a meaningful determinism check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    /// Fingerprint of the resolved config the run used.
    pub config_fingerprint: String,
    pub seed: u64,
    pub conditions: Vec<Condition>,
}

impl EvalReport {
    pub fn rate(&self, name: &str) -> Option<f64> {
        self.conditions.iter().find(|c| c.name == name).map(Condition::rate)
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    /// Human-readable summary, one line per condition.
    pub fn summary(&self) -> String {
        let mut out = format!("protocol: {} (seed {})\n", self.protocol, self.seed);
        for c in &self.conditions {
            out.push_str(&format!(
                "  {:<40} {:>3}/{:<3} = {:.1}%\n",
                c.name,
                c.successes,
                c.episodes,
                100.0 * c.rate()
            ));
        }
        out
    }

    /// Long-format tab-separated table for downstream plotting.
    pub fn table(&self) -> String {
        let mut out = String::from("protocol\tcondition\tsuccesses\tepisodes\trate\n");
        for c in &self.conditions {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\n",
                self.protocol, c.name, c.successes, c.episodes, c.rate()
            ));
        }
        out
    }
}

fn visibility_name(v: Visibility) -> &'static str {
    match v {
        Visibility::Unoccluded => "unoccluded",
        Visibility::OccludedTruncation => "occluded_truncation",
        Visibility::OccludedPhysical => "occluded_physical",
        Visibility::OutOfView => "out_of_view",
    }
}

fn body_caps(cfg: &StackConfig, d_body: usize) -> Vec<f64> {
    let mut caps = vec![cfg.arm.joint_delta_cap; d_body];
    if let Some(g) = caps.last_mut() {
        *g = cfg.arm.gripper_delta_cap;
    }
    caps
}

/// Multiplicative noise on the semantic raster (and the wrist raster when
/// present), `v *= 1 + jitter * u` with `u ~ U(-1, 1)`. `jitter == 0`
/// leaves the observation untouched.
pub fn perturb_raster(obs: &mut Observation, jitter: f64, seed: u64) {
    if jitter == 0.0 {
        return;
    }
    let mut rng = derive_rng(seed, 0x6a697474);
    for v in obs.semantic_raster.iter_mut() {
        *v *= (1.0 + jitter * rng.gen_range(-1.0..=1.0)) as f32;
    }
    if let Some(wrist) = obs.wrist_observation.as_deref_mut() {
        for v in wrist.semantic_raster.iter_mut() {
            *v *= (1.0 + jitter * rng.gen_range(-1.0..=1.0)) as f32;
        }
    }
}

/// Closed-loop perception episode on an explicit scene: render at the
/// current head pose, sample a chunk, apply only its camera rows, and stop
/// after `max_chunks` or once a chunk requests less than `min_chunk_motion`
/// degrees of total movement. Success requires the accumulated actual
/// camera motion to land within the tolerance of the record's ground-truth
/// delta on both axes. The arm never moves.
pub fn perception_episode(
    state: &ModelState,
    scene: &crate::world::Scene,
    record: &DatasetRecord,
    cfg: &StackConfig,
    jitter: f64,
) -> Result<bool> {
    let init = CameraState::default_head()
        .with_angles(record.initial_camera.0, record.initial_camera.1);
    let mut cam = init.clone();
    let caps = ActionCaps {
        head_step: cfg.viewgen.per_step_cap,
        body: body_caps(cfg, state.config.d_body),
    };
    let mut proprio = ProprioState::home(cfg.arm.link_lengths.len());
    for chunk_i in 0..cfg.eval.max_chunks {
        let mut obs = render(scene, &cam);
        perturb_raster(&mut obs, jitter, record.scene_seed ^ (chunk_i as u64));
        proprio.head = (cam.pitch, cam.yaw);
        let chunk = diffusion::sample_chunk(
            state,
            &obs,
            &record.instruction.tokens,
            &proprio,
            &caps,
            record.scene_seed.wrapping_add(0x6576 * chunk_i as u64),
            state.config.adapter_enabled,
            state.config.spatial_injection,
        )?;
        let mut motion = 0.0;
        for row in chunk.rows() {
            motion += row[0].abs() + row[1].abs();
            let (next, _) = apply_head_delta(&cam, (row[0], row[1]));
            cam = next;
        }
        if motion < cfg.eval.min_chunk_motion {
            break;
        }
    }
    let accum = (cam.pitch - init.pitch, cam.yaw - init.yaw);
    let tol = cfg.eval.tolerance_deg;
    Ok((accum.0 - record.total_delta.0).abs() <= tol
        && (accum.1 - record.total_delta.1).abs() <= tol)
}

/// Perception success rates per evaluation split. Scenes are re-derived
/// from the recorded scene seeds under the default scene distribution.
pub fn eval_perception(
    state: &ModelState,
    records: &[DatasetRecord],
    cfg: &StackConfig,
    jitter: f64,
) -> Result<EvalReport> {
    let mut conditions = Vec::new();
    for (split, name) in [
        (Split::Val, "val"),
        (Split::Test1, "test1"),
        (Split::Test2, "test2"),
    ] {
        let mut successes = 0;
        let mut episodes = 0;
        for record in records.iter().filter(|r| r.split == split) {
            let scene = sample_scene(&SceneConfig::default(), record.scene_seed)?;
            if perception_episode(state, &scene, record, cfg, jitter)? {
                successes += 1;
            }
            episodes += 1;
        }
        conditions.push(Condition { name: name.into(), successes, episodes });
    }
    Ok(EvalReport {
        protocol: "perception".into(),
        config_fingerprint: cfg.fingerprint(),
        seed: 0,
        conditions,
    })
}

/// Camera regimes for manipulation evaluation. `Fixed*` zeroes every head
/// action before it reaches the environment; `*Wrist` feeds the policy the
/// wrist view alongside the head view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CameraMode {
    Fixed,
    FixedWrist,
    Active,
    ActiveWrist,
}

impl CameraMode {
    pub const ALL: [CameraMode; 4] = [
        CameraMode::Fixed,
        CameraMode::FixedWrist,
        CameraMode::Active,
        CameraMode::ActiveWrist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CameraMode::Fixed => "fixed",
            CameraMode::FixedWrist => "fixed_wrist",
            CameraMode::Active => "active",
            CameraMode::ActiveWrist => "active_wrist",
        }
    }

    pub fn active(self) -> bool {
        matches!(self, CameraMode::Active | CameraMode::ActiveWrist)
    }

    pub fn wrist(self) -> bool {
        matches!(self, CameraMode::FixedWrist | CameraMode::ActiveWrist)
    }
}

/// One manipulation rollout: replan every chunk, execute row by row until
/// success, termination, or the horizon. Model faults and environment
/// faults are demoted to a plain failure so a single bad episode cannot
/// abort a sweep.
pub fn manipulation_episode(
    state: &ModelState,
    task: &TaskSpec,
    ep: &mut EpisodeState,
    mode: CameraMode,
    cfg: &StackConfig,
    seed: u64,
) -> bool {
    let (tokens, _) = viewgen::vocab::tokenize(&task.instruction);
    let caps = ActionCaps {
        head_step: cfg.env.head_step_cap,
        body: body_caps(cfg, state.config.d_body),
    };
    let mut chunk_i: u64 = 0;
    while !ep.terminated && !ep.succeeded && ep.step_count < task.horizon {
        let obs = if mode.wrist() {
            ep.observe_with_wrist(&cfg.arm)
        } else {
            ep.observe()
        };
        let chunk = match diffusion::sample_chunk(
            state,
            &obs,
            &tokens,
            &ep.proprio,
            &caps,
            seed.wrapping_add(0x636b * chunk_i),
            state.config.adapter_enabled,
            state.config.spatial_injection,
        ) {
            Ok(c) => c,
            Err(_) => return false,
        };
        for row in chunk.rows() {
            let head = if mode.active() { [row[0], row[1]] } else { [0.0, 0.0] };
            let body: Vec<f64> = row.iter().skip(2).copied().collect();
            if env::step(ep, task, head, &body, &cfg.env, &cfg.arm).is_err() {
                return false;
            }
            if ep.terminated || ep.succeeded || ep.step_count >= task.horizon {
                break;
            }
        }
        chunk_i += 1;
    }
    ep.succeeded
}

/// Manipulation success rates over a task grid crossed with camera modes.
/// The episode seed schedule depends only on the task, the episode index,
/// and the base seed — never on the mode or the model — so every column of
/// the report is measured on the same set of episodes.
pub fn eval_manipulation(
    state: &ModelState,
    tasks: &[(TaskFamily, Visibility)],
    modes: &[CameraMode],
    cfg: &StackConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut conditions = Vec::new();
    for (ti, &(family, vis)) in tasks.iter().enumerate() {
        // resolve the seed schedule once per task; it is shared by every mode
        let mut episode_seeds = Vec::new();
        for e in 0..cfg.eval.n_episodes {
            let base = seed
                .wrapping_add(1_000_003 * ti as u64)
                .wrapping_add(EPISODE_SEED_STRIDE * e as u64);
            for retry in 0..MAX_RESET_RETRIES {
                let s = base.wrapping_add(retry.wrapping_mul(0x9e37));
                if env::reset(family, vis, &cfg.env, s).is_ok() {
                    episode_seeds.push(s);
                    break;
                }
            }
        }
        for &mode in modes {
            let mut successes = 0;
            for &s in &episode_seeds {
                let (task, mut ep) = env::reset(family, vis, &cfg.env, s)?;
                if manipulation_episode(state, &task, &mut ep, mode, cfg, s) {
                    successes += 1;
                }
            }
            conditions.push(Condition {
                name: format!("{}/{}/{}", family.name(), visibility_name(vis), mode.name()),
                successes,
                episodes: episode_seeds.len(),
            });
        }
    }
    Ok(EvalReport {
        protocol: "manipulation".into(),
        config_fingerprint: cfg.fingerprint(),
        seed,
        conditions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    NoStage1,
    NoStage2,
    UnifiedHead,
    FullFinetuneNoAdapter,
    NoSpatialInjection,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoStage1,
        Ablation::NoStage2,
        Ablation::UnifiedHead,
        Ablation::FullFinetuneNoAdapter,
        Ablation::NoSpatialInjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoStage1 => "no_stage1",
            Ablation::NoStage2 => "no_stage2",
            Ablation::UnifiedHead => "unified_head",
            Ablation::FullFinetuneNoAdapter => "full_finetune_no_adapter",
            Ablation::NoSpatialInjection => "no_spatial_injection",
        }
    }
}

/// The ablated config differs from `base` in exactly the switched fields,
/// so fingerprints pin down which variant produced an artifact.
pub fn ablation_config(base: &StackConfig, ablation: Ablation) -> StackConfig {
    let mut cfg = base.clone();
    match ablation {
        Ablation::NoStage1 => cfg.train.allow_no_stage1 = true,
        Ablation::NoStage2 => cfg.train.skip_stage2 = true,
        Ablation::UnifiedHead => cfg.model.unified_head = true,
        Ablation::FullFinetuneNoAdapter => {
            cfg.model.adapter_enabled = false;
            cfg.train.full_finetune = true;
        }
        Ablation::NoSpatialInjection => cfg.model.spatial_injection = false,
    }
    cfg
}

/// Full training pipeline under one config: Stage 1 (unless the config
/// allows skipping it), then Stage 2 with a fresh optimizer (unless
/// `skip_stage2`). Returns the final model.
pub fn train_pipeline(
    cfg: &StackConfig,
    records: &[DatasetRecord],
    demos: &[Demonstration],
) -> Result<ModelState> {
    let mut run = TrainRun::new(ModelState::init(&cfg.model, cfg.train.seed));
    let stage1_done = !cfg.train.allow_no_stage1;
    if stage1_done {
        train::train_stage1(&mut run, records, cfg)?;
        run = TrainRun::new(run.model);
    }
    if !cfg.train.skip_stage2 {
        train::train_stage2(&mut run, records, demos, cfg, stage1_done)?;
    }
    Ok(run.model)
}

/// Trains one ablated variant and evaluates it on the same episode seeds a
/// baseline run with the same `seed` would use.
pub fn run_ablation(
    base: &StackConfig,
    ablation: Ablation,
    records: &[DatasetRecord],
    demos: &[Demonstration],
    tasks: &[(TaskFamily, Visibility)],
    modes: &[CameraMode],
    seed: u64,
) -> Result<(StackConfig, EvalReport)> {
    let cfg = ablation_config(base, ablation);
    let model = train_pipeline(&cfg, records, demos)?;
    let mut report = eval_manipulation(&model, tasks, modes, &cfg, seed)?;
    report.protocol = format!("ablation/{}", ablation.name());
    Ok((cfg, report))
}

/// Scene distribution with the held-out catalog swapped in.
pub fn unseen_object_scene_config(base: &SceneConfig) -> SceneConfig {
    let mut cfg = base.clone();
    std::mem::swap(&mut cfg.catalog, &mut cfg.reserved_categories);
    cfg
}

/// Scene distribution with the placement band shifted off-center and
/// densified, exercising layouts outside the training distribution.
pub fn shifted_layout_scene_config(base: &SceneConfig) -> SceneConfig {
    let mut cfg = base.clone();
    cfg.placement_y = (0.0, base.placement_y.1);
    cfg.object_count = (base.object_count.1.max(2) - 1, base.object_count.1);
    cfg
}

fn sweep_condition(
    state: &ModelState,
    name: &str,
    scene_cfg: &SceneConfig,
    n: usize,
    cfg: &StackConfig,
    seed: u64,
) -> Result<Condition> {
    let mut successes = 0;
    let mut episodes = 0;
    for i in 0..n {
        // ephemeral records: the sweep scene distributions never touch disk
        let (record, scene) = match viewgen::generate_record(
            i,
            Split::Val,
            Modality::VisualCentering,
            scene_cfg,
            &cfg.viewgen,
            seed,
        ) {
            Ok(r) => r,
            Err(Error::Rejection(_)) | Err(Error::InfeasiblePerturbation { .. }) => continue,
            Err(e) => return Err(e),
        };
        if perception_episode(state, &scene, &record, cfg, 0.0)? {
            successes += 1;
        }
        episodes += 1;
    }
    Ok(Condition { name: name.into(), successes, episodes })
}

/// Generalization sweep: observation jitter on the held-out records, plus
/// perception on scenes drawn from the unseen-object and shifted-layout
/// distributions. With `eval.jitter == 0` the jitter condition reproduces
/// the unperturbed validation numbers exactly.
pub fn generalization_sweep(
    state: &ModelState,
    records: &[DatasetRecord],
    cfg: &StackConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut conditions = Vec::new();

    let mut successes = 0;
    let mut episodes = 0;
    for record in records.iter().filter(|r| r.split == Split::Val) {
        let scene = sample_scene(&SceneConfig::default(), record.scene_seed)?;
        if perception_episode(state, &scene, record, cfg, cfg.eval.jitter)? {
            successes += 1;
        }
        episodes += 1;
    }
    conditions.push(Condition {
        name: "observation_jitter".into(),
        successes,
        episodes,
    });

    let n = cfg.eval.n_episodes;
    conditions.push(sweep_condition(
        state,
        "unseen_objects",
        &unseen_object_scene_config(&cfg.scene),
        n,
        cfg,
        seed,
    )?);
    conditions.push(sweep_condition(
        state,
        "unseen_scene_layouts",
        &shifted_layout_scene_config(&cfg.scene),
        n,
        cfg,
        seed.wrapping_add(0x6c61796f),
    )?);

    Ok(EvalReport {
        protocol: "generalization".into(),
        config_fingerprint: cfg.fingerprint(),
        seed,
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small_model() -> ModelState {
        let mc = ModelConfig {
            width: 16,
            base_blocks: 1,
            dit_blocks: 1,
            lora_rank: 2,
            t_diff: 10,
            sample_steps: 2,
            mlp_mult: 2,
            head_hidden: 8,
            tau_features: 8,
            ..ModelConfig::default()
        };
        ModelState::init(&mc, 7)
    }

    fn small_stack() -> StackConfig {
        let mut cfg = StackConfig::default();
        cfg.eval.max_chunks = 1;
        cfg.eval.n_episodes = 2;
        cfg.env.horizon_atomic = 12;
        cfg.env.horizon_short = 12;
        cfg.env.horizon_long = 12;
        cfg
    }

    fn small_records(n: usize) -> Vec<DatasetRecord> {
        let dir = tempfile::tempdir().unwrap();
        let mut records =
            viewgen::generate_dataset(n, &crate::config::ViewgenConfig::default(), 900, dir.path())
                .unwrap();
        for r in &mut records {
            r.split = Split::Val;
        }
        records
    }

    #[test]
    fn report_is_deterministic() {
        let state = small_model();
        let cfg = small_stack();
        let records = small_records(2);
        let a = eval_perception(&state, &records, &cfg, 0.0).unwrap();
        let b = eval_perception(&state, &records, &cfg, 0.0).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.summary().contains("perception"));
        assert!(a.table().starts_with("protocol\t"));
    }

    #[test]
    fn tolerance_bounds_success_rate() {
        let state = small_model();
        let records = small_records(2);
        let mut cfg = small_stack();
        cfg.eval.tolerance_deg = 1e9;
        let vacuous = eval_perception(&state, &records, &cfg, 0.0).unwrap();
        assert_eq!(vacuous.rate("val"), Some(1.0));
        cfg.eval.tolerance_deg = 1e-12;
        let strict = eval_perception(&state, &records, &cfg, 0.0).unwrap();
        assert_eq!(strict.rate("val"), Some(0.0));
    }

    #[test]
    fn jitter_zero_is_identity() {
        let records = small_records(1);
        let scene = sample_scene(&SceneConfig::default(), records[0].scene_seed).unwrap();
        let cam = CameraState::default_head();
        let obs = render(&scene, &cam);
        let mut same = render(&scene, &cam);
        perturb_raster(&mut same, 0.0, 5);
        assert_eq!(obs.semantic_raster, same.semantic_raster);
        let mut jittered = render(&scene, &cam);
        perturb_raster(&mut jittered, 0.2, 5);
        assert_ne!(obs.semantic_raster, jittered.semantic_raster);
    }

    #[test]
    fn fixed_mode_never_moves_camera() {
        let state = small_model();
        let cfg = small_stack();
        let (task, mut ep) = env::reset(TaskFamily::Pick, Visibility::Unoccluded, &cfg.env, 41)
            .unwrap();
        let before = (ep.camera.pitch, ep.camera.yaw);
        manipulation_episode(&state, &task, &mut ep, CameraMode::Fixed, &cfg, 41);
        assert_eq!((ep.camera.pitch, ep.camera.yaw), before);
        assert!(ep.step_count > 0, "episode should have advanced");
    }

    #[test]
    fn manipulation_report_shares_seeds_across_modes() {
        let state = small_model();
        let cfg = small_stack();
        let tasks = [(TaskFamily::Pick, Visibility::Unoccluded)];
        let modes = [CameraMode::Fixed, CameraMode::Active];
        let report = eval_manipulation(&state, &tasks, &modes, &cfg, 11).unwrap();
        assert_eq!(report.conditions.len(), 2);
        assert_eq!(
            report.conditions[0].episodes,
            report.conditions[1].episodes
        );
        assert_eq!(report.conditions[0].name, "pick/unoccluded/fixed");
    }

    #[test]
    fn ablation_configs_flip_exactly_the_advertised_fields() {
        let base = StackConfig::default();
        let base_fp = base.fingerprint();
        for ablation in Ablation::ALL {
            let cfg = ablation_config(&base, ablation);
            assert_ne!(cfg.fingerprint(), base_fp, "{}", ablation.name());
            let a = serde_json::to_value(&base).unwrap();
            let b = serde_json::to_value(&cfg).unwrap();
            let mut diffs = Vec::new();
            collect_diffs("", &a, &b, &mut diffs);
            let expected: Vec<String> = match ablation {
                Ablation::NoStage1 => vec!["/train/allow_no_stage1"],
                Ablation::NoStage2 => vec!["/train/skip_stage2"],
                Ablation::UnifiedHead => vec!["/model/unified_head"],
                Ablation::FullFinetuneNoAdapter => {
                    vec!["/model/adapter_enabled", "/train/full_finetune"]
                }
                Ablation::NoSpatialInjection => vec!["/model/spatial_injection"],
            }
            .into_iter()
            .map(String::from)
            .collect();
            assert_eq!(diffs, expected, "{}", ablation.name());
        }
    }

    fn collect_diffs(
        path: &str,
        a: &serde_json::Value,
        b: &serde_json::Value,
        out: &mut Vec<String>,
    ) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                for (k, va) in ma {
                    collect_diffs(&format!("{path}/{k}"), va, &mb[k], out);
                }
            }
            _ => {
                if a != b {
                    out.push(path.to_string());
                }
            }
        }
    }

    #[test]
    fn sweep_jitter_zero_matches_plain_validation() {
        let state = small_model();
        let records = small_records(2);
        let mut cfg = small_stack();
        cfg.eval.jitter = 0.0;
        cfg.eval.n_episodes = 1;
        cfg.eval.tolerance_deg = 1e9;
        let sweep = generalization_sweep(&state, &records, &cfg, 3).unwrap();
        let plain = eval_perception(&state, &records, &cfg, 0.0).unwrap();
        assert_eq!(sweep.rate("observation_jitter"), plain.rate("val"));
        assert_eq!(sweep.conditions.len(), 3);
    }

    #[test]
    fn unseen_object_config_swaps_catalogs() {
        let base = SceneConfig::default();
        let swapped = unseen_object_scene_config(&base);
        assert_eq!(swapped.catalog, base.reserved_categories);
        assert_eq!(swapped.reserved_categories, base.catalog);
        let scene = sample_scene(&swapped, 1234).unwrap();
        for obj in &scene.objects {
            assert!(base.reserved_categories.contains(&obj.category), "{:?}", obj.category);
        }
    }
}
