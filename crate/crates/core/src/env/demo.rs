//! Trajectory logging and demonstration export.
//!
//! Demonstrations are stored as the action sequence plus the episode seed;
//! observations are reproduced by re-simulating the prefix, which keeps the
//! files small and bit-stable. The blob reuses the dataset container format
//! (`AVPK` header) with one f32 action row — 2 head + `D_BODY` body values —
//! per step at the offsets recorded in the manifest.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_line;
use crate::config::{ArmConfig, EnvConfig};
use crate::viewgen::{AVPK_MAGIC, AVPK_VERSION};
use crate::Result;

use super::oracle::Oracle;
use super::{check_success, reset, step, Status, TaskFamily, TaskSpec, Visibility, D_BODY};

/// One logged control step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub head: [f64; 2],
    pub body: Vec<f64>,
    /// Camera pose after the step, degrees.
    pub camera: (f64, f64),
    pub gripper: f64,
    pub attached: bool,
    pub verdict: Status,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Demonstration {
    pub family: TaskFamily,
    pub visibility: Visibility,
    pub seed: u64,
    pub task: TaskSpec,
    pub steps: Vec<StepRecord>,
    pub verdict: Status,
    /// Byte offset of the action rows in the blob.
    pub blob_offset: u64,
}

/// Rolls the scripted oracle on one episode and logs every step. `None`
/// when the reset or the oracle fails (counted by the caller).
pub fn collect_demo(
    family: TaskFamily,
    visibility: Visibility,
    env: &EnvConfig,
    arm: &ArmConfig,
    seed: u64,
) -> Option<Demonstration> {
    let (task, mut state) = reset(family, visibility, env, seed).ok()?;
    let mut oracle = Oracle::new(&task, &state);
    let mut steps = Vec::new();
    while !state.terminated && check_success(&state, &task) == Status::Pending {
        let (head, body) = oracle.act(&state, &task, env, arm);
        if oracle.failed {
            return None;
        }
        step(&mut state, &task, head, &body, env, arm).ok()?;
        steps.push(StepRecord {
            step: state.step_count,
            head,
            body: body.to_vec(),
            camera: (state.camera.pitch, state.camera.yaw),
            gripper: state.proprio.gripper,
            attached: state.proprio.attached_object.is_some(),
            verdict: check_success(&state, &task),
        });
    }
    let verdict = check_success(&state, &task);
    if verdict != Status::Success {
        return None;
    }
    Some(Demonstration {
        family,
        visibility,
        seed,
        task,
        steps,
        verdict,
        blob_offset: 0,
    })
}

/// Reads `demos.jsonl` back from a demonstration directory.
pub fn load_demos(dir: &Path) -> Result<Vec<Demonstration>> {
    let text = std::fs::read_to_string(dir.join("demos.jsonl"))?;
    text.lines()
        .map(|line| serde_json::from_str(line).map_err(|e| crate::Error::Config(e.to_string())))
        .collect()
}

/// Collects successful oracle demos round-robin over `families` until
/// `n_demos` are gathered or the seed budget runs out; writes
/// `demos.jsonl` + `actions.avpk` under `out_dir`. Returns the demos and
/// the number of discarded episodes.
pub fn generate_demos(
    n_demos: usize,
    families: &[TaskFamily],
    visibility: Visibility,
    env: &EnvConfig,
    arm: &ArmConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(Vec<Demonstration>, usize)> {
    std::fs::create_dir_all(out_dir)?;
    let mut demos = Vec::new();
    let mut discarded = 0;
    let mut attempt = 0u64;
    while demos.len() < n_demos && attempt < (n_demos as u64) * 40 + 200 {
        let family = families[(attempt as usize) % families.len()];
        match collect_demo(family, visibility, env, arm, seed.wrapping_add(attempt * 7919)) {
            Some(d) => demos.push(d),
            None => discarded += 1,
        }
        attempt += 1;
    }

    let mut blob = std::fs::File::create(out_dir.join("actions.avpk"))?;
    blob.write_all(&AVPK_MAGIC)?;
    blob.write_all(&AVPK_VERSION.to_le_bytes())?;
    blob.write_all(&(demos.len() as u64).to_le_bytes())?;
    let mut offset = (AVPK_MAGIC.len() + 4 + 8) as u64;
    for d in demos.iter_mut() {
        d.blob_offset = offset;
        for s in &d.steps {
            for v in s.head.iter().chain(s.body.iter()) {
                blob.write_all(&(*v as f32).to_le_bytes())?;
            }
            offset += ((2 + D_BODY) * 4) as u64;
        }
    }
    blob.flush()?;

    let mut manifest = std::fs::File::create(out_dir.join("demos.jsonl"))?;
    for d in &demos {
        manifest.write_all(to_canonical_line(d)?.as_bytes())?;
    }
    manifest.flush()?;
    Ok((demos, discarded))
}

/// Replays a demo's actions from its seed; the trajectory must reproduce
/// the logged verdict (determinism contract).
pub fn replay(demo: &Demonstration, env: &EnvConfig, arm: &ArmConfig) -> Result<Status> {
    let (task, mut state) = reset(demo.family, demo.visibility, env, demo.seed)?;
    debug_assert_eq!(task.instruction, demo.task.instruction);
    for s in &demo.steps {
        if state.terminated {
            break;
        }
        step(&mut state, &task, s.head, &s.body, env, arm)?;
    }
    Ok(check_success(&state, &task))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demos_replay_to_the_logged_verdict() {
        let env = EnvConfig::default();
        let arm = ArmConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (demos, _discarded) = generate_demos(
            3,
            &[TaskFamily::Pick],
            Visibility::Unoccluded,
            &env,
            &arm,
            77,
            dir.path(),
        )
        .unwrap();
        assert_eq!(demos.len(), 3);
        for d in &demos {
            assert_eq!(replay(d, &env, &arm).unwrap(), Status::Success);
        }
    }

    #[test]
    fn demo_blob_uses_the_shared_header() {
        let env = EnvConfig::default();
        let arm = ArmConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (demos, _) = generate_demos(
            2,
            &[TaskFamily::Pick],
            Visibility::Unoccluded,
            &env,
            &arm,
            78,
            dir.path(),
        )
        .unwrap();
        let blob = std::fs::read(dir.path().join("actions.avpk")).unwrap();
        assert_eq!(&blob[0..4], b"AVPK");
        assert_eq!(u64::from_le_bytes(blob[8..16].try_into().unwrap()), demos.len() as u64);
        let rows: usize = demos.iter().map(|d| d.steps.len()).sum();
        assert_eq!(blob.len(), 16 + rows * (2 + D_BODY) * 4);
    }
}
