//! Configuration schema for the whole stack, with published defaults,
//! TOML loading, dotted-key overrides, and config fingerprints.

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::world::geometry::Vec3;
use crate::world::{CameraState, Category, Color};

/// Desk-scale arm: yaw base joint plus three pitch joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmConfig {
    pub base: Vec3,
    /// [shoulder riser, upper link, forearm, wrist] in meters.
    pub link_lengths: [f64; 4],
    pub joint_limits: [(f64, f64); 4],
    /// Per-step joint delta cap, radians.
    pub joint_delta_cap: f64,
    /// Per-step gripper delta cap.
    pub gripper_delta_cap: f64,
    pub wrist_camera_offset: Vec3,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            base: [0.0, 0.0, 0.72],
            link_lengths: [0.06, 0.40, 0.35, 0.15],
            joint_limits: [(-2.6, 2.6), (-1.6, 1.6), (-2.6, 2.6), (-2.6, 2.6)],
            joint_delta_cap: 0.06,
            gripper_delta_cap: 0.25,
            wrist_camera_offset: [0.0, 0.0, 0.03],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub pitch_limits: (f64, f64),
    pub yaw_limits: (f64, f64),
    pub fov_h: f64,
    pub raster_dims: (usize, usize),
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            pitch_limits: (-60.0, 60.0),
            yaw_limits: (-90.0, 90.0),
            fov_h: 90.0,
            raster_dims: (48, 48),
        }
    }
}

impl CameraConfig {
    pub fn zero_pose(&self) -> CameraState {
        CameraState {
            pitch: 0.0,
            yaw: 0.0,
            limits: (
                self.pitch_limits.0,
                self.pitch_limits.1,
                self.yaw_limits.0,
                self.yaw_limits.1,
            ),
            fov_h: self.fov_h,
            raster_dims: self.raster_dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Categories available to the sampler.
    pub catalog: Vec<Category>,
    /// Categories reserved for the unseen-object generalization sweep.
    pub reserved_categories: Vec<Category>,
    pub colors: Vec<Color>,
    pub object_count: (usize, usize),
    pub container_count: (usize, usize),
    /// Bounding-sphere radius range in meters.
    pub size_range: (f64, f64),
    pub table_center: Vec3,
    pub table_half_extent: [f64; 2],
    pub table_thickness: f64,
    /// x/y band on the table where free objects are placed.
    pub placement_x: (f64, f64),
    pub placement_y: (f64, f64),
    pub head_pivot: Vec3,
    /// Probability that a sampled container starts open.
    pub container_open_prob: f64,
    pub interior_objects_per_container: (usize, usize),
    pub max_placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let reserved = vec![Category::Vase, Category::Lemon];
        let catalog = Category::ALL
            .iter()
            .copied()
            .filter(|c| !reserved.contains(c))
            .collect();
        SceneConfig {
            catalog,
            reserved_categories: reserved,
            colors: Color::ALL.to_vec(),
            object_count: (3, 7),
            container_count: (0, 2),
            size_range: (0.025, 0.06),
            table_center: [0.675, 0.0, 0.70],
            table_half_extent: [0.325, 0.5],
            table_thickness: 0.04,
            placement_x: (0.42, 0.80),
            placement_y: (-0.35, 0.35),
            head_pivot: [0.0, 0.0, 1.1],
            container_open_prob: 0.25,
            interior_objects_per_container: (1, 2),
            max_placement_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewgenConfig {
    /// Action-chunk horizon.
    pub k: usize,
    /// Per-axis per-step camera delta cap, degrees.
    pub per_step_cap: f64,
    /// (visual_centering, spatial_directive, common_sense) mixture.
    pub modality_mix: [f64; 3],
    /// Uniform perturbation half-range for centering records, degrees.
    pub centering_perturb: (f64, f64),
    /// Angular margin beyond the frustum edge for out-of-frame initial
    /// views, degrees.
    pub out_of_frame_margin: (f64, f64),
    pub max_perturb_attempts: usize,
    /// Fraction of train+val records carrying an augmentation.
    pub augmentation_prob: f64,
    pub val_fraction: f64,
    /// Fractions of records routed to the held-out scene splits.
    pub test1_fraction: f64,
    pub test2_fraction: f64,
    /// Whether generated records carry raster blobs.
    pub store_rasters: bool,
}

impl Default for ViewgenConfig {
    fn default() -> Self {
        ViewgenConfig {
            k: 8,
            per_step_cap: 6.0,
            modality_mix: [0.4, 0.3, 0.3],
            centering_perturb: (12.0, 12.0),
            out_of_frame_margin: (3.0, 20.0),
            max_perturb_attempts: 500,
            augmentation_prob: 0.15,
            val_fraction: 0.1,
            test1_fraction: 0.1,
            test2_fraction: 0.1,
            store_rasters: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token width of both the base encoder and the DiT trunk.
    pub width: usize,
    pub base_blocks: usize,
    pub dit_blocks: usize,
    /// Patch edge length in pixels for the visual streams.
    pub patch: usize,
    pub max_instr_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Diffusion variance levels.
    pub t_diff: usize,
    /// Deterministic sampling steps.
    pub sample_steps: usize,
    pub k: usize,
    pub d_body: usize,
    /// Hidden multiplier of the transformer MLPs.
    pub mlp_mult: usize,
    /// Hidden width of the decoder heads.
    pub head_hidden: usize,
    /// Raster channels consumed by the visual streams.
    pub in_channels: usize,
    /// Sinusoidal feature width of the diffusion-step embedding.
    pub tau_features: usize,
    /// Grid used by the pretraining target-cell classifier (cells per side).
    pub pretrain_grid: usize,
    /// Raster resolution (height, width) the encoder expects; must match the
    /// camera raster it is fed.
    pub raster: (usize, usize),
    /// Token vocabulary capacity of the instruction embedding.
    pub vocab: usize,
    /// Stage-1 objective: noise prediction (false) or direct chunk
    /// regression (true).
    pub direct_regression: bool,
    /// Ablation: one shared decoder emits the full k x (2 + D_body) chunk
    /// instead of the decoupled camera/body heads.
    pub unified_head: bool,
    /// Ablation: bypass the LoRA adapter entirely.
    pub adapter_enabled: bool,
    /// Ablation: skip spatial-knowledge fusion (β pinned at zero and the
    /// spatial/fusion groups left untrained).
    pub spatial_injection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            base_blocks: 2,
            dit_blocks: 2,
            patch: 8,
            max_instr_len: 12,
            lora_rank: 4,
            lora_alpha: 8.0,
            t_diff: 50,
            sample_steps: 16,
            k: 8,
            d_body: 5,
            mlp_mult: 4,
            head_hidden: 32,
            in_channels: crate::world::SEMANTIC_CHANNELS,
            tau_features: 16,
            pretrain_grid: 3,
            raster: (48, 48),
            vocab: 128,
            direct_regression: false,
            unified_head: false,
            adapter_enabled: true,
            spatial_injection: true,
        }
    }
}

impl ModelConfig {
    /// Tiny instantiation (< 1k parameters) used by the gradient-check
    /// suite.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 4,
            base_blocks: 1,
            dit_blocks: 1,
            patch: 2,
            max_instr_len: 3,
            lora_rank: 1,
            lora_alpha: 2.0,
            t_diff: 10,
            sample_steps: 4,
            k: 2,
            d_body: 2,
            mlp_mult: 2,
            head_hidden: 3,
            in_channels: 2,
            tau_features: 4,
            pretrain_grid: 2,
            raster: (4, 4),
            vocab: 8,
            direct_regression: false,
            unified_head: false,
            adapter_enabled: true,
            spatial_injection: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub lambda_head: f64,
    pub lambda_other: f64,
    /// Perception : manipulation record mixture for Stage 2.
    pub mixture_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stage 2: train only the two MLP decoders, keeping the DiT trunk
    /// frozen.
    pub stage2_decoders_only: bool,
    /// Stage 2: keep the spatial group frozen.
    pub freeze_spatial_stage2: bool,
    /// Allow Stage 2 without a Stage-1 checkpoint (the "w/o Stage 1"
    /// ablation).
    pub allow_no_stage1: bool,
    /// Stop the pipeline after Stage 1 (the "w/o Stage 2" ablation).
    pub skip_stage2: bool,
    /// Ablation: Stage 2 also trains the base group (paired with
    /// `adapter_enabled = false` for the no-adapter full fine-tune).
    pub full_finetune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Stage1,
            learning_rate: 1e-3,
            steps: 10_000,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 2000,
            eval_every: 1000,
            lambda_head: 1.0,
            lambda_other: 10.0,
            mixture_ratio: 0.3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            stage2_decoders_only: false,
            freeze_spatial_stage2: false,
            allow_no_stage1: false,
            skip_stage2: false,
            full_finetune: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Steps the goal state must persist before success is declared.
    pub hold_duration: usize,
    pub horizon_atomic: usize,
    pub horizon_short: usize,
    pub horizon_long: usize,
    /// Per-axis per-step head delta cap, degrees.
    pub head_step_cap: f64,
    /// "velocity ~ 0" bound: per-step object displacement, meters.
    pub velocity_eps: f64,
    /// Fingertip distance within which a closed gripper attaches, meters.
    pub grasp_distance: f64,
    pub gripper_close_threshold: f64,
    pub gripper_open_threshold: f64,
    pub max_reset_attempts: usize,
    /// Fraction of the frame (centered) outside which a truncation-occluded
    /// target's projected center must fall.
    pub truncation_center_band: f64,
    /// Maximum visible-pixel fraction for truncation occlusion.
    pub truncation_visible_max: f64,
    /// Minimum covered-pixel fraction for physical occlusion.
    pub physical_cover_min: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            hold_duration: 20,
            horizon_atomic: 300,
            horizon_short: 600,
            horizon_long: 1200,
            head_step_cap: 6.0,
            velocity_eps: 0.002,
            grasp_distance: 0.03,
            gripper_close_threshold: 0.2,
            gripper_open_threshold: 0.8,
            max_reset_attempts: 500,
            truncation_center_band: 0.7,
            truncation_visible_max: 0.5,
            physical_cover_min: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Perception tolerance per axis, degrees.
    pub tolerance_deg: f64,
    /// Maximum chunks accumulated in closed-loop perception eval.
    pub max_chunks: usize,
    /// Per-chunk motion below which the closed loop stops, degrees.
    pub min_chunk_motion: f64,
    pub n_episodes: usize,
    /// Multiplicative raster jitter magnitude for the generalization sweep.
    pub jitter: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerance_deg: 5.0,
            max_chunks: 6,
            min_chunk_motion: 0.5,
            n_episodes: 100,
            jitter: 0.1,
        }
    }
}

/// Root configuration for every pipeline command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub arm: ArmConfig,
    pub viewgen: ViewgenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub eval: EvalConfig,
}

impl StackConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    /// Applies `key=value` overrides with dotted keys, validating every key
    /// and reporting all offending keys at once.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut bad: Vec<String> = Vec::new();
        for (key, raw) in overrides {
            let parsed: toml::Value = match raw.parse::<i64>() {
                Ok(v) => toml::Value::Integer(v),
                Err(_) => match raw.parse::<f64>() {
                    Ok(v) => toml::Value::Float(v),
                    Err(_) => match raw.as_str() {
                        "true" => toml::Value::Boolean(true),
                        "false" => toml::Value::Boolean(false),
                        other => toml::from_str::<toml::Value>(&format!("v = {other}"))
                            .ok()
                            .and_then(|t| t.get("v").cloned())
                            .unwrap_or(toml::Value::String(other.to_string())),
                    },
                },
            };
            let parts: Vec<&str> = key.split('.').collect();
            let last = parts[parts.len() - 1];
            fn navigate<'a>(
                doc: &'a mut toml::Value,
                parts: &[&str],
            ) -> Option<&'a mut toml::Value> {
                let mut node = doc;
                for p in parts {
                    node = node.get_mut(p)?;
                }
                Some(node)
            }
            match navigate(&mut doc, &parts[..parts.len() - 1]) {
                Some(parent) if parent.get(last).is_some() => {
                    parent
                        .as_table_mut()
                        .expect("parent of a known key is a table")
                        .insert(last.to_string(), parsed);
                }
                _ => bad.push(key.clone()),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", bad.join(", "))));
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Stable hash of the full resolved configuration.
    pub fn fingerprint(&self) -> String {
        let json = canonical::to_canonical_json(self).expect("config serializes");
        canonical::sha256_hex(json.as_bytes())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = StackConfig::default();
        let s = cfg.to_toml_string().unwrap();
        let back = StackConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn override_known_key() {
        let mut cfg = StackConfig::default();
        cfg.apply_overrides(&[("train.lambda_other".into(), "10.0".into())])
            .unwrap();
        assert_eq!(cfg.train.lambda_other, 10.0);
        cfg.apply_overrides(&[("model.width".into(), "32".into())]).unwrap();
        assert_eq!(cfg.model.width, 32);
    }

    #[test]
    fn unknown_keys_all_reported() {
        let mut cfg = StackConfig::default();
        let err = cfg
            .apply_overrides(&[
                ("train.nope".into(), "1".into()),
                ("bogus.key".into(), "2".into()),
                ("train.learning_rate".into(), "0.01".into()),
            ])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.nope") && msg.contains("bogus.key"), "{msg}");
    }

    #[test]
    fn fingerprint_changes_with_any_field() {
        let base = StackConfig::default();
        let mut edited = base.clone();
        edited.eval.tolerance_deg = 6.0;
        assert_ne!(base.fingerprint(), edited.fingerprint());
    }
}
