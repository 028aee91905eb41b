//! Model parameter registry: named tensors, trainability groups, group
//! checksums for freeze contracts, and checkpoint serialization.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::world::sample::derive_rng;
use crate::{Error, Result};

/// Trainability group a parameter belongs to. Freeze contracts operate on
/// whole groups, never individual tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Pretrained encoder: patch embed, token embed, transformer blocks.
    Base,
    /// LoRA adapters on the base attention projections.
    Adapter,
    /// Geometry branch: geo patch embed, projection, spatial layer norm.
    Spatial,
    /// Fusion linear + learnable beta gate.
    Fusion,
    /// Diffusion transformer trunk shared by both action heads.
    SharedDit,
    /// Camera-action decoder.
    CameraHead,
    /// Body-action decoder.
    BodyHead,
    /// Target-cell classifier used only during base pretraining.
    PretrainProbe,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Base,
        Group::Adapter,
        Group::Spatial,
        Group::Fusion,
        Group::SharedDit,
        Group::CameraHead,
        Group::BodyHead,
        Group::PretrainProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Adapter => "adapter",
            Group::Spatial => "spatial",
            Group::Fusion => "fusion",
            Group::SharedDit => "shared_dit",
            Group::CameraHead => "camera_head",
            Group::BodyHead => "body_head",
            Group::PretrainProbe => "pretrain_probe",
        }
    }
}

pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Array2<f64>,
}

pub struct ModelState {
    pub params: Vec<Param>,
    pub config: ModelConfig,
    /// Per-dimension action normalization (mean, std) over the 2 + D_body
    /// action columns; estimated from the training set, identity at init.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    index: BTreeMap<String, usize>,
}

fn he_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = (2.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        // Box-Muller on uniform draws keeps us off rand_distr's internal
        // state layout, so init is stable across rand upgrades.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale
    })
}

impl ModelState {
    /// Number of visual patch tokens per observation.
    pub fn n_patches(cfg: &ModelConfig) -> usize {
        let (h, w) = cfg.raster;
        assert!(
            h % cfg.patch == 0 && w % cfg.patch == 0,
            "raster {h}x{w} not divisible by patch {}",
            cfg.patch
        );
        (h / cfg.patch) * (w / cfg.patch)
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut params = Vec::new();
        let d = cfg.width;
        let mut add = |name: String, group: Group, value: Array2<f64>| {
            params.push(Param { name, group, value });
        };
        let rng_for = |salt: u64| derive_rng(seed, 0x6d6f64656c ^ salt);

        // --- base encoder ---
        {
            let mut rng = rng_for(1);
            let patch_dim = cfg.in_channels * cfg.patch * cfg.patch;
            add("base.patch_embed.w".into(), Group::Base, he_init(&mut rng, patch_dim, d));
            add("base.patch_embed.b".into(), Group::Base, Array2::zeros((1, d)));
            add("base.token_embed".into(), Group::Base, he_init(&mut rng, cfg.vocab, d));
            let n_tok = Self::n_patches(cfg) + cfg.max_instr_len;
            add("base.pos_embed".into(), Group::Base, &he_init(&mut rng, n_tok, d) * 0.02);
            for blk in 0..cfg.base_blocks {
                for proj in ["wq", "wk", "wv", "wo"] {
                    add(
                        format!("base.block{blk}.attn.{proj}"),
                        Group::Base,
                        he_init(&mut rng, d, d),
                    );
                }
                add(format!("base.block{blk}.ln1.gain"), Group::Base, Array2::ones((1, d)));
                add(format!("base.block{blk}.ln1.bias"), Group::Base, Array2::zeros((1, d)));
                add(format!("base.block{blk}.ln2.gain"), Group::Base, Array2::ones((1, d)));
                add(format!("base.block{blk}.ln2.bias"), Group::Base, Array2::zeros((1, d)));
                let hid = d * cfg.mlp_mult;
                add(format!("base.block{blk}.mlp.w1"), Group::Base, he_init(&mut rng, d, hid));
                add(format!("base.block{blk}.mlp.b1"), Group::Base, Array2::zeros((1, hid)));
                add(format!("base.block{blk}.mlp.w2"), Group::Base, he_init(&mut rng, hid, d));
                add(format!("base.block{blk}.mlp.b2"), Group::Base, Array2::zeros((1, d)));
            }
            add("base.ln_out.gain".into(), Group::Base, Array2::ones((1, d)));
            add("base.ln_out.bias".into(), Group::Base, Array2::zeros((1, d)));
        }

        // --- LoRA adapters on Wq and Wv of each base block ---
        {
            let mut rng = rng_for(2);
            let r = cfg.lora_rank;
            for blk in 0..cfg.base_blocks {
                for proj in ["wq", "wv"] {
                    // A gets a random init, B starts at zero so the adapter
                    // contributes nothing until trained.
                    add(
                        format!("adapter.block{blk}.{proj}.a"),
                        Group::Adapter,
                        he_init(&mut rng, d, r),
                    );
                    add(
                        format!("adapter.block{blk}.{proj}.b"),
                        Group::Adapter,
                        Array2::zeros((r, d)),
                    );
                }
            }
        }

        // --- spatial branch ---
        {
            let mut rng = rng_for(3);
            let rgb_patch_dim = cfg.in_channels * cfg.patch * cfg.patch;
            add("spatial.rgb_embed.w".into(), Group::Spatial, he_init(&mut rng, rgb_patch_dim, d));
            add("spatial.rgb_embed.b".into(), Group::Spatial, Array2::zeros((1, d)));
            // geo features carry depth + the 3 ray components per pixel
            let geo_patch_dim = 4 * cfg.patch * cfg.patch;
            add("spatial.geo_embed.w".into(), Group::Spatial, he_init(&mut rng, geo_patch_dim, d));
            add("spatial.geo_embed.b".into(), Group::Spatial, Array2::zeros((1, d)));
            // 4-layer MLP over global quantities (intrinsics + camera pose)
            let gdim = crate::model::features::GLOBAL_DIM;
            add("spatial.glob.w1".into(), Group::Spatial, he_init(&mut rng, gdim, d));
            add("spatial.glob.b1".into(), Group::Spatial, Array2::zeros((1, d)));
            for l in 2..=4 {
                add(format!("spatial.glob.w{l}"), Group::Spatial, he_init(&mut rng, d, d));
                add(format!("spatial.glob.b{l}"), Group::Spatial, Array2::zeros((1, d)));
            }
            add("spatial.proj.w".into(), Group::Spatial, he_init(&mut rng, d, d));
            add("spatial.proj.b".into(), Group::Spatial, Array2::zeros((1, d)));
            add("spatial.null".into(), Group::Spatial, Array2::zeros((1, d)));
            add("spatial.ln.gain".into(), Group::Spatial, Array2::ones((1, d)));
            add("spatial.ln.bias".into(), Group::Spatial, Array2::zeros((1, d)));
        }

        // --- fusion ---
        {
            let mut rng = rng_for(4);
            add("fusion.linear.w".into(), Group::Fusion, he_init(&mut rng, d, d));
            add("fusion.linear.b".into(), Group::Fusion, Array2::zeros((1, d)));
            // beta starts at zero so fusion is an exact no-op at init
            add("fusion.beta".into(), Group::Fusion, Array2::zeros((1, 1)));
        }

        // --- shared diffusion transformer ---
        {
            let mut rng = rng_for(5);
            let act_dim = 2 + cfg.d_body;
            add("dit.action_in.w".into(), Group::SharedDit, he_init(&mut rng, act_dim, d));
            add("dit.action_in.b".into(), Group::SharedDit, Array2::zeros((1, d)));
            add("dit.tau_embed.w".into(), Group::SharedDit, he_init(&mut rng, cfg.tau_features, d));
            add("dit.tau_embed.b".into(), Group::SharedDit, Array2::zeros((1, d)));
            add(
                "dit.proprio_in.w".into(),
                Group::SharedDit,
                he_init(&mut rng, crate::model::features::PROPRIO_DIM, d),
            );
            add("dit.proprio_in.b".into(), Group::SharedDit, Array2::zeros((1, d)));
            add("dit.pos_embed".into(), Group::SharedDit, &he_init(&mut rng, cfg.k, d) * 0.02);
            for blk in 0..cfg.dit_blocks {
                for proj in ["wq", "wk", "wv", "wo"] {
                    add(
                        format!("dit.block{blk}.self_attn.{proj}"),
                        Group::SharedDit,
                        he_init(&mut rng, d, d),
                    );
                }
                for proj in ["wq", "wk", "wv", "wo"] {
                    add(
                        format!("dit.block{blk}.cross_attn.{proj}"),
                        Group::SharedDit,
                        he_init(&mut rng, d, d),
                    );
                }
                for ln in ["ln1", "ln2", "ln3"] {
                    add(format!("dit.block{blk}.{ln}.gain"), Group::SharedDit, Array2::ones((1, d)));
                    add(format!("dit.block{blk}.{ln}.bias"), Group::SharedDit, Array2::zeros((1, d)));
                }
                let hid = d * cfg.mlp_mult;
                add(format!("dit.block{blk}.mlp.w1"), Group::SharedDit, he_init(&mut rng, d, hid));
                add(format!("dit.block{blk}.mlp.b1"), Group::SharedDit, Array2::zeros((1, hid)));
                add(format!("dit.block{blk}.mlp.w2"), Group::SharedDit, he_init(&mut rng, hid, d));
                add(format!("dit.block{blk}.mlp.b2"), Group::SharedDit, Array2::zeros((1, d)));
            }
            add("dit.ln_out.gain".into(), Group::SharedDit, Array2::ones((1, d)));
            add("dit.ln_out.bias".into(), Group::SharedDit, Array2::zeros((1, d)));
        }

        // --- decoupled decoders ---
        {
            let mut rng = rng_for(6);
            let h = cfg.head_hidden;
            add("camera_head.w1".into(), Group::CameraHead, he_init(&mut rng, d, h));
            add("camera_head.b1".into(), Group::CameraHead, Array2::zeros((1, h)));
            add("camera_head.w2".into(), Group::CameraHead, he_init(&mut rng, h, 2));
            add("camera_head.b2".into(), Group::CameraHead, Array2::zeros((1, 2)));
            add("body_head.w1".into(), Group::BodyHead, he_init(&mut rng, d, h));
            add("body_head.b1".into(), Group::BodyHead, Array2::zeros((1, h)));
            add("body_head.w2".into(), Group::BodyHead, he_init(&mut rng, h, cfg.d_body));
            add("body_head.b2".into(), Group::BodyHead, Array2::zeros((1, cfg.d_body)));
            // unified decoder for the no-decoupling ablation; grouped with
            // the camera head so Stage 1 can still train the head branch
            let full = 2 + cfg.d_body;
            add("unified_head.w1".into(), Group::CameraHead, he_init(&mut rng, d, h));
            add("unified_head.b1".into(), Group::CameraHead, Array2::zeros((1, h)));
            add("unified_head.w2".into(), Group::CameraHead, he_init(&mut rng, h, full));
            add("unified_head.b2".into(), Group::CameraHead, Array2::zeros((1, full)));
        }

        // --- pretrain probe ---
        {
            let mut rng = rng_for(7);
            // grid cells plus the trailing "not visible" class
            let cells = cfg.pretrain_grid * cfg.pretrain_grid + 1;
            add("probe.w".into(), Group::PretrainProbe, he_init(&mut rng, d, cells));
            add("probe.b".into(), Group::PretrainProbe, Array2::zeros((1, cells)));
        }

        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let act_dim = 2 + cfg.d_body;
        ModelState {
            params,
            config: cfg.clone(),
            norm_mean: vec![0.0; act_dim],
            norm_std: vec![1.0; act_dim],
            index,
        }
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.params[self.id(name)].value
    }

    pub fn param_count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over the canonical byte image of every tensor in `group`,
    /// in registry order. Used to enforce freeze contracts.
    pub fn group_checksum(&self, group: Group) -> String {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            bytes.extend_from_slice(p.name.as_bytes());
            bytes.push(0);
            let (r, c) = p.value.dim();
            bytes.extend_from_slice(&(r as u64).to_le_bytes());
            bytes.extend_from_slice(&(c as u64).to_le_bytes());
            for v in p.value.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::canonical::sha256_hex(&bytes)
    }

    pub fn all_checksums(&self) -> BTreeMap<String, String> {
        Group::ALL
            .iter()
            .map(|g| (g.name().to_string(), self.group_checksum(*g)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from_state(self);
        let json = crate::canonical::to_canonical_json(&serde_json::to_value(&ckpt)?)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        ckpt.into_state(cfg)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    group: Group,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    format_version: u32,
    /// Key structure dims, recorded for early mismatch diagnostics.
    width: usize,
    k: usize,
    d_body: usize,
    /// Cumulative noise-retention schedule the model was trained under.
    schedule_alpha_bar: Vec<f64>,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    group_checksums: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    fn from_state(state: &ModelState) -> Self {
        let cfg = &state.config;
        Checkpoint {
            format_version: 1,
            width: cfg.width,
            k: cfg.k,
            d_body: cfg.d_body,
            schedule_alpha_bar: crate::model::diffusion::alpha_bar_schedule(cfg.t_diff),
            norm_mean: state.norm_mean.clone(),
            norm_std: state.norm_std.clone(),
            group_checksums: state.all_checksums(),
            tensors: state
                .params
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    group: p.group,
                    shape: [p.value.nrows(), p.value.ncols()],
                    data: p.value.iter().cloned().collect(),
                })
                .collect(),
        }
    }

    fn into_state(self, cfg: &ModelConfig) -> Result<ModelState> {
        if self.width != cfg.width || self.k != cfg.k || self.d_body != cfg.d_body {
            return Err(Error::DimMismatch {
                layer: "checkpoint".into(),
                expected: format!("width {} k {} d_body {}", cfg.width, cfg.k, cfg.d_body),
                got: format!("width {} k {} d_body {}", self.width, self.k, self.d_body),
            });
        }
        let fresh = ModelState::init(cfg, 0);
        let by_name: BTreeMap<String, TensorRecord> =
            self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut params = Vec::with_capacity(fresh.params.len());
        for p in &fresh.params {
            let rec = by_name.get(&p.name).ok_or_else(|| Error::DimMismatch {
                layer: p.name.clone(),
                expected: format!("{:?}", p.value.dim()),
                got: "missing from checkpoint".into(),
            })?;
            let expected = [p.value.nrows(), p.value.ncols()];
            if rec.shape != expected || rec.data.len() != expected[0] * expected[1] {
                return Err(Error::DimMismatch {
                    layer: p.name.clone(),
                    expected: format!("{expected:?}"),
                    got: format!("{:?}", rec.shape),
                });
            }
            let value = Array2::from_shape_vec((expected[0], expected[1]), rec.data.clone())
                .expect("shape checked above");
            params.push(Param { name: p.name.clone(), group: p.group, value });
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let state = ModelState {
            params,
            config: cfg.clone(),
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
            index,
        };
        // integrity: recorded checksums must match the loaded tensors
        for (name, sum) in &self.group_checksums {
            let group = Group::ALL
                .iter()
                .find(|g| g.name() == name)
                .copied()
                .ok_or_else(|| Error::Data(format!("unknown parameter group {name}")))?;
            let actual = state.group_checksum(group);
            if &actual != sum {
                return Err(Error::Data(format!(
                    "checkpoint corrupt: group {name} checksum mismatch"
                )));
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = ModelState::init(&cfg, 7);
        let b = ModelState::init(&cfg, 7);
        for g in Group::ALL {
            assert_eq!(a.group_checksum(g), b.group_checksum(g));
        }
        let c = ModelState::init(&cfg, 8);
        assert_ne!(a.group_checksum(Group::Base), c.group_checksum(Group::Base));
    }

    #[test]
    fn adapter_is_under_two_percent_of_base() {
        let cfg = ModelConfig::default();
        let state = ModelState::init(&cfg, 0);
        let base = state.param_count(Group::Base) as f64;
        let adapter = state.param_count(Group::Adapter) as f64;
        assert!(adapter / base < 0.02, "adapter ratio {}", adapter / base);
    }

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let cfg = ModelConfig::tiny();
        let state = ModelState::init(&cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        state.save(&path).unwrap();
        let loaded = ModelState::load(&path, &cfg).unwrap();
        for g in Group::ALL {
            assert_eq!(state.group_checksum(g), loaded.group_checksum(g));
        }
    }

    #[test]
    fn checkpoint_dim_mismatch_rejected() {
        let cfg = ModelConfig::tiny();
        let state = ModelState::init(&cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        state.save(&path).unwrap();
        let mut other = ModelConfig::tiny();
        other.width = cfg.width + 1;
        match ModelState::load(&path, &other) {
            Err(crate::Error::DimMismatch { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("load should have failed"),
        }
    }

    #[test]
    fn tiny_config_fits_gradcheck_budget() {
        let cfg = ModelConfig::tiny();
        let state = ModelState::init(&cfg, 0);
        let total: usize = Group::ALL.iter().map(|g| state.param_count(*g)).sum();
        assert!(total <= 1000, "tiny model has {total} params");
    }
}
