//! Forward passes of the full policy: base encoder, spatial branch, fusion,
//! and the decoupled diffusion transformer.

use ndarray::Array2;

use crate::model::features::{self, pad_tokens};
use crate::model::nn::TapeModel;
use crate::model::state::ModelState;
use crate::model::tape::Var;
use crate::world::render::Observation;
use crate::{Error, Result};

/// φ_vlm: encodes the semantic raster and instruction tokens through the
/// base transformer. Base weights are read-only; when `adapter_on`, the
/// attention q/v projections route through the LoRA update.
pub fn encode_observation(
    tm: &mut TapeModel,
    obs: &Observation,
    tokens: &[usize],
    adapter_on: bool,
) -> Result<Var> {
    let cfg = &tm.state.config;
    let (h, w) = obs.depth_raster.dim();
    if (h, w) != cfg.raster {
        return Err(Error::DimMismatch {
            layer: "base.patch_embed".into(),
            expected: format!("{:?}", cfg.raster),
            got: format!("{:?}", (h, w)),
        });
    }
    let padded = pad_tokens(tokens, cfg.max_instr_len);
    if let Some(&bad) = padded.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::DimMismatch {
            layer: "base.token_embed".into(),
            expected: format!("token id < {}", cfg.vocab),
            got: bad.to_string(),
        });
    }
    let patches = features::patch_rows(&obs.semantic_raster, cfg.patch, cfg.in_channels);
    let px = tm.tape.constant(patches);
    let visual = tm.linear(px, "base.patch_embed.w", "base.patch_embed.b");
    let embed = tm.p("base.token_embed");
    let instr = tm.tape.gather_rows(embed, &padded);
    let seq = tm.tape.concat_rows(&[visual, instr]);
    let pos = tm.p("base.pos_embed");
    let mut x = tm.tape.add(seq, pos);
    for blk in 0..cfg.base_blocks {
        x = tm.base_block(x, blk, adapter_on);
    }
    Ok(tm.layer_norm(x, "base.ln_out"))
}

/// F_spatial = LayerNorm(F_rgb + Proj(F_geo)). The geometric stream is
/// optional: when `geo` is false the learned null embedding stands in for
/// F_geo.
pub fn encode_spatial(tm: &mut TapeModel, obs: &Observation, geo: bool) -> Result<Var> {
    let cfg = &tm.state.config;
    if obs.depth_raster.dim() != cfg.raster {
        return Err(Error::DimMismatch {
            layer: "spatial.rgb_embed".into(),
            expected: format!("{:?}", cfg.raster),
            got: format!("{:?}", obs.depth_raster.dim()),
        });
    }
    let n = ModelState::n_patches(cfg);
    let rgb_patches = features::patch_rows(&obs.semantic_raster, cfg.patch, cfg.in_channels);
    let rx = tm.tape.constant(rgb_patches);
    let f_rgb = tm.linear(rx, "spatial.rgb_embed.w", "spatial.rgb_embed.b");
    let f_geo = if geo {
        let geo_patches = features::patch_rows(&features::geo_raster(obs), cfg.patch, 4);
        let gx = tm.tape.constant(geo_patches);
        let local = tm.linear(gx, "spatial.geo_embed.w", "spatial.geo_embed.b");
        // broadcast projection of the global quantities through a 4-layer MLP
        let glob = tm.tape.constant(features::global_vector(obs));
        let mut g = tm.linear(glob, "spatial.glob.w1", "spatial.glob.b1");
        for l in 2..=4 {
            g = tm.tape.tanh(g);
            g = tm.linear(g, &format!("spatial.glob.w{l}"), &format!("spatial.glob.b{l}"));
        }
        tm.tape.add_row(local, g)
    } else {
        let null = tm.p("spatial.null");
        tm.tape.broadcast_row(null, n)
    };
    let proj = tm.linear(f_geo, "spatial.proj.w", "spatial.proj.b");
    let summed = tm.tape.add(f_rgb, proj);
    Ok(tm.layer_norm(summed, "spatial.ln"))
}

/// φ_fused = φ_vlm + β · Linear(F_spatial), injected at the visual patch
/// positions only; instruction positions receive zeros.
pub fn fuse_context(tm: &mut TapeModel, phi_vlm: Var, f_spatial: Var) -> Var {
    let cfg = &tm.state.config;
    let n_tok = ModelState::n_patches(cfg) + cfg.max_instr_len;
    let lin = tm.linear(f_spatial, "fusion.linear.w", "fusion.linear.b");
    let beta = tm.p("fusion.beta");
    let gated = tm.tape.mul_scalar(lin, beta);
    let padded = tm.tape.pad_rows(gated, 0, n_tok);
    tm.tape.add(phi_vlm, padded)
}

/// Output of one denoiser evaluation.
pub struct NoisePrediction {
    pub eps_head: Var,
    pub eps_body: Var,
}

/// Runs the DiT trunk on the noisy action chunk `[head | body]` (k rows,
/// 2 + D_body columns) conditioned on the fused context, the diffusion step
/// τ, and the proprio vector, then decodes with the decoupled heads.
pub fn predict_noise(
    tm: &mut TapeModel,
    ctx: Var,
    noisy_chunk: &Array2<f64>,
    tau: usize,
    proprio: &Array2<f64>,
) -> NoisePrediction {
    let cfg = &tm.state.config;
    debug_assert_eq!(noisy_chunk.dim(), (cfg.k, 2 + cfg.d_body));
    let act = tm.tape.constant(noisy_chunk.clone());
    let mut x = tm.linear(act, "dit.action_in.w", "dit.action_in.b");
    let tau_feat = tm
        .tape
        .constant(features::tau_embedding(tau, cfg.t_diff, cfg.tau_features));
    let tau_emb = tm.linear(tau_feat, "dit.tau_embed.w", "dit.tau_embed.b");
    x = tm.tape.add_row(x, tau_emb);
    let prop = tm.tape.constant(proprio.clone());
    let prop_emb = tm.linear(prop, "dit.proprio_in.w", "dit.proprio_in.b");
    x = tm.tape.add_row(x, prop_emb);
    let pos = tm.p("dit.pos_embed");
    x = tm.tape.add(x, pos);
    for blk in 0..cfg.dit_blocks {
        x = tm.dit_block(x, ctx, blk);
    }
    let trunk = tm.layer_norm(x, "dit.ln_out");
    if cfg.unified_head {
        // no-decoupling ablation: one decoder emits the full chunk and the
        // branches are column slices (selector matmuls keep the tape simple)
        let joint = tm.mlp(trunk, "unified_head");
        let full = 2 + cfg.d_body;
        let mut sel_head = Array2::zeros((full, 2));
        sel_head[[0, 0]] = 1.0;
        sel_head[[1, 1]] = 1.0;
        let mut sel_body = Array2::zeros((full, cfg.d_body));
        for j in 0..cfg.d_body {
            sel_body[[2 + j, j]] = 1.0;
        }
        let sh = tm.tape.constant(sel_head);
        let sb = tm.tape.constant(sel_body);
        let eps_head = tm.tape.matmul(joint, sh);
        let eps_body = tm.tape.matmul(joint, sb);
        return NoisePrediction { eps_head, eps_body };
    }
    let eps_head = tm.mlp(trunk, "camera_head");
    let eps_body = tm.mlp(trunk, "body_head");
    NoisePrediction { eps_head, eps_body }
}

/// L = λ_head · MSE(ε̂_head, ε_head) + λ_other · mask_body · MSE(ε̂_body, ε_body).
pub fn denoising_loss(
    tm: &mut TapeModel,
    pred: &NoisePrediction,
    eps_head: &Array2<f64>,
    eps_body: &Array2<f64>,
    lambda_head: f64,
    lambda_other: f64,
    mask_body: f64,
) -> Var {
    let th = tm.tape.constant(eps_head.clone());
    let tb = tm.tape.constant(eps_body.clone());
    let mse_head = tm.tape.mse(pred.eps_head, th);
    let mse_body = tm.tape.mse(pred.eps_body, tb);
    let lh = tm.tape.mul_const(mse_head, lambda_head);
    let lb = tm.tape.mul_const(mse_body, lambda_other * mask_body);
    tm.tape.add(lh, lb)
}

/// Pretraining probe: mean-pools the visual tokens of φ_vlm and classifies
/// the target cell; returns logits over grid² cells plus a trailing
/// "not visible" class.
pub fn probe_logits(tm: &mut TapeModel, phi_vlm: Var) -> Var {
    let cfg = &tm.state.config;
    let n = ModelState::n_patches(cfg);
    let visual = tm.tape.slice_rows(phi_vlm, 0, n);
    let summed = tm.tape.sum_rows(visual);
    let pooled = tm.tape.mul_const(summed, 1.0 / n as f64);
    tm.linear(pooled, "probe.w", "probe.b")
}

/// Cross-entropy of logits (1 x C) against a target class, via the tape.
pub fn cross_entropy(tm: &mut TapeModel, logits: Var, target: usize) -> Var {
    let probs = tm.tape.softmax_rows(logits);
    let c = tm.tape.value(probs).ncols();
    let mut pick = Array2::zeros((c, 1));
    pick[[target, 0]] = 1.0;
    let sel = tm.tape.constant(pick);
    let p = tm.tape.matmul(probs, sel);
    let logp = tm.tape.ln(p);
    tm.tape.mul_const(logp, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::nn::TrainMask;
    use crate::model::state::Group;
    use crate::world::render::render;
    use crate::world::{CameraState, Pose, Scene, SupportRef};

    fn tiny_obs(cfg: &ModelConfig) -> Observation {
        let mut scene = Scene {
            room_type: crate::world::RoomType::Kitchen,
            surfaces: vec![],
            objects: vec![],
            containers: vec![],
            head_pivot: [0.0, 0.0, 1.0],
            rng_seed: 0,
            spilled_units: 0,
        };
        scene.objects.push(crate::world::ObjectInstance {
            id: "a".into(),
            category: crate::world::Category::Cup,
            color: crate::world::Color::Red,
            size: 0.3,
            pose: Pose { position: [1.2, 0.0, 1.0], yaw: 0.0 },
            grasp_point: [1.2, 0.0, 1.0],
            graspable: true,
            liquid_units: 0,
            capacity: 10,
            support: SupportRef::Surface(0),
        });
        let mut cam = CameraState::default_head();
        cam.raster_dims = cfg.raster;
        render(&scene, &cam)
    }

    fn state_fixture() -> (ModelConfig, ModelState) {
        let cfg = ModelConfig::tiny();
        let state = ModelState::init(&cfg, 11);
        (cfg, state)
    }

    #[test]
    fn zero_b_adapter_matches_adapter_off() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let tokens = [3usize, 4];
        let mut on = TapeModel::new(&state, TrainMask::none());
        let v_on = encode_observation(&mut on, &obs, &tokens, true).unwrap();
        let mut off = TapeModel::new(&state, TrainMask::none());
        let v_off = encode_observation(&mut off, &obs, &tokens, false).unwrap();
        assert_eq!(on.tape.value(v_on), off.tape.value(v_off));
    }

    #[test]
    fn nonzero_b_adapter_changes_encoding() {
        let (cfg, mut state) = state_fixture();
        let id = state.id("adapter.block0.wq.b");
        state.params[id].value.fill(0.05);
        let obs = tiny_obs(&cfg);
        let mut on = TapeModel::new(&state, TrainMask::none());
        let v_on = encode_observation(&mut on, &obs, &[3], true).unwrap();
        let mut off = TapeModel::new(&state, TrainMask::none());
        let v_off = encode_observation(&mut off, &obs, &[3], false).unwrap();
        assert_ne!(on.tape.value(v_on), off.tape.value(v_off));
    }

    #[test]
    fn token_order_matters() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let mut a = TapeModel::new(&state, TrainMask::none());
        let va = encode_observation(&mut a, &obs, &[3, 4], false).unwrap();
        let mut b = TapeModel::new(&state, TrainMask::none());
        let vb = encode_observation(&mut b, &obs, &[4, 3], false).unwrap();
        assert_ne!(a.tape.value(va), b.tape.value(vb));
    }

    #[test]
    fn vocab_overflow_rejected() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let mut tm = TapeModel::new(&state, TrainMask::none());
        match encode_observation(&mut tm, &obs, &[cfg.vocab], false) {
            Err(Error::DimMismatch { layer, .. }) => assert_eq!(layer, "base.token_embed"),
            other => panic!("expected vocab error, got ok={:?}", other.is_ok()),
        }
    }

    #[test]
    fn beta_zero_fusion_is_identity() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let mut tm = TapeModel::new(&state, TrainMask::none());
        let phi = encode_observation(&mut tm, &obs, &[3], true).unwrap();
        let f = encode_spatial(&mut tm, &obs, true).unwrap();
        let fused = fuse_context(&mut tm, phi, f);
        assert_eq!(tm.tape.value(fused), tm.tape.value(phi));
        let _ = cfg;
    }

    #[test]
    fn nonzero_beta_injects_only_visual_rows() {
        let (cfg, mut state) = state_fixture();
        let id = state.id("fusion.beta");
        state.params[id].value[[0, 0]] = 0.5;
        let obs = tiny_obs(&cfg);
        let mut tm = TapeModel::new(&state, TrainMask::none());
        let phi = encode_observation(&mut tm, &obs, &[3], true).unwrap();
        let f = encode_spatial(&mut tm, &obs, true).unwrap();
        let fused = fuse_context(&mut tm, phi, f);
        let n = ModelState::n_patches(&cfg);
        let phi_v = tm.tape.value(phi).clone();
        let fused_v = tm.tape.value(fused).clone();
        // instruction rows untouched
        for r in n..phi_v.nrows() {
            for c in 0..phi_v.ncols() {
                assert_eq!(phi_v[[r, c]], fused_v[[r, c]]);
            }
        }
        // at least one visual row moved
        assert_ne!(
            phi_v.slice(ndarray::s![..n, ..]),
            fused_v.slice(ndarray::s![..n, ..])
        );
    }

    #[test]
    fn null_embedding_path_runs() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let mut tm = TapeModel::new(&state, TrainMask::none());
        let with_geo = encode_spatial(&mut tm, &obs, true).unwrap();
        let without = encode_spatial(&mut tm, &obs, false).unwrap();
        assert_eq!(tm.tape.value(with_geo).dim(), tm.tape.value(without).dim());
        assert!(tm.tape.value(without).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn body_perturbation_leaves_head_prediction_unchanged() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let noisy = Array2::from_elem((cfg.k, 2 + cfg.d_body), 0.3);
        let prop = Array2::zeros((1, features::PROPRIO_DIM));
        let run = |st: &ModelState| {
            let mut tm = TapeModel::new(st, TrainMask::none());
            let phi = encode_observation(&mut tm, &obs, &[3], true).unwrap();
            let f = encode_spatial(&mut tm, &obs, true).unwrap();
            let ctx = fuse_context(&mut tm, phi, f);
            let pred = predict_noise(&mut tm, ctx, &noisy, 2, &prop);
            (
                tm.tape.value(pred.eps_head).clone(),
                tm.tape.value(pred.eps_body).clone(),
            )
        };
        let (h0, b0) = run(&state);
        let mut perturbed = ModelState::init(&cfg, 11);
        let id = perturbed.id("body_head.w1");
        perturbed.params[id].value[[0, 0]] += 0.37;
        let (h1, b1) = run(&perturbed);
        assert_eq!(h0, h1, "camera branch must not see body decoder weights");
        assert_ne!(b0, b1);
    }

    #[test]
    fn mask_body_gates_body_loss() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let noisy = Array2::from_elem((cfg.k, 2 + cfg.d_body), 0.1);
        let prop = Array2::zeros((1, features::PROPRIO_DIM));
        let eps_h = Array2::zeros((cfg.k, 2));
        let eps_b = Array2::from_elem((cfg.k, cfg.d_body), 5.0);
        let loss_at = |mask: f64| {
            let mut tm = TapeModel::new(&state, TrainMask::none());
            let phi = encode_observation(&mut tm, &obs, &[3], true).unwrap();
            let f = encode_spatial(&mut tm, &obs, true).unwrap();
            let ctx = fuse_context(&mut tm, phi, f);
            let pred = predict_noise(&mut tm, ctx, &noisy, 1, &prop);
            let l = denoising_loss(&mut tm, &pred, &eps_h, &eps_b, 1.0, 10.0, mask);
            tm.tape.scalar(l)
        };
        let l0 = loss_at(0.0);
        let l1 = loss_at(1.0);
        assert!(l1 > l0, "body term must add loss when unmasked");
    }

    #[test]
    fn probe_and_cross_entropy_finite() {
        let (cfg, state) = state_fixture();
        let obs = tiny_obs(&cfg);
        let mut tm = TapeModel::new(&state, TrainMask::of(&[Group::Base, Group::PretrainProbe]));
        let phi = encode_observation(&mut tm, &obs, &[], false).unwrap();
        let logits = probe_logits(&mut tm, phi);
        assert_eq!(
            tm.tape.value(logits).dim(),
            (1, cfg.pretrain_grid * cfg.pretrain_grid + 1)
        );
        let loss = cross_entropy(&mut tm, logits, 1);
        let l = tm.tape.scalar(loss);
        assert!(l.is_finite() && l > 0.0);
        let mut grads = vec![None; state.params.len()];
        tm.tape.backward(loss, &mut grads);
        let probe_id = state.id("probe.w");
        assert!(grads[probe_id].is_some());
    }
}
