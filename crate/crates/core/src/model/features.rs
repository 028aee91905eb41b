//! Raw-observation to tensor conversion: patch flattening, geometry
//! channels, instruction token padding, proprio vectors, and the sinusoidal
//! diffusion-step embedding.

use ndarray::{Array2, Array3};

use crate::world::render::Observation;
use crate::world::{ProprioState, DEPTH_EMPTY};

/// Reserved token ids shared with the viewgen tokenizer.
pub const TOKEN_PAD: usize = 0;
pub const TOKEN_BOS: usize = 1;
pub const TOKEN_UNK: usize = 2;
/// First id available to vocabulary words.
pub const TOKEN_FIRST_WORD: usize = 3;

/// Length of the proprio/camera conditioning vector fed to the DiT.
pub const PROPRIO_DIM: usize = 9;

/// Length of the global-quantity vector in the spatial branch:
/// intrinsics (fx, fy, cx, cy), camera pose (pitch, yaw), pivot (x, y, z).
pub const GLOBAL_DIM: usize = 9;

/// Depth values are normalized by this range (meters); the desk workspace
/// never exceeds it.
pub const DEPTH_NORM_M: f64 = 3.0;

/// Flatten an H x W x C raster into patch rows. Patch `p` covers a
/// `patch x patch` pixel block (row-major over the patch grid); within a
/// row, values are ordered pixel-major then channel, restricted to the
/// first `in_channels` channels.
pub fn patch_rows(raster: &Array3<f32>, patch: usize, in_channels: usize) -> Array2<f64> {
    let (h, w, c) = raster.dim();
    assert!(in_channels <= c, "in_channels {in_channels} > raster channels {c}");
    assert!(h % patch == 0 && w % patch == 0);
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * in_channels;
    let mut out = Array2::zeros((gh * gw, row_len));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..in_channels {
                        out[[gy * gw + gx, k]] =
                            raster[[gy * patch + py, gx * patch + px, ch]] as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Geometry raster: 4 channels of (normalized depth, ray x, ray y, ray z).
/// Empty depth pixels map to 0.
pub fn geo_raster(obs: &Observation) -> Array3<f32> {
    let (h, w) = obs.depth_raster.dim();
    let mut out = Array3::zeros((h, w, 4));
    for y in 0..h {
        for x in 0..w {
            let d = obs.depth_raster[[y, x]];
            out[[y, x, 0]] = if d == DEPTH_EMPTY {
                0.0
            } else {
                (d as f64 / DEPTH_NORM_M) as f32
            };
            for c in 0..3 {
                out[[y, x, 1 + c]] = obs.ray_dirs[[y, x, c]];
            }
        }
    }
    out
}

/// Pad or truncate a token sequence to `max_len`, prepending BOS.
pub fn pad_tokens(tokens: &[usize], max_len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(max_len);
    out.push(TOKEN_BOS);
    for &t in tokens.iter().take(max_len.saturating_sub(1)) {
        out.push(t);
    }
    while out.len() < max_len {
        out.push(TOKEN_PAD);
    }
    out
}

/// Conditioning vector: head angles (normalized by their limits), arm
/// joints, gripper, and an attached-object flag.
pub fn proprio_vector(proprio: &ProprioState) -> Array2<f64> {
    let mut v = Array2::zeros((1, PROPRIO_DIM));
    let (pitch, yaw) = proprio.head;
    v[[0, 0]] = pitch / 60.0;
    v[[0, 1]] = yaw / 90.0;
    for (i, j) in proprio.arm_joints.iter().enumerate() {
        v[[0, 2 + i]] = *j;
    }
    v[[0, 6]] = proprio.gripper;
    v[[0, 7]] = if proprio.attached_object.is_some() { 1.0 } else { 0.0 };
    v[[0, 8]] = 1.0; // bias slot
    v
}

/// Global quantities for the spatial branch: intrinsics scaled by raster
/// width, camera pose scaled by the head limits, and the pivot position.
pub fn global_vector(obs: &Observation) -> Array2<f64> {
    let (fx, fy, cx, cy) = obs.intrinsics;
    let w = obs.depth_raster.dim().1 as f64;
    let mut v = Array2::zeros((1, GLOBAL_DIM));
    v[[0, 0]] = fx / w;
    v[[0, 1]] = fy / w;
    v[[0, 2]] = cx / w;
    v[[0, 3]] = cy / w;
    v[[0, 4]] = obs.camera_pose.pitch / 60.0;
    v[[0, 5]] = obs.camera_pose.yaw / 90.0;
    for i in 0..3 {
        v[[0, 6 + i]] = obs.camera_pose.pivot[i];
    }
    v
}

/// Sinusoidal embedding of the diffusion step, scaled to [0, 1] by `t_diff`.
pub fn tau_embedding(t: usize, t_diff: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "tau embedding dim must be even");
    let pos = t as f64 / t_diff as f64;
    let half = dim / 2;
    let mut v = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        v[[0, i]] = (pos * freq * std::f64::consts::TAU).sin();
        v[[0, half + i]] = (pos * freq * std::f64::consts::TAU).cos();
    }
    v
}
