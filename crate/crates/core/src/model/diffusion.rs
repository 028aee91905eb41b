//! Cosine noise schedule, forward noising, and deterministic reverse
//! sampling of action chunks.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::features;
use crate::model::net::{self, NoisePrediction};
use crate::model::nn::{TapeModel, TrainMask};
use crate::model::state::ModelState;
use crate::world::render::Observation;
use crate::world::sample::derive_rng;
use crate::world::ProprioState;
use crate::{Error, Result};

const COSINE_S: f64 = 0.008;

/// Cumulative noise-retention schedule ᾱ_0..ᾱ_{T-1} (cosine-style),
/// strictly decreasing in (0, 1].
pub fn alpha_bar_schedule(t_diff: usize) -> Vec<f64> {
    let f = |t: f64| {
        let arg = (t / t_diff as f64 + COSINE_S) / (1.0 + COSINE_S);
        (arg * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0.0);
    (0..t_diff).map(|t| (f((t + 1) as f64) / f0).clamp(1e-5, 1.0)).collect()
}

/// x_τ = sqrt(ᾱ_τ)·x₀ + sqrt(1 − ᾱ_τ)·ε
pub fn add_noise(x0: &Array2<f64>, eps: &Array2<f64>, alpha_bar: f64) -> Array2<f64> {
    x0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt()
}

/// Standard-normal draw via Box-Muller (keeps noise independent of
/// rand_distr's internal algorithm choices).
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// The S sampling steps: evenly spaced τ indices from T_diff − 1 down to 0.
pub fn sampling_steps(t_diff: usize, s: usize) -> Vec<usize> {
    assert!(s >= 1 && s <= t_diff);
    (0..s)
        .map(|i| ((s - 1 - i) * (t_diff - 1)) / (s.max(2) - 1).max(1))
        .collect()
}

/// Per-column clipping caps for a sampled chunk: the first two columns are
/// head deltas (degrees), the rest body deltas.
#[derive(Debug, Clone)]
pub struct ActionCaps {
    pub head_step: f64,
    pub body: Vec<f64>,
}

impl ActionCaps {
    pub fn clip(&self, chunk: &mut Array2<f64>) {
        for mut row in chunk.rows_mut() {
            row[0] = row[0].clamp(-self.head_step, self.head_step);
            row[1] = row[1].clamp(-self.head_step, self.head_step);
            for (j, cap) in self.body.iter().enumerate() {
                row[2 + j] = row[2 + j].clamp(-*cap, *cap);
            }
        }
    }
}

/// Deterministic reverse update over the injected predictor. The predictor
/// receives the current (normalized) chunk and τ and returns ε̂ of the same
/// shape. Exposed separately from `sample_chunk` so tests can drive it with
/// closed-form oracles.
pub fn reverse_sample<F>(
    t_diff: usize,
    steps: usize,
    init_noise: Array2<f64>,
    mut predictor: F,
) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>, usize) -> Result<Array2<f64>>,
{
    let abar = alpha_bar_schedule(t_diff);
    let taus = sampling_steps(t_diff, steps);
    let mut x = init_noise;
    for (i, &tau) in taus.iter().enumerate() {
        let eps = predictor(&x, tau)?;
        if let Some(bad) = eps.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFault(format!(
                "non-finite noise prediction at sampling step {i} (tau {tau}), element {bad}"
            )));
        }
        let a = abar[tau];
        let x0 = (&x - &(&eps * (1.0 - a).sqrt())) / a.sqrt();
        let a_prev = if i + 1 < taus.len() { abar[taus[i + 1]] } else { 1.0 };
        x = &x0 * a_prev.sqrt() + &eps * (1.0 - a_prev).sqrt();
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFault(format!(
                "non-finite chunk after sampling step {i} (tau {tau}), element {bad}"
            )));
        }
    }
    Ok(x)
}

/// Full policy inference: encodes the observation, runs S deterministic
/// reverse steps from seeded Gaussian noise, denormalizes, and clips to the
/// action caps. Same seed, same inputs → identical chunk.
#[allow(clippy::too_many_arguments)]
pub fn sample_chunk(
    state: &ModelState,
    obs: &Observation,
    tokens: &[usize],
    proprio: &ProprioState,
    caps: &ActionCaps,
    seed: u64,
    adapter_on: bool,
    spatial_on: bool,
) -> Result<Array2<f64>> {
    let cfg = &state.config;
    let act_dim = 2 + cfg.d_body;
    let mut rng = derive_rng(seed, 0x73616d706c65);
    let init = gaussian(&mut rng, cfg.k, act_dim);
    let prop_vec = features::proprio_vector(proprio);

    // context is fixed across sampling steps; encode once
    let mut tm = TapeModel::new(state, TrainMask::none());
    let phi = net::encode_observation(&mut tm, obs, tokens, adapter_on)?;
    let ctx = if spatial_on {
        // a wrist camera, when mounted, feeds the geometric stream; the
        // head view always feeds the semantic stream
        let spatial_obs = obs.wrist_observation.as_deref().unwrap_or(obs);
        let f = net::encode_spatial(&mut tm, spatial_obs, true)?;
        net::fuse_context(&mut tm, phi, f)
    } else {
        phi
    };
    let ctx_val = tm.tape.value(ctx).clone();

    let mut normed = reverse_sample(cfg.t_diff, cfg.sample_steps, init, |x, tau| {
        let mut tm = TapeModel::new(state, TrainMask::none());
        let ctx = tm.tape.constant(ctx_val.clone());
        let NoisePrediction { eps_head, eps_body } =
            net::predict_noise(&mut tm, ctx, x, tau, &prop_vec);
        let h = tm.tape.value(eps_head);
        let b = tm.tape.value(eps_body);
        let mut out = Array2::zeros((cfg.k, act_dim));
        out.slice_mut(ndarray::s![.., ..2]).assign(h);
        out.slice_mut(ndarray::s![.., 2..]).assign(b);
        Ok(out)
    })?;

    // denormalize and clip
    for mut row in normed.rows_mut() {
        for j in 0..act_dim {
            row[j] = row[j] * state.norm_std[j] + state.norm_mean[j];
        }
    }
    caps.clip(&mut normed);
    Ok(normed)
}
