//! Two-stage trainer: base pretraining (target-cell classification),
//! Stage-1 perception alignment (camera branch only), and Stage-2 mixed
//! fine-tuning over perception records and oracle demonstrations.
//!
//! Everything here is deterministic under a fixed seed: batches are drawn
//! from per-step derived RNGs (so resumption needs no live RNG state),
//! Adam moments are stored per parameter id and updated in id order, and
//! freeze contracts are enforced by comparing group checksums against the
//! values recorded when the run started.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Stage, StackConfig, TrainConfig};
use crate::env::demo::Demonstration;
use crate::env::{self, EpisodeState};
use crate::model::diffusion::{self, ActionCaps};
use crate::model::features;
use crate::model::net::{self, NoisePrediction};
use crate::model::nn::{TapeModel, TrainMask};
use crate::model::state::{Group, ModelState};
use crate::viewgen::vocab;
use crate::viewgen::DatasetRecord;
use crate::world::render::{render, Observation};
use crate::world::sample::{derive_rng, sample_scene};
use crate::world::{CameraState, ProprioState, Scene};
use crate::{Error, Result};

/// One structured training-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    /// λ-weighted total.
    pub loss: f64,
    /// Unweighted head-branch MSE component.
    pub loss_head: f64,
    /// Unweighted, mask-gated body-branch MSE component.
    pub loss_body: f64,
    pub lr: f64,
    /// Stage-dependent validation metric (angular MAE in degrees for the
    /// perception stages, train accuracy for pretraining), logged at the
    /// eval cadence.
    pub val_metric: Option<f64>,
    /// Group checksums, logged at the checkpoint cadence.
    pub checksums: Option<BTreeMap<String, String>>,
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with moments indexed by parameter id. The update loop walks the
/// registry in id order, so two runs with identical gradients produce
/// bitwise-identical parameters.
pub struct Adam {
    pub t: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(state: &ModelState) -> Self {
        Adam {
            t: 0,
            m: state.params.iter().map(|p| Array2::zeros(p.value.dim())).collect(),
            v: state.params.iter().map(|p| Array2::zeros(p.value.dim())).collect(),
        }
    }

    /// One update over the accumulated gradients. Parameters outside
    /// `mask` are never touched, whatever the gradient buffer contains.
    pub fn step(
        &mut self,
        state: &mut ModelState,
        grads: &[Option<Array2<f64>>],
        mask: TrainMask,
        tc: &TrainConfig,
    ) {
        self.t += 1;
        let (b1, b2) = (tc.adam_beta1, tc.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in 0..state.params.len() {
            if !mask.contains(state.params[id].group) {
                continue;
            }
            let Some(g) = &grads[id] else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            *m = &*m * b1 + &(g * (1.0 - b1));
            *v = &*v * b2 + &(g.mapv(|x| x * x) * (1.0 - b2));
            let p = &mut state.params[id].value;
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= tc.learning_rate * mhat / (vhat.sqrt() + tc.adam_eps);
                });
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MomentRecord {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerRecord {
    t: usize,
    step: usize,
    moments: Vec<MomentRecord>,
}

/// A resumable training run: model, optimizer moments, and the step
/// counter. `save`/`load` round-trip all three, and continuing a loaded
/// run reproduces the uninterrupted run bitwise.
pub struct TrainRun {
    pub model: ModelState,
    pub opt: Adam,
    pub step: usize,
}

impl TrainRun {
    pub fn new(model: ModelState) -> Self {
        let opt = Adam::new(&model);
        TrainRun { model, opt, step: 0 }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.json"))?;
        let moments = self
            .model
            .params
            .iter()
            .enumerate()
            .map(|(id, p)| MomentRecord {
                name: p.name.clone(),
                m: self.opt.m[id].iter().copied().collect(),
                v: self.opt.v[id].iter().copied().collect(),
            })
            .collect();
        let rec = OptimizerRecord { t: self.opt.t, step: self.step, moments };
        let json = crate::canonical::to_canonical_json(&rec)?;
        std::fs::write(dir.join("optimizer.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path, cfg: &crate::config::ModelConfig) -> Result<Self> {
        let model = ModelState::load(&dir.join("model.json"), cfg)?;
        let bytes = std::fs::read(dir.join("optimizer.json"))?;
        let rec: OptimizerRecord = serde_json::from_slice(&bytes)?;
        let mut opt = Adam::new(&model);
        opt.t = rec.t;
        for mr in rec.moments {
            let id = model.id(&mr.name);
            let dim = model.params[id].value.dim();
            opt.m[id] = Array2::from_shape_vec(dim, mr.m)
                .map_err(|e| Error::Data(format!("optimizer moment shape: {e}")))?;
            opt.v[id] = Array2::from_shape_vec(dim, mr.v)
                .map_err(|e| Error::Data(format!("optimizer moment shape: {e}")))?;
        }
        Ok(TrainRun { model, opt, step: rec.step })
    }
}

// ---------------------------------------------------------------------------
// data plumbing

/// Rebuilds the scene and initial-view observation of a dataset record.
/// Records reference scenes by seed, so training does not depend on the
/// raster blob being present.
pub fn record_observation(record: &DatasetRecord) -> Result<(Scene, Observation)> {
    let scene = sample_scene(&crate::config::SceneConfig::default(), record.scene_seed)?;
    let cam = CameraState::default_head()
        .with_angles(record.initial_camera.0, record.initial_camera.1);
    let obs = render(&scene, &cam);
    Ok((scene, obs))
}

/// Classification label for base pretraining: the grid cell containing the
/// mean pixel of the target instance, or the trailing "not visible" class.
pub fn target_cell(obs: &Observation, instance: i32, grid: usize) -> usize {
    let (h, w) = obs.instance_raster.dim();
    let mut n = 0usize;
    let (mut sr, mut sc) = (0usize, 0usize);
    for ((r, c), &code) in obs.instance_raster.indexed_iter() {
        if code == instance {
            n += 1;
            sr += r;
            sc += c;
        }
    }
    if n == 0 {
        return grid * grid;
    }
    let row = (sr / n) * grid / h;
    let col = (sc / n) * grid / w;
    row.min(grid - 1) * grid + col.min(grid - 1)
}

fn record_instance(scene: &Scene, record: &DatasetRecord) -> i32 {
    scene
        .objects
        .iter()
        .position(|o| o.id == record.instruction.target_object_id)
        .expect("record target exists in its scene") as i32
}

/// Normalized k x (2 + D_body) denoising target for a perception record:
/// head columns carry the ground-truth chunk, body columns are zero (and
/// masked out of the loss).
fn perception_x0(record: &DatasetRecord, state: &ModelState) -> Array2<f64> {
    let cfg = &state.config;
    let mut x0 = Array2::zeros((cfg.k, 2 + cfg.d_body));
    for (i, step) in record.gt_chunk.iter().enumerate().take(cfg.k) {
        x0[[i, 0]] = (step[0] - state.norm_mean[0]) / state.norm_std[0];
        x0[[i, 1]] = (step[1] - state.norm_mean[1]) / state.norm_std[1];
    }
    x0
}

/// Proprio conditioning for a perception record: home arm, head at the
/// record's initial view.
fn perception_proprio(record: &DatasetRecord) -> ProprioState {
    let mut p = ProprioState::home(4);
    p.head = record.initial_camera;
    p
}

/// Re-simulates a demonstration prefix to its state before step `t`.
pub fn demo_prefix(demo: &Demonstration, t: usize, cfg: &StackConfig) -> Result<EpisodeState> {
    let (task, mut state) = env::reset(demo.family, demo.visibility, &cfg.env, demo.seed)?;
    for s in demo.steps.iter().take(t) {
        env::step(&mut state, &task, s.head, &s.body, &cfg.env, &cfg.arm)?;
    }
    Ok(state)
}

/// Normalized denoising target from demo steps `t..t+k`; absent steps pad
/// with zero actions (the post-success fixpoint).
fn demo_x0(demo: &Demonstration, t: usize, state: &ModelState) -> Array2<f64> {
    let cfg = &state.config;
    let mut x0 = Array2::zeros((cfg.k, 2 + cfg.d_body));
    for i in 0..cfg.k {
        if let Some(s) = demo.steps.get(t + i) {
            x0[[i, 0]] = s.head[0];
            x0[[i, 1]] = s.head[1];
            for (j, b) in s.body.iter().enumerate().take(cfg.d_body) {
                x0[[i, 2 + j]] = *b;
            }
        }
    }
    for mut row in x0.rows_mut() {
        for j in 0..2 + cfg.d_body {
            row[j] = (row[j] - state.norm_mean[j]) / state.norm_std[j];
        }
    }
    x0
}

fn set_norm(state: &mut ModelState, col: usize, samples: &[f64]) {
    if samples.is_empty() {
        return;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    state.norm_mean[col] = mean;
    state.norm_std[col] = var.sqrt().max(1e-6);
}

/// Estimates head-column normalization from the training-split chunks.
pub fn fit_head_norm(state: &mut ModelState, records: &[DatasetRecord]) {
    for axis in 0..2 {
        let samples: Vec<f64> = records
            .iter()
            .filter(|r| r.split == crate::viewgen::Split::Train)
            .flat_map(|r| r.gt_chunk.iter().map(move |s| s[axis]))
            .collect();
        set_norm(state, axis, &samples);
    }
}

/// Estimates body-column normalization from demonstration actions; head
/// columns are filled too when still at the identity (no Stage 1 ran).
pub fn fit_body_norm(state: &mut ModelState, demos: &[Demonstration]) {
    let d_body = state.config.d_body;
    let head_identity = state.norm_mean[0] == 0.0 && state.norm_std[0] == 1.0;
    for col in 0..2 + d_body {
        if col < 2 && !head_identity {
            continue;
        }
        let samples: Vec<f64> = demos
            .iter()
            .flat_map(|d| d.steps.iter())
            .map(|s| {
                if col < 2 {
                    s.head[col]
                } else {
                    s.body.get(col - 2).copied().unwrap_or(0.0)
                }
            })
            .collect();
        set_norm(state, col, &samples);
    }
}

/// Source of one mixture draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixSource {
    Perception(usize),
    Manipulation(usize),
}

/// Deterministic i.i.d. mixture stream over two record pools.
pub struct MixStream {
    rng: ChaCha8Rng,
    n_perception: usize,
    n_manipulation: usize,
    ratio: f64,
}

impl Iterator for MixStream {
    type Item = MixSource;

    fn next(&mut self) -> Option<MixSource> {
        if self.rng.gen_range(0.0..1.0) < self.ratio {
            Some(MixSource::Perception(self.rng.gen_range(0..self.n_perception)))
        } else {
            Some(MixSource::Manipulation(self.rng.gen_range(0..self.n_manipulation)))
        }
    }
}

/// Infinite batch stream drawing perception records with probability
/// `ratio`, manipulation records otherwise. Both pools must be non-empty
/// (a pool with probability zero may be a placeholder of size 1).
pub fn mix_datasets(
    n_perception: usize,
    n_manipulation: usize,
    ratio: f64,
    seed: u64,
) -> Result<MixStream> {
    if n_perception == 0 || n_manipulation == 0 {
        return Err(Error::Config("mixture pools must be non-empty".into()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mixture ratio {ratio} outside [0, 1)")));
    }
    Ok(MixStream {
        rng: derive_rng(seed, 0x6d697874),
        n_perception,
        n_manipulation,
        ratio,
    })
}

// ---------------------------------------------------------------------------
// freeze contracts

struct FreezeGuard {
    frozen: Vec<(Group, String)>,
}

impl FreezeGuard {
    fn new(state: &ModelState, mask: TrainMask) -> Self {
        let frozen = Group::ALL
            .iter()
            .filter(|g| !mask.contains(**g))
            .map(|g| (*g, state.group_checksum(*g)))
            .collect();
        FreezeGuard { frozen }
    }

    fn verify(&self, state: &ModelState) -> Result<()> {
        for (g, sum) in &self.frozen {
            if &state.group_checksum(*g) != sum {
                return Err(Error::FrozenGroupMutated(g.name().to_string()));
            }
        }
        Ok(())
    }
}

fn stage_mask(tc: &TrainConfig, mc: &crate::config::ModelConfig) -> TrainMask {
    match tc.stage {
        Stage::Pretrain => TrainMask::of(&[Group::Base, Group::PretrainProbe]),
        Stage::Stage1 => {
            let mut groups = vec![Group::SharedDit, Group::CameraHead];
            if mc.adapter_enabled {
                groups.push(Group::Adapter);
            }
            TrainMask::of(&groups)
        }
        Stage::Stage2 => {
            let mut groups = vec![Group::CameraHead, Group::BodyHead];
            if !tc.stage2_decoders_only {
                groups.push(Group::SharedDit);
            }
            if mc.spatial_injection {
                groups.push(Group::Fusion);
                if !tc.freeze_spatial_stage2 {
                    groups.push(Group::Spatial);
                }
            }
            if tc.full_finetune {
                groups.push(Group::Base);
            }
            TrainMask::of(&groups)
        }
    }
}

// ---------------------------------------------------------------------------
// stages

/// Trains the base encoder (and probe) on target-cell classification over
/// the training split. The returned log carries the train accuracy at the
/// eval cadence; callers freeze the base group afterwards by excluding it
/// from every later stage's mask.
pub fn pretrain_base(
    run: &mut TrainRun,
    records: &[DatasetRecord],
    cfg: &StackConfig,
) -> Result<Vec<LogLine>> {
    let tc = TrainConfig { stage: Stage::Pretrain, ..cfg.train.clone() };
    let pool: Vec<&DatasetRecord> = records
        .iter()
        .filter(|r| r.split == crate::viewgen::Split::Train)
        .collect();
    if pool.is_empty() {
        return Err(Error::Config("pretraining needs a non-empty train split".into()));
    }
    let mask = stage_mask(&tc, &run.model.config);
    let guard = FreezeGuard::new(&run.model, mask);
    let grid = run.model.config.pretrain_grid;
    let mut log = Vec::new();
    while run.step < tc.steps {
        let step = run.step;
        let mut rng = derive_rng(tc.seed, 0x70726574 ^ step as u64);
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; run.model.params.len()];
        let mut loss_sum = 0.0;
        for _ in 0..tc.batch_size {
            let record = pool[rng.gen_range(0..pool.len())];
            let (scene, obs) = record_observation(record)?;
            let label = target_cell(&obs, record_instance(&scene, record), grid);
            let mut tm = TapeModel::new(&run.model, mask);
            let phi =
                net::encode_observation(&mut tm, &obs, &record.instruction.tokens, false)?;
            let logits = net::probe_logits(&mut tm, phi);
            let loss = net::cross_entropy(&mut tm, logits, label);
            let scaled = tm.tape.mul_const(loss, 1.0 / tc.batch_size as f64);
            loss_sum += tm.tape.scalar(scaled);
            tm.tape.backward(scaled, &mut grads);
        }
        if !loss_sum.is_finite() {
            return Err(Error::NumericalFault(format!(
                "pretraining loss diverged at step {step}"
            )));
        }
        run.opt.step(&mut run.model, &grads, mask, &tc);
        run.step += 1;
        let at_eval = tc.eval_every > 0 && run.step % tc.eval_every == 0;
        let at_ckpt = tc.checkpoint_every > 0 && run.step % tc.checkpoint_every == 0;
        if at_eval || at_ckpt || run.step == tc.steps {
            if at_ckpt {
                guard.verify(&run.model)?;
            }
            let val_metric = if at_eval || run.step == tc.steps {
                Some(pretrain_accuracy(&run.model, &pool, grid)?)
            } else {
                None
            };
            log.push(LogLine {
                step: run.step,
                loss: loss_sum,
                loss_head: loss_sum,
                loss_body: 0.0,
                lr: tc.learning_rate,
                val_metric,
                checksums: at_ckpt.then(|| run.model.all_checksums()),
            });
        }
    }
    guard.verify(&run.model)?;
    Ok(log)
}

/// Train-split classification accuracy of the pretraining probe, over at
/// most 128 records.
pub fn pretrain_accuracy(
    state: &ModelState,
    pool: &[&DatasetRecord],
    grid: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let sample: Vec<&&DatasetRecord> = pool.iter().take(128).collect();
    for record in &sample {
        let (scene, obs) = record_observation(record)?;
        let label = target_cell(&obs, record_instance(&scene, record), grid);
        let mut tm = TapeModel::new(state, TrainMask::none());
        let phi = net::encode_observation(&mut tm, &obs, &record.instruction.tokens, false)?;
        let logits = net::probe_logits(&mut tm, phi);
        let row = tm.tape.value(logits);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / sample.len() as f64)
}

/// One denoising forward/backward for a normalized target `x0`. Returns
/// the (unweighted) head and body MSE components.
#[allow(clippy::too_many_arguments)]
fn denoise_sample(
    model: &ModelState,
    mask: TrainMask,
    obs: &Observation,
    tokens: &[usize],
    proprio: &Array2<f64>,
    x0: &Array2<f64>,
    mask_body: f64,
    tc: &TrainConfig,
    rng: &mut ChaCha8Rng,
    batch_scale: f64,
    grads: &mut [Option<Array2<f64>>],
) -> Result<(f64, f64)> {
    let cfg = &model.config;
    let act_dim = 2 + cfg.d_body;
    let lambda_other = if matches!(tc.stage, Stage::Stage1) { 0.0 } else { tc.lambda_other };
    let (noisy, tau, eps_head, eps_body) = if cfg.direct_regression {
        // regression mode: the "noise" targets are the clean actions and
        // the denoiser sees a zero chunk at tau 0
        let eps_head = x0.slice(ndarray::s![.., ..2]).to_owned();
        let eps_body = x0.slice(ndarray::s![.., 2..]).to_owned();
        (Array2::zeros((cfg.k, act_dim)), 0, eps_head, eps_body)
    } else {
        let tau = rng.gen_range(0..cfg.t_diff);
        let eps = diffusion::gaussian(rng, cfg.k, act_dim);
        let abar = diffusion::alpha_bar_schedule(cfg.t_diff)[tau];
        let noisy = diffusion::add_noise(x0, &eps, abar);
        let eps_head = eps.slice(ndarray::s![.., ..2]).to_owned();
        let eps_body = eps.slice(ndarray::s![.., 2..]).to_owned();
        (noisy, tau, eps_head, eps_body)
    };
    let mut tm = TapeModel::new(model, mask);
    let phi = net::encode_observation(&mut tm, obs, tokens, cfg.adapter_enabled)?;
    let ctx = if cfg.spatial_injection {
        let f = net::encode_spatial(&mut tm, obs, true)?;
        net::fuse_context(&mut tm, phi, f)
    } else {
        phi
    };
    let pred: NoisePrediction = net::predict_noise(&mut tm, ctx, &noisy, tau, proprio);
    let loss = net::denoising_loss(
        &mut tm,
        &pred,
        &eps_head,
        &eps_body,
        tc.lambda_head,
        lambda_other,
        mask_body,
    );
    let scaled = tm.tape.mul_const(loss, batch_scale);
    // component bookkeeping from the same tape values
    let th = tm.tape.constant(eps_head);
    let tb = tm.tape.constant(eps_body);
    let mh = tm.tape.mse(pred.eps_head, th);
    let mb = tm.tape.mse(pred.eps_body, tb);
    let head_comp = tm.tape.scalar(mh) * batch_scale;
    let body_comp = tm.tape.scalar(mb) * mask_body * batch_scale;
    tm.tape.backward(scaled, grads);
    Ok((head_comp, body_comp))
}

/// Stage 1: aligns the camera branch on perception records. Trains the
/// adapter, the DiT trunk, and the camera decoder; everything else is
/// frozen and checksum-verified.
pub fn train_stage1(
    run: &mut TrainRun,
    records: &[DatasetRecord],
    cfg: &StackConfig,
) -> Result<Vec<LogLine>> {
    let tc = TrainConfig { stage: Stage::Stage1, ..cfg.train.clone() };
    let pool: Vec<&DatasetRecord> = records
        .iter()
        .filter(|r| r.split == crate::viewgen::Split::Train)
        .collect();
    if pool.is_empty() {
        return Err(Error::Config("stage 1 needs a non-empty train split".into()));
    }
    if run.step == 0 {
        fit_head_norm(&mut run.model, records);
    }
    let val: Vec<&DatasetRecord> = records
        .iter()
        .filter(|r| r.split == crate::viewgen::Split::Val)
        .take(48)
        .collect();
    let mask = stage_mask(&tc, &run.model.config);
    let guard = FreezeGuard::new(&run.model, mask);
    let mut log = Vec::new();
    while run.step < tc.steps {
        let step = run.step;
        let mut rng = derive_rng(tc.seed, 0x73746731 ^ (step as u64) << 1);
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; run.model.params.len()];
        let scale = 1.0 / tc.batch_size as f64;
        let (mut head_sum, mut body_sum) = (0.0, 0.0);
        for _ in 0..tc.batch_size {
            let record = pool[rng.gen_range(0..pool.len())];
            let (_, obs) = record_observation(record)?;
            let x0 = perception_x0(record, &run.model);
            let prop = features::proprio_vector(&perception_proprio(record));
            let (h, b) = denoise_sample(
                &run.model,
                mask,
                &obs,
                &record.instruction.tokens,
                &prop,
                &x0,
                0.0,
                &tc,
                &mut rng,
                scale,
                &mut grads,
            )?;
            head_sum += h;
            body_sum += b;
        }
        let total = tc.lambda_head * head_sum;
        if !total.is_finite() {
            return Err(Error::NumericalFault(format!("stage-1 loss diverged at step {step}")));
        }
        run.opt.step(&mut run.model, &grads, mask, &tc);
        run.step += 1;
        let at_eval = tc.eval_every > 0 && run.step % tc.eval_every == 0;
        let at_ckpt = tc.checkpoint_every > 0 && run.step % tc.checkpoint_every == 0;
        if at_eval || at_ckpt || run.step == tc.steps {
            if at_ckpt {
                guard.verify(&run.model)?;
            }
            let val_metric = if at_eval || run.step == tc.steps {
                Some(validation_angular_mae(&run.model, &val, cfg)?)
            } else {
                None
            };
            log.push(LogLine {
                step: run.step,
                loss: total,
                loss_head: head_sum,
                loss_body: body_sum,
                lr: tc.learning_rate,
                val_metric,
                checksums: at_ckpt.then(|| run.model.all_checksums()),
            });
        }
    }
    guard.verify(&run.model)?;
    Ok(log)
}

/// Open-loop validation: one sampled chunk per record, accumulated head
/// deltas against the record's total ground-truth delta, MAE over both
/// axes in degrees.
pub fn validation_angular_mae(
    state: &ModelState,
    records: &[&DatasetRecord],
    cfg: &StackConfig,
) -> Result<f64> {
    if records.is_empty() {
        return Ok(f64::NAN);
    }
    let caps = ActionCaps {
        head_step: cfg.viewgen.per_step_cap,
        body: vec![cfg.arm.joint_delta_cap; state.config.d_body],
    };
    let mut total = 0.0;
    for record in records {
        let (_, obs) = record_observation(record)?;
        let chunk = diffusion::sample_chunk(
            state,
            &obs,
            &record.instruction.tokens,
            &perception_proprio(record),
            &caps,
            record.scene_seed,
            state.config.adapter_enabled,
            state.config.spatial_injection,
        )?;
        let (mut dp, mut dy) = (0.0, 0.0);
        for row in chunk.rows() {
            dp += row[0];
            dy += row[1];
        }
        total += (dp - record.total_delta.0).abs() + (dy - record.total_delta.1).abs();
    }
    Ok(total / (2.0 * records.len() as f64))
}

/// Stage 2: mixed fine-tuning over perception records and demonstration
/// windows. The adapter and base are frozen (checksummed at every
/// checkpoint); the trunk, both decoders, and the spatial/fusion groups
/// train unless narrowed by config flags.
pub fn train_stage2(
    run: &mut TrainRun,
    records: &[DatasetRecord],
    demos: &[Demonstration],
    cfg: &StackConfig,
    stage1_loaded: bool,
) -> Result<Vec<LogLine>> {
    let tc = TrainConfig { stage: Stage::Stage2, ..cfg.train.clone() };
    if !stage1_loaded && !tc.allow_no_stage1 {
        return Err(Error::Config(
            "stage 2 requires a stage-1 checkpoint (or the no-stage1 ablation flag)".into(),
        ));
    }
    if tc.lambda_head <= 0.0 || tc.lambda_other <= 0.0 {
        return Err(Error::Config("loss weights must be positive".into()));
    }
    let perception: Vec<&DatasetRecord> = records
        .iter()
        .filter(|r| r.split == crate::viewgen::Split::Train)
        .collect();
    if demos.is_empty() {
        return Err(Error::Config("stage 2 needs at least one demonstration".into()));
    }
    if run.step == 0 {
        fit_body_norm(&mut run.model, demos);
    }
    let mask = stage_mask(&tc, &run.model.config);
    let guard = FreezeGuard::new(&run.model, mask);
    // a zero-ratio mixture never draws perception records; the pool may be
    // empty in that configuration
    let ratio = if perception.is_empty() { 0.0 } else { tc.mixture_ratio };
    let mut stream = mix_datasets(perception.len().max(1), demos.len(), ratio, tc.seed)?;
    // fast-forward the stream on resume so the draw sequence matches an
    // uninterrupted run
    for _ in 0..run.step * tc.batch_size {
        stream.next();
    }
    let mut log = Vec::new();
    while run.step < tc.steps {
        let step = run.step;
        let mut rng = derive_rng(tc.seed, 0x73746732 ^ (step as u64) << 1);
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; run.model.params.len()];
        let scale = 1.0 / tc.batch_size as f64;
        let (mut head_sum, mut body_sum) = (0.0, 0.0);
        for _ in 0..tc.batch_size {
            let (h, b) = match stream.next().unwrap() {
                MixSource::Perception(i) => {
                    let record = perception[i];
                    let (_, obs) = record_observation(record)?;
                    let x0 = perception_x0(record, &run.model);
                    let prop = features::proprio_vector(&perception_proprio(record));
                    denoise_sample(
                        &run.model,
                        mask,
                        &obs,
                        &record.instruction.tokens,
                        &prop,
                        &x0,
                        0.0,
                        &tc,
                        &mut rng,
                        scale,
                        &mut grads,
                    )?
                }
                MixSource::Manipulation(i) => {
                    let demo = &demos[i];
                    let t = rng.gen_range(0..demo.steps.len());
                    let state = demo_prefix(demo, t, cfg)?;
                    let obs = state.observe();
                    let (tokens, _) = vocab::tokenize(&demo.task.instruction);
                    let x0 = demo_x0(demo, t, &run.model);
                    let prop = features::proprio_vector(&state.proprio);
                    denoise_sample(
                        &run.model,
                        mask,
                        &obs,
                        &tokens,
                        &prop,
                        &x0,
                        1.0,
                        &tc,
                        &mut rng,
                        scale,
                        &mut grads,
                    )?
                }
            };
            head_sum += h;
            body_sum += b;
        }
        let total = tc.lambda_head * head_sum + tc.lambda_other * body_sum;
        if !total.is_finite() {
            return Err(Error::NumericalFault(format!("stage-2 loss diverged at step {step}")));
        }
        run.opt.step(&mut run.model, &grads, mask, &tc);
        run.step += 1;
        let at_eval = tc.eval_every > 0 && run.step % tc.eval_every == 0;
        let at_ckpt = tc.checkpoint_every > 0 && run.step % tc.checkpoint_every == 0;
        if at_eval || at_ckpt || run.step == tc.steps {
            if at_ckpt {
                guard.verify(&run.model)?;
            }
            log.push(LogLine {
                step: run.step,
                loss: total,
                loss_head: head_sum,
                loss_body: body_sum,
                lr: tc.learning_rate,
                val_metric: None,
                checksums: at_ckpt.then(|| run.model.all_checksums()),
            });
        }
    }
    guard.verify(&run.model)?;
    Ok(log)
}
