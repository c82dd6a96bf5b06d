//! Next-frame pre-training loop, checkpoints and prediction-quality metrics.
//!
//! One optimization step draws a batch of (history, target) pairs, a
//! timestep and Gaussian noise per pair, noises the target in closed form,
//! encodes the history into the latent condition and regresses the noise
//! from the augmented cloud. Encoder and denoiser are updated jointly.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cloud::{chamfer_distance_with, PointCloud};
use crate::dataset::{self, DemoSet, PairIndex};
use crate::denoiser::{AugmentedCloud, Denoiser, DenoiserConfig};
use crate::diffusion::{self, NoiseSchedule, ScheduleConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{self, Adam, Grads, ParamStore};
use crate::rng;

/// Which frame(s) condition the prediction of frame `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Frames `t-k .. t-1`.
    #[default]
    PreviousFrame,
    /// Frames `t-k+1 .. t`: the clean target itself is visible (ablation).
    CurrentFrame,
}

/// What the denoiser network's output layer estimates. Either way the
/// model reports a noise prediction and is trained on the noise loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The network output is the noise estimate.
    Noise,
    /// The network output `r` is a clean-frame estimate blended with the
    /// noisy input by a fixed Wiener gate: with `a = sqrt(abar)`,
    /// `s = sqrt(1 - abar)` and residual scale `d`,
    /// `eps = s (x_t - a r) / (a^2 d^2 + s^2)`.
    #[default]
    CleanFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Anneal the step size to zero along a half cosine over the run.
    pub cosine_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            cosine_decay: true,
        }
    }
}

impl OptimizerConfig {
    /// Step size for optimizer step `step` of `total`.
    pub fn step_size_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine_decay || total == 0 {
            return self.step_size;
        }
        let frac = step as f64 / total as f64;
        0.5 * self.step_size * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub prediction: Prediction,
    /// Residual scale `d` of the clean-frame gate.
    pub residual_scale: f64,
    /// Add the most recent history frame to the clean-frame estimate, so the
    /// network output is a per-point displacement.
    pub anchored: bool,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the admissible pairs.
    pub steps_per_epoch: usize,
    pub condition_mode: ConditionMode,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            prediction: Prediction::default(),
            residual_scale: 0.02,
            anchored: true,
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 40,
            steps_per_epoch: 0,
            condition_mode: ConditionMode::PreviousFrame,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        self.schedule.build()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be >= 1"));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale.is_finite()) {
            return Err(Error::invalid("residual_scale must be positive"));
        }
        if !(self.optimizer.step_size >= 0.0 && self.optimizer.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Encoder, denoiser and schedule used together.
#[derive(Clone, Debug, PartialEq)]
pub struct FvpModel {
    pub encoder: Encoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub condition_mode: ConditionMode,
    pub prediction: Prediction,
    pub residual_scale: f64,
    pub anchored: bool,
}

/// Loss and gradients for one training example.
pub struct SampleGrad {
    pub loss: f64,
    pub encoder: Grads,
    pub denoiser: Grads,
}

impl FvpModel {
    pub fn init(config: &PretrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let encoder = Encoder::init(&config.encoder, config.seed)?;
        let denoiser = Denoiser::init(
            &config.denoiser,
            config.encoder.channels,
            schedule.num_steps(),
            config.seed,
        )?;
        Ok(FvpModel {
            encoder,
            denoiser,
            schedule,
            condition_mode: config.condition_mode,
            prediction: config.prediction,
            residual_scale: config.residual_scale,
            anchored: config.anchored,
        })
    }

    /// History frame indices conditioning target frame `target`.
    pub fn history_range(&self, target: usize) -> std::ops::Range<usize> {
        let k = self.encoder.config().history_frames;
        match self.condition_mode {
            ConditionMode::PreviousFrame => target - k..target,
            ConditionMode::CurrentFrame => target + 1 - k..target + 1,
        }
    }

    fn history_actions(&self, set: &DemoSet, ix: PairIndex) -> Option<Vec<Vec<f64>>> {
        // Actions taken at frames t-k .. t-1, whatever the condition mode.
        self.encoder.config().use_actions.then(|| {
            let k = self.encoder.config().history_frames;
            set.trajectories[ix.trajectory].frames[ix.target - k..ix.target]
                .iter()
                .map(|f| f.action.clone())
                .collect()
        })
    }

    fn history_views<'a>(&self, set: &'a DemoSet, ix: PairIndex) -> Vec<ArrayView2<'a, f64>> {
        set.trajectories[ix.trajectory].frames[self.history_range(ix.target)]
            .iter()
            .map(|f| f.observation.view())
            .collect()
    }

    /// The most recent history frame, when the clean-frame estimate is anchored on it.
    pub fn anchor<'a>(&self, set: &'a DemoSet, ix: PairIndex) -> Option<ArrayView2<'a, f64>> {
        (self.anchored && self.prediction == Prediction::CleanFrame).then(|| {
            let last = self.history_range(ix.target).end - 1;
            set.trajectories[ix.trajectory].frames[last].observation.view()
        })
    }

    /// Latent condition for predicting frame `ix.target`.
    pub fn condition(&self, set: &DemoSet, ix: PairIndex) -> Result<Array2<f64>> {
        let views = self.history_views(set, ix);
        let actions = self.history_actions(set, ix);
        Ok(self.encoder.forward(&views, actions.as_deref())?.0.features)
    }

    /// Noise estimate for the augmented cloud at step `t`.
    pub fn predict_noise(&self, aug: &AugmentedCloud, anchor: Option<ArrayView2<'_, f64>>, t: usize) -> Result<Array2<f64>> {
        let raw = self.denoiser.predict_noise(aug, t)?;
        Ok(self.raw_to_noise(raw, aug.coords(), anchor, t))
    }

    fn raw_to_noise(&self, mut raw: Array2<f64>, x_t: ArrayView2<'_, f64>, anchor: Option<ArrayView2<'_, f64>>, t: usize) -> Array2<f64> {
        match self.prediction {
            Prediction::Noise => raw,
            Prediction::CleanFrame => {
                if let Some(anchor) = anchor {
                    raw += &anchor;
                }
                let (a, s, den) = self.gate(t);
                ndarray::Zip::from(&x_t).and(&raw).map_collect(|&x, &r| s * (x - a * r) / den)
            }
        }
    }

    fn gate(&self, t: usize) -> (f64, f64, f64) {
        let abar = self.schedule.alpha_bar(t);
        let (a, s) = (abar.sqrt(), (1.0 - abar).sqrt());
        let d = self.residual_scale;
        (a, s, a * a * d * d + s * s)
    }

    /// Noise-prediction loss and its gradient for one (pair, t, noise) draw.
    pub fn loss_and_grad(&self, set: &DemoSet, ix: PairIndex, t: usize, noise: ArrayView2<'_, f64>) -> Result<SampleGrad> {
        let target = &set.trajectories[ix.trajectory].frames[ix.target].observation;
        let x_t = diffusion::forward_sample(target.view(), t, noise, &self.schedule)?;
        let views = self.history_views(set, ix);
        let actions = self.history_actions(set, ix);
        let (z, enc_cache) = self.encoder.forward(&views, actions.as_deref())?;
        let aug = AugmentedCloud::new(x_t.view(), z.features.view())?;
        let (raw, den_cache) = self.denoiser.forward(&aug, t)?;
        let eps_pred = self.raw_to_noise(raw, x_t.view(), self.anchor(set, ix), t);
        let loss = diffusion::diffusion_loss(eps_pred.view(), noise)?;
        let scale = match self.prediction {
            Prediction::Noise => 2.0 / eps_pred.len() as f64,
            Prediction::CleanFrame => {
                let (a, s, den) = self.gate(t);
                -2.0 * a * s / den / eps_pred.len() as f64
            }
        };
        let d_out = (&eps_pred - &noise).mapv(|v| v * scale);
        let mut dgrad = self.denoiser.params().zero_grads();
        let d_latent = self.denoiser.backward(&den_cache, d_out.view(), &mut dgrad);
        let mut egrad = self.encoder.params().zero_grads();
        self.encoder.backward(&enc_cache, Some(d_latent.view()), None, &mut egrad);
        Ok(SampleGrad {
            loss,
            encoder: egrad,
            denoiser: dgrad,
        })
    }

    /// Samples the next frame for pair `ix` by running the full reverse chain.
    pub fn sample(&self, set: &DemoSet, ix: PairIndex, seed: u64) -> Result<Array2<f64>> {
        let z = self.condition(set, ix)?;
        let anchor = self.anchor(set, ix);
        diffusion::sample_next_frame(
            |aug: &AugmentedCloud, t: usize| self.predict_noise(aug, anchor, t),
            z.view(),
            &self.schedule,
            set.n_points(),
            seed,
        )
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_seconds: f64,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FVPCKPT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PretrainConfig,
    pub n_points: usize,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub encoder: ParamStore,
    pub denoiser: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    schema_version: u32,
    config: PretrainConfig,
    n_points: usize,
    epoch: usize,
    loss_history: Vec<f64>,
    encoder_blocks: usize,
    denoiser_blocks: usize,
}

impl Checkpoint {
    /// Snapshot of a model; weights are rounded to the stored `f32` precision.
    pub fn from_model(model: &FvpModel, config: &PretrainConfig, n_points: usize, epoch: usize, loss_history: Vec<f64>) -> Self {
        let mut encoder = model.encoder.params().clone();
        let mut denoiser = model.denoiser.params().clone();
        encoder.round_to_f32();
        denoiser.round_to_f32();
        Checkpoint {
            config: config.clone(),
            n_points,
            epoch,
            loss_history,
            encoder,
            denoiser,
        }
    }

    pub fn model(&self) -> Result<FvpModel> {
        let schedule = self.config.schedule.build()?;
        let encoder = Encoder::with_params(&self.config.encoder, &self.encoder)?;
        let denoiser = Denoiser::with_params(
            &self.config.denoiser,
            self.config.encoder.channels,
            schedule.num_steps(),
            &self.denoiser,
        )?;
        Ok(FvpModel {
            encoder,
            denoiser,
            schedule,
            condition_mode: self.config.condition_mode,
            prediction: self.config.prediction,
            residual_scale: self.config.residual_scale,
            anchored: self.config.anchored,
        })
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::with_params(&self.config.encoder, &self.encoder)
    }

    /// Fails with a shape error when the corpus point count differs from training.
    pub fn check_corpus(&self, set: &DemoSet) -> Result<()> {
        if set.n_points() != self.n_points {
            return Err(Error::shape(format!(
                "checkpoint was trained on {}-point clouds, corpus has {}",
                self.n_points,
                set.n_points()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            n_points: self.n_points,
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            encoder_blocks: self.encoder.len(),
            denoiser_blocks: self.denoiser.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.encoder.iter().chain(self.denoiser.iter()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |msg: String| Error::CorruptCheckpoint { path: path.into(), msg };
        let mut cur = Cursor { bytes, at: 0 };
        let magic = cur.take(8).ok_or_else(|| corrupt("missing magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let hlen = cur.u32().ok_or_else(|| corrupt("truncated header length".into()))? as usize;
        let hbytes = cur.take(hlen).ok_or_else(|| corrupt("truncated header".into()))?;
        let raw: serde_json::Value =
            serde_json::from_slice(hbytes).map_err(|e| corrupt(format!("header: {e}")))?;
        let found = raw
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("header lacks schema_version".into()))? as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found,
            });
        }
        let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut stores = [ParamStore::new(), ParamStore::new()];
        for (si, count) in [header.encoder_blocks, header.denoiser_blocks].into_iter().enumerate() {
            for _ in 0..count {
                let nlen = cur.u32().ok_or_else(|| corrupt("truncated block name".into()))? as usize;
                let name = cur.take(nlen).ok_or_else(|| corrupt("truncated block name".into()))?;
                let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("block name is not UTF-8".into()))?;
                let rows = cur.u32().ok_or_else(|| corrupt(format!("{name}: truncated shape")))? as usize;
                let cols = cur.u32().ok_or_else(|| corrupt(format!("{name}: truncated shape")))? as usize;
                let data = cur
                    .take(rows * cols * 4)
                    .ok_or_else(|| corrupt(format!("{name}: truncated weights")))?;
                let vals: Vec<f64> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                stores[si].add(name, Array2::from_shape_vec((rows, cols), vals).expect("rows×cols"));
            }
        }
        if cur.at != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - cur.at)));
        }
        let [encoder, denoiser] = stores;
        let ckpt = Checkpoint {
            config: header.config,
            n_points: header.n_points,
            epoch: header.epoch,
            loss_history: header.loss_history,
            encoder,
            denoiser,
        };
        // validates names and shapes against the config
        ckpt.model().map_err(|e| corrupt(e.to_string()))?;
        Ok(ckpt)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.into() });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Seed for the pair draw of `(epoch, step)`.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    rng::derive_path(seed, &[epoch as u64, step as u64])
}

pub fn pretrain(demos: &DemoSet, config: &PretrainConfig) -> Result<Checkpoint> {
    pretrain_with(demos, config, Exec::default(), |_| {})
}

/// One optimization step's averaged loss and gradients.
pub fn batch_loss_and_grad(
    model: &FvpModel,
    demos: &DemoSet,
    batch: &[PairIndex],
    sample_seed: u64,
    exec: Exec,
) -> Result<(f64, Grads, Grads)> {
    let n = demos.n_points();
    let t_max = model.schedule.num_steps();
    let parts = exec.map(batch.len(), |b| {
        let mut r = rng::rng_from(sample_seed, &[rng::stream::DIFFUSION_T, b as u64]);
        let t = r.random_range(1..=t_max);
        let noise = diffusion::standard_normal(n, 3, &mut r);
        model.loss_and_grad(demos, batch[b], t, noise.view())
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|p| p.loss).sum::<f64>() / parts.len() as f64;
    let (eg, dg): (Vec<_>, Vec<_>) = parts.into_iter().map(|p| (p.encoder, p.denoiser)).unzip();
    Ok((loss, nn::mean_grads(eg), nn::mean_grads(dg)))
}

/// Runs pre-training, calling `on_epoch` after every epoch.
pub fn pretrain_with(
    demos: &DemoSet,
    config: &PretrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    let k = config.encoder.history_frames;
    let n_pairs = dataset::valid_pairs(demos, k)?.len();
    if config.encoder.use_actions && config.encoder.action_dim != demos.action_dim() {
        return Err(Error::invalid(format!(
            "encoder expects {}-dim actions, corpus has {}",
            config.encoder.action_dim,
            demos.action_dim()
        )));
    }
    let steps = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        n_pairs.div_ceil(config.batch_size)
    };
    let mut model = FvpModel::init(config)?;
    let opt = &config.optimizer;
    let mut enc_opt = Adam::new(model.encoder.params(), opt.step_size, opt.beta1, opt.beta2);
    let mut den_opt = Adam::new(model.denoiser.params(), opt.step_size, opt.beta1, opt.beta2);
    let start = Instant::now();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let seed = step_seed(config.seed, epoch, step);
            let batch = dataset::sample_pair_indices(demos, k, config.batch_size, seed)?;
            let (loss, eg, dg) = batch_loss_and_grad(&model, demos, &batch, seed, exec)
                .map_err(|e| at_step(e, epoch, seed))?;
            if !loss.is_finite() || !eg.all_finite() || !dg.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {} batch seed {seed}",
                    epoch + 1
                )));
            }
            let lr = opt.step_size_at(epoch * steps + step, config.epochs * steps);
            enc_opt.step_size = lr;
            den_opt.step_size = lr;
            enc_opt.step(model.encoder.params_mut(), &eg);
            den_opt.step(model.denoiser.params_mut(), &dg);
            total += loss;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / steps as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        history.push(record.loss);
        on_epoch(&record);
    }
    Ok(Checkpoint::from_model(&model, config, demos.n_points(), config.epochs, history))
}

/// Adds the epoch and batch seed to numerical failures.
pub(crate) fn at_step(err: Error, epoch: usize, batch_seed: u64) -> Error {
    match err {
        Error::Numerical(msg) => Error::Numerical(format!("{msg} at epoch {} batch seed {batch_seed}", epoch + 1)),
        other => other,
    }
}

/// Chamfer of one sampled prediction and of the copy baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub trajectory: usize,
    pub target: usize,
    pub predicted_chamfer: f64,
    pub copy_chamfer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub n_pairs: usize,
    pub mean_predicted_chamfer: f64,
    pub mean_copy_chamfer: f64,
    pub condition_mode: ConditionMode,
    pub pairs: Vec<PairMetrics>,
}

/// A sampled prediction with the frames it is compared against.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTriple {
    pub index: PairIndex,
    /// The most recent frame before the target.
    pub condition: PointCloud,
    pub predicted: PointCloud,
    pub truth: PointCloud,
}

/// Pairs and sampler seeds used by evaluation for a given seed.
pub fn evaluation_pairs(ckpt: &Checkpoint, held_out: &DemoSet, n_eval_pairs: usize, rng_seed: u64) -> Result<Vec<PairIndex>> {
    // Pairs are drawn for the previous-frame history length regardless of the
    // condition mode, so every mode sees the same targets.
    dataset::sample_pair_indices(
        held_out,
        ckpt.config.encoder.history_frames,
        n_eval_pairs,
        rng::derive(rng_seed, rng::stream::EVAL_PAIRS),
    )
}

pub fn predict_pairs(ckpt: &Checkpoint, held_out: &DemoSet, n_eval_pairs: usize, rng_seed: u64, exec: Exec) -> Result<Vec<PredictionTriple>> {
    ckpt.check_corpus(held_out)?;
    let model = ckpt.model()?;
    let pairs = evaluation_pairs(ckpt, held_out, n_eval_pairs, rng_seed)?;
    exec.map(pairs.len(), |i| {
        let ix = pairs[i];
        let seed = rng::derive_path(rng_seed, &[rng::stream::SAMPLER, i as u64]);
        let predicted = PointCloud::new(model.sample(held_out, ix, seed)?)?;
        let frames = &held_out.trajectories[ix.trajectory].frames;
        Ok(PredictionTriple {
            index: ix,
            condition: frames[ix.target - 1].observation.clone(),
            predicted,
            truth: frames[ix.target].observation.clone(),
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate_prediction(ckpt: &Checkpoint, held_out: &DemoSet, n_eval_pairs: usize, rng_seed: u64) -> Result<PredictionMetrics> {
    evaluate_prediction_with(ckpt, held_out, n_eval_pairs, rng_seed, Exec::default())
}

pub fn evaluate_prediction_with(
    ckpt: &Checkpoint,
    held_out: &DemoSet,
    n_eval_pairs: usize,
    rng_seed: u64,
    exec: Exec,
) -> Result<PredictionMetrics> {
    let triples = predict_pairs(ckpt, held_out, n_eval_pairs, rng_seed, exec)?;
    summarize_predictions(&triples, ckpt.config.condition_mode)
}

/// Chamfer metrics of already sampled triples.
pub fn summarize_predictions(triples: &[PredictionTriple], condition_mode: ConditionMode) -> Result<PredictionMetrics> {
    let pairs = triples
        .iter()
        .map(|tr| {
            Ok(PairMetrics {
                trajectory: tr.index.trajectory,
                target: tr.index.target,
                predicted_chamfer: chamfer_distance_with(tr.predicted.view(), tr.truth.view(), Exec::Sequential)?,
                copy_chamfer: chamfer_distance_with(tr.condition.view(), tr.truth.view(), Exec::Sequential)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len().max(1) as f64;
    Ok(PredictionMetrics {
        n_pairs: pairs.len(),
        mean_predicted_chamfer: pairs.iter().map(|p| p.predicted_chamfer).sum::<f64>() / n,
        mean_copy_chamfer: pairs.iter().map(|p| p.copy_chamfer).sum::<f64>() / n,
        condition_mode,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SceneConfig;

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig {
                channels: 8,
                hidden: 8,
                ..EncoderConfig::default()
            },
            denoiser: DenoiserConfig {
                hidden_width: 16,
                depth: 1,
                time_embed_dim: 8,
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig {
                num_steps: 10,
                beta_min: 1e-3,
                beta_max: 0.2,
            },
            batch_size: 4,
            epochs: 1,
            steps_per_epoch: 3,
            ..PretrainConfig::default()
        }
    }

    fn tiny_corpus() -> DemoSet {
        let scene = SceneConfig {
            n_points: 24,
            ..SceneConfig::default()
        };
        dataset::generate_synthetic(&scene, 2, 5).unwrap()
    }

    #[test]
    fn zero_step_size_freezes_weights() {
        let cfg = PretrainConfig {
            optimizer: OptimizerConfig {
                step_size: 0.0,
                ..OptimizerConfig::default()
            },
            ..tiny_config()
        };
        let ckpt = pretrain(&tiny_corpus(), &cfg).unwrap();
        let init = Checkpoint::from_model(&FvpModel::init(&cfg).unwrap(), &cfg, 24, 1, vec![]);
        assert_eq!(ckpt.encoder, init.encoder);
        assert_eq!(ckpt.denoiser, init.denoiser);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let ckpt = pretrain(&tiny_corpus(), &tiny_config()).unwrap();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn current_frame_history_includes_target() {
        let mut cfg = tiny_config();
        cfg.condition_mode = ConditionMode::CurrentFrame;
        cfg.encoder.history_frames = 2;
        let m = FvpModel::init(&cfg).unwrap();
        assert_eq!(m.history_range(5), 4..6);
        cfg.condition_mode = ConditionMode::PreviousFrame;
        let m = FvpModel::init(&cfg).unwrap();
        assert_eq!(m.history_range(5), 3..5);
    }

    #[test]
    fn parallel_and_sequential_batches_agree() {
        let demos = tiny_corpus();
        let model = FvpModel::init(&tiny_config()).unwrap();
        let batch = dataset::sample_pair_indices(&demos, 1, 6, 1).unwrap();
        let a = batch_loss_and_grad(&model, &demos, &batch, 9, Exec::Sequential).unwrap();
        let b = batch_loss_and_grad(&model, &demos, &batch, 9, Exec::Parallel).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
