//! Behavior-cloning probe: a small action head on top of the encoder's pooled
//! features, closed-loop evaluation in the pick-and-place scene, and the
//! ablation matrix comparing encoder initializations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DemoSet};
use crate::encoder::{Encoder, EncoderConfig};
use crate::env::{self, EnvState, SceneConfig, SurfaceTemplate, Vec3};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{self, Adam, Grads, Linear, ParamStore};
use crate::rng::{self, Rng};
use crate::trainer::{self, Checkpoint, ConditionMode, OptimizerConfig, PretrainConfig};

/// Anything that maps an observation history to an action.
pub trait Controller: Sync {
    /// Number of most recent observations passed to [`Controller::act`].
    fn history_len(&self) -> usize {
        1
    }

    /// `history` holds the last `history_len` observations, oldest first,
    /// padded by repeating the first one; `past_actions` the actions taken
    /// before each of them (zeros before the episode start).
    fn act(&self, history: &[ArrayView2<'_, f64>], past_actions: &[Vec3], state: &EnvState, rng: &mut Rng) -> Result<Vec3>;
}

/// Privileged scripted expert.
pub struct ExpertController {
    pub scene: SceneConfig,
}

impl Controller for ExpertController {
    fn act(&self, _: &[ArrayView2<'_, f64>], _: &[Vec3], state: &EnvState, _: &mut Rng) -> Result<Vec3> {
        Ok(env::expert_action(state, &self.scene))
    }
}

/// Uniform actions in the per-step box.
pub struct RandomController {
    pub max_step: f64,
}

impl Controller for RandomController {
    fn act(&self, _: &[ArrayView2<'_, f64>], _: &[Vec3], _: &EnvState, rng: &mut Rng) -> Result<Vec3> {
        let m = self.max_step;
        Ok([rng.random_range(-m..=m), rng.random_range(-m..=m), rng.random_range(-m..=m)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Encoder step size as a fraction of the head's.
    pub encoder_step_scale: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            head_hidden: 64,
            epochs: 40,
            batch_size: 32,
            optimizer: OptimizerConfig {
                step_size: 3e-3,
                ..OptimizerConfig::default()
            },
            encoder_step_scale: 0.1,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("head_hidden, epochs and batch_size must be >= 1"));
        }
        if !(self.encoder_step_scale >= 0.0 && self.encoder_step_scale.is_finite()) {
            return Err(Error::invalid("encoder_step_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Encoder plus action head.
#[derive(Clone, Debug)]
pub struct Policy {
    pub encoder: Encoder,
    pub head: ParamStore,
    pub freeze_encoder: bool,
    hidden: Linear,
    out: Linear,
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder && self.head == other.head && self.freeze_encoder == other.freeze_encoder
    }
}

struct PolicyCache {
    encoder: crate::encoder::EncoderCache,
    ctx: Array2<f64>,
    pre: Array2<f64>,
    hid: Array2<f64>,
}

impl Policy {
    pub fn new(encoder: Encoder, head_hidden: usize, action_dim: usize, freeze_encoder: bool, seed: u64) -> Self {
        let mut r = rng::rng_from(seed, &[rng::stream::HEAD_INIT]);
        let mut head = ParamStore::new();
        let ctx = encoder.config().context_channels();
        let hidden = Linear::new(&mut head, "head.hidden", ctx, head_hidden, &mut r);
        let out = Linear::new(&mut head, "head.out", head_hidden, action_dim, &mut r);
        Policy {
            encoder,
            head,
            freeze_encoder,
            hidden,
            out,
        }
    }

    pub fn history_frames(&self) -> usize {
        self.encoder.config().history_frames
    }

    fn forward(&self, history: &[ArrayView2<'_, f64>], actions: Option<&[Vec<f64>]>) -> Result<(Array2<f64>, PolicyCache)> {
        let (latent, enc_cache) = self.encoder.forward(history, actions)?;
        let ctx = latent.context.insert_axis(ndarray::Axis(0));
        let pre = self.hidden.forward(&self.head, ctx.view());
        let hid = nn::silu(pre.view());
        let y = self.out.forward(&self.head, hid.view());
        Ok((
            y,
            PolicyCache {
                encoder: enc_cache,
                ctx,
                pre,
                hid,
            },
        ))
    }

    /// Predicted action for an observation history.
    pub fn predict(&self, history: &[ArrayView2<'_, f64>], actions: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        Ok(self.forward(history, actions)?.0.row(0).to_vec())
    }

    fn backward(&self, cache: &PolicyCache, dy: ArrayView2<'_, f64>, head: &mut Grads, enc: Option<&mut Grads>) {
        let d_hid = self.out.backward(&self.head, cache.hid.view(), dy, head);
        let d_pre = nn::silu_backward(cache.pre.view(), d_hid.view());
        let d_ctx = self.hidden.backward(&self.head, cache.ctx.view(), d_pre.view(), head);
        if let Some(g) = enc {
            self.encoder.backward(&cache.encoder, None, Some(d_ctx.row(0)), g);
        }
    }
}

impl Controller for Policy {
    fn history_len(&self) -> usize {
        self.history_frames()
    }

    fn act(&self, history: &[ArrayView2<'_, f64>], past_actions: &[Vec3], _: &EnvState, _: &mut Rng) -> Result<Vec3> {
        let acts: Option<Vec<Vec<f64>>> = self
            .encoder
            .config()
            .use_actions
            .then(|| past_actions.iter().map(|a| a.to_vec()).collect());
        let a = self.predict(history, acts.as_deref())?;
        Ok([a[0], a[1], a[2]])
    }
}

/// Where the policy encoder's weights come from.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInit<'a> {
    Pretrained(&'a Checkpoint),
    Fresh { config: &'a EncoderConfig, seed: u64 },
}

/// One BC example: frame `frame` of trajectory `trajectory`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BcIndex {
    trajectory: usize,
    frame: usize,
}

fn bc_history(set: &DemoSet, ix: BcIndex, k: usize) -> Vec<ArrayView2<'_, f64>> {
    let frames = &set.trajectories[ix.trajectory].frames;
    (0..k)
        .map(|j| frames[(ix.frame + j + 1).saturating_sub(k)].observation.view())
        .collect()
}

fn bc_actions(set: &DemoSet, ix: BcIndex, k: usize) -> Vec<Vec<f64>> {
    let frames = &set.trajectories[ix.trajectory].frames;
    let a = set.action_dim();
    (0..k)
        .map(|j| {
            let f = ix.frame + j;
            if f >= k {
                frames[f - k].action.clone()
            } else {
                vec![0.0; a]
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

fn bc_example(policy: &Policy, set: &DemoSet, ix: BcIndex) -> Result<(Array2<f64>, PolicyCache, Array2<f64>)> {
    let k = policy.history_frames();
    let hist = bc_history(set, ix, k);
    let acts = policy.encoder.config().use_actions.then(|| bc_actions(set, ix, k));
    let (y, cache) = policy.forward(&hist, acts.as_deref())?;
    let target = &set.trajectories[ix.trajectory].frames[ix.frame].action;
    let diff = &y - &ndarray::ArrayView1::from(target.as_slice()).insert_axis(ndarray::Axis(0));
    Ok((diff, cache, y))
}

/// Mean action MSE of `policy` over every frame of `set`.
pub fn bc_loss(policy: &Policy, set: &DemoSet, exec: Exec) -> Result<f64> {
    let all = all_frames(set);
    let losses = exec.map(all.len(), |i| bc_example(policy, set, all[i]).map(|(d, _, _)| d.mapv(|v| v * v).mean().unwrap_or(0.0)));
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn all_frames(set: &DemoSet) -> Vec<BcIndex> {
    set.trajectories
        .iter()
        .enumerate()
        .flat_map(|(trajectory, tr)| (0..tr.len()).map(move |frame| BcIndex { trajectory, frame }))
        .collect()
}

/// Trains the action head (and, unless frozen, the encoder) by regressing
/// demonstrated actions over all frames.
pub fn train_bc(
    demos: &DemoSet,
    init: EncoderInit<'_>,
    freeze_encoder: bool,
    config: &BcConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Policy, BcReport)> {
    config.validate()?;
    let encoder = match init {
        EncoderInit::Pretrained(ckpt) => {
            ckpt.check_corpus(demos)?;
            ckpt.encoder()?
        }
        EncoderInit::Fresh { config, seed } => Encoder::init(config, seed)?,
    };
    if encoder.config().use_actions && encoder.config().action_dim != demos.action_dim() {
        return Err(Error::invalid("encoder action_dim does not match the corpus"));
    }
    let mut policy = Policy::new(encoder, config.head_hidden, demos.action_dim(), freeze_encoder, seed);
    let all = all_frames(demos);
    let steps = all.len().div_ceil(config.batch_size);
    let opt = &config.optimizer;
    let mut head_opt = Adam::new(&policy.head, opt.step_size, opt.beta1, opt.beta2);
    let mut enc_opt = Adam::new(policy.encoder.params(), opt.step_size, opt.beta1, opt.beta2);
    let initial_loss = bc_loss(&policy, demos, exec)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let batch_seed = rng::derive_path(seed, &[rng::stream::BC_BATCH, epoch as u64, step as u64]);
            let mut r = rng::rng_from(batch_seed, &[]);
            let batch: Vec<BcIndex> = (0..config.batch_size).map(|_| all[r.random_range(0..all.len())]).collect();
            let p = &policy;
            let parts = exec.map(batch.len(), |b| -> Result<(f64, Grads, Option<Grads>)> {
                let (diff, cache, _) = bc_example(p, demos, batch[b])?;
                let loss = diff.mapv(|v| v * v).mean().unwrap_or(0.0);
                let dy = diff.mapv(|v| 2.0 * v / diff.len() as f64);
                let mut hg = p.head.zero_grads();
                let mut eg = (!p.freeze_encoder).then(|| p.encoder.params().zero_grads());
                p.backward(&cache, dy.view(), &mut hg, eg.as_mut());
                Ok((loss, hg, eg))
            });
            let parts = parts
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .map_err(|e| trainer::at_step(e, epoch, batch_seed))?;
            let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
            let mut hgs = Vec::with_capacity(parts.len());
            let mut egs = Vec::with_capacity(parts.len());
            for (_, hg, eg) in parts {
                hgs.push(hg);
                egs.extend(eg);
            }
            let hg = nn::mean_grads(hgs);
            if !loss.is_finite() || !hg.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite BC loss at epoch {} batch seed {batch_seed}",
                    epoch + 1
                )));
            }
            let lr = opt.step_size_at(epoch * steps + step, config.epochs * steps);
            head_opt.step_size = lr;
            head_opt.step(&mut policy.head, &hg);
            if !policy.freeze_encoder {
                let eg = nn::mean_grads(egs);
                if !eg.all_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite encoder gradient at epoch {} batch seed {batch_seed}",
                        epoch + 1
                    )));
                }
                enc_opt.step_size = lr * config.encoder_step_scale;
                enc_opt.step(policy.encoder.params_mut(), &eg);
            }
            total += loss;
        }
        epoch_losses.push(total / steps as f64);
    }
    let final_loss = bc_loss(&policy, demos, exec)?;
    Ok((
        policy,
        BcReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    /// Whether the cube was picked up at any point.
    pub grasped: bool,
    pub steps: usize,
    pub final_object_to_goal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub success_rate: f64,
    pub episodes: Vec<EpisodeOutcome>,
}

/// Initial state of evaluation episode `i`; same distribution as the demos.
pub fn evaluation_state(scene: &SceneConfig, rng_seed: u64, i: usize) -> Result<EnvState> {
    dataset::episode_initial_state(scene, rng::derive(rng_seed, rng::stream::EPISODE), i)
}

/// Runs one closed-loop episode.
pub fn rollout(
    controller: &dyn Controller,
    scene: &SceneConfig,
    template: &SurfaceTemplate,
    initial: EnvState,
    rng_seed: u64,
) -> Result<EpisodeOutcome> {
    let k = controller.history_len().max(1);
    let mut r = rng::rng_from(rng_seed, &[rng::stream::RANDOM_POLICY]);
    let mut state = initial;
    let mut observations = vec![template.place(&state)];
    let mut actions: Vec<Vec3> = Vec::new();
    while state.step_count < scene.horizon {
        let t = observations.len() - 1;
        let hist: Vec<ArrayView2<'_, f64>> = (0..k)
            .map(|j| observations[(t + j + 1).saturating_sub(k)].view())
            .collect();
        let past: Vec<Vec3> = (0..k)
            .map(|j| {
                let f = t + j;
                if f >= k {
                    actions[f - k]
                } else {
                    [0.0; 3]
                }
            })
            .collect();
        let a = controller.act(&hist, &past, &state, &mut r)?;
        state = env::env_step(&state, a, scene);
        if state.succeeded(scene.success_tolerance) {
            break;
        }
        actions.push(a);
        observations.push(template.place(&state));
    }
    Ok(EpisodeOutcome {
        success: state.succeeded(scene.success_tolerance),
        grasped: state.grasped,
        steps: state.step_count,
        final_object_to_goal: state.object_to_goal(),
    })
}

/// Success rate of `controller` over `n_episodes` closed-loop episodes.
pub fn evaluate_policy(
    controller: &dyn Controller,
    scene: &SceneConfig,
    n_episodes: usize,
    rng_seed: u64,
    exec: Exec,
) -> Result<PolicyEvaluation> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be >= 1"));
    }
    scene.validate()?;
    let template = SurfaceTemplate::new(scene, scene.surface_seed)?;
    let episodes = exec
        .map(n_episodes, |i| {
            let init = evaluation_state(scene, rng_seed, i)?;
            rollout(controller, scene, &template, init, rng::derive(rng_seed, i as u64))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let successes = episodes.iter().filter(|e| e.success).count();
    Ok(PolicyEvaluation {
        success_rate: successes as f64 / n_episodes as f64,
        episodes,
    })
}

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Pretrained,
    RandomInit,
    CurrentFrameCondition,
    Frozen,
    KHistory(usize),
}

impl Arm {
    pub const DEFAULT_MATRIX: [Arm; 8] = [
        Arm::Pretrained,
        Arm::RandomInit,
        Arm::CurrentFrameCondition,
        Arm::Frozen,
        Arm::KHistory(1),
        Arm::KHistory(2),
        Arm::KHistory(3),
        Arm::KHistory(4),
    ];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Pretrained => f.write_str("pretrained"),
            Arm::RandomInit => f.write_str("random_init"),
            Arm::CurrentFrameCondition => f.write_str("current_frame_condition"),
            Arm::Frozen => f.write_str("frozen"),
            Arm::KHistory(k) => write!(f, "k_history_{k}"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrained" => Arm::Pretrained,
            "random_init" => Arm::RandomInit,
            "current_frame_condition" => Arm::CurrentFrameCondition,
            "frozen" => Arm::Frozen,
            _ => match s.strip_prefix("k_history_").and_then(|k| k.parse().ok()) {
                Some(k) if k >= 1 => Arm::KHistory(k),
                _ => return Err(Error::Config(format!("unknown arm {s:?}"))),
            },
        })
    }
}

impl Serialize for Arm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fully resolved experimental condition of an arm for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSpec {
    /// Pre-training run whose encoder initializes the policy; `None` for a
    /// fresh encoder.
    pub pretrain: Option<PretrainConfig>,
    pub encoder: EncoderConfig,
    pub encoder_seed: u64,
    pub freeze_encoder: bool,
    pub bc: BcConfig,
    pub bc_seed: u64,
    pub eval_seed: u64,
    pub eval_episodes: usize,
}

/// Settings shared by every arm of the matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub bc: BcConfig,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            bc: BcConfig::default(),
            eval_episodes: 20,
            seeds: vec![0, 1, 2],
            arms: Arm::DEFAULT_MATRIX.to_vec(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        self.bc.validate()?;
        if self.eval_episodes == 0 || self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::invalid("eval_episodes, seeds and arms must be non-empty"));
        }
        Ok(())
    }
}

/// Resolves `arm` for `seed` against the base pre-training config.
pub fn arm_spec(arm: Arm, seed: u64, pretrain: &PretrainConfig, probe: &ProbeConfig) -> ArmSpec {
    let mut pre = pretrain.clone();
    pre.seed = seed;
    let mut freeze = false;
    let mut pretrained = true;
    match arm {
        Arm::Pretrained => {}
        Arm::RandomInit => pretrained = false,
        Arm::CurrentFrameCondition => pre.condition_mode = ConditionMode::CurrentFrame,
        Arm::Frozen => freeze = true,
        Arm::KHistory(k) => pre.encoder.history_frames = k,
    }
    ArmSpec {
        encoder: pre.encoder.clone(),
        pretrain: pretrained.then_some(pre),
        encoder_seed: seed,
        freeze_encoder: freeze,
        bc: probe.bc.clone(),
        bc_seed: rng::derive(seed, rng::stream::HEAD_INIT),
        eval_seed: rng::derive(seed, rng::stream::EPISODE),
        eval_episodes: probe.eval_episodes,
    }
}

/// Demonstrations used for one seed of the matrix.
#[derive(Clone, Copy, Debug)]
pub enum CorpusSource<'a> {
    /// A fresh synthetic corpus per seed, generated with that seed.
    Generate { scene: &'a SceneConfig, n_trajectories: usize },
    /// The same corpus for every seed.
    Fixed(&'a DemoSet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: Arm,
    pub success: Vec<f64>,
    pub median: f64,
    pub bc_initial_loss: Vec<f64>,
    pub bc_final_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub rows: Vec<ArmRow>,
}

impl AblationReport {
    pub fn row(&self, arm: Arm) -> Option<&ArmRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",median\n");
        for r in &self.rows {
            out.push_str(&r.arm.to_string());
            for v in &r.success {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.median));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Key of a cached pre-training run within one seed.
pub type PretrainKey = (u64, ConditionMode, usize);

/// Report plus every checkpoint pre-trained along the way.
pub struct AblationOutcome {
    pub report: AblationReport,
    pub checkpoints: BTreeMap<PretrainKey, Checkpoint>,
}

/// Runs every requested arm for every seed. Arms that need the same
/// pre-training run share it; a supplied checkpoint is used for arms whose
/// condition mode and history length match it.
pub fn run_ablation_matrix(
    corpus: CorpusSource<'_>,
    pretrain: &PretrainConfig,
    probe: &ProbeConfig,
    supplied: Option<&Checkpoint>,
    exec: Exec,
    mut progress: impl FnMut(&str),
) -> Result<AblationOutcome> {
    probe.validate()?;
    pretrain.validate()?;
    let mut checkpoints: BTreeMap<PretrainKey, Checkpoint> = BTreeMap::new();
    let mut cells: BTreeMap<Arm, Vec<(f64, BcReport)>> = BTreeMap::new();
    for &seed in &probe.seeds {
        let generated;
        let demos = match corpus {
            CorpusSource::Fixed(d) => d,
            CorpusSource::Generate { scene, n_trajectories } => {
                generated = dataset::generate_synthetic(scene, n_trajectories, seed)?;
                &generated
            }
        };
        let scene = &demos.manifest.generator;
        for &arm in &probe.arms {
            let spec = arm_spec(arm, seed, pretrain, probe);
            let (policy, bc) = match &spec.pretrain {
                Some(pre) => {
                    let key = (seed, pre.condition_mode, pre.encoder.history_frames);
                    let matches_supplied = supplied.filter(|c| {
                        c.config.condition_mode == pre.condition_mode
                            && c.config.encoder.history_frames == pre.encoder.history_frames
                    });
                    let ckpt = match matches_supplied {
                        Some(c) => c,
                        None => {
                            if let std::collections::btree_map::Entry::Vacant(slot) = checkpoints.entry(key) {
                                progress(&format!("seed {seed}: pre-training {:?} k={}", key.1, key.2));
                                slot.insert(trainer::pretrain_with(demos, pre, exec, |_| {})?);
                            }
                            &checkpoints[&key]
                        }
                    };
                    train_bc(demos, EncoderInit::Pretrained(ckpt), spec.freeze_encoder, &spec.bc, spec.bc_seed, exec)?
                }
                None => train_bc(
                    demos,
                    EncoderInit::Fresh {
                        config: &spec.encoder,
                        seed: spec.encoder_seed,
                    },
                    spec.freeze_encoder,
                    &spec.bc,
                    spec.bc_seed,
                    exec,
                )?,
            };
            let eval = evaluate_policy(&policy, scene, spec.eval_episodes, spec.eval_seed, exec)?;
            progress(&format!("seed {seed}: {arm} success {:.2}", eval.success_rate));
            cells.entry(arm).or_default().push((eval.success_rate, bc));
        }
    }
    let rows = probe
        .arms
        .iter()
        .map(|&arm| {
            let c = &cells[&arm];
            let success: Vec<f64> = c.iter().map(|(s, _)| *s).collect();
            ArmRow {
                arm,
                median: median(&success),
                success,
                bc_initial_loss: c.iter().map(|(_, b)| b.initial_loss).collect(),
                bc_final_loss: c.iter().map(|(_, b)| b.final_loss).collect(),
            }
        })
        .collect();
    Ok(AblationOutcome {
        report: AblationReport {
            seeds: probe.seeds.clone(),
            eval_episodes: probe.eval_episodes,
            rows,
        },
        checkpoints,
    })
}
