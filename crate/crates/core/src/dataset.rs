//! Demonstration corpora: the scripted synthetic generator, on-disk storage
//! and training-pair sampling.
//!
//! On disk a corpus is a directory holding `manifest.json` plus one
//! `episode_NNNNN.bin` per trajectory. Each episode file is little-endian:
//! three `u32` (frame count, N, A) followed by, per frame, N×3 `f32`
//! coordinates then A `f32` action values.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::env::{self, EnvState, SceneConfig, SurfaceTemplate, Vec3};
use crate::error::{Error, Result};
use crate::rng;

pub const DEMOSET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const EPISODE_HEADER_BYTES: usize = 12;

/// One observation–action pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub observation: PointCloud,
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub n_points: usize,
    pub action_dim: usize,
    pub n_trajectories: usize,
    pub total_frames: usize,
    pub frame_counts: Vec<usize>,
    pub episode_files: Vec<String>,
    pub seed: u64,
    pub generator: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub trajectories: Vec<Trajectory>,
    pub manifest: Manifest,
}

impl DemoSet {
    pub fn n_points(&self) -> usize {
        self.manifest.n_points
    }

    pub fn action_dim(&self) -> usize {
        self.manifest.action_dim
    }

    pub fn shortest_trajectory(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).min().unwrap_or(0)
    }

    /// Keeps only the first `n` trajectories, updating the manifest.
    pub fn truncated(&self, n: usize) -> DemoSet {
        let trajectories: Vec<Trajectory> = self.trajectories.iter().take(n).cloned().collect();
        let manifest = build_manifest(&trajectories, self.manifest.seed, &self.manifest.generator);
        DemoSet {
            trajectories,
            manifest,
        }
    }
}

fn episode_file_name(i: usize) -> String {
    format!("episode_{i:05}.bin")
}

fn build_manifest(trajectories: &[Trajectory], seed: u64, scene: &SceneConfig) -> Manifest {
    let frame_counts: Vec<usize> = trajectories.iter().map(Trajectory::len).collect();
    Manifest {
        schema_version: DEMOSET_SCHEMA_VERSION,
        n_points: scene.n_points,
        action_dim: 3,
        n_trajectories: trajectories.len(),
        total_frames: frame_counts.iter().sum(),
        episode_files: (0..trajectories.len()).map(episode_file_name).collect(),
        frame_counts,
        seed,
        generator: scene.clone(),
    }
}

// Initial states outside the frame-count window are redrawn.
const MAX_ATTEMPTS: u64 = 10_000;

/// Runs the scripted expert from `initial`, returning the visited states
/// (ending in success) and the applied actions, or `None` on timeout.
pub fn expert_rollout(initial: &EnvState, scene: &SceneConfig) -> Option<(Vec<EnvState>, Vec<Vec3>)> {
    let mut states = vec![initial.clone()];
    let mut actions = Vec::new();
    let mut st = initial.clone();
    while !st.succeeded(scene.success_tolerance) {
        if st.step_count >= scene.horizon {
            return None;
        }
        // Actions are stored as f32; step with the stored value so replay is exact.
        let a = env::expert_action(&st, scene).map(|v| v as f32 as f64);
        st = env::env_step(&st, a, scene);
        actions.push(a);
        states.push(st.clone());
    }
    Some((states, actions))
}

/// Draws the initial state for trajectory `index` of a corpus.
pub fn episode_initial_state(scene: &SceneConfig, seed: u64, index: usize) -> Result<EnvState> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng::rng_from(seed, &[rng::stream::SCENE, index as u64, attempt]);
        let st = EnvState::random(scene, &mut r);
        if let Some((states, _)) = expert_rollout(&st, scene) {
            if (scene.min_frames..=scene.max_frames).contains(&states.len()) {
                return Ok(st);
            }
        }
    }
    Err(Error::invalid(format!(
        "no initial state yields {}..={} frames; check the scene parameters",
        scene.min_frames, scene.max_frames
    )))
}

/// Generates `n_trajectories` scripted pick-and-place demonstrations.
pub fn generate_synthetic(scene: &SceneConfig, n_trajectories: usize, seed: u64) -> Result<DemoSet> {
    scene.validate()?;
    if n_trajectories == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    let template = SurfaceTemplate::new(scene, scene.surface_seed)?;
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for i in 0..n_trajectories {
        let initial = episode_initial_state(scene, seed, i)?;
        let (states, actions) = expert_rollout(&initial, scene).expect("initial state was validated");
        let frames = states
            .iter()
            .enumerate()
            .map(|(t, s)| Frame {
                observation: template.place(s),
                action: actions.get(t).map_or(vec![0.0; 3], |a| a.to_vec()),
            })
            .collect();
        trajectories.push(Trajectory { frames });
    }
    let manifest = build_manifest(&trajectories, seed, scene);
    Ok(DemoSet {
        trajectories,
        manifest,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_demoset(set: &DemoSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&set.manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    let (n, a) = (set.manifest.n_points, set.manifest.action_dim);
    for (traj, name) in set.trajectories.iter().zip(&set.manifest.episode_files) {
        let mut buf = Vec::with_capacity(EPISODE_HEADER_BYTES + traj.len() * (n * 3 + a) * 4);
        for v in [traj.len(), n, a] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for f in &traj.frames {
            for v in f.observation.points().iter().chain(f.action.iter()) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        write_file(&dir.join(name), &buf)?;
    }
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn load_episode(path: &Path, expected_frames: usize, n: usize, a: usize) -> Result<Trajectory> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.into() });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < EPISODE_HEADER_BYTES {
        return Err(Error::Truncated {
            path: path.into(),
            msg: format!("{} bytes is shorter than the header", bytes.len()),
        });
    }
    let (frames, hn, ha) = (read_u32(&bytes, 0) as usize, read_u32(&bytes, 4) as usize, read_u32(&bytes, 8) as usize);
    if hn != n || ha != a {
        return Err(Error::HeaderMismatch {
            path: path.into(),
            msg: format!("header says N={hn}, A={ha}; manifest says N={n}, A={a}"),
        });
    }
    if frames != expected_frames {
        return Err(Error::ManifestMismatch {
            path: path.into(),
            msg: format!("header has {frames} frames, manifest lists {expected_frames}"),
        });
    }
    let per_frame = n * 3 + a;
    let expected_len = EPISODE_HEADER_BYTES + frames * per_frame * 4;
    if bytes.len() < expected_len {
        return Err(Error::Truncated {
            path: path.into(),
            msg: format!("expected {expected_len} bytes, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected_len {
        return Err(Error::HeaderMismatch {
            path: path.into(),
            msg: format!("{} trailing bytes after {frames} frames", bytes.len() - expected_len),
        });
    }
    let values: Vec<f64> = bytes[EPISODE_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let frames = values
        .chunks_exact(per_frame)
        .map(|chunk| {
            let pts = Array2::from_shape_vec((n, 3), chunk[..n * 3].to_vec()).expect("n×3 block");
            let observation = PointCloud::new(pts).map_err(|e| Error::HeaderMismatch {
                path: path.into(),
                msg: e.to_string(),
            })?;
            Ok(Frame {
                observation,
                action: chunk[n * 3..].to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { frames })
}

pub fn load_demoset(dir: &Path) -> Result<DemoSet> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::MissingFile { path: mpath });
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if manifest.schema_version != DEMOSET_SCHEMA_VERSION {
        return Err(Error::MalformedManifest {
            path: mpath,
            msg: format!(
                "schema version {} (expected {DEMOSET_SCHEMA_VERSION})",
                manifest.schema_version
            ),
        });
    }
    let counts_ok = manifest.n_trajectories == manifest.episode_files.len()
        && manifest.n_trajectories == manifest.frame_counts.len()
        && manifest.total_frames == manifest.frame_counts.iter().sum::<usize>();
    if !counts_ok {
        return Err(Error::ManifestMismatch {
            path: mpath,
            msg: format!(
                "n_trajectories={}, episode files={}, frame counts={}, total_frames={}",
                manifest.n_trajectories,
                manifest.episode_files.len(),
                manifest.frame_counts.len(),
                manifest.total_frames
            ),
        });
    }
    if manifest.n_trajectories == 0 || manifest.n_points == 0 {
        return Err(Error::MalformedManifest {
            path: mpath,
            msg: "empty corpus".into(),
        });
    }
    let trajectories = manifest
        .episode_files
        .iter()
        .zip(&manifest.frame_counts)
        .map(|(name, &frames)| load_episode(&dir.join(name), frames, manifest.n_points, manifest.action_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoSet {
        trajectories,
        manifest,
    })
}

/// Writes a cloud as ASCII PLY.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len()).unwrap();
    writeln!(out, "property float x\nproperty float y\nproperty float z\nend_header").unwrap();
    for r in cloud.points().rows() {
        writeln!(out, "{} {} {}", r[0] as f32, r[1] as f32, r[2] as f32).unwrap();
    }
    write_file(path, &out)
}

/// Reads an ASCII PLY written by [`write_ply`] (x, y, z vertex properties only).
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::HeaderMismatch {
        path: path.into(),
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad("missing vertex count"))?;
    let mut flat = Vec::with_capacity(count * 3);
    for line in lines.take(count) {
        for tok in line.split_whitespace().take(3) {
            flat.push(tok.parse::<f64>().map_err(|_| bad("unparsable coordinate"))?);
        }
    }
    if flat.len() != count * 3 {
        return Err(Error::Truncated {
            path: path.into(),
            msg: format!("expected {count} vertices"),
        });
    }
    PointCloud::new(Array2::from_shape_vec((count, 3), flat).expect("count×3"))
}

/// Location of one training example inside a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub trajectory: usize,
    /// Frame index of the prediction target.
    pub target: usize,
}

/// History frames `target-k .. target-1` and the frame to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub index: PairIndex,
    pub history: Vec<PointCloud>,
    pub history_actions: Vec<Vec<f64>>,
    pub target: PointCloud,
}

/// Every admissible (trajectory, target) pair for history length `k`.
pub fn valid_pairs(set: &DemoSet, k_history: usize) -> Result<Vec<PairIndex>> {
    if k_history == 0 {
        return Err(Error::invalid("history length must be >= 1"));
    }
    if set.trajectories.is_empty() || k_history + 1 > set.shortest_trajectory() {
        return Err(Error::invalid(format!(
            "history length {k_history} needs trajectories of at least {} frames; shortest has {}",
            k_history + 1,
            set.shortest_trajectory()
        )));
    }
    Ok(set
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(ti, tr)| (k_history..tr.len()).map(move |t| PairIndex { trajectory: ti, target: t }))
        .collect())
}

impl DemoSet {
    pub fn pair(&self, index: PairIndex, k_history: usize) -> TrainingPair {
        let tr = &self.trajectories[index.trajectory];
        let frames = &tr.frames[index.target - k_history..index.target];
        TrainingPair {
            index,
            history: frames.iter().map(|f| f.observation.clone()).collect(),
            history_actions: frames.iter().map(|f| f.action.clone()).collect(),
            target: tr.frames[index.target].observation.clone(),
        }
    }
}

/// Draws `batch_size` pair locations uniformly over all admissible pairs.
pub fn sample_pair_indices(set: &DemoSet, k_history: usize, batch_size: usize, rng_seed: u64) -> Result<Vec<PairIndex>> {
    let all = valid_pairs(set, k_history)?;
    let mut r = rng::rng_from(rng_seed, &[rng::stream::PAIRS]);
    Ok((0..batch_size).map(|_| all[r.random_range(0..all.len())]).collect())
}

pub fn sample_pairs(set: &DemoSet, k_history: usize, batch_size: usize, rng_seed: u64) -> Result<Vec<TrainingPair>> {
    Ok(sample_pair_indices(set, k_history, batch_size, rng_seed)?
        .into_iter()
        .map(|ix| set.pair(ix, k_history))
        .collect())
}

/// Path of the manifest for a corpus directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
