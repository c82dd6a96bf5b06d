//! Deterministic kinematic pick-and-place scene.
//!
//! A spherical end effector moves by displacement actions. When it comes
//! within the grasp radius of the cube, the cube attaches and follows it with
//! a fixed offset. An episode succeeds once the cube center is within the
//! success tolerance of the goal spot on the table.
//!
//! Observations sample a fixed set of surface points per body (effector
//! sphere, cube, flat goal disk) in body-local coordinates, so a body's
//! points move rigidly with it and row `i` refers to the same surface point
//! in every frame.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cloud::{farthest_point_indices, PointCloud};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

const WORKSPACE_MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_points: usize,
    /// Half extent of the table area objects and goals are drawn from.
    pub table_half_extent: f64,
    /// Minimum horizontal distance between object and goal.
    pub min_separation: f64,
    pub home: Vec3,
    pub effector_radius: f64,
    /// Effector radius multiplier while holding the cube (a closed gripper).
    pub closed_gripper_scale: f64,
    pub cube_half_size: f64,
    pub goal_radius: f64,
    pub grasp_radius: f64,
    /// Per-component action limit per step.
    pub max_step: f64,
    /// Height the cube is carried at.
    pub carry_height: f64,
    pub horizon: usize,
    /// Success when the cube is within this distance of the goal spot.
    pub success_tolerance: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Seed of the body-local surface samples shared by every frame.
    pub surface_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_points: 64,
            table_half_extent: 0.3,
            min_separation: 0.4,
            home: [0.0, 0.0, 0.5],
            effector_radius: 0.05,
            closed_gripper_scale: 0.5,
            cube_half_size: 0.04,
            goal_radius: 0.08,
            grasp_radius: 0.1,
            max_step: 0.08,
            carry_height: 0.4,
            horizon: 60,
            success_tolerance: 0.15,
            min_frames: 20,
            max_frames: 40,
            surface_seed: 1234,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.table_half_extent,
            self.effector_radius,
            self.closed_gripper_scale,
            self.cube_half_size,
            self.goal_radius,
            self.grasp_radius,
            self.max_step,
            self.success_tolerance,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("scene sizes and step limits must be positive"));
        }
        if self.n_points < 3 {
            return Err(Error::invalid("scene needs at least 3 points (one per body)"));
        }
        if self.carry_height <= self.cube_half_size {
            return Err(Error::invalid("carry height must clear the resting cube"));
        }
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return Err(Error::invalid("need 2 <= min_frames <= max_frames"));
        }
        if self.max_frames > self.horizon + 1 {
            return Err(Error::invalid("max_frames cannot exceed horizon + 1"));
        }
        if self.min_separation >= 2.0 * std::f64::consts::SQRT_2 * self.table_half_extent {
            return Err(Error::invalid("min_separation unattainable on the table"));
        }
        Ok(())
    }

    /// Lower and upper corners of the box the effector is confined to.
    pub fn workspace(&self) -> (Vec3, Vec3) {
        let e = self.table_half_extent + WORKSPACE_MARGIN;
        let top = self.home[2].max(self.carry_height) + WORKSPACE_MARGIN;
        ([-e, -e, 0.0], [e, e, top])
    }

    /// Points allotted to (effector, cube, goal disk).
    pub fn point_split(&self) -> [usize; 3] {
        let e = (self.n_points * 3) / 8;
        let c = (self.n_points * 3) / 8;
        [e.max(1), c.max(1), self.n_points - e.max(1) - c.max(1)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub effector: Vec3,
    pub object: Vec3,
    /// Cube rest position the cube has to reach.
    pub goal: Vec3,
    pub grasped: bool,
    /// Cube position minus effector position, fixed at grasp time.
    pub grasp_offset: Vec3,
    pub step_count: usize,
}

impl EnvState {
    /// Draws an initial state: cube and goal on the table, effector at home.
    pub fn random(scene: &SceneConfig, rng: &mut Rng) -> Self {
        let e = scene.table_half_extent;
        let z = scene.cube_half_size;
        let object = [rng.random_range(-e..e), rng.random_range(-e..e), z];
        let goal = loop {
            let g = [rng.random_range(-e..e), rng.random_range(-e..e), z];
            if distance([g[0], g[1], 0.0], [object[0], object[1], 0.0]) >= scene.min_separation {
                break g;
            }
        };
        EnvState {
            effector: scene.home,
            object,
            goal,
            grasped: false,
            grasp_offset: [0.0; 3],
            step_count: 0,
        }
    }

    pub fn object_to_goal(&self) -> f64 {
        distance(self.object, self.goal)
    }

    pub fn succeeded(&self, tolerance: f64) -> bool {
        self.object_to_goal() < tolerance
    }
}

/// Clips each component of an action to `±max_step`. Non-finite components
/// become zero.
pub fn clip_action(action: Vec3, max_step: f64) -> Vec3 {
    action.map(|a| if a.is_finite() { a.clamp(-max_step, max_step) } else { 0.0 })
}

/// Advances the scene by one action.
pub fn env_step(state: &EnvState, action: Vec3, scene: &SceneConfig) -> EnvState {
    let a = clip_action(action, scene.max_step);
    let mut next = state.clone();
    let (lo, hi) = scene.workspace();
    let moved = add(state.effector, a);
    next.effector = std::array::from_fn(|d| moved[d].clamp(lo[d], hi[d]));
    next.step_count += 1;
    if next.grasped {
        next.object = add(next.effector, next.grasp_offset);
    } else if distance(next.effector, next.object) < scene.grasp_radius {
        next.grasped = true;
        next.grasp_offset = sub(next.object, next.effector);
    }
    next
}

/// Body-local surface samples, computed once per (scene, seed).
#[derive(Clone, Debug)]
pub struct SurfaceTemplate {
    effector: Vec<Vec3>,
    closed_scale: f64,
    cube: Vec<Vec3>,
    goal: Vec<Vec3>,
}

fn fps_subset(points: Vec<Vec3>, k: usize) -> Result<Vec<Vec3>> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let arr = Array2::from_shape_vec((points.len(), 3), flat).expect("n×3");
    let idx = farthest_point_indices(arr.view(), k, 0)?;
    Ok(idx.into_iter().map(|i| points[i]).collect())
}

// Oversampling factor before farthest point sampling evens out coverage.
const OVERSAMPLE: usize = 4;

impl SurfaceTemplate {
    pub fn new(scene: &SceneConfig, seed: u64) -> Result<Self> {
        scene.validate()?;
        let [ne, nc, ng] = scene.point_split();
        let mut rng = rng::rng_from(seed, &[rng::stream::SURFACE]);

        let sphere: Vec<Vec3> = (0..ne * OVERSAMPLE)
            .map(|_| loop {
                let v = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let n = norm(v);
                if n > 1e-3 && n <= 1.0 {
                    break v.map(|c| c / n * scene.effector_radius);
                }
            })
            .collect();

        let h = scene.cube_half_size;
        let cube: Vec<Vec3> = (0..nc * OVERSAMPLE)
            .map(|_| {
                let face = rng.random_range(0..6usize);
                let u = rng.random_range(-h..h);
                let v = rng.random_range(-h..h);
                let s = if face % 2 == 0 { h } else { -h };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            })
            .collect();

        // Goal disk lies on the table, one cube half-height below the goal spot.
        let disk: Vec<Vec3> = (0..ng * OVERSAMPLE)
            .map(|_| {
                let r = scene.goal_radius * rng.random_range(0.0f64..1.0).sqrt();
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                [r * th.cos(), r * th.sin(), -scene.cube_half_size]
            })
            .collect();

        Ok(SurfaceTemplate {
            effector: fps_subset(sphere, ne)?,
            closed_scale: scene.closed_gripper_scale,
            cube: fps_subset(cube, nc)?,
            goal: fps_subset(disk, ng)?,
        })
    }

    /// Places the template at the bodies' current poses. Rows are ordered
    /// effector, cube, goal.
    pub fn place(&self, state: &EnvState) -> PointCloud {
        let n = self.effector.len() + self.cube.len() + self.goal.len();
        let mut arr = Array2::zeros((n, 3));
        let bodies = [
            (&self.effector, state.effector),
            (&self.cube, state.object),
            (&self.goal, state.goal),
        ];
        let closed = if state.grasped { self.closed_scale } else { 1.0 };
        let mut row = 0;
        for (body, (pts, origin)) in bodies.into_iter().enumerate() {
            let scale = if body == 0 { closed } else { 1.0 };
            for p in pts {
                for d in 0..3 {
                    // stored precision matches the on-disk float32 corpus
                    arr[[row, d]] = (scale * p[d] + origin[d]) as f32 as f64;
                }
                row += 1;
            }
        }
        PointCloud::new(arr).expect("finite scene points")
    }
}

/// Observes the scene as an `n_points` cloud using surface seed `rng_seed`.
pub fn env_observe(state: &EnvState, scene: &SceneConfig, rng_seed: u64) -> Result<PointCloud> {
    Ok(SurfaceTemplate::new(scene, rng_seed)?.place(state))
}

/// Scripted expert: reach the cube, lift to carry height, travel above the
/// goal, descend. Moves in straight lines of at most `max_step` length.
pub fn expert_action(state: &EnvState, scene: &SceneConfig) -> Vec3 {
    const EPS: f64 = 1e-6;
    let step_towards = |from: Vec3, to: Vec3| {
        let d = sub(to, from);
        let n = norm(d);
        if n <= scene.max_step {
            d
        } else {
            d.map(|c| c * scene.max_step / n)
        }
    };
    if !state.grasped {
        return step_towards(state.effector, state.object);
    }
    let o = state.object;
    let horizontal = distance([o[0], o[1], 0.0], [state.goal[0], state.goal[1], 0.0]);
    if horizontal > EPS && o[2] < scene.carry_height - EPS {
        step_towards(o, [o[0], o[1], scene.carry_height])
    } else if horizontal > EPS {
        step_towards(o, [state.goal[0], state.goal[1], scene.carry_height])
    } else {
        step_towards(o, state.goal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn zero_action_only_counts_steps() {
        let s = scene();
        let st = EnvState::random(&s, &mut rng::rng_from(1, &[]));
        let next = env_step(&st, [0.0; 3], &s);
        assert_eq!(next.step_count, st.step_count + 1);
        assert_eq!(EnvState { step_count: st.step_count, ..next }, st);
    }

    #[test]
    fn reaching_object_grasps() {
        let s = scene();
        let mut st = EnvState::random(&s, &mut rng::rng_from(2, &[]));
        st.effector = add(st.object, [0.0, 0.0, 0.07]);
        let next = env_step(&st, [0.0, 0.0, -0.05], &s);
        assert!(next.grasped);
        let moved = env_step(&next, [0.05, 0.0, 0.0], &s);
        assert_eq!(sub(moved.object, moved.effector), next.grasp_offset);
    }

    #[test]
    fn actions_are_clipped() {
        let s = scene();
        let st = EnvState::random(&s, &mut rng::rng_from(3, &[]));
        let next = env_step(&st, [1.0, -1.0, f64::NAN], &s);
        assert_eq!(sub(next.effector, st.effector), [s.max_step, -s.max_step, 0.0]);
    }

    #[test]
    fn expert_succeeds_within_horizon() {
        let s = scene();
        for seed in 0..200 {
            let mut st = EnvState::random(&s, &mut rng::rng_from(seed, &[]));
            let mut done = false;
            for _ in 0..s.horizon {
                st = env_step(&st, expert_action(&st, &s), &s);
                if st.succeeded(s.success_tolerance) {
                    done = true;
                    break;
                }
            }
            assert!(done, "seed {seed}");
        }
    }

    #[test]
    fn observation_contract() {
        let s = scene();
        let st = EnvState::random(&s, &mut rng::rng_from(4, &[]));
        let a = env_observe(&st, &s, 9).unwrap();
        assert_eq!(a.len(), s.n_points);
        assert_eq!(a, env_observe(&st, &s, 9).unwrap());

        let mut moved = st.clone();
        let offset = [0.1, -0.05, 0.02];
        moved.object = add(st.object, offset);
        let b = env_observe(&moved, &s, 9).unwrap();
        let [ne, nc, _] = s.point_split();
        let centroid = |c: &PointCloud| {
            let mut m = [0.0; 3];
            for i in ne..ne + nc {
                let p = c.point(i);
                for d in 0..3 {
                    m[d] += p[d] / nc as f64;
                }
            }
            m
        };
        let shift = sub(centroid(&b), centroid(&a));
        for d in 0..3 {
            assert!((shift[d] - offset[d]).abs() < 0.02);
        }
    }
}
