use fvp_core::cloud::chamfer_distance_with;
use fvp_core::diffusion::{forward_sample, predict_x0, NoiseSchedule};
use fvp_core::env::{clip_action, env_observe, env_step, EnvState, SceneConfig};
use fvp_core::{generate_synthetic, Exec};
use ndarray::Array2;
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f64> {
    -1.0f64..1.0
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    [coord(), coord(), coord()]
}

fn array(n: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n * 3).prop_map(move |v| Array2::from_shape_vec((n, 3), v).unwrap())
}

fn resting_state(scene: &SceneConfig, object: [f64; 2], goal: [f64; 2]) -> EnvState {
    let z = scene.cube_half_size;
    EnvState {
        effector: scene.home,
        object: [object[0], object[1], z],
        goal: [goal[0], goal[1], z],
        grasped: false,
        grasp_offset: [0.0; 3],
        step_count: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_actions_stay_in_bounds(a in [-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0], m in 0.001f64..1.0) {
        let c = clip_action(a, m);
        for d in 0..3 {
            prop_assert!(c[d].abs() <= m);
            if a[d].abs() <= m {
                prop_assert_eq!(c[d], a[d]);
            }
        }
    }

    #[test]
    fn effector_never_leaves_workspace(start in vec3(), actions in proptest::collection::vec(vec3(), 1..30)) {
        let scene = SceneConfig::default();
        let (lo, hi) = scene.workspace();
        let mut s = resting_state(&scene, [0.1, 0.1], [-0.1, -0.1]);
        s.effector = std::array::from_fn(|d| start[d].clamp(lo[d], hi[d]));
        for a in actions {
            let prev = s.effector;
            s = env_step(&s, a.map(|v| v * 5.0), &scene);
            for d in 0..3 {
                prop_assert!(s.effector[d] >= lo[d] && s.effector[d] <= hi[d]);
                prop_assert!((s.effector[d] - prev[d]).abs() <= scene.max_step + 1e-12);
            }
        }
    }

    #[test]
    fn success_is_monotone_in_tolerance(o in [coord(), coord()], g in [coord(), coord()], t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let scene = SceneConfig::default();
        let s = resting_state(&scene, o, g);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(!s.succeeded(lo) || s.succeeded(hi));
    }

    #[test]
    fn moving_the_cube_shifts_only_its_points(
        o in [-0.3f64..0.3, -0.3f64..0.3],
        delta in [-0.1f64..0.1, -0.1f64..0.1],
        seed in 0u64..1000,
    ) {
        let scene = SceneConfig::default();
        let a = resting_state(&scene, o, [0.0, 0.25]);
        let mut b = a.clone();
        b.object[0] += delta[0];
        b.object[1] += delta[1];
        let pa = env_observe(&a, &scene, seed).unwrap();
        let pb = env_observe(&b, &scene, seed).unwrap();
        let [ne, nc, _] = scene.point_split();
        for i in 0..pa.len() {
            let (p, q) = (pa.point(i), pb.point(i));
            let expect = if (ne..ne + nc).contains(&i) { [delta[0], delta[1], 0.0] } else { [0.0; 3] };
            for d in 0..3 {
                // observations are stored at float32 precision
                prop_assert!((q[d] - p[d] - expect[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_sample_inverts_with_true_noise(x0 in array(16), eps in array(16), t in 1usize..=100) {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let xt = forward_sample(x0.view(), t, eps.view(), &s).unwrap();
        let back = predict_x0(xt.view(), eps.view(), t, &s).unwrap();
        // 1/sqrt(alpha_bar) amplifies rounding at large t
        let tol = 1e-12 / s.alpha_bar(t).sqrt();
        for (a, b) in back.iter().zip(x0.iter()) {
            prop_assert!((a - b).abs() < tol);
        }
    }

    #[test]
    fn chamfer_matches_across_exec_modes(a in array(20), b in array(13)) {
        let seq = chamfer_distance_with(a.view(), b.view(), Exec::Sequential).unwrap();
        let par = chamfer_distance_with(a.view(), b.view(), Exec::Parallel).unwrap();
        prop_assert_eq!(seq.to_bits(), par.to_bits());
        prop_assert!(seq >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pairs_are_adjacent_frames(seed in 0u64..500, k in 1usize..4, draw in 0u64..1000) {
        let scene = SceneConfig { n_points: 16, ..SceneConfig::default() };
        let set = generate_synthetic(&scene, 2, seed).unwrap();
        for p in fvp_core::dataset::sample_pairs(&set, k, 8, draw).unwrap() {
            let tr = &set.trajectories[p.index.trajectory];
            prop_assert!(p.index.target >= k && p.index.target < tr.len());
            prop_assert_eq!(p.history.len(), k);
            prop_assert_eq!(&p.target, &tr.frames[p.index.target].observation);
            prop_assert_eq!(&p.history[k - 1], &tr.frames[p.index.target - 1].observation);
            prop_assert_eq!(&p.history[0], &tr.frames[p.index.target - k].observation);
        }
    }
}
