use std::collections::BTreeMap;

use crowdwm_core::datagen::*;
use crowdwm_core::geometry::{unproject_with_height, CameraRig, GroundPose, Vec2};
use crowdwm_core::orca::OrcaConfig;
use crowdwm_core::synthetic::{constant_velocity_scene, crossing_crowd, CrowdSpec};
use crowdwm_core::trajectories::Scene;

#[test]
fn height_distribution_matches_parameters() {
    let ids: Vec<i64> = (0..10_000).collect();
    let h = sample_heights(&ids, 7, &HeightConfig::default());
    let vals: Vec<f64> = h.values().copied().collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std =
        (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
    assert!((mean - 1.70).abs() < 0.01, "{mean}");
    assert!((std - 0.07).abs() < 0.01, "{std}");
    assert!(vals.iter().all(|&x| (1.40..=2.10).contains(&x)));
}

#[test]
fn heights_are_deterministic_and_degenerate_std_is_exact() {
    let ids = [5, 3, 9];
    let cfg = HeightConfig::default();
    assert_eq!(
        sample_heights(&ids, 11, &cfg),
        sample_heights(&ids, 11, &cfg)
    );
    assert_ne!(
        sample_heights(&ids, 11, &cfg),
        sample_heights(&ids, 12, &cfg)
    );
    let flat = HeightConfig { std: 0.0, ..cfg };
    assert!(sample_heights(&ids, 11, &flat).values().all(|&h| h == 1.70));
}

#[test]
fn empty_crowd_walk_is_straight() {
    let orca = OrcaConfig::default();
    let start = GroundPose::new(
        Vec2::new(-8.0, 0.0),
        GroundPose::heading_facing(Vec2::new(1.0, 0.0)),
    )
    .unwrap();
    let goal = Vec2::new(8.0, 0.0);
    let poses = walk_observer(start, goal, |_| Some(Vec::new()), &orca, 1000, 1.0);
    let steps = poses.len() - 1;
    assert_eq!(steps, (16.0 / (orca.max_speed * orca.dt)).ceil() as usize);
    assert!(poses.iter().all(|p| p.position.y.abs() < 1e-12));
    assert!(poses.last().unwrap().position.distance(goal) < 1e-9);
}

fn dense_scene(seed: u64) -> Scene {
    let spec = CrowdSpec {
        arrival_rate: 1.2,
        ..CrowdSpec::default()
    };
    crossing_crowd("dense", &spec, seed).unwrap()
}

#[test]
fn start_and_goal_are_antipodal() {
    let scene = dense_scene(1);
    let cfg = DatagenConfig::default();
    let traj = generate_observer_trajectory(&scene, 40, 3, &cfg).unwrap();
    let start = traj.poses[0].position;
    assert!((start.distance(traj.goal) - 16.0).abs() < 1e-9);
    let crowd = scene.crowd_at_frame(40).unwrap();
    let centroid =
        crowd.iter().fold(Vec2::ZERO, |a, m| a + m.position) * (1.0 / crowd.len() as f64);
    assert!(((start + traj.goal) * 0.5 - centroid).norm() < 1e-9);
    assert_eq!(traj.actions.len(), traj.poses.len());
    for k in 1..traj.len() {
        let recomposed = traj.poses[k - 1].compose(&traj.actions[k]).unwrap();
        assert!(recomposed.position.distance(traj.poses[k].position) < 1e-9);
    }
}

#[test]
fn insufficient_span_is_reported() {
    let scene = dense_scene(2);
    let last = scene.last_frame();
    let err =
        generate_observer_trajectory(&scene, last - 3, 1, &DatagenConfig::default()).unwrap_err();
    assert!(
        matches!(err, DatagenError::InsufficientSpan { .. }),
        "{err}"
    );
}

/// Replayed pedestrians never yield, so clearance is only checked on a
/// crowd of moderate density where every encounter is avoidable.
#[test]
fn crowd_walks_keep_clearance() {
    let cfg = DatagenConfig::default();
    let clearance = cfg.orca.radius + cfg.orca.ped_radius;
    let rig = CameraRig::default();
    let spec = CrowdSpec {
        arrival_rate: 0.3,
        ..CrowdSpec::default()
    };
    for seed in 0..50u64 {
        let scene = crossing_crowd("moderate", &spec, 100 + seed).unwrap();
        let ep = sample_episode(&scene, "e", seed, &rig, &cfg).unwrap();
        for f in &ep.frames {
            for p in &f.peds {
                let world = scene.position(p.ped_id, f.frame_id).unwrap();
                let d = world.distance(f.pose.position);
                assert!(
                    d > clearance,
                    "seed {seed} frame {} ped {}: {d}",
                    f.frame_id,
                    p.ped_id
                );
            }
        }
    }
}

#[test]
fn approaching_pedestrian_rows_follow_hand_projection() {
    let scene = constant_velocity_scene(
        "ahead",
        &[(Vec2::new(0.0, 5.0), Vec2::new(0.0, -2.5))],
        3,
        0.4,
    )
    .unwrap();
    let poses = vec![GroundPose::default(); 3];
    let traj = ObserverTrajectory {
        start_frame: 0,
        goal: Vec2::ZERO,
        actions: vec![Default::default(); 3],
        poses,
    };
    let heights = BTreeMap::from([(1, 1.7)]);
    let frames = render_states(&scene, &traj, &heights, &CameraRig::default()).unwrap();
    let im0 = frames[0].peds[0].in_image.unwrap();
    let im1 = frames[1].peds[0].in_image.unwrap();
    assert!((im0.v - 220.0).abs() < 1e-12);
    assert!((im1.v - 215.0).abs() < 1e-12);
    assert_eq!(im0.u, 320.0);
    // one-sided at the first frame, central in the middle
    assert!((im0.dv - -5.0).abs() < 1e-12);
    let v2 = 240.0 - 100.0 / 3.0;
    assert!((im1.dv - (v2 - 220.0) / 2.0).abs() < 1e-12);
    let g = frames[1].peds[0].on_ground;
    assert!((g.y - 4.0).abs() < 1e-12 && (g.dy - -1.0).abs() < 1e-12);
}

#[test]
fn pedestrian_on_lateral_axis_is_masked() {
    let scene =
        constant_velocity_scene("side", &[(Vec2::new(2.0, 0.05), Vec2::ZERO)], 3, 0.4).unwrap();
    let traj = ObserverTrajectory {
        start_frame: 0,
        goal: Vec2::ZERO,
        actions: vec![Default::default(); 3],
        poses: vec![GroundPose::default(); 3],
    };
    let frames = render_states(
        &scene,
        &traj,
        &BTreeMap::from([(1, 1.7)]),
        &CameraRig::default(),
    )
    .unwrap();
    for f in &frames {
        assert_eq!(f.mask(), vec![false]);
        assert!(f.peds[0].in_image.is_none());
    }
}

#[test]
fn rendered_states_invert_exactly() {
    let rig = CameraRig::default();
    let cfg = DatagenConfig::default();
    for seed in 0..6u64 {
        let scene = dense_scene(200 + seed);
        let ep = sample_episode(&scene, "e", seed, &rig, &cfg).unwrap();
        let mut visible = 0;
        for f in &ep.frames {
            for p in &f.peds {
                let g = p.on_ground.position();
                let world = scene.position(p.ped_id, f.frame_id).unwrap();
                assert!(f.pose.to_world(g).distance(world) < 1e-6);
                assert_eq!(p.visible(), p.in_image.is_some());
                if let Some(im) = p.in_image {
                    visible += 1;
                    let h = ep.heights[&p.ped_id];
                    let back = unproject_with_height(im.u, im.v, h, &rig, im.camera).unwrap();
                    assert!(back.distance(g) < 1e-6, "{back:?} vs {g:?}");
                }
            }
        }
        assert!(visible > 0);
    }
}

#[test]
fn jsonl_round_trip_keeps_nine_digits() {
    let scene = dense_scene(3);
    let ep = sample_episode(
        &scene,
        "dense/train/00000",
        5,
        &CameraRig::default(),
        &DatagenConfig::default(),
    )
    .unwrap();
    let text = episode_to_jsonl(&ep);
    let back = episode_from_jsonl(text.as_bytes(), "mem").unwrap();
    assert_eq!(back.frames.len(), ep.frames.len());
    assert_eq!(episode_to_jsonl(&back), text);
    for (a, b) in ep.frames.iter().zip(&back.frames) {
        assert_eq!(a.mask(), b.mask());
        for (p, q) in a.peds.iter().zip(&b.peds) {
            assert_eq!(round_sig9(p.on_ground.x), q.on_ground.x);
            assert!((p.on_ground.x - q.on_ground.x).abs() <= 1e-8 * p.on_ground.x.abs().max(1e-30));
        }
    }
    let first = text.lines().nth(1).unwrap();
    assert!(first.starts_with("{\"frame\":"));
    assert!(
        first.contains("\"action\":[")
            && first.contains("\"pose\":[")
            && first.contains("\"peds\":[[")
    );
}

#[test]
fn masked_rows_carry_nulls() {
    let scene = constant_velocity_scene(
        "side",
        &[
            (Vec2::new(2.0, 0.05), Vec2::ZERO),
            (Vec2::new(0.0, 5.0), Vec2::ZERO),
        ],
        3,
        0.4,
    )
    .unwrap();
    let traj = ObserverTrajectory {
        start_frame: 0,
        goal: Vec2::ZERO,
        actions: vec![Default::default(); 3],
        poses: vec![GroundPose::default(); 3],
    };
    let heights = BTreeMap::from([(1, 1.7), (2, 1.7)]);
    let frames = render_states(&scene, &traj, &heights, &CameraRig::default()).unwrap();
    let ep = Episode {
        id: "x".into(),
        scene: "side".into(),
        seed: 0,
        start_frame: 0,
        stride: 1,
        timestep: 0.4,
        rig: CameraRig::default(),
        heights,
        frames,
    };
    let line = episode_to_jsonl(&ep).lines().nth(1).unwrap().to_string();
    assert!(
        line.contains("[1,0,null,null,null,null,null,2.0,0.05,0.0,0.0]"),
        "{line}"
    );
    assert!(
        line.contains("[2,1,320.0,220.0,0.0,0.0,1.0,0.0,5.0,0.0,0.0]"),
        "{line}"
    );
}

fn small_cfg(n_train: usize, n_test: usize) -> DatagenConfig {
    DatagenConfig {
        n_train,
        n_test,
        ..DatagenConfig::default()
    }
}

#[test]
fn dataset_counts_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = vec![dense_scene(4), {
        let mut s = dense_scene(5);
        s.name = "other".into();
        s
    }];
    let m = build_dataset(
        &scenes,
        &small_cfg(1, 2),
        &CameraRig::default(),
        9,
        serde_json::json!({}),
        dir.path(),
    )
    .unwrap();
    assert_eq!(m.count(Split::Train), 2);
    assert_eq!(m.count(Split::Test), 4);
    assert_eq!(
        m.scene("dense").unwrap().train,
        vec!["episodes/dense/train/00000.jsonl".to_string()]
    );
    m.verify(dir.path()).unwrap();
    let back = DatasetManifest::read(dir.path()).unwrap();
    assert_eq!(back, m);
    let files = walk(dir.path());
    assert_eq!(files.iter().filter(|p| p.ends_with(".jsonl")).count(), 6);
    assert!(!files.iter().any(|p| p.ends_with(".tmp")));
}

fn walk(dir: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.display().to_string());
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_is_byte_identical_for_same_seed() {
    let scenes = vec![dense_scene(6)];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_cfg(3, 2);
    build_dataset(
        &scenes,
        &cfg,
        &CameraRig::default(),
        21,
        serde_json::json!({"k": 1}),
        a.path(),
    )
    .unwrap();
    build_dataset(
        &scenes,
        &cfg,
        &CameraRig::default(),
        21,
        serde_json::json!({"k": 1}),
        b.path(),
    )
    .unwrap();
    let fa = walk(a.path());
    let fb = walk(b.path());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{x}");
    }
}

#[test]
fn derived_seeds_are_distinct_and_stable() {
    assert_eq!(derive_seed(1, &["a", "b"]), derive_seed(1, &["a", "b"]));
    assert_ne!(derive_seed(1, &["a", "b"]), derive_seed(1, &["ab"]));
    assert_ne!(derive_seed(1, &["a"]), derive_seed(2, &["a"]));
}
