//! Synthetic track tables for tests, demos and the toy learning task.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{render_states, straight_trajectory, DatagenError, Episode};
use crate::geometry::{CameraRig, GroundPose, Vec2};
use crate::trajectories::{Result, Scene};

/// Pedestrians moving at constant velocity for `frames` grid frames
/// (frame ids `0..frames`, stride 1).
pub fn constant_velocity_scene(
    name: &str,
    peds: &[(Vec2, Vec2)],
    frames: usize,
    timestep: f64,
) -> Result<Scene> {
    let tracks = peds
        .iter()
        .enumerate()
        .map(|(i, &(p0, v))| {
            let track = (0..frames as i64)
                .map(|k| (k, p0 + v * (k as f64 * timestep)))
                .collect();
            (i as i64 + 1, track)
        })
        .collect();
    Scene::from_tracks(name, timestep, 1, tracks)
}

#[derive(Debug, Clone, Copy)]
pub struct CrowdSpec {
    /// Side of the square walking area, meters.
    pub area: f64,
    pub frames: usize,
    /// Expected number of new pedestrians per frame.
    pub arrival_rate: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub timestep: f64,
}

impl Default for CrowdSpec {
    fn default() -> Self {
        Self {
            area: 24.0,
            frames: 300,
            arrival_rate: 0.8,
            speed_mean: 1.2,
            speed_std: 0.2,
            timestep: 0.4,
        }
    }
}

/// Pedestrians entering at random points of a square's boundary and walking
/// straight across it. Tracks are clipped to the frame range; pedestrians
/// already in transit at frame 0 are included.
pub fn crossing_crowd(name: &str, spec: &CrowdSpec, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = spec.area / 2.0;
    let mut tracks = BTreeMap::new();
    let mut next_id = 1i64;
    let warmup = (spec.area / (spec.speed_mean * spec.timestep)).ceil() as i64;
    for entry_frame in -warmup..spec.frames as i64 {
        let mut arrivals = 0;
        // Bernoulli splitting of the arrival rate keeps the draw count fixed
        let whole = spec.arrival_rate.floor() as usize;
        arrivals += whole;
        if rng.random_bool((spec.arrival_rate - whole as f64).clamp(0.0, 1.0)) {
            arrivals += 1;
        }
        for _ in 0..arrivals {
            let side = rng.random_range(0..4);
            let s = rng.random_range(-half..half);
            let t = rng.random_range(-half..half);
            let (a, b) = match side {
                0 => (Vec2::new(-half, s), Vec2::new(half, t)),
                1 => (Vec2::new(half, s), Vec2::new(-half, t)),
                2 => (Vec2::new(s, -half), Vec2::new(t, half)),
                _ => (Vec2::new(s, half), Vec2::new(t, -half)),
            };
            let speed = (spec.speed_mean
                + spec.speed_std * (rng.random::<f64>() * 2.0 - 1.0) * 1.7)
                .max(0.3);
            let length = a.distance(b);
            let steps = (length / (speed * spec.timestep)).ceil() as i64;
            let dir = (b - a) * (1.0 / length);
            let track: Vec<(i64, Vec2)> = (0..=steps)
                .map(|k| {
                    (
                        entry_frame + k,
                        a + dir * (speed * spec.timestep * k as f64),
                    )
                })
                .filter(|&(f, _)| f >= 0 && f < spec.frames as i64)
                .collect();
            if track.len() >= 2 {
                tracks.insert(next_id, track);
            }
            next_id += 1;
        }
    }
    Scene::from_tracks(name, spec.timestep, 1, tracks)
}

/// Three walkers ahead of an observer moving straight at constant speed.
#[derive(Debug, Clone, Copy)]
pub struct ToySpec {
    pub pedestrians: usize,
    pub frames: usize,
    pub timestep: f64,
    pub observer_speed: f64,
    /// Initial distance ahead of the observer, meters.
    pub depth: (f64, f64),
    pub lateral: (f64, f64),
    /// Velocity ranges (m/s) along the observer's right and forward axes.
    pub velocity_x: (f64, f64),
    pub velocity_y: (f64, f64),
    pub height: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            pedestrians: 3,
            frames: 16,
            timestep: 0.4,
            observer_speed: 1.0,
            depth: (3.0, 7.0),
            lateral: (-1.5, 1.5),
            velocity_x: (-0.3, 0.3),
            velocity_y: (0.6, 1.4),
            height: 1.70,
        }
    }
}

/// A constant-velocity toy episode with every pedestrian at the same
/// height. The observer starts at the origin facing +y.
pub fn toy_episode(
    id: &str,
    seed: u64,
    spec: &ToySpec,
    rig: &CameraRig,
) -> std::result::Result<Episode, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // uniform draw that tolerates degenerate ranges
    let mut draw = |r: (f64, f64)| r.0 + (r.1 - r.0) * rng.random::<f64>();
    let peds: Vec<(Vec2, Vec2)> = (0..spec.pedestrians)
        .map(|_| {
            let p = Vec2::new(draw(spec.lateral), draw(spec.depth));
            let v = Vec2::new(draw(spec.velocity_x), draw(spec.velocity_y));
            (p, v)
        })
        .collect();
    let scene = constant_velocity_scene("toy", &peds, spec.frames, spec.timestep)?;
    let start = GroundPose::new(Vec2::ZERO, 0.0)?;
    let traj = straight_trajectory(start, spec.observer_speed, spec.timestep, spec.frames, 0);
    let heights: BTreeMap<i64, f64> = scene.tracks.keys().map(|&id| (id, spec.height)).collect();
    let frames = render_states(&scene, &traj, &heights, rig)?;
    Ok(Episode {
        id: id.to_string(),
        scene: scene.name.clone(),
        seed,
        start_frame: 0,
        stride: 1,
        timestep: spec.timestep,
        rig: *rig,
        heights,
        frames,
    })
}
