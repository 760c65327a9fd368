//! Synthesis of egocentric crowd episodes: an observer walks through a
//! replayed scene, every pedestrian's head point is projected into the
//! front/rear cameras, and the matching on-ground states are recorded in the
//! observer frame.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project_head_point, Camera, CameraRig, GeometryError, GroundPose, ObserverAction, Vec2,
};
use crate::orca::{plan_observer_step, ObserverState, OrcaConfig};
use crate::trajectories::{Scene, SceneStats, TrajectoryError};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("scene {scene}: start frame {start} leaves {available} frames, need {required}")]
    InsufficientSpan {
        scene: String,
        start: i64,
        available: usize,
        required: usize,
    },
    #[error("scene {scene}: no pedestrian at frame {frame}")]
    EmptyCrowd { scene: String, frame: i64 },
    #[error("scene {scene}: start position at frame {frame} overlaps pedestrian {ped}")]
    StartBlocked { scene: String, frame: i64, ped: i64 },
    #[error("scene {scene}: no valid episode after {attempts} attempts")]
    NoValidEpisode { scene: String, attempts: usize },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatagenError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Stable 64-bit seed derivation (FNV-1a over the parts, then a splitmix64
/// finalizer).
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeightConfig {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for HeightConfig {
    fn default() -> Self {
        Self {
            mean: 1.70,
            std: 0.07,
            min: 1.40,
            max: 2.10,
        }
    }
}

/// One clamped Gaussian height per pedestrian, drawn in ascending id order.
pub fn sample_heights(ped_ids: &[i64], seed: u64, cfg: &HeightConfig) -> BTreeMap<i64, f64> {
    let mut ids = ped_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.into_iter()
        .map(|id| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (id, (cfg.mean + cfg.std * n).clamp(cfg.min, cfg.max))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub circle_radius: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub attempts: usize,
    pub heights: HeightConfig,
    pub orca: OrcaConfig,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 200,
            circle_radius: 8.0,
            min_frames: 12,
            max_frames: 80,
            attempts: 64,
            heights: HeightConfig::default(),
            orca: OrcaConfig::default(),
        }
    }
}

/// Observer poses on consecutive scene frames; `actions[k]` moves the
/// observer from frame `k − 1` to frame `k` (identity for `k = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverTrajectory {
    pub start_frame: i64,
    pub goal: Vec2,
    pub poses: Vec<GroundPose>,
    pub actions: Vec<ObserverAction>,
}

impl ObserverTrajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    fn from_poses(start_frame: i64, goal: Vec2, poses: Vec<GroundPose>) -> Self {
        let mut actions = vec![ObserverAction::IDENTITY];
        actions.extend(poses.windows(2).map(|w| w[0].action_to(&w[1])));
        Self {
            start_frame,
            goal,
            poses,
            actions,
        }
    }
}

/// Runs the planner from `start` toward `goal`. `crowd(k)` gives the
/// replayed pedestrians at step `k` (or `None` once the scene has ended).
/// Stops on arrival, at scene end, or after `max_frames` poses.
pub fn walk_observer<F>(
    start: GroundPose,
    goal: Vec2,
    mut crowd: F,
    orca: &OrcaConfig,
    max_frames: usize,
    tie_sign: f64,
) -> Vec<GroundPose>
where
    F: FnMut(usize) -> Option<Vec<(Vec2, Vec2)>>,
{
    let mut state = ObserverState {
        pose: start,
        velocity: Vec2::ZERO,
    };
    let mut poses = vec![start];
    let mut k = 0;
    while poses.len() < max_frames && state.pose.position.distance(goal) > 1e-6 {
        let Some(peds) = crowd(k) else { break };
        if crowd(k + 1).is_none() {
            break;
        }
        state = plan_observer_step(&state, goal, &peds, orca, tie_sign).next;
        poses.push(state.pose);
        k += 1;
    }
    poses
}

/// Observer walking along its heading at constant speed.
pub fn straight_trajectory(
    start: GroundPose,
    speed: f64,
    dt: f64,
    frames: usize,
    start_frame: i64,
) -> ObserverTrajectory {
    let step = ObserverAction::new(0.0, Vec2::new(0.0, speed * dt));
    let mut poses = vec![start];
    for _ in 1..frames {
        let next = poses[poses.len() - 1]
            .compose(&step)
            .expect("finite straight step");
        poses.push(next);
    }
    let goal = poses[poses.len() - 1].position;
    ObserverTrajectory::from_poses(start_frame, goal, poses)
}

fn scene_centroid(scene: &Scene) -> Vec2 {
    let mut sum = Vec2::ZERO;
    let mut n = 0usize;
    for t in scene.tracks.values() {
        for &(_, p) in t {
            sum += p;
            n += 1;
        }
    }
    sum * (1.0 / n.max(1) as f64)
}

/// Start on the circle of radius `cfg.circle_radius` around the crowd
/// centroid at `start_frame`, goal antipodal, initial heading toward the
/// goal, ORCA steps against the replayed crowd.
pub fn generate_observer_trajectory(
    scene: &Scene,
    start_frame: i64,
    seed: u64,
    cfg: &DatagenConfig,
) -> Result<ObserverTrajectory> {
    let crowd0 = scene.crowd_at_frame(start_frame)?;
    let center = if crowd0.is_empty() {
        scene_centroid(scene)
    } else {
        crowd0.iter().fold(Vec2::ZERO, |a, m| a + m.position) * (1.0 / crowd0.len() as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let tie_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let offset = Vec2::new(angle.cos(), angle.sin()) * cfg.circle_radius;
    let start_pos = center + offset;
    let goal = center - offset;
    let start = GroundPose::new(start_pos, GroundPose::heading_facing(goal - start_pos))?;
    let clearance = cfg.orca.radius + cfg.orca.ped_radius + cfg.orca.safety_margin;
    if let Some(m) = crowd0
        .iter()
        .find(|m| m.position.distance(start_pos) <= clearance)
    {
        return Err(DatagenError::StartBlocked {
            scene: scene.name.clone(),
            frame: start_frame,
            ped: m.ped_id,
        });
    }

    let last = scene.last_frame();
    let stride = scene.stride;
    let poses = walk_observer(
        start,
        goal,
        |k| {
            let frame = start_frame + k as i64 * stride;
            (frame <= last).then(|| {
                scene
                    .crowd_at_frame(frame)
                    .map(|c| c.iter().map(|m| (m.position, m.velocity)).collect())
                    .unwrap_or_default()
            })
        },
        &cfg.orca,
        cfg.max_frames,
        tie_sign,
    );
    if poses.len() < cfg.min_frames {
        return Err(DatagenError::InsufficientSpan {
            scene: scene.name.clone(),
            start: start_frame,
            available: ((last - start_frame) / stride + 1).max(0) as usize,
            required: cfg.min_frames,
        });
    }
    Ok(ObserverTrajectory::from_poses(start_frame, goal, poses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InImageState {
    pub u: f64,
    pub v: f64,
    /// Pixels per frame.
    pub du: f64,
    pub dv: f64,
    pub camera: Camera,
}

/// Position in the current observer frame and per-step displacement.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OnGroundState {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

impl OnGroundState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.dx, self.dy]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            dx: a[2],
            dy: a[3],
        }
    }

    /// The same physical state seen from the frame after `action`.
    pub fn transformed(&self, action: &ObserverAction) -> Self {
        let p = action.transform_point(self.position());
        let d = action.transform_vector(Vec2::new(self.dx, self.dy));
        Self {
            x: p.x,
            y: p.y,
            dx: d.x,
            dy: d.y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedObservation {
    pub ped_id: i64,
    /// `None` when the pedestrian is not visible (mask bit 0).
    pub in_image: Option<InImageState>,
    pub on_ground: OnGroundState,
}

impl PedObservation {
    pub fn visible(&self) -> bool {
        self.in_image.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: i64,
    pub action: ObserverAction,
    pub pose: GroundPose,
    /// Every pedestrian present in the scene at this frame, ascending id.
    pub peds: Vec<PedObservation>,
}

impl FrameRecord {
    pub fn find(&self, ped_id: i64) -> Option<&PedObservation> {
        self.peds
            .binary_search_by_key(&ped_id, |p| p.ped_id)
            .ok()
            .map(|i| &self.peds[i])
    }

    pub fn mask(&self) -> Vec<bool> {
        self.peds.iter().map(|p| p.visible()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub scene: String,
    pub seed: u64,
    pub start_frame: i64,
    pub stride: i64,
    pub timestep: f64,
    pub rig: CameraRig,
    pub heights: BTreeMap<i64, f64>,
    pub frames: Vec<FrameRecord>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Projects the scene into the observer's cameras along `traj`.
pub fn render_states(
    scene: &Scene,
    traj: &ObserverTrajectory,
    heights: &BTreeMap<i64, f64>,
    rig: &CameraRig,
) -> Result<Vec<FrameRecord>> {
    rig.validate()?;
    let n = traj.len();
    let frame_of = |k: usize| traj.start_frame + k as i64 * scene.stride;
    let crowds = (0..n)
        .map(|k| scene.crowd_at_frame(frame_of(k)))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    // projections per frame: ped -> (camera, u, v)
    let mut projections: Vec<BTreeMap<i64, (Camera, f64, f64)>> = Vec::with_capacity(n);
    for (k, crowd) in crowds.iter().enumerate() {
        let pose = &traj.poses[k];
        let mut proj = BTreeMap::new();
        for m in crowd {
            let h = heights.get(&m.ped_id).copied().unwrap_or(1.70);
            let local = pose.to_local(m.position);
            for cam in Camera::ALL {
                if let Some((u, v)) = project_head_point(local, h, rig, cam)? {
                    proj.insert(m.ped_id, (cam, u, v));
                    break;
                }
            }
        }
        projections.push(proj);
    }

    let mut frames = Vec::with_capacity(n);
    for (k, crowd) in crowds.iter().enumerate() {
        let pose = &traj.poses[k];
        let peds = crowd
            .iter()
            .map(|m| {
                let local = pose.to_local(m.position);
                let disp = pose.vector_to_local(m.velocity * scene.timestep);
                let in_image = projections[k].get(&m.ped_id).and_then(|&(cam, u, v)| {
                    let same = |j: Option<usize>| {
                        j.and_then(|j| projections.get(j))
                            .and_then(|p| p.get(&m.ped_id))
                            .filter(|q| q.0 == cam)
                            .map(|q| (q.1, q.2))
                    };
                    let (du, dv) = match (same(k.checked_sub(1)), same(Some(k + 1))) {
                        (Some(a), Some(b)) => ((b.0 - a.0) / 2.0, (b.1 - a.1) / 2.0),
                        (None, Some(b)) => (b.0 - u, b.1 - v),
                        (Some(a), None) => (u - a.0, v - a.1),
                        (None, None) => return None,
                    };
                    Some(InImageState {
                        u,
                        v,
                        du,
                        dv,
                        camera: cam,
                    })
                });
                PedObservation {
                    ped_id: m.ped_id,
                    in_image,
                    on_ground: OnGroundState {
                        x: local.x,
                        y: local.y,
                        dx: disp.x,
                        dy: disp.y,
                    },
                }
            })
            .collect();
        frames.push(FrameRecord {
            frame_id: frame_of(k),
            action: traj.actions[k],
            pose: traj.poses[k],
            peds,
        });
    }
    Ok(frames)
}

/// Full episode for one (scene, seed): start frame, walk, heights, states.
pub fn generate_episode(
    scene: &Scene,
    id: &str,
    start_frame: i64,
    seed: u64,
    rig: &CameraRig,
    cfg: &DatagenConfig,
) -> Result<Episode> {
    let crowd = scene.crowd_at_frame(start_frame)?;
    if crowd.is_empty() {
        return Err(DatagenError::EmptyCrowd {
            scene: scene.name.clone(),
            frame: start_frame,
        });
    }
    let traj = generate_observer_trajectory(scene, start_frame, seed, cfg)?;
    let last = traj.start_frame + (traj.len() as i64 - 1) * scene.stride;
    let ids: Vec<i64> = scene
        .tracks
        .iter()
        .filter(|(_, t)| t[0].0 <= last && t[t.len() - 1].0 >= start_frame)
        .map(|(&id, _)| id)
        .collect();
    let heights = sample_heights(&ids, derive_seed(seed, &["heights"]), &cfg.heights);
    let frames = render_states(scene, &traj, &heights, rig)?;
    Ok(Episode {
        id: id.to_string(),
        scene: scene.name.clone(),
        seed,
        start_frame,
        stride: scene.stride,
        timestep: scene.timestep,
        rig: *rig,
        heights,
        frames,
    })
}

/// Draws start frames until an episode satisfies the length requirement.
pub fn sample_episode(
    scene: &Scene,
    id: &str,
    seed: u64,
    rig: &CameraRig,
    cfg: &DatagenConfig,
) -> Result<Episode> {
    let frames: Vec<i64> = scene.frames().collect();
    for attempt in 0..cfg.attempts {
        let s = derive_seed(seed, &["attempt", &attempt.to_string()]);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let start = frames[rng.random_range(0..frames.len())];
        match generate_episode(scene, id, start, s, rig, cfg) {
            Ok(ep) => return Ok(ep),
            Err(
                DatagenError::InsufficientSpan { .. }
                | DatagenError::EmptyCrowd { .. }
                | DatagenError::StartBlocked { .. },
            ) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(DatagenError::NoValidEpisode {
        scene: scene.name.clone(),
        attempts: cfg.attempts,
    })
}

/// Rounds to 9 significant decimal digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    format_version: String,
    id: String,
    scene: String,
    seed: u64,
    start_frame: i64,
    stride: i64,
    timestep: f64,
    rig: CameraRig,
    heights: Vec<(i64, f64)>,
}

type PedRow = (
    i64,
    u8,
    Option<f64>,
    Option<f64>,
    Option<f64>,
    Option<f64>,
    Option<f64>,
    f64,
    f64,
    f64,
    f64,
);

#[derive(Serialize, Deserialize)]
struct FrameLine {
    frame: i64,
    action: [f64; 3],
    pose: [f64; 3],
    peds: Vec<PedRow>,
}

pub fn episode_to_jsonl(ep: &Episode) -> String {
    let r = round_sig9;
    let header = EpisodeHeader {
        format_version: FORMAT_VERSION.to_string(),
        id: ep.id.clone(),
        scene: ep.scene.clone(),
        seed: ep.seed,
        start_frame: ep.start_frame,
        stride: ep.stride,
        timestep: ep.timestep,
        rig: ep.rig,
        heights: ep.heights.iter().map(|(&k, &h)| (k, r(h))).collect(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for f in &ep.frames {
        let line = FrameLine {
            frame: f.frame_id,
            action: f.action.as_array().map(r),
            pose: [
                r(f.pose.position.x),
                r(f.pose.position.y),
                r(f.pose.heading),
            ],
            peds: f
                .peds
                .iter()
                .map(|p| {
                    let g = &p.on_ground;
                    let im = p.in_image.as_ref();
                    (
                        p.ped_id,
                        u8::from(p.visible()),
                        im.map(|s| r(s.u)),
                        im.map(|s| r(s.v)),
                        im.map(|s| r(s.du)),
                        im.map(|s| r(s.dv)),
                        im.map(|s| s.camera.flag()),
                        r(g.x),
                        r(g.y),
                        r(g.dx),
                        r(g.dy),
                    )
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("frame serializes"));
        out.push('\n');
    }
    out
}

pub fn episode_from_jsonl<R: BufRead>(reader: R, origin: &str) -> Result<Episode> {
    let fmt = |message: String| DatagenError::Format {
        path: origin.to_string(),
        message,
    };
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| fmt("empty episode file".into()))?
        .map_err(io_err(Path::new(origin)))?;
    let header: EpisodeHeader =
        serde_json::from_str(&header_line).map_err(|e| fmt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fmt(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(Path::new(origin)))?;
        if line.trim().is_empty() {
            continue;
        }
        let fl: FrameLine =
            serde_json::from_str(&line).map_err(|e| fmt(format!("line {}: {e}", i + 2)))?;
        let mut peds = Vec::with_capacity(fl.peds.len());
        for row in fl.peds {
            let (id, mask, u, v, du, dv, flag, x, y, dx, dy) = row;
            let in_image = match (mask, u, v, du, dv, flag.and_then(Camera::from_flag)) {
                (1, Some(u), Some(v), Some(du), Some(dv), Some(camera)) => Some(InImageState {
                    u,
                    v,
                    du,
                    dv,
                    camera,
                }),
                (0, None, None, None, None, None) => None,
                _ => {
                    return Err(fmt(format!(
                        "line {}: pedestrian {id} has inconsistent mask",
                        i + 2
                    )))
                }
            };
            peds.push(PedObservation {
                ped_id: id,
                in_image,
                on_ground: OnGroundState { x, y, dx, dy },
            });
        }
        frames.push(FrameRecord {
            frame_id: fl.frame,
            action: ObserverAction::new(fl.action[0], Vec2::new(fl.action[1], fl.action[2])),
            pose: GroundPose {
                position: Vec2::new(fl.pose[0], fl.pose[1]),
                heading: fl.pose[2],
            },
            peds,
        });
    }
    Ok(Episode {
        id: header.id,
        scene: header.scene,
        seed: header.seed,
        start_frame: header.start_frame,
        stride: header.stride,
        timestep: header.timestep,
        rig: header.rig,
        heights: header.heights.into_iter().collect(),
        frames,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    episode_from_jsonl(BufReader::new(f), &path.display().to_string())
}

pub fn write_episode(path: &Path, ep: &Episode) -> Result<()> {
    write_atomic(path, episode_to_jsonl(ep).as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub timestep: f64,
    pub stride: i64,
    pub stats: SceneStats,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SceneEntry {
    pub fn episodes(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub seed: u64,
    pub rig: CameraRig,
    /// The rear camera is encoded as a ±1 flag on each in-image state.
    pub camera_encoding: String,
    pub config: DatagenConfig,
    /// Free-form echo of the run configuration that produced the dataset.
    #[serde(default)]
    pub run_config: serde_json::Value,
    pub scenes: Vec<SceneEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.scenes.iter().map(|s| s.episodes(split).len()).sum()
    }

    pub fn scene(&self, name: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|s| s.name == name)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatagenError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if m.format_version != FORMAT_VERSION {
            return Err(DatagenError::Format {
                path: path.display().to_string(),
                message: format!("unsupported format version {}", m.format_version),
            });
        }
        Ok(m)
    }

    /// Checks that every listed episode file exists.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for s in &self.scenes {
            for rel in s.train.iter().chain(&s.test) {
                let p = dir.join(rel);
                if !p.is_file() {
                    return Err(DatagenError::Format {
                        path: p.display().to_string(),
                        message: "listed in manifest but missing".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn episode_rel_path(scene: &str, split: Split, idx: usize) -> String {
    format!("episodes/{scene}/{}/{idx:05}.jsonl", split.as_str())
}

/// Generates `n_train` + `n_test` episodes per scene under `out_dir` and
/// writes the manifest last.
pub fn build_dataset(
    scenes: &[Scene],
    cfg: &DatagenConfig,
    rig: &CameraRig,
    seed: u64,
    run_config: serde_json::Value,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    rig.validate()?;
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let jobs: Vec<(Split, usize)> = (0..cfg.n_train)
            .map(|i| (Split::Train, i))
            .chain((0..cfg.n_test).map(|i| (Split::Test, i)))
            .collect();
        let written: Vec<Result<(Split, String)>> = jobs
            .par_iter()
            .map(|&(split, idx)| {
                let rel = episode_rel_path(&scene.name, split, idx);
                let id = format!("{}/{}/{idx:05}", scene.name, split.as_str());
                let s = derive_seed(seed, &[&scene.name, split.as_str(), &idx.to_string()]);
                let ep = sample_episode(scene, &id, s, rig, cfg)?;
                write_episode(&out_dir.join(&rel), &ep)?;
                Ok((split, rel))
            })
            .collect();
        let mut train = Vec::with_capacity(cfg.n_train);
        let mut test = Vec::with_capacity(cfg.n_test);
        for w in written {
            let (split, rel) = w?;
            match split {
                Split::Train => train.push(rel),
                Split::Test => test.push(rel),
            }
        }
        entries.push(SceneEntry {
            name: scene.name.clone(),
            timestep: scene.timestep,
            stride: scene.stride,
            stats: scene.stats(),
            train,
            test,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        seed,
        rig: *rig,
        camera_encoding: "flag: +1 front, -1 rear".to_string(),
        config: cfg.clone(),
        run_config,
        scenes: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads every episode of the given (scene, split) entries, in manifest
/// order.
pub fn load_episodes(dir: &Path, rel_paths: &[String]) -> Result<Vec<Episode>> {
    rel_paths
        .par_iter()
        .map(|rel| read_episode(&dir.join(rel)))
        .collect()
}
