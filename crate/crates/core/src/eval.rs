//! Autoregressive rollouts, ADE/FDE, best-of-k and the split/report
//! plumbing around them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{derive_seed, DatasetManifest, Episode, OnGroundState, Split};
use crate::geometry::{unproject_with_height, GeometryError, GroundPose, Vec2};
use crate::model::{CrowdWorldModel, LatentMode, ModelError, Prediction, StepInput};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("episode {episode}: rollout {start}+{steps} exceeds {frames} frames")]
    Range {
        episode: String,
        start: usize,
        steps: usize,
        frames: usize,
    },
    #[error("no scored pedestrian over the rollout; metric undefined")]
    NoScored,
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("k must be at least 1")]
    EmptyBestOf,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Anything that can advance on-ground states by one step.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Predictor {
    Model(CrowdWorldModel),
    /// Exact unprojection with the true height plus constant-velocity
    /// extrapolation; reads the episode directly.
    Oracle,
}

impl Predictor {
    fn samples_latent(&self) -> bool {
        matches!(self, Predictor::Model(_))
    }

    fn predict(
        &self,
        ep: &Episode,
        tau: usize,
        step: &StepInput,
        mode: LatentMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Prediction>> {
        match self {
            Predictor::Model(m) => {
                let noise = match mode {
                    LatentMode::PriorMean => None,
                    LatentMode::PriorSample => Some(Array2::from_shape_simple_fn(
                        (step.len(), m.config.d_z),
                        || rng.sample(StandardNormal),
                    )),
                };
                Ok(m.predict(step, mode, noise.as_ref())?)
            }
            Predictor::Oracle => oracle_step(ep, tau, step),
        }
    }
}

fn unproject_world(ep: &Episode, frame: usize, ped_id: i64) -> Result<Option<Vec2>> {
    let f = &ep.frames[frame];
    let Some(obs) = f.find(ped_id) else {
        return Ok(None);
    };
    let Some(s) = obs.in_image else {
        return Ok(None);
    };
    let Some(&h) = ep.heights.get(&ped_id) else {
        return Ok(None);
    };
    let local = unproject_with_height(s.u, s.v, h, &ep.rig, s.camera)?;
    Ok(Some(f.pose.to_world(local)))
}

fn oracle_step(ep: &Episode, tau: usize, step: &StepInput) -> Result<Vec<Prediction>> {
    let frame = &ep.frames[tau];
    let next_pose = ep.frames[tau + 1].pose;
    let mut out = Vec::with_capacity(frame.peds.len());
    for (i, p) in frame.peds.iter().enumerate() {
        let here = unproject_world(ep, tau, p.ped_id)?;
        let velocity = match here {
            Some(w) => match tau
                .checked_sub(1)
                .map(|t| unproject_world(ep, t, p.ped_id))
                .transpose()?
                .flatten()
            {
                Some(before) => Some(w - before),
                None => unproject_world(ep, tau + 1, p.ped_id)?.map(|after| after - w),
            },
            None => None,
        };
        let state = match (here, velocity) {
            (Some(w), Some(v)) => {
                let pos = next_pose.to_local(w + v);
                let vel = next_pose.vector_to_local(v);
                OnGroundState::from_array([pos.x, pos.y, vel.x, vel.y])
            }
            _ => step.past[i].transformed(&step.action),
        };
        out.push(Prediction { state, sigma: None });
    }
    Ok(out)
}

/// One rollout step: predictions for frame `tau + 1`, in that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub tau: usize,
    pub ped_ids: Vec<i64>,
    pub predicted: Vec<Prediction>,
    pub truth: Vec<Option<OnGroundState>>,
    /// Visible at `tau` and present at `tau + 1`.
    pub scored: Vec<bool>,
    pub pose: GroundPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub episode: String,
    pub start: usize,
    pub steps: Vec<RolloutStep>,
}

/// Closed-loop rollout of `steps` transitions from frame `start`: every
/// step observes the in-image states of its frame and feeds the previous
/// prediction back as the past on-ground state.
pub fn rollout(
    pred: &Predictor,
    ep: &Episode,
    start: usize,
    steps: usize,
    mode: LatentMode,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutResult> {
    if steps == 0 || start + steps >= ep.len() {
        return Err(EvalError::Range {
            episode: ep.id.clone(),
            start,
            steps,
            frames: ep.len(),
        });
    }
    let mut carried: Vec<(i64, OnGroundState)> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for tau in start..start + steps {
        let frame = &ep.frames[tau];
        let next = &ep.frames[tau + 1];
        let n = frame.peds.len();
        let mut step = StepInput {
            in_image: Vec::with_capacity(n),
            action: next.action,
            past: Vec::with_capacity(n),
            fresh: Vec::with_capacity(n),
        };
        for p in &frame.peds {
            step.in_image.push(p.in_image);
            match carried.binary_search_by_key(&p.ped_id, |c| c.0) {
                Ok(j) => {
                    step.past.push(carried[j].1);
                    step.fresh.push(false);
                }
                Err(_) => {
                    step.past.push(OnGroundState::from_array([0.0; 4]));
                    step.fresh.push(true);
                }
            }
        }
        let predicted = pred.predict(ep, tau, &step, mode, rng)?;
        let ped_ids: Vec<i64> = frame.peds.iter().map(|p| p.ped_id).collect();
        let truth: Vec<Option<OnGroundState>> = ped_ids
            .iter()
            .map(|&id| next.find(id).map(|q| q.on_ground))
            .collect();
        let scored = (0..n)
            .map(|i| step.in_image[i].is_some() && truth[i].is_some())
            .collect();
        carried = ped_ids
            .iter()
            .copied()
            .zip(predicted.iter().map(|p| p.state))
            .collect();
        out.push(RolloutStep {
            tau,
            ped_ids,
            predicted,
            truth,
            scored,
            pose: next.pose,
        });
    }
    Ok(RolloutResult {
        episode: ep.id.clone(),
        start,
        steps: out,
    })
}

/// Displacement sums over the first `t` steps: `(sum, count)` over all
/// steps and over the final step.
fn displacement_sums(result: &RolloutResult, t: usize) -> ((f64, usize), (f64, usize)) {
    let (mut all, mut fin) = ((0.0, 0), (0.0, 0));
    let t = t.min(result.steps.len());
    for (k, s) in result.steps[..t].iter().enumerate() {
        for i in 0..s.ped_ids.len() {
            if !s.scored[i] {
                continue;
            }
            let truth = s.truth[i].expect("scored implies truth");
            let e = s
                .pose
                .to_world(s.predicted[i].state.position())
                .distance(s.pose.to_world(truth.position()));
            all.0 += e;
            all.1 += 1;
            if k + 1 == t {
                fin.0 += e;
                fin.1 += 1;
            }
        }
    }
    (all, fin)
}

/// ADE and FDE over the first `t` steps, in world coordinates.
pub fn ade_fde(result: &RolloutResult, t: usize) -> Result<(f64, f64)> {
    if t == 0 || t > result.steps.len() {
        return Err(EvalError::Range {
            episode: result.episode.clone(),
            start: result.start,
            steps: t,
            frames: result.steps.len(),
        });
    }
    let ((sa, na), (sf, nf)) = displacement_sums(result, t);
    if na == 0 || nf == 0 {
        return Err(EvalError::NoScored);
    }
    Ok((sa / na as f64, sf / nf as f64))
}

pub fn rollout_seed(seed: u64, episode: &str, start: usize, sample: usize) -> u64 {
    derive_seed(
        seed,
        &["rollout", episode, &start.to_string(), &sample.to_string()],
    )
}

/// Minimum ADE and minimum FDE (taken independently) over `k` rollouts with
/// prior-sampled latents. Sample `j` always uses the same seed, so the
/// result is non-increasing in `k`.
pub fn best_of_k(
    pred: &Predictor,
    ep: &Episode,
    start: usize,
    t: usize,
    k: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(EvalError::EmptyBestOf);
    }
    let mode = if pred.samples_latent() {
        LatentMode::PriorSample
    } else {
        LatentMode::PriorMean
    };
    let (mut best_ade, mut best_fde) = (f64::INFINITY, f64::INFINITY);
    for j in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(seed, &ep.id, start, j));
        let r = rollout(pred, ep, start, t, mode, &mut rng)?;
        let (a, f) = ade_fde(&r, t)?;
        best_ade = best_ade.min(a);
        best_fde = best_fde.min(f);
    }
    Ok((best_ade, best_fde))
}

/// Rollout starts `0, stride, 2·stride, …` leaving room for `t` steps.
pub fn rollout_starts(ep: &Episode, t: usize, stride: usize) -> Vec<usize> {
    if ep.len() <= t {
        return Vec::new();
    }
    (0..ep.len() - t).step_by(stride.max(1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Intra-scene: train and test episodes of every scene.
    Iv,
    /// Cross-scene: one scene held out entirely.
    Cv,
}

impl std::str::FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "iv" | "intra" | "intra_scene" => Ok(SplitMode::Iv),
            "cv" | "cross" | "cross_scene" => Ok(SplitMode::Cv),
            other => Err(format!("unknown split {other:?} (expected iv or cv)")),
        }
    }
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Iv => "iv",
            SplitMode::Cv => "cv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    #[serde(default)]
    pub held_out: Option<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::Iv,
            held_out: None,
        }
    }
}

/// Episode paths (relative to the dataset root) of a split. Test episodes
/// are grouped by scene for per-scene reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<(String, Vec<String>)>,
}

pub fn make_splits(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Splits> {
    match spec.mode {
        SplitMode::Iv => {
            if let Some(h) = &spec.held_out {
                return Err(EvalError::Split(format!(
                    "intra-scene split does not hold out a scene (got {h:?})"
                )));
            }
            Ok(Splits {
                train: manifest
                    .scenes
                    .iter()
                    .flat_map(|s| s.episodes(Split::Train).iter().cloned())
                    .collect(),
                test: manifest
                    .scenes
                    .iter()
                    .map(|s| (s.name.clone(), s.episodes(Split::Test).to_vec()))
                    .collect(),
            })
        }
        SplitMode::Cv => {
            let held = spec.held_out.as_deref().ok_or_else(|| {
                EvalError::Split("cross-scene split needs a held-out scene".into())
            })?;
            let entry = manifest
                .scene(held)
                .ok_or_else(|| EvalError::UnknownScene(held.to_string()))?;
            Ok(Splits {
                train: manifest
                    .scenes
                    .iter()
                    .filter(|s| s.name != held)
                    .flat_map(|s| s.episodes(Split::Train).iter().cloned())
                    .collect(),
                test: vec![(entry.name.clone(), entry.episodes(Split::Test).to_vec())],
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub best_of: usize,
    pub start_stride: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![5, 10],
            best_of: 10,
            start_stride: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Latent set to the prior mean; one rollout.
    PriorMean,
    /// Minimum over `best_of` prior-sampled rollouts.
    BestOfK,
}

/// Mean metrics over rollouts at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub t: usize,
    pub ade: f64,
    pub fde: f64,
    pub rollouts: usize,
}

/// Mean per-rollout ADE/FDE over every valid start of every episode.
/// Rollouts without a scored pedestrian are skipped.
pub fn evaluate_episodes(
    pred: &Predictor,
    episodes: &[Episode],
    t: usize,
    protocol: Protocol,
    cfg: &EvalConfig,
) -> Result<HorizonMetrics> {
    let per_episode: Vec<Result<Vec<(f64, f64)>>> = episodes
        .par_iter()
        .map(|ep| {
            let mut v = Vec::new();
            for start in rollout_starts(ep, t, cfg.start_stride) {
                let r = match protocol {
                    Protocol::PriorMean => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, &ep.id, start, 0));
                        rollout(pred, ep, start, t, LatentMode::PriorMean, &mut rng)
                            .and_then(|r| ade_fde(&r, t))
                    }
                    Protocol::BestOfK => best_of_k(pred, ep, start, t, cfg.best_of, cfg.seed),
                };
                match r {
                    Ok(m) => v.push(m),
                    Err(EvalError::NoScored) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(v)
        })
        .collect();
    let (mut sa, mut sf, mut n) = (0.0, 0.0, 0usize);
    for r in per_episode {
        for (a, f) in r? {
            sa += a;
            sf += f;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoScored);
    }
    Ok(HorizonMetrics {
        t,
        ade: sa / n as f64,
        fde: sf / n as f64,
        rollouts: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub split: String,
    pub variant: String,
    pub protocol: Protocol,
    #[serde(rename = "ADE@5")]
    pub ade5: Option<f64>,
    #[serde(rename = "FDE@5")]
    pub fde5: Option<f64>,
    #[serde(rename = "ADE@10")]
    pub ade10: Option<f64>,
    #[serde(rename = "FDE@10")]
    pub fde10: Option<f64>,
    pub rollouts: Vec<HorizonMetrics>,
}

pub const REPORT_FORMAT: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: String,
    pub rows: Vec<ReportRow>,
    pub config: serde_json::Value,
}

/// Rows for every test scene and protocol. Oracles only get the
/// prior-mean protocol since they have no latent.
pub fn evaluate_split(
    pred: &Predictor,
    test: &[(String, Vec<Episode>)],
    split: SplitMode,
    variant: &str,
    cfg: &EvalConfig,
) -> Result<Vec<ReportRow>> {
    let protocols: &[Protocol] = if pred.samples_latent() {
        &[Protocol::BestOfK, Protocol::PriorMean]
    } else {
        &[Protocol::PriorMean]
    };
    let mut rows = Vec::new();
    for (scene, episodes) in test {
        for &protocol in protocols {
            let mut metrics = Vec::new();
            for &t in &cfg.horizons {
                match evaluate_episodes(pred, episodes, t, protocol, cfg) {
                    Ok(m) => metrics.push(m),
                    Err(EvalError::NoScored) => {}
                    Err(e) => return Err(e),
                }
            }
            let pick = |t: usize| metrics.iter().find(|m| m.t == t);
            rows.push(ReportRow {
                dataset: scene.clone(),
                split: split.as_str().to_string(),
                variant: variant.to_string(),
                protocol,
                ade5: pick(5).map(|m| m.ade),
                fde5: pick(5).map(|m| m.fde),
                ade10: pick(10).map(|m| m.ade),
                fde10: pick(10).map(|m| m.fde),
                rollouts: metrics,
            });
        }
    }
    Ok(rows)
}

/// Plain-text table with one line per row.
pub fn format_table(rows: &[ReportRow]) -> String {
    let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    let mut s = format!(
        "{:<12} {:<5} {:<8} {:<10} {:>7} {:>7} {:>7} {:>7}\n",
        "dataset", "split", "variant", "protocol", "ADE@5", "FDE@5", "ADE@10", "FDE@10"
    );
    for r in rows {
        let protocol = match r.protocol {
            Protocol::PriorMean => "mean",
            Protocol::BestOfK => "best-of-k",
        };
        s.push_str(&format!(
            "{:<12} {:<5} {:<8} {:<10} {:>7} {:>7} {:>7} {:>7}\n",
            r.dataset,
            r.split,
            r.variant,
            protocol,
            cell(r.ade5),
            cell(r.fde5),
            cell(r.ade10),
            cell(r.fde10)
        ));
    }
    s
}
