//! Minibatch training of the world model on generated episodes, with
//! checkpointing and exact resume.

use std::path::{Path, PathBuf};

use crowdwm_nn::{Adam, AdamConfig, Checkpoint, Graph, Mat, NnError};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{derive_seed, write_atomic, Episode, OnGroundState};
use crate::geometry::CameraRig;
use crate::model::{
    CrowdWorldModel, InputNorm, LatentMode, ModelConfig, ModelError, StepInput, TrainExample,
};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (episode {episode}, step {tau}): {value}"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        episode: String,
        tau: usize,
        value: f64,
    },
    #[error("negative KL {value} at epoch {epoch}, batch {batch}")]
    NegativeKl {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("no training example with a scored pedestrian")]
    EmptyDataset,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a known past state with the fresh marker.
    pub p_fresh: f64,
    /// Probability of feeding the model's own previous prediction instead
    /// of the ground-truth past state.
    pub scheduled_sampling: f64,
    /// Checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            batch_size: 32,
            lr: 1e-3,
            p_fresh: 0.3,
            scheduled_sampling: 0.0,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    /// Parameter-free stand-in that predicts by exact unprojection.
    Oracle,
}

/// Metadata block stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub kind: CheckpointKind,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub rig: CameraRig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

/// Index of one transition `τ → τ+1` inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub episode: usize,
    pub tau: usize,
}

/// Teacher-forced example for `τ → τ+1`. Every pedestrian present at `τ`
/// becomes a token. The past state is ground truth unless the pedestrian is
/// fresh: at the first frame, when absent at `τ-1`, or when `force_fresh`
/// says so.
pub fn example_at(
    ep: &Episode,
    tau: usize,
    mut force_fresh: impl FnMut(usize) -> bool,
) -> TrainExample {
    let frame = &ep.frames[tau];
    let next = &ep.frames[tau + 1];
    let prev = tau.checked_sub(1).map(|t| &ep.frames[t]);
    let n = frame.peds.len();
    let mut in_image = Vec::with_capacity(n);
    let mut past = Vec::with_capacity(n);
    let mut fresh = Vec::with_capacity(n);
    let mut future = Vec::with_capacity(n);
    for (i, p) in frame.peds.iter().enumerate() {
        in_image.push(p.in_image);
        let known = prev.is_some_and(|f| f.find(p.ped_id).is_some());
        let is_fresh = !known || force_fresh(i);
        fresh.push(is_fresh);
        past.push(if is_fresh {
            OnGroundState::from_array([0.0; 4])
        } else {
            p.on_ground
        });
        future.push(next.find(p.ped_id).map(|q| q.on_ground));
    }
    TrainExample {
        step: StepInput {
            in_image,
            action: next.action,
            past,
            fresh,
        },
        future,
    }
}

/// All transitions with at least one scored pedestrian, in episode order.
pub fn build_samples(episodes: &[Episode]) -> Vec<SampleRef> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for tau in 0..ep.len().saturating_sub(1) {
            if !example_at(ep, tau, |_| false).scored().is_empty() {
                out.push(SampleRef { episode: e, tau });
            }
        }
    }
    out
}

/// Model, optimizer and loss history; everything needed to continue.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: CrowdWorldModel,
    pub adam: Adam,
    pub config: TrainConfig,
    pub rig: CameraRig,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub run_config: serde_json::Value,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, config: TrainConfig, rig: CameraRig) -> Result<Self> {
        let model = CrowdWorldModel::new(model_cfg)?;
        let adam = Adam::new(
            &model.store,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            adam,
            config,
            rig,
            epoch: 0,
            history: Vec::new(),
            run_config: serde_json::Value::Null,
        })
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            kind: CheckpointKind::Model,
            model: Some(self.model.config.clone()),
            train: Some(self.config.clone()),
            rig: self.rig,
            epoch: self.epoch,
            history: self.history.clone(),
            run_config: self.run_config.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::to_value(self.meta()).expect("meta serializes"),
            params: self.model.store.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    /// Restores a model checkpoint for further training.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, ckpt) = read_checkpoint(path)?;
        let bad = |message: &str| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: message.to_string(),
        };
        if meta.kind != CheckpointKind::Model {
            return Err(bad("not a trainable model checkpoint"));
        }
        let model_cfg = meta
            .model
            .clone()
            .ok_or_else(|| bad("missing model configuration"))?;
        let config = meta
            .train
            .clone()
            .ok_or_else(|| bad("missing training configuration"))?;
        let mut model = CrowdWorldModel::new(model_cfg)?;
        model
            .store
            .load_from(&ckpt.params)
            .map_err(|e| bad(&e.to_string()))?;
        let adam = ckpt
            .optimizer
            .ok_or_else(|| bad("missing optimizer state"))?;
        Ok(Self {
            model,
            adam,
            config,
            rig: meta.rig,
            epoch: meta.epoch,
            history: meta.history,
            run_config: meta.run_config,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut bytes = Vec::new();
    ckpt.write(&mut bytes).map_err(|e| TrainError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_atomic(path, &bytes).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Checkpoint)> {
    let f = std::fs::File::open(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt = Checkpoint::read(std::io::BufReader::new(f)).map_err(|e| match e {
        NnError::CheckpointVersion { found, expected } => {
            TrainError::Incompatible(format!("container version {found}, expected {expected}"))
        }
        other => TrainError::Checkpoint {
            path: path.display().to_string(),
            message: other.to_string(),
        },
    })?;
    let meta: CheckpointMeta =
        serde_json::from_value(ckpt.meta.clone()).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: format!("metadata: {e}"),
        })?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Incompatible(format!(
            "checkpoint format {}, expected {CHECKPOINT_FORMAT}",
            meta.format
        )));
    }
    Ok((meta, ckpt))
}

/// Writes a parameter-free oracle checkpoint for `rig`.
pub fn write_oracle_checkpoint(
    path: &Path,
    rig: CameraRig,
    run_config: serde_json::Value,
) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        kind: CheckpointKind::Oracle,
        model: None,
        train: None,
        rig,
        epoch: 0,
        history: Vec::new(),
        run_config,
    };
    write_checkpoint(
        path,
        &Checkpoint {
            meta: serde_json::to_value(meta).expect("meta serializes"),
            params: Default::default(),
            optimizer: None,
        },
    )
}

/// Where and how often the trainer persists its state.
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
}

impl CheckpointPlan {
    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:05}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn loss_curve_path(&self) -> PathBuf {
        self.dir.join(LOSS_CURVE_FILE)
    }
}

/// Per-epoch losses as CSV, preceded by `#` lines carrying the checkpoint
/// format and the run configuration echo.
pub fn loss_curve_csv(history: &[EpochStats], run_config: &serde_json::Value) -> String {
    let mut s =
        format!("# format {CHECKPOINT_FORMAT}\n# config {run_config}\nepoch,loss,recon,kl\n");
    for h in history {
        s.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            h.epoch, h.loss, h.recon, h.kl
        ));
    }
    s
}

struct SampleOutcome {
    total: f64,
    recon: f64,
    kl: f64,
    grads: Vec<Mat>,
}

fn sample_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &["train", &epoch.to_string(), &sample.to_string()],
    ))
}

/// Builds the (possibly augmented) example and posterior noise of one
/// sample. The same `(seed, epoch, sample)` always yields the same draw.
fn prepare(
    state: &TrainState,
    episodes: &[Episode],
    s: SampleRef,
    rng: &mut ChaCha8Rng,
) -> Result<(TrainExample, Mat)> {
    let cfg = &state.config;
    let ep = &episodes[s.episode];
    let p_fresh = cfg.p_fresh;
    let mut ex = example_at(ep, s.tau, |_| rng.random_bool(p_fresh.clamp(0.0, 1.0)));
    let use_own = s.tau > 0
        && cfg.scheduled_sampling > 0.0
        && rng.random_bool(cfg.scheduled_sampling.clamp(0.0, 1.0));
    if use_own {
        let prev = example_at(ep, s.tau - 1, |_| false);
        let preds = state
            .model
            .predict(&prev.step, LatentMode::PriorMean, None)?;
        let prev_frame = &ep.frames[s.tau - 1];
        for (i, p) in ep.frames[s.tau].peds.iter().enumerate() {
            if ex.step.fresh[i] {
                continue;
            }
            if let Ok(j) = prev_frame
                .peds
                .binary_search_by_key(&p.ped_id, |q| q.ped_id)
            {
                ex.step.past[i] = preds[j].state;
            }
        }
    }
    let n = ex.step.len();
    let noise =
        Array2::from_shape_simple_fn((n, state.model.config.d_z), || rng.sample(StandardNormal));
    Ok((ex, noise))
}

fn run_sample(
    state: &TrainState,
    episodes: &[Episode],
    s: SampleRef,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let (ex, noise) = prepare(state, episodes, s, rng)?;
    let mut g = Graph::new(&state.model.store);
    let parts = state.model.elbo_loss(&mut g, &ex, &noise)?;
    let grads = g.backward(parts.total).map_err(ModelError::from)?;
    let mut acc = state.model.store.zeros_like();
    grads.accumulate_into(&mut acc);
    Ok(SampleOutcome {
        total: g.scalar(parts.total),
        recon: g.scalar(parts.recon),
        kl: g.scalar(parts.kl),
        grads: acc,
    })
}

/// Runs one epoch and returns its mean losses.
pub fn train_epoch(
    state: &mut TrainState,
    episodes: &[Episode],
    samples: &[SampleRef],
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let epoch = state.epoch + 1;
    let seed = state.config.seed;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &["shuffle", &epoch.to_string()]));
    order.shuffle(&mut shuffle_rng);
    let bs = state.config.batch_size.max(1);
    let (mut sum_total, mut sum_recon, mut sum_kl) = (0.0, 0.0, 0.0);
    for (batch, chunk) in order.chunks(bs).enumerate() {
        let frozen: &TrainState = state;
        let outcomes: Vec<Result<SampleOutcome>> = chunk
            .par_iter()
            .map(|&k| {
                let mut rng = sample_rng(seed, epoch, k);
                run_sample(frozen, episodes, samples[k], &mut rng)
            })
            .collect();
        let mut grads = state.model.store.zeros_like();
        let mut batch_kl = 0.0;
        for (o, &k) in outcomes.into_iter().zip(chunk) {
            let o = o?;
            if !o.total.is_finite() {
                let s = samples[k];
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    episode: episodes[s.episode].id.clone(),
                    tau: s.tau,
                    value: o.total,
                });
            }
            sum_total += o.total;
            sum_recon += o.recon;
            sum_kl += o.kl;
            batch_kl += o.kl;
            for (g, d) in grads.iter_mut().zip(&o.grads) {
                *g += d;
            }
        }
        // KL is non-negative analytically; allow rounding only
        if batch_kl < -1e-9 {
            return Err(TrainError::NegativeKl {
                epoch,
                batch,
                value: batch_kl,
            });
        }
        let inv = 1.0 / chunk.len() as f64;
        for g in &mut grads {
            g.mapv_inplace(|x| x * inv);
        }
        state
            .adam
            .step(&mut state.model.store, &grads)
            .map_err(ModelError::from)?;
    }
    let n = samples.len() as f64;
    let stats = EpochStats {
        epoch,
        loss: sum_total / n,
        recon: sum_recon / n,
        kl: sum_kl / n,
    };
    state.epoch = epoch;
    state.history.push(stats);
    Ok(stats)
}

/// Trains until `state.config.epochs` epochs are complete. With a plan,
/// checkpoints every `checkpoint_every` epochs, writes the final checkpoint
/// and the loss curve.
pub fn train(
    state: &mut TrainState,
    episodes: &[Episode],
    plan: Option<&CheckpointPlan>,
    mut progress: impl FnMut(&EpochStats),
) -> Result<()> {
    let samples = build_samples(episodes);
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(plan) = plan {
        std::fs::create_dir_all(&plan.dir).map_err(|source| TrainError::Io {
            path: plan.dir.display().to_string(),
            source,
        })?;
    }
    while state.epoch < state.config.epochs {
        let stats = train_epoch(state, episodes, &samples)?;
        progress(&stats);
        if let Some(plan) = plan {
            let every = state.config.checkpoint_every;
            if every > 0 && state.epoch.is_multiple_of(every) {
                state.save(&plan.epoch_path(state.epoch))?;
            }
        }
    }
    if let Some(plan) = plan {
        state.save(&plan.final_path())?;
        let path = plan.loss_curve_path();
        write_atomic(
            &path,
            loss_curve_csv(&state.history, &state.run_config).as_bytes(),
        )
        .map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Standardization fitted on every visible in-image state of `episodes`;
/// image-size scaling when nothing is visible.
pub fn fit_input_norm(episodes: &[Episode]) -> InputNorm {
    let states = episodes
        .iter()
        .flat_map(|e| e.frames.iter())
        .flat_map(|f| f.peds.iter())
        .filter_map(|p| p.in_image.as_ref());
    InputNorm::fit(states).unwrap_or_else(|| {
        episodes
            .first()
            .map(|e| InputNorm::from_image(e.rig.intrinsics.width, e.rig.intrinsics.height))
            .unwrap_or_default()
    })
}
