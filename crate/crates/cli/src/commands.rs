use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crowdwm_core::datagen::{
    build_dataset, load_episodes, read_episode, write_atomic, DatasetManifest, Episode, Split,
    MANIFEST_FILE,
};
use crowdwm_core::eval::{
    ade_fde, evaluate_split, format_table, make_splits, rollout, rollout_seed, Predictor, Report,
    RolloutResult, REPORT_FORMAT,
};
use crowdwm_core::model::{CrowdWorldModel, LatentMode, ModelConfig, Variant};
use crowdwm_core::train::{
    fit_input_norm, read_checkpoint, train, write_oracle_checkpoint, CheckpointKind,
    CheckpointMeta, CheckpointPlan, TrainError, TrainState,
};
use crowdwm_core::trajectories::load_track_table;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{CliError, Loaded, EXPORT_FORMAT};

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn checkpoint_error(e: TrainError) -> CliError {
    match e {
        TrainError::Checkpoint { .. } | TrainError::Incompatible(_) | TrainError::Io { .. } => {
            CliError::Checkpoint(e.to_string())
        }
        other => CliError::Failed(other.to_string()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(failed)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Loads every configured scene and writes the dataset.
pub fn gen_data(run: &Loaded) -> Result<DatasetManifest, CliError> {
    let cfg = &run.config;
    let mut scenes = Vec::with_capacity(cfg.scenes.len());
    for s in &cfg.scenes {
        let path = run.scene_path(s);
        let f = File::open(&path)
            .map_err(|e| CliError::Input(format!("scene file {}: {e}", path.display())))?;
        let scene = load_track_table(&s.name, BufReader::new(f), s.timestep, s.stride)
            .map_err(|e| CliError::Input(format!("scene file {}: {e}", path.display())))?;
        scenes.push(scene);
    }
    build_dataset(
        &scenes,
        &cfg.datagen,
        &cfg.rig,
        cfg.seed,
        cfg.echo(),
        &run.dataset_dir(),
    )
    .map_err(failed)
}

/// Per-scene crowd statistics and episode counts.
pub fn stats_table(m: &DatasetManifest) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>9} {:>7} {:>5} {:>5} {:>7} {:>7}\n",
        "scene", "avg_len", "avg_ppl", "tracks", "min", "max", "train", "test"
    );
    for e in &m.scenes {
        s.push_str(&format!(
            "{:<12} {:>9.2} {:>9.2} {:>7} {:>5} {:>5} {:>7} {:>7}\n",
            e.name,
            e.stats.avg_traj_len,
            e.stats.avg_people,
            e.stats.tracks,
            e.stats.min_people,
            e.stats.max_people,
            e.train.len(),
            e.test.len()
        ));
    }
    s
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, CliError> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Input(format!(
            "no dataset at {} (run gen-data first)",
            dir.display()
        )));
    }
    DatasetManifest::read(dir).map_err(input)
}

/// Trains (or resumes) the configured model on the training split. Returns
/// the final checkpoint path.
pub fn train_model(
    run: &Loaded,
    resume: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<PathBuf, CliError> {
    let cfg = &run.config;
    let dir = run.dataset_dir();
    let manifest = read_manifest(&dir)?;
    let splits = make_splits(&manifest, &cfg.split).map_err(input)?;
    let episodes = load_episodes(&dir, &splits.train).map_err(input)?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p).map_err(checkpoint_error)?;
            if s.rig != manifest.rig {
                return Err(CliError::Compatibility(format!(
                    "checkpoint {} was trained with a different camera rig than the dataset",
                    p.display()
                )));
            }
            progress(&format!("resuming {} at epoch {}", p.display(), s.epoch));
            s
        }
        None => {
            let mut model = cfg.model.clone();
            model.norm = fit_input_norm(&episodes);
            TrainState::new(model, cfg.train.clone(), manifest.rig).map_err(failed)?
        }
    };
    state.config.epochs = cfg.train.epochs;
    state.run_config = cfg.echo();
    let plan = CheckpointPlan {
        dir: run.checkpoints_dir().join(run.run_name()),
    };
    train(&mut state, &episodes, Some(&plan), |s| {
        progress(&format!(
            "epoch {:>4}  loss {:.6}  recon {:.6}  kl {:.6}",
            s.epoch, s.loss, s.recon, s.kl
        ))
    })
    .map_err(|e| match e {
        TrainError::Model(_)
        | TrainError::NonFinite { .. }
        | TrainError::NegativeKl { .. }
        | TrainError::EmptyDataset => failed(e),
        other => checkpoint_error(other),
    })?;
    Ok(plan.final_path())
}

/// Which predictor a command runs.
#[derive(Debug, Clone)]
pub enum Source {
    Checkpoint(PathBuf),
    /// The default run directory's final checkpoint.
    Default,
    /// Parameter-free oracle stub; its checkpoint is written first.
    Oracle,
}

pub fn load_predictor(path: &Path) -> Result<(Predictor, CheckpointMeta), CliError> {
    if !path.is_file() {
        return Err(CliError::Checkpoint(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let (meta, ckpt) = read_checkpoint(path).map_err(checkpoint_error)?;
    let pred = match meta.kind {
        CheckpointKind::Oracle => Predictor::Oracle,
        CheckpointKind::Model => {
            let cfg = meta.model.clone().ok_or_else(|| {
                CliError::Checkpoint(format!(
                    "checkpoint {}: missing model configuration",
                    path.display()
                ))
            })?;
            let mut model =
                CrowdWorldModel::new(cfg).map_err(|e| CliError::Checkpoint(e.to_string()))?;
            model
                .store
                .load_from(&ckpt.params)
                .map_err(|e| CliError::Checkpoint(format!("checkpoint {}: {e}", path.display())))?;
            model.freeze();
            Predictor::Model(model)
        }
    };
    Ok((pred, meta))
}

fn variant_label(cfg: &ModelConfig) -> String {
    let mut s = match cfg.variant {
        Variant::D => "D".to_string(),
        Variant::G => "G".to_string(),
    };
    if !cfg.ablation.use_ego_view {
        s.push_str("-noego");
    }
    if !cfg.ablation.use_cross_attn {
        s.push_str("-nocross");
    }
    s
}

/// Resolves the predictor and checks its rig against the dataset's.
fn open_source(
    run: &Loaded,
    source: &Source,
    manifest: &DatasetManifest,
) -> Result<(Predictor, String), CliError> {
    let path = match source {
        Source::Checkpoint(p) => p.clone(),
        Source::Default => run
            .checkpoints_dir()
            .join(run.run_name())
            .join("final.ckpt"),
        Source::Oracle => {
            let p = run.checkpoints_dir().join("oracle").join("final.ckpt");
            write_oracle_checkpoint(&p, manifest.rig, run.config.echo())
                .map_err(checkpoint_error)?;
            p
        }
    };
    let (pred, meta) = load_predictor(&path)?;
    if meta.rig != manifest.rig {
        return Err(CliError::Compatibility(format!(
            "checkpoint {} camera rig {:?} does not match dataset rig {:?}",
            path.display(),
            meta.rig,
            manifest.rig
        )));
    }
    let label = match &meta.model {
        Some(m) => variant_label(m),
        None => "oracle".to_string(),
    };
    Ok((pred, label))
}

/// Evaluates on the configured split's test episodes and writes the report.
pub fn eval(run: &Loaded, source: &Source) -> Result<(PathBuf, Report), CliError> {
    let cfg = &run.config;
    let dir = run.dataset_dir();
    let manifest = read_manifest(&dir)?;
    let (pred, label) = open_source(run, source, &manifest)?;
    let splits = make_splits(&manifest, &cfg.split).map_err(input)?;
    let mut test = Vec::with_capacity(splits.test.len());
    for (scene, rels) in &splits.test {
        test.push((scene.clone(), load_episodes(&dir, rels).map_err(input)?));
    }
    let rows = evaluate_split(&pred, &test, cfg.split.mode, &label, &cfg.eval).map_err(failed)?;
    let report = Report {
        format_version: REPORT_FORMAT.to_string(),
        rows,
        config: cfg.echo(),
    };
    let mut name = format!("eval_{label}_{}", cfg.split.mode.as_str());
    if let Some(h) = &cfg.split.held_out {
        name.push('_');
        name.push_str(h);
    }
    let path = run.reports_dir().join(format!("{name}.json"));
    write_json(&path, &report)?;
    Ok((path, report))
}

pub fn report_table(report: &Report) -> String {
    format_table(&report.rows)
}

/// Finds an episode by id (`scene/split/00000`) or by its path relative to
/// the dataset root.
pub fn find_episode(
    dir: &Path,
    manifest: &DatasetManifest,
    key: &str,
) -> Result<Episode, CliError> {
    let key = key.trim_start_matches("./");
    for s in &manifest.scenes {
        for split in [Split::Train, Split::Test] {
            for rel in s.episodes(split) {
                let id = rel
                    .trim_start_matches("episodes/")
                    .trim_end_matches(".jsonl");
                if rel == key || id == key {
                    return read_episode(&dir.join(rel)).map_err(input);
                }
            }
        }
    }
    Err(CliError::Input(format!("unknown episode {key:?}")))
}

/// Rollout request shared by `rollout` and `export-plots`.
#[derive(Debug, Clone)]
pub struct RolloutArgs {
    pub episode: String,
    pub start: usize,
    pub steps: usize,
    pub sample: bool,
}

pub fn run_rollout(
    run: &Loaded,
    source: &Source,
    args: &RolloutArgs,
) -> Result<(Episode, RolloutResult, String), CliError> {
    let dir = run.dataset_dir();
    let manifest = read_manifest(&dir)?;
    let ep = find_episode(&dir, &manifest, &args.episode)?;
    let (pred, label) = open_source(run, source, &manifest)?;
    let mode = if args.sample {
        LatentMode::PriorSample
    } else {
        LatentMode::PriorMean
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(run.config.seed, &ep.id, args.start, 0));
    let result = rollout(&pred, &ep, args.start, args.steps, mode, &mut rng).map_err(input)?;
    Ok((ep, result, label))
}

/// A rollout as JSON: per-step predictions, ground truth and observer pose.
pub fn rollout_json(run: &Loaded, result: &RolloutResult, label: &str) -> serde_json::Value {
    let steps: Vec<serde_json::Value> = result
        .steps
        .iter()
        .map(|s| {
            let peds: Vec<serde_json::Value> = s
                .ped_ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    json!({
                        "ped_id": id,
                        "predicted": s.predicted[i].state,
                        "sigma": s.predicted[i].sigma,
                        "truth": s.truth[i],
                        "scored": s.scored[i],
                    })
                })
                .collect();
            json!({ "tau": s.tau, "pose": s.pose, "pedestrians": peds })
        })
        .collect();
    let metrics = ade_fde(result, result.steps.len())
        .ok()
        .map(|(ade, fde)| json!({ "ade": ade, "fde": fde }));
    json!({
        "format_version": EXPORT_FORMAT,
        "episode": result.episode,
        "start": result.start,
        "variant": label,
        "metrics": metrics,
        "steps": steps,
        "config": run.config.echo(),
    })
}
