//! The run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use crowdwm_core::datagen::DatagenConfig;
use crowdwm_core::eval::{EvalConfig, SplitMode, SplitSpec};
use crowdwm_core::geometry::CameraRig;
use crowdwm_core::model::{ModelConfig, Variant};
use crowdwm_core::train::TrainConfig;
use crowdwm_core::trajectories::DEFAULT_TIMESTEP;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory holding the scene track tables.
    pub scenes: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub plots: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            scenes: "data/scenes".into(),
            dataset: "runs/dataset".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
            plots: "runs/plots".into(),
        }
    }
}

/// One track table, `frame ped x y` per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSource {
    pub name: String,
    /// Relative to `paths.scenes`.
    pub file: PathBuf,
    #[serde(default = "default_timestep")]
    pub timestep: f64,
    /// Frame-id increment per timestep; inferred when absent.
    #[serde(default)]
    pub stride: Option<i64>,
}

fn default_timestep() -> f64 {
    DEFAULT_TIMESTEP
}

fn default_scenes() -> Vec<SceneSource> {
    [
        ("hotel", "biwi_hotel.txt"),
        ("eth", "biwi_eth.txt"),
        ("students", "students003.txt"),
    ]
    .into_iter()
    .map(|(name, file)| SceneSource {
        name: name.into(),
        file: file.into(),
        timestep: DEFAULT_TIMESTEP,
        stride: None,
    })
    .collect()
}

/// Everything a command needs. The top-level `seed` is copied into the
/// data, model-init, training and evaluation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub scenes: Vec<SceneSource>,
    pub rig: CameraRig,
    pub datagen: DatagenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            scenes: default_scenes(),
            rig: CameraRig::default(),
            datagen: DatagenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub split: Option<SplitMode>,
    pub hold_out: Option<String>,
    pub epochs: Option<usize>,
}

/// A loaded configuration. `base` is the directory relative paths resolve
/// against: the config file's directory, or the working directory.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
    /// One line per applied override.
    pub overrides: Vec<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.model.init_seed = self.seed;
        self.eval.seed = self.seed;
    }

    /// Applies overrides, returning a description of each change.
    pub fn apply(&mut self, o: &Overrides) -> Vec<String> {
        let mut log = Vec::new();
        if let Some(seed) = o.seed {
            log.push(format!("seed: {} -> {seed}", self.seed));
            self.seed = seed;
        }
        if let Some(v) = o.variant {
            log.push(format!("model.variant: {:?} -> {v:?}", self.model.variant));
            self.model.variant = v;
        }
        if let Some(mode) = o.split {
            log.push(format!(
                "split.mode: {} -> {}",
                self.split.mode.as_str(),
                mode.as_str()
            ));
            self.split.mode = mode;
            if mode == SplitMode::Iv && o.hold_out.is_none() {
                self.split.held_out = None;
            }
        }
        if let Some(h) = &o.hold_out {
            log.push(format!(
                "split.held_out: {:?} -> {h:?}",
                self.split.held_out
            ));
            self.split.held_out = Some(h.clone());
        }
        if let Some(e) = o.epochs {
            log.push(format!("train.epochs: {} -> {e}", self.train.epochs));
            self.train.epochs = e;
        }
        self.propagate_seed();
        log
    }

    /// The configuration as embedded in output artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

impl Loaded {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let (mut config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
                let cfg = RunConfig::from_toml(&text)
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        let overrides = config.apply(overrides);
        Ok(Self {
            config,
            base,
            overrides,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.dataset)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.checkpoints)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.reports)
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.plots)
    }

    pub fn scene_path(&self, s: &SceneSource) -> PathBuf {
        self.resolve(&self.config.paths.scenes).join(&s.file)
    }

    /// Name of the training run directory: variant, ablation, split and
    /// held-out scene.
    pub fn run_name(&self) -> String {
        let c = &self.config;
        let mut name = match c.model.variant {
            Variant::D => "d".to_string(),
            Variant::G => "g".to_string(),
        };
        if !c.model.ablation.use_ego_view {
            name.push_str("-noego");
        }
        if !c.model.ablation.use_cross_attn {
            name.push_str("-nocross");
        }
        name.push('_');
        name.push_str(c.split.mode.as_str());
        if let Some(h) = &c.split.held_out {
            name.push('_');
            name.push_str(h);
        }
        name
    }
}
