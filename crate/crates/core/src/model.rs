//! Transformer CVAE over pedestrian tokens.
//!
//! * Vision module: self-attention over in-image tokens, producing the
//!   embeddings `H` and the per-pedestrian latent prior.
//! * Memory module (likelihood): self-attention over the action token and
//!   on-ground tokens, then cross-attention into `H`.
//! * Posterior: same layout as the memory module, queried with the future
//!   on-ground states; used only for training.

use crowdwm_nn::{
    AttnMask, Graph, LayerNorm, Linear, MaskMode, Mat, Mlp, MultiHeadAttention, NnError,
    ParamStore, Var,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{InImageState, OnGroundState};
use crate::geometry::ObserverAction;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    D,
    G,
}

impl Variant {
    pub fn output_dim(self) -> usize {
        match self {
            Variant::D => 4,
            Variant::G => 6,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "d" => Ok(Variant::D),
            "g" => Ok(Variant::G),
            other => Err(format!("unknown variant {other:?} (expected d or g)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_ego_view: bool,
    pub use_cross_attn: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_ego_view: true,
            use_cross_attn: true,
        }
    }
}

/// Per-feature standardization of in-image states `(u, v, du, dv)` before
/// tokenization. The camera flag is passed through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputNorm {
    pub mean: [f64; 4],
    pub scale: [f64; 4],
}

impl Default for InputNorm {
    fn default() -> Self {
        Self::from_image(640.0, 480.0)
    }
}

impl InputNorm {
    /// Image-size scaling: positions relative to the principal point in
    /// image widths/heights, velocities in tenths of them.
    pub fn from_image(width: f64, height: f64) -> Self {
        Self {
            mean: [width / 2.0, height / 2.0, 0.0, 0.0],
            scale: [width, height, width / 10.0, height / 10.0],
        }
    }

    /// Mean and standard deviation of each feature over `states`. Features
    /// with (near) zero spread keep a unit scale.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a InImageState>) -> Option<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for s in states {
            let f = [s.u, s.v, s.du, s.dv];
            for k in 0..4 {
                sum[k] += f[k];
                sq[k] += f[k] * f[k];
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let mut mean = [0.0; 4];
        let mut scale = [1.0; 4];
        for k in 0..4 {
            mean[k] = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0);
            if var.sqrt() > 1e-9 {
                scale[k] = var.sqrt();
            }
        }
        Some(Self { mean, scale })
    }

    pub fn apply(&self, s: &InImageState) -> [f64; 5] {
        let f = [s.u, s.v, s.du, s.dv];
        let mut out = [0.0; 5];
        for k in 0..4 {
            out[k] = (f[k] - self.mean[k]) / self.scale[k];
        }
        out[4] = s.camera.flag();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_s: usize,
    pub d_z: usize,
    pub heads: usize,
    pub vision_self_attn_layers: usize,
    pub memory_self_attn_layers: usize,
    pub memory_cross_attn_layers: usize,
    pub tokenizer_hidden: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    pub ablation: Ablation,
    pub mask_mode: MaskMode,
    /// Weight of the KL term.
    pub beta: f64,
    /// Use `Δ²/(2σ)²` without log-σ terms for the G position likelihood.
    pub literal_g_loss: bool,
    pub norm: InputNorm,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_s: 32,
            d_z: 32,
            heads: 6,
            vision_self_attn_layers: 2,
            memory_self_attn_layers: 2,
            memory_cross_attn_layers: 2,
            tokenizer_hidden: 16,
            ffn_hidden: 64,
            variant: Variant::D,
            ablation: Ablation::default(),
            mask_mode: MaskMode::Renormalize,
            beta: 1.0,
            literal_g_loss: false,
            norm: InputNorm::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0
            || self.d_z == 0
            || self.heads == 0
            || self.tokenizer_hidden == 0
            || self.ffn_hidden == 0
        {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(ModelError::Config(format!(
                "beta {} must be non-negative",
                self.beta
            )));
        }
        if !self.norm.scale.iter().all(|&x| x > 0.0 && x.is_finite())
            || !self.norm.mean.iter().all(|x| x.is_finite())
        {
            return Err(ModelError::Config(
                "input normalization must be finite with positive scales".into(),
            ));
        }
        Ok(())
    }
}

/// Diagonal Gaussian parameters, one row per pedestrian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Mat,
    pub sigma: Mat,
}

/// `z = μ + σ ⊙ ε`.
pub fn sample_latent(params: &GaussianParams, noise: &Mat) -> Mat {
    &params.mu + &(&params.sigma * noise)
}

/// KL(q ‖ p) summed over dimensions and rows.
pub fn kl_diag_gaussian(q: &GaussianParams, p: &GaussianParams) -> f64 {
    let mut total = 0.0;
    for (((mq, sq), mp), sp) in
        q.mu.iter()
            .zip(q.sigma.iter())
            .zip(p.mu.iter())
            .zip(p.sigma.iter())
    {
        total += (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5;
    }
    total
}

/// Pre-norm residual block: optional attention sublayer, then a two-layer
/// feed-forward sublayer.
#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.d_s)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_s, cfg.heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.d_s)?,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                &[cfg.d_s, cfg.ffn_hidden, cfg.d_s],
                rng,
            )?,
        })
    }

    /// `sources = None` is self-attention. `mask = None` skips the attention
    /// sublayer entirely.
    fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        sources: Option<Var>,
        mask: Option<&AttnMask>,
        mode: MaskMode,
    ) -> Result<Var> {
        let mut x = x;
        if let Some(mask) = mask {
            let h = self.ln_attn.forward(g, x)?;
            let src = sources.unwrap_or(h);
            let a = self.attn.forward(g, src, h, Some(mask), mode)?;
            x = g.add(x, a)?;
        }
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Action + pedestrian tokens, self-attention, cross-attention into `H`,
/// per-pedestrian output head. Shared layout of the memory module and the
/// posterior.
#[derive(Debug, Clone)]
struct Decoder {
    ped_tok: Mlp,
    act_tok: Mlp,
    self_blocks: Vec<Block>,
    cross_blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Mlp,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        ped_in: usize,
        out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let th = cfg.tokenizer_hidden;
        let self_blocks = (0..cfg.memory_self_attn_layers)
            .map(|i| Block::new(store, &format!("{name}.self{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let cross_blocks = if cfg.ablation.use_cross_attn {
            (0..cfg.memory_cross_attn_layers)
                .map(|i| Block::new(store, &format!("{name}.cross{i}"), cfg, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            ped_tok: Mlp::new(
                store,
                &format!("{name}.ped_tok"),
                &[ped_in, th, cfg.d_s],
                rng,
            )?,
            act_tok: Mlp::new(store, &format!("{name}.act_tok"), &[3, th, cfg.d_s], rng)?,
            self_blocks,
            cross_blocks,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), cfg.d_s)?,
            head: Mlp::new(store, &format!("{name}.head"), &[cfg.d_s, th, out], rng)?,
        })
    }

    fn tokens(&self, g: &mut Graph<'_>, action: &ObserverAction, ped_features: Mat) -> Result<Var> {
        let a =
            g.input(Array2::from_shape_vec((1, 3), action.as_array().to_vec()).expect("3 values"));
        let a = self.act_tok.forward(g, a)?;
        if ped_features.nrows() == 0 {
            return Ok(a);
        }
        let p = g.input(ped_features);
        let p = self.ped_tok.forward(g, p)?;
        Ok(g.concat_rows(&[a, p])?)
    }

    /// `tokens`: (N+1)×d_s with the action in row 0. `h`: N×d_s vision
    /// embeddings, or `None` without the ego view. Returns N×out.
    fn forward(
        &self,
        g: &mut Graph<'_>,
        cfg: &ModelConfig,
        tokens: Var,
        h: Option<Var>,
        visible: &[bool],
    ) -> Result<Var> {
        let n = visible.len();
        let mode = cfg.mask_mode;
        let mut self_vis = vec![true];
        self_vis.extend_from_slice(visible);
        let self_mask = AttnMask::self_with_diagonal(&self_vis);
        let mut x = tokens;
        let any_visible = visible.iter().any(|&v| v);
        if cfg.ablation.use_cross_attn {
            for b in &self.self_blocks {
                x = b.forward(g, x, None, Some(&self_mask), mode)?;
            }
            let cross_mask = AttnMask::from_sources(n + 1, visible);
            let attend = h.is_some() && any_visible;
            for b in &self.cross_blocks {
                x = b.forward(g, x, h, attend.then_some(&cross_mask), mode)?;
            }
        } else {
            if let (Some(h), true) = (h, n > 0) {
                let mut m = Array2::zeros((n + 1, cfg.d_s));
                for (i, &v) in visible.iter().enumerate() {
                    if v {
                        m.row_mut(i + 1).fill(1.0);
                    }
                }
                let zero = g.input(Array2::zeros((1, cfg.d_s)));
                let padded = g.concat_rows(&[zero, h])?;
                let m = g.input(m);
                let add = g.mul(padded, m)?;
                x = g.add(x, add)?;
            }
            for b in &self.self_blocks {
                x = b.forward(g, x, None, Some(&self_mask), mode)?;
            }
        }
        let x = self.ln_out.forward(g, x)?;
        let rows: Vec<usize> = (1..=n).collect();
        let peds = g.select_rows(x, &rows)?;
        Ok(self.head.forward(g, peds)?)
    }
}

/// Inputs of one transition `τ → τ+1` for N pedestrians.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    /// Observed in-image states at `τ`; `None` is masked.
    pub in_image: Vec<Option<InImageState>>,
    /// Action moving the observer from frame `τ` to `τ+1`.
    pub action: ObserverAction,
    /// On-ground states at `τ` in the frame at `τ` (zero when fresh).
    pub past: Vec<OnGroundState>,
    /// Pedestrians without a past state.
    pub fresh: Vec<bool>,
}

impl StepInput {
    pub fn len(&self) -> usize {
        self.in_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_image.is_empty()
    }

    pub fn visible(&self) -> Vec<bool> {
        self.in_image.iter().map(|s| s.is_some()).collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.in_image.len();
        if self.past.len() != n || self.fresh.len() != n {
            return Err(ModelError::Contract(format!(
                "inconsistent pedestrian counts: {} in-image, {} past, {} fresh",
                n,
                self.past.len(),
                self.fresh.len()
            )));
        }
        Ok(())
    }
}

/// One training example: a step plus the future states at `τ+1` (in the
/// frame at `τ+1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub step: StepInput,
    pub future: Vec<Option<OnGroundState>>,
}

impl TrainExample {
    /// Visible at `τ` and present at `τ+1`.
    pub fn scored(&self) -> Vec<usize> {
        (0..self.step.len())
            .filter(|&i| self.step.in_image[i].is_some() && self.future[i].is_some())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    PriorMean,
    PriorSample,
}

/// Per-pedestrian prediction in the frame at `τ+1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub state: OnGroundState,
    /// Position standard deviations (G variant only).
    pub sigma: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct VisionOut {
    pub h: Var,
    pub mu: Var,
    pub log_sigma: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Debug, Clone)]
pub struct CrowdWorldModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    fpv_tok: Mlp,
    vision_blocks: Vec<Block>,
    vision_ln: LayerNorm,
    prior_head: Linear,
    memory: Decoder,
    posterior: Decoder,
    frozen: bool,
}

impl CrowdWorldModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let fpv_tok = Mlp::new(
            &mut store,
            "vision.tok",
            &[5, cfg.tokenizer_hidden, cfg.d_s],
            &mut rng,
        )?;
        let vision_blocks = (0..cfg.vision_self_attn_layers)
            .map(|i| Block::new(&mut store, &format!("vision.self{i}"), cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let vision_ln = LayerNorm::new(&mut store, "vision.ln_out", cfg.d_s)?;
        let prior_head = Linear::new(&mut store, "prior.head", cfg.d_s, 2 * cfg.d_z, &mut rng)?;
        let memory = Decoder::new(
            &mut store,
            "memory",
            cfg,
            5 + cfg.d_z,
            cfg.variant.output_dim(),
            &mut rng,
        )?;
        let posterior = Decoder::new(&mut store, "posterior", cfg, 5, 2 * cfg.d_z, &mut rng)?;
        Ok(Self {
            config,
            store,
            fpv_tok,
            vision_blocks,
            vision_ln,
            prior_head,
            memory,
            posterior,
            frozen: false,
        })
    }

    /// Marks the model as inference-only; the posterior becomes unavailable.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn fpv_features(&self, state: &InImageState) -> [f64; 5] {
        self.config.norm.apply(state)
    }

    /// N×d_s tokens; masked pedestrians get the token of an all-zero
    /// feature vector.
    pub fn tokenize_fpv(&self, g: &mut Graph<'_>, states: &[Option<InImageState>]) -> Result<Var> {
        let mut m = Array2::zeros((states.len(), 5));
        for (i, s) in states.iter().enumerate() {
            if let Some(s) = s {
                for (j, x) in self.fpv_features(s).into_iter().enumerate() {
                    m[[i, j]] = x;
                }
            }
        }
        if states.is_empty() {
            return Ok(g.input(Array2::zeros((0, self.config.d_s))));
        }
        let x = g.input(m);
        Ok(self.fpv_tok.forward(g, x)?)
    }

    pub fn vision_forward(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        visible: &[bool],
    ) -> Result<VisionOut> {
        let mask = AttnMask::self_with_diagonal(visible);
        let mut x = tokens;
        for b in &self.vision_blocks {
            x = b.forward(g, x, None, Some(&mask), self.config.mask_mode)?;
        }
        let h = self.vision_ln.forward(g, x)?;
        let params = self.prior_head.forward(g, h)?;
        let dz = self.config.d_z;
        Ok(VisionOut {
            h,
            mu: g.slice_cols(params, 0, dz)?,
            log_sigma: g.slice_cols(params, dz, dz)?,
        })
    }

    /// Past states re-expressed in the frame after `action`, the fresh bit
    /// and the latent code, embedded below the action token.
    pub fn tokenize_ground(
        &self,
        g: &mut Graph<'_>,
        action: &ObserverAction,
        past: &[OnGroundState],
        fresh: &[bool],
        z: Var,
    ) -> Result<Var> {
        let n = past.len();
        let mut m = Array2::zeros((n, 5));
        for i in 0..n {
            let y = past[i].transformed(action).as_array();
            for j in 0..4 {
                m[[i, j]] = y[j];
            }
            m[[i, 4]] = if fresh[i] { 1.0 } else { 0.0 };
        }
        if n == 0 {
            return self.memory.tokens(g, action, m);
        }
        let a =
            g.input(Array2::from_shape_vec((1, 3), action.as_array().to_vec()).expect("3 values"));
        let a = self.memory.act_tok.forward(g, a)?;
        let y = g.input(m);
        let yz = g.concat_cols(&[y, z])?;
        let p = self.memory.ped_tok.forward(g, yz)?;
        Ok(g.concat_rows(&[a, p])?)
    }

    pub fn memory_forward(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        h: Option<Var>,
        visible: &[bool],
    ) -> Result<Var> {
        let h = if self.config.ablation.use_ego_view {
            h
        } else {
            None
        };
        self.memory.forward(g, &self.config, tokens, h, visible)
    }

    /// Posterior parameters `(μ_q, log σ_q)` given the future states.
    pub fn posterior_forward(
        &self,
        g: &mut Graph<'_>,
        action: &ObserverAction,
        future: &[Option<OnGroundState>],
        h: Option<Var>,
        visible: &[bool],
    ) -> Result<(Var, Var)> {
        if self.frozen {
            return Err(ModelError::Contract(
                "posterior is only available during training".into(),
            ));
        }
        let mut m = Array2::zeros((future.len(), 5));
        for (i, f) in future.iter().enumerate() {
            match f {
                Some(y) => {
                    for (j, x) in y.as_array().into_iter().enumerate() {
                        m[[i, j]] = x;
                    }
                }
                None => m[[i, 4]] = 1.0,
            }
        }
        let tokens = self.posterior.tokens(g, action, m)?;
        let h = if self.config.ablation.use_ego_view {
            h
        } else {
            None
        };
        let out = self
            .posterior
            .forward(g, &self.config, tokens, h, visible)?;
        let dz = self.config.d_z;
        Ok((g.slice_cols(out, 0, dz)?, g.slice_cols(out, dz, dz)?))
    }

    /// Vision embeddings and prior; a standard normal prior without the
    /// ego view.
    fn prior(&self, g: &mut Graph<'_>, step: &StepInput) -> Result<(Option<Var>, Var, Var)> {
        let n = step.len();
        let dz = self.config.d_z;
        if self.config.ablation.use_ego_view && n > 0 {
            let tokens = self.tokenize_fpv(g, &step.in_image)?;
            let v = self.vision_forward(g, tokens, &step.visible())?;
            Ok((Some(v.h), v.mu, v.log_sigma))
        } else {
            let mu = g.input(Array2::zeros((n, dz)));
            let ls = g.input(Array2::zeros((n, dz)));
            Ok((None, mu, ls))
        }
    }

    fn reparameterize(g: &mut Graph<'_>, mu: Var, log_sigma: Var, noise: &Mat) -> Result<Var> {
        let sigma = g.exp(log_sigma);
        let eps = g.input(noise.clone());
        let s = g.mul(sigma, eps)?;
        Ok(g.add(mu, s)?)
    }

    /// Negative ELBO of one example with posterior noise `noise` (N×d_z).
    /// Unscored pedestrians take latent codes from the prior (with the same
    /// noise) and contribute no loss.
    pub fn elbo_loss(
        &self,
        g: &mut Graph<'_>,
        ex: &TrainExample,
        noise: &Mat,
    ) -> Result<LossParts> {
        ex.step.check()?;
        let n = ex.step.len();
        let dz = self.config.d_z;
        if ex.future.len() != n || noise.dim() != (n, dz) {
            return Err(ModelError::Contract(format!(
                "example with {n} pedestrians has {} futures and noise {:?}",
                ex.future.len(),
                noise.dim()
            )));
        }
        let scored = ex.scored();
        if scored.is_empty() {
            return Err(ModelError::Contract(
                "example has no scored pedestrian".into(),
            ));
        }
        let visible = ex.step.visible();
        let (h, mu_p, ls_p) = self.prior(g, &ex.step)?;
        let (mu_q, ls_q) = self.posterior_forward(g, &ex.step.action, &ex.future, h, &visible)?;

        let z_q = Self::reparameterize(g, mu_q, ls_q, noise)?;
        let z_p = Self::reparameterize(g, mu_p, ls_p, noise)?;
        let mut sel = Array2::zeros((n, dz));
        for &i in &scored {
            sel.row_mut(i).fill(1.0);
        }
        let inv = sel.mapv(|s: f64| 1.0 - s);
        let sel = g.input(sel);
        let inv = g.input(inv);
        let zq_part = g.mul(z_q, sel)?;
        let zp_part = g.mul(z_p, inv)?;
        let z = g.add(zq_part, zp_part)?;

        let tokens = self.tokenize_ground(g, &ex.step.action, &ex.step.past, &ex.step.fresh, z)?;
        let out = self.memory_forward(g, tokens, h, &visible)?;

        let pred = g.select_rows(out, &scored)?;
        let mut target = Array2::zeros((scored.len(), 4));
        for (r, &i) in scored.iter().enumerate() {
            let y = ex.future[i].expect("scored implies present").as_array();
            for j in 0..4 {
                target[[r, j]] = y[j];
            }
        }
        let sel_q = (g.select_rows(mu_q, &scored)?, g.select_rows(ls_q, &scored)?);
        let sel_p = (g.select_rows(mu_p, &scored)?, g.select_rows(ls_p, &scored)?);
        loss_elbo(g, &self.config, pred, target, sel_q, sel_p)
    }

    /// Prior parameters for a step, as plain matrices.
    pub fn prior_params(&self, step: &StepInput) -> Result<GaussianParams> {
        let mut g = Graph::new(&self.store);
        let (_, mu, ls) = self.prior(&mut g, step)?;
        Ok(GaussianParams {
            mu: g.value(mu).clone(),
            sigma: g.value(ls).mapv(f64::exp),
        })
    }

    /// One-step prediction with latent codes from the prior. `noise` is
    /// required for [`LatentMode::PriorSample`].
    pub fn predict(
        &self,
        step: &StepInput,
        mode: LatentMode,
        noise: Option<&Mat>,
    ) -> Result<Vec<Prediction>> {
        let out = self.predict_raw(step, mode, noise)?;
        Ok(self.decode(&out))
    }

    /// Raw head outputs (N×4 for D, N×6 for G).
    pub fn predict_raw(
        &self,
        step: &StepInput,
        mode: LatentMode,
        noise: Option<&Mat>,
    ) -> Result<Mat> {
        step.check()?;
        let n = step.len();
        if n == 0 {
            return Ok(Array2::zeros((0, self.config.variant.output_dim())));
        }
        let mut g = Graph::new(&self.store);
        let (h, mu, ls) = self.prior(&mut g, step)?;
        let z = match mode {
            LatentMode::PriorMean => mu,
            LatentMode::PriorSample => {
                let noise = noise
                    .ok_or_else(|| ModelError::Contract("prior sampling needs noise".into()))?;
                if noise.dim() != (n, self.config.d_z) {
                    return Err(ModelError::Contract(format!(
                        "noise shape {:?}",
                        noise.dim()
                    )));
                }
                Self::reparameterize(&mut g, mu, ls, noise)?
            }
        };
        let tokens = self.tokenize_ground(&mut g, &step.action, &step.past, &step.fresh, z)?;
        let out = self.memory_forward(&mut g, tokens, h, &step.visible())?;
        Ok(g.value(out).clone())
    }

    pub fn decode(&self, out: &Mat) -> Vec<Prediction> {
        out.rows()
            .into_iter()
            .map(|r| match self.config.variant {
                Variant::D => Prediction {
                    state: OnGroundState::from_array([r[0], r[1], r[2], r[3]]),
                    sigma: None,
                },
                Variant::G => Prediction {
                    state: OnGroundState::from_array([r[0], r[1], r[4], r[5]]),
                    sigma: Some((r[2].exp(), r[3].exp())),
                },
            })
            .collect()
    }
}

/// Row-wise KL(q ‖ p) between diagonal Gaussians given log-σ; N×1.
pub fn kl_graph(g: &mut Graph<'_>, mu_q: Var, ls_q: Var, mu_p: Var, ls_p: Var) -> Result<Var> {
    // ln σp − ln σq + ½ exp(2(ln σq − ln σp)) + (μq − μp)² / (2σp²) − ½,
    // arranged so that q = p gives exactly zero
    let log_ratio = g.sub(ls_p, ls_q)?;
    let neg_ratio = g.scale(log_ratio, -2.0);
    let var_ratio = g.exp(neg_ratio);
    let dmu = g.sub(mu_q, mu_p)?;
    let dmu2 = g.square(dmu);
    let neg_two_lp = g.scale(ls_p, -2.0);
    let inv_var_p = g.exp(neg_two_lp);
    let mean_term = g.mul(dmu2, inv_var_p)?;
    let num = g.add(var_ratio, mean_term)?;
    let half = g.scale(num, 0.5);
    let terms = g.add(log_ratio, half)?;
    let terms = g.add_scalar(terms, -0.5);
    let (_, d) = g.shape(terms);
    let ones = g.input(Array2::ones((d, 1)));
    Ok(g.matmul(terms, ones)?)
}

/// Negative ELBO from already-selected rows: `pred` (M×out), `target` (M×4)
/// and the posterior / prior `(μ, log σ)` of the same M pedestrians. Both
/// terms are averaged over the M rows.
pub fn loss_elbo(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    pred: Var,
    target: Mat,
    q: (Var, Var),
    p: (Var, Var),
) -> Result<LossParts> {
    let m = target.nrows();
    if m == 0 {
        return Err(ModelError::Contract("loss over zero pedestrians".into()));
    }
    let recon = reconstruction(g, cfg, pred, target, m as f64)?;
    let kl_rows = kl_graph(g, q.0, q.1, p.0, p.1)?;
    let kl_sum = g.sum(kl_rows);
    let kl = g.scale(kl_sum, 1.0 / m as f64);
    let weighted = g.scale(kl, cfg.beta);
    let total = g.add(recon, weighted)?;
    Ok(LossParts { total, recon, kl })
}

fn reconstruction(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    pred: Var,
    target: Mat,
    m: f64,
) -> Result<Var> {
    match cfg.variant {
        Variant::D => {
            let t = g.input(target);
            let d = g.sub(pred, t)?;
            let sq = g.square(d);
            let s = g.sum(sq);
            Ok(g.scale(s, 1.0 / m))
        }
        Variant::G => {
            let mu = g.slice_cols(pred, 0, 2)?;
            let ls = g.slice_cols(pred, 2, 2)?;
            let vel = g.slice_cols(pred, 4, 2)?;
            let t_pos = g.input(target.slice(ndarray::s![.., 0..2]).to_owned());
            let t_vel = g.input(target.slice(ndarray::s![.., 2..4]).to_owned());
            let d = g.sub(mu, t_pos)?;
            let d2 = g.square(d);
            let neg2 = g.scale(ls, -2.0);
            let inv_var = g.exp(neg2);
            let quad = g.mul(d2, inv_var)?;
            let pos = if cfg.literal_g_loss {
                // Δ² / (2σ)²
                g.scale(quad, 0.25)
            } else {
                let half = g.scale(quad, 0.5);
                g.add(half, ls)?
            };
            let dv = g.sub(vel, t_vel)?;
            let dv2 = g.square(dv);
            let pos_sum = g.sum(pos);
            let vel_sum = g.sum(dv2);
            let s = g.add(pos_sum, vel_sum)?;
            Ok(g.scale(s, 1.0 / m))
        }
    }
}
