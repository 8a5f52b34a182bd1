//! The optimization loop: forward pipeline, losses, backward pass, AdamW
//! updates with stratified depth resampling, and evaluation.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fields::FieldGrids;
use crate::geometry::{normalize_frustum_coords, sample_depth_planes, Camera, Frustum, FrustumSpec};
use crate::grid::{Grid, Real};
use crate::lifting::{self, AttentionScale, Featurizer, LiftingInit, LiftingVars};
use crate::losses::{self, LossParts, LossWeights};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, Moments};
use crate::params::ParamSet;
use crate::render::{self, OracleImage, RenderOutput};

/// Which supervision signals drive the fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "mono-rgb")]
    MonoRgb,
    #[serde(rename = "mono-rgb+depth")]
    MonoRgbDepth,
    #[serde(rename = "mono-rgb+depth+sdf")]
    MonoRgbDepthSdf,
    #[serde(rename = "stereo-rgb")]
    StereoRgb,
    #[serde(rename = "stereo-rgb+sdf")]
    StereoRgbSdf,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::MonoRgb,
        Mode::MonoRgbDepth,
        Mode::MonoRgbDepthSdf,
        Mode::StereoRgb,
        Mode::StereoRgbSdf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::MonoRgb => "mono-rgb",
            Mode::MonoRgbDepth => "mono-rgb+depth",
            Mode::MonoRgbDepthSdf => "mono-rgb+depth+sdf",
            Mode::StereoRgb => "stereo-rgb",
            Mode::StereoRgbSdf => "stereo-rgb+sdf",
        }
    }

    pub fn uses_depth(self) -> bool {
        matches!(self, Mode::MonoRgbDepth | Mode::MonoRgbDepthSdf)
    }

    pub fn uses_sdf(self) -> bool {
        matches!(self, Mode::MonoRgbDepthSdf | Mode::StereoRgbSdf)
    }

    pub fn is_stereo(self) -> bool {
        matches!(self, Mode::StereoRgb | Mode::StereoRgbSdf)
    }

    pub fn views(self) -> usize {
        if self.is_stereo() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown supervision mode {s:?}")))
    }
}

/// What the optimizer updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Learnables {
    /// The lifting network, fed by fixed image features.
    #[default]
    #[serde(rename = "pipeline")]
    Pipeline,
    /// The frustum SDF and color grids directly.
    #[serde(rename = "scene-fit")]
    SceneFit,
}

/// Multiply the learning rate by `factor` once `at` of the steps are done.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    pub at: f64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub channels: usize,
    pub weights: LossWeights,
    pub beta_init: f64,
    pub mode: Mode,
    pub learnables: Learnables,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Stratified plane perturbation during fitting.
    pub perturb: bool,
    pub clip_norm: f64,
    pub attention_scale: AttentionScale,
    pub init: LiftingInit,
    pub lr_drop: Option<LrDrop>,
    /// Overrides the scene's frustum layout.
    pub frustum: Option<FrustumSpec>,
}

impl Default for FitConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        FitConfig {
            steps: 2000,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            channels: 16,
            weights: LossWeights::default(),
            beta_init: 0.1,
            mode: Mode::MonoRgbDepthSdf,
            learnables: Learnables::Pipeline,
            eval_every: 0,
            perturb: true,
            clip_norm: 10.0,
            attention_scale: AttentionScale::Depth,
            init: LiftingInit::default(),
            lr_drop: None,
            frustum: None,
        }
    }
}

impl FitConfig {
    /// Parses and validates; unknown keys are rejected with their JSON path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: FitConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and nonnegative, got {}", self.lr));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if !(self.beta_init > 0.0 && self.beta_init.is_finite()) {
            return bad(format!("beta_init must be positive, got {}", self.beta_init));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if let Some(d) = self.lr_drop {
            if !(0.0..=1.0).contains(&d.at) || !(d.factor > 0.0) {
                return bad(format!("invalid learning-rate drop {d:?}"));
            }
        }
        if let Some(f) = &self.frustum {
            f.validate()?;
        }
        self.weights.validate()?;
        if self.lr > 0.0 {
            self.adam(self.lr).validate()?;
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.lr_drop {
            Some(d) if t as f64 > d.at * self.steps as f64 => self.lr * d.factor,
            _ => self.lr,
        }
    }
}

/// Sparse depth samples, row-major, NaN outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Dense ground truth for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTruth {
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl DenseTruth {
    pub fn valid(&self, k: usize) -> bool {
        self.opacity[k] >= 0.5
    }
}

/// One posed image and whatever supervision accompanies it.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub width: usize,
    pub height: usize,
    /// `[H, W, 3]` in `[0, 1]`.
    pub rgb: Grid<f64>,
    pub sparse: Option<SparseDepth>,
    pub truth: Option<DenseTruth>,
}

impl View {
    pub fn from_oracle(name: impl Into<String>, camera: Camera, img: &OracleImage) -> Self {
        View {
            name: name.into(),
            camera,
            width: img.width,
            height: img.height,
            rgb: img.rgb_grid(),
            sparse: Some(SparseDepth {
                depth: img.sparse_depth.clone(),
                mask: img.sparse_mask.clone(),
            }),
            truth: Some(DenseTruth {
                depth: img.depth.clone(),
                opacity: img.opacity.clone(),
            }),
        }
    }

    fn backproject_where(&self, depth: &[f64], keep: impl Fn(usize) -> bool) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        for i in 0..self.height {
            for j in 0..self.width {
                let k = i * self.width + j;
                if keep(k) {
                    let p = self
                        .camera
                        .backproject(j as f64 + 0.5, i as f64 + 0.5, depth[k])
                        .expect("valid depths are positive");
                    out.push(self.camera.to_world(&p));
                }
            }
        }
        out
    }

    /// World points behind the sparse depth samples.
    pub fn sparse_surface(&self) -> Vec<Vector3<f64>> {
        match &self.sparse {
            Some(s) => self.backproject_where(&s.depth, |k| s.mask[k]),
            None => Vec::new(),
        }
    }

    /// World points behind every foreground pixel of the dense truth.
    pub fn dense_surface(&self) -> Vec<Vector3<f64>> {
        match &self.truth {
            Some(t) => self.backproject_where(&t.depth, |k| t.valid(k)),
            None => Vec::new(),
        }
    }
}

/// Views of one scene; view 0 is the source camera that owns the frustum.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionBatch {
    pub frustum: FrustumSpec,
    pub views: Vec<View>,
    /// Surface samples in world space (the stand-in for projected LiDAR).
    pub surface: Vec<Vector3<f64>>,
}

impl SupervisionBatch {
    /// Surface samples are taken from the source view's sparse depth.
    pub fn new(frustum: FrustumSpec, views: Vec<View>) -> Result<Self> {
        frustum.validate()?;
        if views.is_empty() {
            return Err(Error::Config("need at least one view".into()));
        }
        for v in &views {
            if v.rgb.shape() != [v.height, v.width, 3] {
                return Err(Error::Config(format!("view {} image does not match its resolution", v.name)));
            }
            if v.height < frustum.height || v.width < frustum.width {
                return Err(Error::Config(format!(
                    "view {} ({}x{}) is smaller than the feature plane",
                    v.name, v.width, v.height
                )));
            }
        }
        let surface = views[0].sparse_surface();
        Ok(SupervisionBatch { frustum, views, surface })
    }

    pub fn source(&self) -> &View {
        &self.views[0]
    }

    fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode.is_stereo() && self.views.len() < 2 {
            return Err(Error::Config(format!("mode {mode} needs two views, found {}", self.views.len())));
        }
        if (mode.uses_depth() || mode.uses_sdf()) && self.views[0].sparse.is_none() {
            return Err(Error::Config(format!("mode {mode} needs sparse depth for {}", self.views[0].name)));
        }
        Ok(())
    }
}

/// Fixed context recorded alongside the learnables.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMeta {
    pub learnables: Learnables,
    pub channels: usize,
    pub frustum: FrustumSpec,
    /// Source camera at image resolution.
    pub camera: Camera,
    pub image_width: usize,
    pub image_height: usize,
    pub attention_scale: AttentionScale,
}

/// Everything that evolves during fitting.
#[derive(Clone, Debug)]
pub struct FitState<T> {
    pub params: ParamSet<T>,
    pub moments: Vec<Moments<T>>,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Fixed `[H, W, C]` image features in pipeline mode.
    pub features: Option<Grid<T>>,
    pub meta: StateMeta,
}

pub const LOG_BETA: &str = "log_beta";
pub const FIELD_SDF: &str = "field.sdf";
pub const FIELD_RGB: &str = "field.rgb_logit";

/// Per-step losses (unweighted parts) and the current `beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub rgb: f64,
    pub depth: f64,
    pub sdf: f64,
    pub beta: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,L_total,L_rgb,L_depth,L_sdf,beta";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.total, self.rgb, self.depth, self.sdf, self.beta
        )
    }
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    pub fields: FieldGrids,
    pub source: Frustum,
    /// `[H, W, D, C]` features behind the SDF channel, pipeline mode only.
    pub features: Option<Var>,
    /// Parameter leaves in `params` order.
    pub leaves: Vec<Var>,
}

impl<T: Real> FitState<T> {
    pub fn init(config: &FitConfig, batch: &SupervisionBatch) -> Result<Self> {
        config.validate()?;
        let frustum = config.frustum.unwrap_or(batch.frustum);
        frustum.validate()?;
        let src = batch.source();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let mut params = match config.learnables {
            Learnables::Pipeline => lifting::init_lifting_params(c, &config.init, &mut rng)?,
            Learnables::SceneFit => {
                let mut p = ParamSet::new();
                let s = [frustum.height, frustum.width, frustum.planes];
                p.insert(FIELD_SDF, Grid::full([s[0], s[1], s[2], 1], T::of(config.init.sdf_bias)))?;
                p.insert(FIELD_RGB, Grid::zeros([s[0], s[1], s[2], 3]))?;
                p
            }
        };
        params.insert(LOG_BETA, Grid::scalar(T::of(config.beta_init.ln())))?;
        let features = match config.learnables {
            Learnables::Pipeline => Some(Featurizer::new(c, config.seed).apply(&src.rgb, frustum.height, frustum.width)?),
            Learnables::SceneFit => None,
        };
        let moments = params.grids().map(Moments::zeros_like).collect();
        Ok(FitState {
            params,
            moments,
            step: 0,
            rng,
            features,
            meta: StateMeta {
                learnables: config.learnables,
                channels: c,
                frustum,
                camera: src.camera,
                image_width: src.width,
                image_height: src.height,
                attention_scale: config.attention_scale,
            },
        })
    }

    pub fn beta(&self) -> f64 {
        self.params.get(LOG_BETA).map(|g| g.item().as_f64().exp()).unwrap_or(f64::NAN)
    }

    /// Checks that tensors match `channels` and the frustum layout.
    pub fn check_shapes(&self) -> Result<()> {
        let m = &self.meta;
        match m.learnables {
            Learnables::Pipeline => {
                for (name, shape) in lifting::LIFTING_TENSORS.iter().zip(lifting::lifting_shapes(m.channels)) {
                    self.params.expect(name, &shape)?;
                }
                let f = self
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("missing image features".into()))?;
                if f.shape() != [m.frustum.height, m.frustum.width, m.channels] {
                    return Err(Error::Checkpoint(format!("image features have shape {:?}", f.shape())));
                }
            }
            Learnables::SceneFit => {
                let s = &m.frustum;
                self.params.expect(FIELD_SDF, &[s.height, s.width, s.planes, 1])?;
                self.params.expect(FIELD_RGB, &[s.height, s.width, s.planes, 3])?;
            }
        }
        self.params.expect(LOG_BETA, &[1])?;
        if self.moments.len() != self.params.len() {
            return Err(Error::Checkpoint("moment buffers do not match parameters".into()));
        }
        for ((name, p), m) in self.params.iter().zip(&self.moments) {
            if m.m.shape() != p.shape() || m.v.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("moment buffers of {name} have the wrong shape")));
            }
        }
        Ok(())
    }

    /// The source frustum at the given plane depths.
    pub fn frustum(&self, depths: Vec<f64>) -> Result<Frustum> {
        let m = &self.meta;
        Frustum::new(m.frustum, &m.camera, m.image_width, m.image_height, depths)
    }

    /// Records the fields for the given plane depths.
    pub fn forward(&self, tape: &mut Tape<T>, depths: Vec<f64>) -> Result<Forward> {
        let source = self.frustum(depths)?;
        let m = &self.meta;
        let (fields, features, mut leaves) = match m.learnables {
            Learnables::Pipeline => {
                let vars = LiftingVars::bind(tape, &self.params, m.channels)?;
                let img = self
                    .features
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("missing image features".into()))?;
                let img = tape.constant(img);
                let pos = tape.constant(normalize_frustum_coords(&m.frustum, &source.depths));
                let lb = tape.param(self.params.get(LOG_BETA)?.clone());
                let beta = tape.exp(lb)?;
                let fp = lifting::position_aware_frustum(tape, img, pos, &vars, m.attention_scale)?;
                let heads = lifting::field_heads(tape, fp, &vars, beta)?;
                let mut leaves = vars.leaves().to_vec();
                leaves.push(lb);
                (heads.fields, Some(heads.features), leaves)
            }
            Learnables::SceneFit => {
                let sdf = tape.param(self.params.get(FIELD_SDF)?.clone());
                let logit = tape.param(self.params.get(FIELD_RGB)?.clone());
                let lb = tape.param(self.params.get(LOG_BETA)?.clone());
                let beta = tape.exp(lb)?;
                let rgb = tape.sigmoid(logit)?;
                let density = tape.laplace_density(sdf, beta)?;
                (FieldGrids { sdf, rgb, density, beta }, None, vec![sdf, logit, lb])
            }
        };
        // leaves must follow the parameter order for the optimizer
        let order: Vec<&str> = self.params.names().collect();
        if order.len() != leaves.len() {
            return Err(Error::Checkpoint("parameter set does not match the learnables".into()));
        }
        if m.learnables == Learnables::SceneFit {
            let pos = |n: &str| order.iter().position(|o| *o == n);
            let (a, b, c) = (pos(FIELD_SDF), pos(FIELD_RGB), pos(LOG_BETA));
            let mut sorted = vec![(a, leaves[0]), (b, leaves[1]), (c, leaves[2])];
            sorted.sort_by_key(|(p, _)| *p);
            leaves = sorted.into_iter().map(|(_, v)| v).collect();
        }
        Ok(Forward {
            fields,
            source,
            features,
            leaves,
        })
    }

    /// Full-resolution render of the recorded fields from `camera`.
    pub fn render(&self, tape: &mut Tape<T>, fwd: &Forward, camera: &Camera, width: usize, height: usize) -> Result<RenderOutput> {
        let target = Frustum::new(self.meta.frustum, camera, width, height, fwd.source.depths.clone())?;
        let low = render::render_view(tape, &fwd.fields, &fwd.source, &target)?;
        render::upsample(tape, &low, height, width)
    }

    fn planes_for_step(&mut self, perturb: bool) -> Vec<f64> {
        let spec = FrustumSpec {
            perturb,
            ..self.meta.frustum
        };
        sample_depth_planes(&spec, &mut self.rng)
    }
}

/// Handles for one recorded objective.
pub struct Objective {
    pub forward: Forward,
    pub total: Var,
    pub rgb: Option<Var>,
    pub depth: Option<Var>,
    pub sdf: Option<Var>,
}

/// Records the training objective for the given plane depths.
pub fn record_objective<T: Real>(
    state: &FitState<T>,
    tape: &mut Tape<T>,
    batch: &SupervisionBatch,
    config: &FitConfig,
    depths: Vec<f64>,
) -> Result<Objective> {
    batch.check_mode(config.mode)?;
    let fwd = state.forward(tape, depths)?;
    let mode = config.mode;
    let w = &config.weights;

    let mut rgb_terms = Vec::new();
    let mut depth_var = None;
    for (vi, view) in batch.views.iter().take(mode.views()).enumerate() {
        let out = state.render(tape, &fwd, &view.camera, view.width, view.height)?;
        if w.rgb > 0.0 {
            let target = tape.constant(view.rgb.cast());
            rgb_terms.push(losses::rgb_loss(tape, out.rgb, target, w)?);
        }
        if vi == 0 && mode.uses_depth() && w.depth > 0.0 {
            let s = view.sparse.as_ref().expect("checked by check_mode");
            depth_var = Some(losses::depth_loss(tape, out.depth, &s.depth, &s.mask)?);
        }
    }
    let rgb_var = if rgb_terms.is_empty() { None } else { Some(losses::mean_of(tape, &rgb_terms)?) };
    let sdf_var = if mode.uses_sdf() && w.sdf > 0.0 {
        let pts: Vec<Option<[f64; 3]>> = batch.surface.iter().map(|p| fwd.source.lattice_world(p)).collect();
        Some(losses::sdf_loss(tape, fwd.fields.sdf, &pts)?)
    } else {
        None
    };
    let parts = LossParts {
        rgb: rgb_var,
        depth: depth_var,
        sdf: sdf_var,
    };
    let total = losses::total_loss(tape, &parts, w)?;
    Ok(Objective {
        forward: fwd,
        total,
        rgb: rgb_var,
        depth: depth_var,
        sdf: sdf_var,
    })
}

/// One forward, backward and AdamW update. With a zero learning rate the
/// parameters and moments are left untouched and only the losses are recorded.
pub fn fit_step<T: Real>(state: &mut FitState<T>, batch: &SupervisionBatch, config: &FitConfig) -> Result<StepRecord> {
    batch.check_mode(config.mode)?;
    let depths = state.planes_for_step(config.perturb);
    let mut tape = Tape::<T>::new();
    let obj = record_objective(state, &mut tape, batch, config, depths)?;
    let (fwd, total) = (&obj.forward, obj.total);
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item().as_f64()).unwrap_or(0.0);
    let record = StepRecord {
        step: state.step + 1,
        total: tape.value(total).item().as_f64(),
        rgb: value(obj.rgb),
        depth: value(obj.depth),
        sdf: value(obj.sdf),
        beta: state.beta(),
    };
    if !record.total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss".into() });
    }

    let t = state.step + 1;
    let lr = config.lr_at(t);
    if lr > 0.0 {
        let mut grads = tape.backward(total)?;
        let mut gs: Vec<Grid<T>> = fwd
            .leaves
            .iter()
            .map(|&v| grads.take(v).expect("leaves are parameters"))
            .collect();
        for ((name, _), g) in state.params.iter().zip(&gs) {
            if !g.all_finite() {
                return Err(Error::NonFinite { op: format!("gradient of {name}") });
            }
        }
        clip_global_norm(&mut gs, config.clip_norm);
        let adam = config.adam(lr);
        for ((p, g), m) in state.params.grids_mut().zip(&gs).zip(state.moments.iter_mut()) {
            adam_step(p, g, m, &adam, t)?;
        }
        if let Some(name) = state.params.first_non_finite() {
            return Err(Error::NonFinite { op: format!("parameter {name}") });
        }
    }
    state.step = t;
    Ok(record)
}

/// Runs `config.steps` steps, calling `on_step` after each.
pub fn fit<T: Real>(
    state: &mut FitState<T>,
    batch: &SupervisionBatch,
    config: &FitConfig,
    mut on_step: impl FnMut(&FitState<T>, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut out = Vec::with_capacity(config.steps);
    while (state.step as usize) < config.steps {
        let r = fit_step(state, batch, config)?;
        on_step(state, &r)?;
        out.push(r);
    }
    Ok(out)
}

/// Rendered rasters at image resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Deterministic render from `camera` with unperturbed planes.
pub fn render_state<T: Real>(state: &FitState<T>, camera: &Camera, width: usize, height: usize) -> Result<Rendered> {
    let mut tape = Tape::<T>::new();
    let fwd = state.forward(&mut tape, state.meta.frustum.bin_centers())?;
    let out = state.render(&mut tape, &fwd, camera, width, height)?;
    Ok(Rendered {
        width,
        height,
        rgb: tape.value(out.rgb).to_f64_vec(),
        depth: tape.value(out.depth).to_f64_vec(),
        opacity: tape.value(out.opacity).to_f64_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean absolute depth error on foreground pixels, meters.
    pub depth_mae: f64,
    pub psnr: f64,
    /// PSNR restricted to pixels whose true surface lies in the source frustum.
    pub psnr_overlap: f64,
    /// Mean `|F_sdf|` at true surface points.
    pub sdf_residual: f64,
    /// Fraction of foreground pixels rendered with opacity at least one half.
    pub opacity_coverage: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "depth_mae,psnr,psnr_overlap,sdf_residual,opacity_coverage";

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e}",
            self.depth_mae, self.psnr, self.psnr_overlap, self.sdf_residual, self.opacity_coverage
        )
    }
}

/// Sentinel reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR of unit-range images over the masked pixels.
pub fn psnr(a: &[f64], b: &[f64], channels: usize, mask: Option<&[bool]>) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for (k, (pa, pb)) in a.chunks(channels).zip(b.chunks(channels)).enumerate() {
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        for (x, y) in pa.iter().zip(pb) {
            se += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return f64::NAN;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Metrics of the current fields for view `index` of `batch`.
pub fn evaluate<T: Real>(state: &FitState<T>, batch: &SupervisionBatch, index: usize) -> Result<Metrics> {
    let view = batch
        .views
        .get(index)
        .ok_or_else(|| Error::Config(format!("no view {index}")))?;
    let mut tape = Tape::<T>::new();
    let fwd = state.forward(&mut tape, state.meta.frustum.bin_centers())?;
    let out = state.render(&mut tape, &fwd, &view.camera, view.width, view.height)?;
    let rgb = tape.value(out.rgb).to_f64_vec();
    let depth = tape.value(out.depth).to_f64_vec();
    let opacity = tape.value(out.opacity).to_f64_vec();
    let psnr_all = psnr(&rgb, view.rgb.data(), 3, None);

    let (mut depth_mae, mut coverage, mut psnr_overlap, mut sdf_residual) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    if let Some(t) = &view.truth {
        let valid: Vec<usize> = (0..t.depth.len()).filter(|&k| t.valid(k)).collect();
        if !valid.is_empty() {
            let n = valid.len() as f64;
            depth_mae = valid.iter().map(|&k| (depth[k] - t.depth[k]).abs()).sum::<f64>() / n;
            coverage = valid.iter().filter(|&&k| opacity[k] >= 0.5).count() as f64 / n;
        }
        let overlap = overlap_mask(view, &fwd.source);
        psnr_overlap = psnr(&rgb, view.rgb.data(), 3, Some(&overlap));
    }
    let surface = batch.source().dense_surface();
    let pts: Vec<Option<[f64; 3]>> = surface.iter().map(|p| fwd.source.lattice_world(p)).collect();
    if pts.iter().any(Option::is_some) {
        let l = losses::sdf_loss(&mut tape, fwd.fields.sdf, &pts)?;
        sdf_residual = tape.value(l).item().as_f64();
    }
    Ok(Metrics {
        depth_mae,
        psnr: psnr_all,
        psnr_overlap,
        sdf_residual,
        opacity_coverage: coverage,
    })
}

/// Pixels of `view` whose true surface point lies inside `source`; without
/// dense truth every pixel counts.
pub fn overlap_mask(view: &View, source: &Frustum) -> Vec<bool> {
    let n = view.width * view.height;
    let Some(t) = &view.truth else {
        return vec![true; n];
    };
    (0..n)
        .map(|k| {
            if !t.valid(k) {
                return false;
            }
            let (i, j) = (k / view.width, k % view.width);
            let p = view
                .camera
                .backproject(j as f64 + 0.5, i as f64 + 0.5, t.depth[k])
                .expect("valid depths are positive");
            source.locate_world(&view.camera.to_world(&p)).is_some()
        })
        .collect()
}
