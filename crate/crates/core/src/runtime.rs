//! Configuration, seeded training loops, checkpoints and reports.
//!
//! Everything downstream of a [`RunConfig`] is a pure function of it: the
//! master seed is split into labelled sub-seeds for data, encoder,
//! initialisation, batch sampling and evaluation, and all RNGs are ChaCha8.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diagnostics::{self, DeltaReport, DiagnosticError, GridAxis, LandscapeGrid};
use crate::envs::{
    DatasetStream, EnvError, Environment, TrajectoryRecord, TreeWorld, TreeWorldConfig,
};
use crate::gradengine::Graph;
use crate::losses::{self, GrlConfig, GrlWindow, LossError, SftConfig, SftWindow};
use crate::manifold::{Curvature, MAX_CURVATURE, MIN_CURVATURE};
use crate::metrics::{self, EvalBatch, MetricError};
use crate::planner::{self, CemConfig, PlanError, PlanMode};
use crate::worldmodel::{
    Action, ActionSpace, Encoder, LatentGeometry, ModelError, PredictorGraph, PredictorParams,
    PredictorSpec, WorldModel,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure in {stage} at step {step}: {detail}")]
    Numerical {
        stage: String,
        step: usize,
        detail: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Diagnostic(#[from] DiagnosticError),
}

impl RuntimeError {
    /// Process exit code: 2 for configuration errors, 3 for numerical
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::Config(_) | RuntimeError::Json(_) => 2,
            RuntimeError::Loss(LossError::InvalidConfig(_)) => 2,
            RuntimeError::Plan(PlanError::Config(_)) => 2,
            RuntimeError::Env(EnvError::Config(_) | EnvError::InvalidNode { .. }) => 2,
            RuntimeError::Numerical { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, RuntimeError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RuntimeError {
    let context = context.into();
    move |source| RuntimeError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with decoupled weight decay.
    #[default]
    Sgd,
    /// Adam moments with decoupled weight decay.
    AdamW,
}

/// Step-size schedule and update rule. The schedule ramps linearly up over
/// `warmup_steps`, holds `peak_lr` for `constant_steps`, then decays
/// linearly to zero over `decay_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub constant_steps: usize,
    pub decay_steps: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    /// Rescale the gradient to at most this global norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            peak_lr: 3e-3,
            warmup_steps: 200,
            constant_steps: 3600,
            decay_steps: 200,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            max_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.constant_steps + self.decay_steps
    }

    /// Step size used for update `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        let p = self.peak_lr;
        if step < self.warmup_steps {
            p * (step + 1) as f64 / self.warmup_steps as f64
        } else if step < self.warmup_steps + self.constant_steps {
            p
        } else {
            let k = step - self.warmup_steps - self.constant_steps;
            p * (self.decay_steps - k.min(self.decay_steps)) as f64 / self.decay_steps as f64
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(RuntimeError::Config(format!(
                "peak_lr {} must be >= 0",
                self.peak_lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(RuntimeError::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(RuntimeError::Config("Adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_traj: usize,
    /// Actions per training trajectory.
    pub traj_len: usize,
    /// Share of `(start, goal, T)` segments at the evaluation horizons kept
    /// out of training.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Hidden widths; defaults to two layers of `4 n`.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub geometry: LatentGeometry,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default = "default_initial_c")]
    pub initial_c: f64,
}

fn default_true() -> bool {
    true
}
fn default_initial_c() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftStage {
    pub loss: SftConfig,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrlStage {
    pub loss: GrlConfig,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub pairs: usize,
    /// The driver stops once the latent energy to the goal is at most this.
    #[serde(default)]
    pub goal_tolerance: f64,
    #[serde(default)]
    pub multiset_iou: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub num_quadruples: usize,
    pub delta_threshold: f64,
    pub grid: GridAxis,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            num_quadruples: 10_000,
            delta_threshold: 0.05,
            grid: GridAxis {
                min: -1.0,
                max: 1.0,
                step: 0.05,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every stochastic component derives its own sub-seed.
    pub seed: u64,
    pub world: TreeWorldConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sft: SftStage,
    pub grl: GrlStage,
    pub cem: CemConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl RunConfig {
    /// Desk-scale defaults on a `B = 3`, `D = 6` tree.
    pub fn desk_default() -> Self {
        let mut world = TreeWorldConfig::new(3, 6, 0.05, 0);
        world.branch_scale = 1.0;
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            world,
            data: DataConfig {
                num_traj: 20_000,
                traj_len: 4,
                holdout_fraction: default_holdout(),
            },
            model: ModelConfig {
                latent_dim: 32,
                hidden: None,
                geometry: LatentGeometry::Hyperbolic,
                residual: true,
                initial_c: 1.0,
            },
            sft: SftStage {
                loss: SftConfig::default(),
                batch_size: 64,
                optimizer: OptimizerConfig {
                    kind: OptimizerKind::AdamW,
                    peak_lr: 1e-3,
                    // held-out pairs need the longer schedule; 3600 steps
                    // plateaus around SR 0.75
                    constant_steps: 18_000,
                    ..OptimizerConfig::default()
                },
            },
            grl: GrlStage {
                loss: GrlConfig::default(),
                batch_size: 32,
                optimizer: OptimizerConfig {
                    kind: OptimizerKind::AdamW,
                    peak_lr: 3e-4,
                    warmup_steps: 50,
                    constant_steps: 4_500,
                    decay_steps: 50,
                    ..OptimizerConfig::default()
                },
            },
            cem: CemConfig::default(),
            eval: EvalConfig {
                horizons: vec![3, 4],
                pairs: 100,
                goal_tolerance: 0.0,
                multiset_iou: false,
            },
            diagnostics: DiagnosticsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(RuntimeError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        TreeWorld::new(self.world.clone())?;
        if self.data.num_traj == 0 {
            return Err(RuntimeError::Config("data.num_traj must be >= 1".into()));
        }
        if self.data.traj_len < 2 || self.data.traj_len > self.world.depth {
            return Err(RuntimeError::Config(format!(
                "data.traj_len must be in 2..={}",
                self.world.depth
            )));
        }
        if !(0.0..=1.0).contains(&self.data.holdout_fraction) {
            return Err(RuntimeError::Config(
                "data.holdout_fraction must be in [0, 1]".into(),
            ));
        }
        if self.model.latent_dim == 0 {
            return Err(RuntimeError::Config("model.latent_dim must be >= 1".into()));
        }
        Curvature::new(self.model.initial_c)
            .map_err(|e| RuntimeError::Config(format!("model.initial_c: {e}")))?;
        self.sft.loss.validate()?;
        self.grl.loss.validate()?;
        if self.grl.loss.horizon > self.data.traj_len {
            return Err(RuntimeError::Config(format!(
                "grl horizon {} exceeds trajectory length {}",
                self.grl.loss.horizon, self.data.traj_len
            )));
        }
        if self.sft.batch_size == 0 || self.grl.batch_size == 0 {
            return Err(RuntimeError::Config("batch sizes must be >= 1".into()));
        }
        self.sft.optimizer.validate()?;
        self.grl.optimizer.validate()?;
        self.cem.validate()?;
        for &h in &self.eval.horizons {
            if h == 0 || h > self.world.depth {
                return Err(RuntimeError::Config(format!(
                    "eval horizon {h} must be in 1..={}",
                    self.world.depth
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| RuntimeError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn predictor_spec(&self) -> PredictorSpec {
        let n = self.model.latent_dim;
        PredictorSpec {
            latent_dim: n,
            hidden: self
                .model
                .hidden
                .clone()
                .unwrap_or_else(|| vec![4 * n, 4 * n]),
            action_space: ActionSpace::Discrete {
                num_actions: self.world.branching,
            },
            geometry: self.model.geometry,
            residual: self.model.residual,
            initial_c: self.model.initial_c,
        }
    }

    pub fn holdout(&self) -> HoldOut {
        HoldOut {
            seed: self.seed_for("holdout"),
            fraction: self.data.holdout_fraction,
            lengths: self.eval.horizons.clone(),
        }
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// Labelled sub-seed: FNV-1a of the label mixed into the master seed with a
/// SplitMix64 finaliser.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Deterministic split of `(start, goal, T)` segments. A segment is held out
/// when `T` is one of `lengths` and its keyed hash falls below `fraction`.
/// Training rejects any trajectory that contains a held-out segment, and
/// evaluation draws only held-out segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldOut {
    pub seed: u64,
    pub fraction: f64,
    pub lengths: Vec<usize>,
}

impl HoldOut {
    pub fn contains(&self, start: usize, goal: usize, t: usize) -> bool {
        if !self.lengths.contains(&t) {
            return false;
        }
        let h = derive_seed(self.seed, &format!("{start}/{goal}/{t}"));
        (h as f64) < self.fraction * 2f64.powi(64)
    }

    /// Whether any contiguous segment of the node path is held out.
    pub fn touches(&self, path: &[usize]) -> bool {
        segments(path).any(|(s, g, t)| self.contains(s, g, t))
    }
}

/// All contiguous `(from, to, length)` segments of a node path.
pub fn segments(path: &[usize]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    (0..path.len()).flat_map(move |i| (i + 1..path.len()).map(move |j| (path[i], path[j], j - i)))
}

fn node_path(world: &TreeWorld, start: usize, actions: &[usize]) -> Result<Vec<usize>> {
    let mut path = vec![start];
    for &a in actions {
        path.push(world.step_node(*path.last().expect("non-empty"), a)?);
    }
    Ok(path)
}

/// Indices of `stream` whose paths avoid `holdout`, in order, until
/// `num_traj` are accepted. Rejected indices are skipped, never resampled.
pub fn accepted_indices<'a>(
    stream: &'a DatasetStream<'a>,
    world: &'a TreeWorld,
    holdout: Option<&'a HoldOut>,
    num_traj: usize,
) -> impl Iterator<Item = usize> + 'a {
    // generous cap so a split that rejects everything still terminates
    let cap = num_traj.saturating_mul(1000).max(1000);
    (0..cap)
        .filter(move |&i| {
            let Some(h) = holdout else { return true };
            let (start, actions, _) = stream.skeleton(i);
            let path = node_path(world, start, &actions).expect("skeletons stay in the tree");
            !h.touches(&path)
        })
        .take(num_traj)
}

pub fn filtered_records<'a>(
    stream: &'a DatasetStream<'a>,
    world: &'a TreeWorld,
    holdout: Option<&'a HoldOut>,
    num_traj: usize,
) -> impl Iterator<Item = Result<TrajectoryRecord>> + 'a {
    accepted_indices(stream, world, holdout, num_traj).map(|i| Ok(stream.record(i)))
}

/// Segments of the configured training set, from skeletons alone.
pub fn training_segments(
    cfg: &RunConfig,
    world: &TreeWorld,
) -> Result<HashSet<(usize, usize, usize)>> {
    let stream = training_stream(cfg, world)?;
    let holdout = cfg.holdout();
    let mut out = HashSet::new();
    for i in accepted_indices(&stream, world, Some(&holdout), cfg.data.num_traj) {
        let (start, actions, _) = stream.skeleton(i);
        out.extend(segments(&node_path(world, start, &actions)?));
    }
    Ok(out)
}

/// Encoder outputs of a dataset, stored flat.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub latent_dim: usize,
    pub traj_len: usize,
    /// `[record][step][dim]`, `traj_len + 1` steps per record.
    latents: Vec<f64>,
    /// `[record][step]`.
    actions: Vec<usize>,
    /// Every contiguous `(start, goal, T)` segment seen in training.
    pub segments: HashSet<(usize, usize, usize)>,
    pub num_records: usize,
}

impl EncodedDataset {
    fn empty(latent_dim: usize, traj_len: usize) -> Self {
        Self {
            latent_dim,
            traj_len,
            latents: Vec::new(),
            actions: Vec::new(),
            segments: HashSet::new(),
            num_records: 0,
        }
    }

    fn push(
        &mut self,
        world: &TreeWorld,
        record: &TrajectoryRecord,
        encoder: &Encoder,
    ) -> Result<()> {
        if record.actions.len() != self.traj_len || record.observations.len() != self.traj_len + 1 {
            return Err(RuntimeError::Config(format!(
                "record has {} actions, dataset expects {}",
                record.actions.len(),
                self.traj_len
            )));
        }
        for obs in &record.observations {
            self.latents.extend(encoder.encode(obs)?);
        }
        self.actions.extend(&record.actions);
        let path = node_path(world, record.start_node, &record.actions)?;
        self.segments.extend(segments(&path));
        self.num_records += 1;
        Ok(())
    }

    /// Encodes records one at a time; raw observations are never held in
    /// memory together.
    pub fn from_records<I: IntoIterator<Item = Result<TrajectoryRecord>>>(
        world: &TreeWorld,
        records: I,
        encoder: &Encoder,
        traj_len: usize,
    ) -> Result<Self> {
        let mut ds = Self::empty(encoder.latent_dim, traj_len);
        for r in records {
            ds.push(world, &r?, encoder)?;
        }
        if ds.num_records == 0 {
            return Err(RuntimeError::Config("dataset is empty".into()));
        }
        Ok(ds)
    }

    pub fn latent(&self, record: usize, step: usize) -> &[f64] {
        let n = self.latent_dim;
        let off = (record * (self.traj_len + 1) + step) * n;
        &self.latents[off..off + n]
    }

    pub fn action(&self, record: usize, step: usize) -> usize {
        self.actions[record * self.traj_len + step]
    }

    fn sft_window<R: Rng>(&self, rng: &mut R) -> SftWindow {
        let r = rng.random_range(0..self.num_records);
        let t = rng.random_range(0..=self.traj_len - 2);
        SftWindow {
            s0: self.latent(r, t).to_vec(),
            a0: Action::Discrete(self.action(r, t)),
            s1: self.latent(r, t + 1).to_vec(),
            a1: Action::Discrete(self.action(r, t + 1)),
            s2: self.latent(r, t + 2).to_vec(),
        }
    }

    fn grl_window<R: Rng>(&self, horizon: usize, rng: &mut R) -> GrlWindow {
        let r = rng.random_range(0..self.num_records);
        let t = rng.random_range(0..=self.traj_len - horizon);
        GrlWindow {
            start: self.latent(r, t).to_vec(),
            actions: (0..horizon)
                .map(|k| Action::Discrete(self.action(r, t + k)))
                .collect(),
            targets: (1..=horizon)
                .map(|k| self.latent(r, t + k).to_vec())
                .collect(),
        }
    }
}

/// Writes a dataset as JSON lines, one record per line.
pub fn write_dataset_jsonl<W: Write, I: IntoIterator<Item = Result<TrajectoryRecord>>>(
    records: I,
    mut out: W,
) -> Result<usize> {
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut out, &r?)?;
        out.write_all(b"\n").map_err(io_err("writing dataset"))?;
        n += 1;
    }
    Ok(n)
}

pub fn read_dataset_jsonl<R: BufRead>(input: R) -> impl Iterator<Item = Result<TrajectoryRecord>> {
    input.lines().filter_map(|line| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(RuntimeError::from)),
        Err(e) => Some(Err(io_err("reading dataset")(e))),
    })
}

/// Frozen encoder and world for a configuration.
pub fn build_world(cfg: &RunConfig) -> Result<(TreeWorld, Encoder)> {
    let world = TreeWorld::new(cfg.world.clone())?;
    let encoder = Encoder::new(
        cfg.seed_for("encoder"),
        world.obs_dim(),
        cfg.model.latent_dim,
    );
    Ok((world, encoder))
}

pub fn training_stream<'a>(cfg: &RunConfig, world: &'a TreeWorld) -> Result<DatasetStream<'a>> {
    // index space is unbounded; `filtered_records` decides how far to read
    Ok(DatasetStream::new(
        world,
        usize::MAX,
        cfg.data.traj_len,
        cfg.seed_for("data"),
    )?)
}

pub fn generate_training_data(
    cfg: &RunConfig,
    world: &TreeWorld,
    encoder: &Encoder,
) -> Result<EncodedDataset> {
    let stream = training_stream(cfg, world)?;
    let holdout = cfg.holdout();
    let records = filtered_records(&stream, world, Some(&holdout), cfg.data.num_traj);
    let ds = EncodedDataset::from_records(world, records, encoder, cfg.data.traj_len)?;
    if ds.num_records < cfg.data.num_traj {
        return Err(RuntimeError::Config(format!(
            "held-out split left only {} of {} training trajectories",
            ds.num_records, cfg.data.num_traj
        )));
    }
    Ok(ds)
}

pub fn init_model(cfg: &RunConfig, encoder: &Encoder) -> Result<WorldModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for("init"));
    Ok(WorldModel {
        encoder: encoder.clone(),
        predictor: PredictorParams::init(cfg.predictor_spec(), &mut rng)?,
    })
}

/// Optimiser state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decay_mask: Vec<bool>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &PredictorParams) -> Self {
        let mut decay_mask = Vec::with_capacity(params.num_params());
        for t in &params.tensors {
            let decays = !t.name.ends_with(".b");
            decay_mask.extend(std::iter::repeat_n(decays, t.data.len()));
        }
        decay_mask.push(false);
        let n = decay_mask.len();
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay_mask,
        }
    }

    /// One update at schedule position `step`. The curvature is clamped to
    /// `[MIN_CURVATURE, MAX_CURVATURE]` afterwards.
    pub fn step(&mut self, params: &mut PredictorParams, grad: &[f64], step: usize) -> Result<()> {
        let lr = self.cfg.lr(step);
        let mut scale = 1.0;
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let mut flat = params.to_flat();
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..flat.len() {
            let g = grad[i] * scale;
            if self.decay_mask[i] {
                flat[i] -= lr * self.cfg.weight_decay * flat[i];
            }
            match self.cfg.kind {
                OptimizerKind::Sgd => flat[i] -= lr * g,
                OptimizerKind::AdamW => {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    flat[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
                }
            }
        }
        let last = flat.len() - 1;
        flat[last] = flat[last].clamp(MIN_CURVATURE.ln(), MAX_CURVATURE.ln());
        params.set_flat(&flat)?;
        Ok(())
    }
}

/// One logged point of a loss trace. `terms` holds the stage's components:
/// `[teacher forcing, rollout]` for SFT, `[discounted, triangle]` for GRL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub terms: [f64; 2],
    pub c: f64,
}

/// Serializable ChaCha position, enough to resume the batch sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| RuntimeError::Checkpoint(format!("rng_state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: WorldModel,
    pub trace: Vec<TracePoint>,
    /// Objective on the fixed monitor windows before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub rng_state: RngState,
}

const MONITOR_WINDOWS: usize = 256;
const LOG_EVERY: usize = 50;

fn non_finite(stage: &str, step: usize, loss: f64, params: &PredictorParams) -> RuntimeError {
    let flat = params.to_flat();
    let bad = flat.iter().filter(|v| !v.is_finite()).count();
    RuntimeError::Numerical {
        stage: stage.into(),
        step,
        detail: format!(
            "loss = {loss}; {bad}/{} non-finite parameters; c = {}",
            flat.len(),
            params.curvature.c()
        ),
    }
}

/// Supervised stage: teacher forcing plus two-step rollout.
pub fn train_sft(
    cfg: &RunConfig,
    data: &EncodedDataset,
    model: WorldModel,
) -> Result<TrainOutcome> {
    let stage = &cfg.sft;
    let mut monitor_rng = ChaCha8Rng::seed_from_u64(cfg.seed_for("sft-monitor"));
    let monitor: Vec<SftWindow> = (0..MONITOR_WINDOWS)
        .map(|_| data.sft_window(&mut monitor_rng))
        .collect();
    let monitor_loss =
        |p: &PredictorParams| losses::sft_batch_value(p, &monitor, &stage.loss).map(|v| v.0);
    train_loop(
        "sft",
        &stage.optimizer,
        model,
        cfg.seed_for("sft"),
        monitor_loss,
        |rng| {
            (0..stage.batch_size)
                .map(|_| data.sft_window(rng))
                .collect::<Vec<_>>()
        },
        |g, pg, batch| {
            let n = losses::build_sft_objective(g, pg, batch, &stage.loss)?;
            Ok((n.total, [n.teacher_forcing, n.rollout]))
        },
    )
}

/// GRL stage on top of an SFT model. Only the predictor and `log_c` move;
/// the encoder is shared and frozen.
pub fn train_grl(
    cfg: &RunConfig,
    data: &EncodedDataset,
    model: WorldModel,
) -> Result<TrainOutcome> {
    let stage = &cfg.grl;
    let h = stage.loss.horizon;
    if h > data.traj_len {
        return Err(RuntimeError::Config(format!(
            "grl horizon {h} exceeds trajectory length {}",
            data.traj_len
        )));
    }
    let mut monitor_rng = ChaCha8Rng::seed_from_u64(cfg.seed_for("grl-monitor"));
    let monitor: Vec<GrlWindow> = (0..MONITOR_WINDOWS)
        .map(|_| data.grl_window(h, &mut monitor_rng))
        .collect();
    let monitor_loss =
        |p: &PredictorParams| losses::grl_batch_value(p, &monitor, &stage.loss).map(|v| v.total);
    train_loop(
        "grl",
        &stage.optimizer,
        model,
        cfg.seed_for("grl"),
        monitor_loss,
        |rng| {
            (0..stage.batch_size)
                .map(|_| data.grl_window(h, rng))
                .collect::<Vec<_>>()
        },
        |g, pg, batch| {
            let n = losses::build_grl_objective(g, pg, batch, &stage.loss)?;
            Ok((n.total, [n.discounted, n.triangle]))
        },
    )
}

type Nodes = (crate::gradengine::Var, [crate::gradengine::Var; 2]);

fn train_loop<B, S, O, M>(
    stage: &str,
    opt_cfg: &OptimizerConfig,
    mut model: WorldModel,
    seed: u64,
    monitor: M,
    mut sample: S,
    build: O,
) -> Result<TrainOutcome>
where
    S: FnMut(&mut ChaCha8Rng) -> B,
    O: Fn(&mut Graph, &PredictorGraph, &B) -> std::result::Result<Nodes, LossError>,
    M: Fn(&PredictorParams) -> std::result::Result<f64, LossError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(opt_cfg.clone(), &model.predictor);
    let initial_loss = monitor(&model.predictor)?;
    if !initial_loss.is_finite() {
        return Err(non_finite(stage, 0, initial_loss, &model.predictor));
    }
    let mut trace = Vec::new();
    let mut acc = (0.0, [0.0; 2], 0usize);
    let total = opt_cfg.total_steps();
    for step in 0..total {
        let batch = sample(&mut rng);
        let mut g = Graph::new();
        let pg = PredictorGraph::new(&mut g, &model.predictor)?;
        let (out, terms) = build(&mut g, &pg, &batch)?;
        let lc = [model.predictor.curvature.log_c()];
        let tape = g
            .forward(&PredictorGraph::bindings(&model.predictor, &lc))
            .map_err(ModelError::from)?;
        let loss = tape.scalar(out).map_err(ModelError::from)?;
        if !loss.is_finite() {
            return Err(non_finite(stage, step, loss, &model.predictor));
        }
        let grads = tape.backward(out).map_err(ModelError::from)?;
        let flat = pg.flat_gradient(&grads);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(stage, step, f64::NAN, &model.predictor));
        }
        acc.0 += loss;
        for k in 0..2 {
            acc.1[k] += tape.scalar(terms[k]).map_err(ModelError::from)?;
        }
        acc.2 += 1;
        opt.step(&mut model.predictor, &flat, step)?;
        if acc.2 == LOG_EVERY || step + 1 == total {
            let k = acc.2 as f64;
            trace.push(TracePoint {
                step: step + 1,
                loss: acc.0 / k,
                terms: [acc.1[0] / k, acc.1[1] / k],
                c: model.predictor.curvature.c(),
            });
            acc = (0.0, [0.0; 2], 0);
        }
    }
    let final_loss = monitor(&model.predictor)?;
    if !final_loss.is_finite() {
        return Err(non_finite(stage, total, final_loss, &model.predictor));
    }
    Ok(TrainOutcome {
        model,
        trace,
        initial_loss,
        final_loss,
        rng_state: RngState::capture(&rng),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Base64 of the little-endian `f64` bytes.
    pub data: String,
}

/// The checkpoint document. Weight arrays are base64 little-endian `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub encoder_seed: u64,
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub spec: PredictorSpec,
    pub tensors: Vec<TensorBlob>,
    pub log_c: f64,
    pub rng_state: Option<RngState>,
}

fn encode_f64s(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| RuntimeError::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(RuntimeError::Checkpoint(
            "array length is not a multiple of 8 bytes".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn from_model(model: &WorldModel, rng_state: Option<RngState>) -> Self {
        let p = &model.predictor;
        Self {
            schema_version: SCHEMA_VERSION,
            encoder_seed: model.encoder.seed,
            obs_dim: model.encoder.obs_dim,
            latent_dim: model.encoder.latent_dim,
            layer_sizes: p.spec.layer_sizes(),
            spec: p.spec.clone(),
            tensors: p
                .tensors
                .iter()
                .map(|t| TensorBlob {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: encode_f64s(&t.data),
                })
                .collect(),
            log_c: p.curvature.log_c(),
            rng_state,
        }
    }

    pub fn to_model(&self) -> Result<WorldModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(RuntimeError::Checkpoint(format!(
                "schema_version {} unsupported",
                self.schema_version
            )));
        }
        let mut p = PredictorParams::zeros(self.spec.clone())?;
        if p.tensors.len() != self.tensors.len() || self.spec.layer_sizes() != self.layer_sizes {
            return Err(RuntimeError::Checkpoint(
                "layout does not match the spec".into(),
            ));
        }
        for (t, blob) in p.tensors.iter_mut().zip(&self.tensors) {
            let data = decode_f64s(&blob.data)?;
            if t.name != blob.name
                || t.rows != blob.rows
                || t.cols != blob.cols
                || data.len() != t.data.len()
            {
                return Err(RuntimeError::Checkpoint(format!(
                    "tensor {} has the wrong shape",
                    blob.name
                )));
            }
            t.data = data;
        }
        p.curvature = Curvature::from_log(self.log_c).map_err(ModelError::from)?;
        Ok(WorldModel {
            encoder: Encoder::new(self.encoder_seed, self.obs_dim, self.latent_dim),
            predictor: p,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("checkpoint serialises");
        v.push(b'\n');
        v
    }

    /// Content hash of the serialised checkpoint.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| RuntimeError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<TracePoint>,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub reports: Vec<EvalReport>,
}

impl RunManifest {
    pub fn new(
        stage: &str,
        cfg: &RunConfig,
        outcome: &TrainOutcome,
        checkpoint: &Checkpoint,
        secs: f64,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stage: stage.into(),
            config_hash: cfg.hash(),
            checkpoint_hash: checkpoint.hash(),
            initial_loss: outcome.initial_loss,
            final_loss: outcome.final_loss,
            trace: outcome.trace.clone(),
            wall_clock_secs: secs,
            reports: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    pub horizon: usize,
    pub num_pairs: usize,
    pub seed: u64,
    /// Sampled pairs the oracle could not solve.
    pub excluded: usize,
    /// Evaluated pairs whose `(start, goal, T)` occurs as a segment of some
    /// training trajectory.
    pub training_overlap: usize,
    /// `training_overlap == 0`.
    pub disjoint: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// A start/goal pair with its oracle plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub start: usize,
    pub goal: usize,
    pub oracle: Vec<usize>,
}

/// Held-out pairs at horizon `T`, drawn like training windows (uniform start
/// with `T` levels below it, uniform random walk) and kept only when the
/// split holds them out. Returns the pairs and the number the oracle could
/// not solve.
pub fn sample_eval_pairs(
    world: &TreeWorld,
    horizon: usize,
    count: usize,
    seed: u64,
    holdout: &HoldOut,
) -> (Vec<EvalPair>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    let mut unreachable = 0;
    // bounded so that an empty held-out pool still terminates
    let mut attempts = 0;
    while pairs.len() < count && attempts < 10_000 * count.max(1) {
        attempts += 1;
        let start = rng.random_range(0..world.start_candidates(horizon));
        let walk: Vec<usize> = (0..horizon)
            .map(|_| rng.random_range(0..world.branching()))
            .collect();
        let goal = world.replay(start, &walk).expect("valid ids");
        if !holdout.contains(start, goal, horizon) {
            continue;
        }
        match world.brute_force_plan(start, goal, horizon) {
            Some(oracle) => pairs.push(EvalPair {
                start,
                goal,
                oracle,
            }),
            None => unreachable += 1,
        }
    }
    (pairs, unreachable)
}

/// One receding-horizon episode in the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub start: usize,
    pub goal: usize,
    pub horizon: usize,
    pub executed: Vec<usize>,
    pub oracle: Option<Vec<usize>>,
    pub visited: Vec<usize>,
    pub energies: Vec<f64>,
    pub reached_goal: bool,
}

/// Plans from node `start` toward a noisy observation of node `goal`. The
/// observation noise and CEM seeds come from `(seed, index)`.
#[allow(clippy::too_many_arguments)]
pub fn plan_pair(
    cfg: &RunConfig,
    world: &TreeWorld,
    model: &WorldModel,
    start: usize,
    goal: usize,
    horizon: usize,
    seed: u64,
    index: u64,
) -> Result<PlanReport> {
    world.check_node(start)?;
    world.check_node(goal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let goal_obs = world.observe(&goal, &mut rng);
    let cem = CemConfig {
        horizon,
        seed: derive_seed(seed, &format!("cem-{index}")),
        ..cfg.cem.clone()
    };
    let mode = PlanMode::Categorical {
        num_actions: world.branching(),
    };
    let ep = planner::receding_horizon(
        world,
        model,
        start,
        &goal_obs,
        mode,
        &cem,
        cfg.eval.goal_tolerance,
        |&s| s == goal,
        &mut rng,
    )?;
    let executed = ep
        .executed
        .iter()
        .map(|a| match a {
            Action::Discrete(x) => *x,
            Action::Continuous(_) => unreachable!("tree actions are discrete"),
        })
        .collect();
    Ok(PlanReport {
        start,
        goal,
        horizon,
        executed,
        oracle: world.brute_force_plan(start, goal, horizon),
        visited: ep.states,
        energies: ep.energies,
        reached_goal: ep.reached_goal,
    })
}

/// Receding-horizon CEM from each pair's start observation to its goal
/// observation, scored against the oracle plan.
pub fn run_eval(
    cfg: &RunConfig,
    world: &TreeWorld,
    model: &WorldModel,
    horizon: usize,
    training: &HashSet<(usize, usize, usize)>,
) -> Result<EvalReport> {
    let seed = cfg.seed_for(&format!("eval-{horizon}"));
    let (pairs, unreachable) =
        sample_eval_pairs(world, horizon, cfg.eval.pairs, seed, &cfg.holdout());
    if pairs.is_empty() {
        return Err(RuntimeError::Config(format!(
            "no held-out pairs at horizon {horizon}"
        )));
    }
    let predicted: Vec<Vec<usize>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            plan_pair(
                cfg, world, model, pair.start, pair.goal, horizon, seed, i as u64,
            )
            .map(|r| r.executed)
        })
        .collect::<Result<_>>()?;
    // an episode that stops early is padded so the horizon check holds; a
    // padded step never matches since actions are < B
    let b = world.branching();
    let predicted: Vec<Vec<usize>> = predicted
        .into_iter()
        .map(|mut p| {
            p.resize(horizon, b);
            p
        })
        .collect();
    let truth: Vec<Vec<usize>> = pairs.iter().map(|p| p.oracle.clone()).collect();
    let overlap = pairs
        .iter()
        .filter(|p| training.contains(&(p.start, p.goal, horizon)))
        .count();
    let batch = EvalBatch::new(predicted, truth)?;
    let s = metrics::summarize(&batch, cfg.eval.multiset_iou)?;
    Ok(EvalReport {
        sr: s.sr,
        macc: s.macc,
        miou: s.miou,
        horizon,
        num_pairs: pairs.len(),
        seed,
        excluded: unreachable,
        training_overlap: overlap,
        disjoint: overlap == 0,
    })
}

/// Energy landscape around a sampled transition: `u₁` points from `s_t`
/// toward the next state, `u₂` toward another trajectory's state at the same
/// depth.
pub fn run_sweep(cfg: &RunConfig, world: &TreeWorld, model: &WorldModel) -> Result<LandscapeGrid> {
    if !model.predictor.geometry().is_hyperbolic() {
        return Err(RuntimeError::Config(
            "energy sweep needs a ball geometry".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for("sweep"));
    let (s_t, s_next, v_alt) = loop {
        let start = rng.random_range(1..world.start_candidates(1));
        let next = world.step_node(start, rng.random_range(0..world.branching()))?;
        let other = sibling_level_node(world, start, &mut rng);
        let s_t = model.encoder.encode(&world.observe(&start, &mut rng))?;
        let next_t = model.encoder.encode(&world.observe(&next, &mut rng))?;
        let alt_t = model.encoder.encode(&world.observe(&other, &mut rng))?;
        let v_goal: Vec<f64> = next_t.iter().zip(&s_t).map(|(a, b)| a - b).collect();
        let v_alt: Vec<f64> = alt_t.iter().zip(&s_t).map(|(a, b)| a - b).collect();
        if let Ok(pair) = diagnostics::orthonormal_pair(&v_goal, &v_alt) {
            break (s_t, model.predictor.to_manifold(&next_t), pair);
        }
    };
    let ball = model.predictor.ball();
    let grid = cfg.diagnostics.grid;
    Ok(diagnostics::energy_sweep(
        &s_t, &s_next, &v_alt.0, &v_alt.1, grid, grid, &ball,
    )?)
}

fn sibling_level_node<R: Rng>(world: &TreeWorld, node: usize, rng: &mut R) -> usize {
    let d = world.node_depth(node) as u32;
    let b = world.branching();
    let first = (b.pow(d) - 1) / (b - 1);
    let count = b.pow(d);
    loop {
        let other = first + rng.random_range(0..count);
        if other != node || count == 1 {
            return other;
        }
    }
}

/// Gromov δ of the model's latents for one noisy observation of every node.
pub fn run_delta(cfg: &RunConfig, world: &TreeWorld, model: &WorldModel) -> Result<DeltaReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for("delta-points"));
    let points: Vec<Vec<f64>> = (0..world.num_nodes())
        .map(|node| model.embed(&world.observe(&node, &mut rng)))
        .collect::<std::result::Result<_, _>>()?;
    let metric = model.predictor.metric();
    Ok(diagnostics::gromov_delta(
        &points,
        |a, b| metric.distance(a, b),
        cfg.diagnostics.num_quadruples,
        cfg.seed_for("delta"),
        cfg.diagnostics.delta_threshold,
    )?)
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub sft: TrainOutcome,
    pub grl: Option<TrainOutcome>,
    pub sft_reports: Vec<EvalReport>,
    pub grl_reports: Vec<EvalReport>,
}

/// Generate → SFT → (GRL) → evaluate at every configured horizon.
pub fn run_pipeline(cfg: &RunConfig, with_grl: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (world, encoder) = build_world(cfg)?;
    let data = generate_training_data(cfg, &world, &encoder)?;
    let model = init_model(cfg, &encoder)?;
    let sft = train_sft(cfg, &data, model)?;
    let eval_all = |m: &WorldModel| -> Result<Vec<EvalReport>> {
        cfg.eval
            .horizons
            .iter()
            .map(|&h| run_eval(cfg, &world, m, h, &data.segments))
            .collect()
    };
    let sft_reports = eval_all(&sft.model)?;
    let (grl, grl_reports) = if with_grl {
        let g = train_grl(cfg, &data, sft.model.clone())?;
        let r = eval_all(&g.model)?;
        (Some(g), r)
    } else {
        (None, Vec::new())
    };
    Ok(PipelineOutput {
        sft,
        grl,
        sft_reports,
        grl_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::desk_default();
        cfg.world = TreeWorldConfig::new(3, 3, 0.0, 4);
        cfg.data = DataConfig {
            num_traj: 200,
            traj_len: 2,
            holdout_fraction: 0.2,
        };
        cfg.model.latent_dim = 4;
        cfg.sft.batch_size = 8;
        cfg.sft.optimizer = OptimizerConfig {
            warmup_steps: 2,
            constant_steps: 5,
            decay_steps: 3,
            ..OptimizerConfig::default()
        };
        cfg.grl.loss.horizon = 2;
        cfg.grl.batch_size = 4;
        cfg.grl.optimizer = cfg.sft.optimizer.clone();
        cfg.cem.samples = 40;
        cfg.cem.elites = 4;
        cfg.cem.iterations = 3;
        cfg.eval.horizons = vec![1, 3];
        cfg.eval.pairs = 5;
        cfg
    }

    #[test]
    fn schedule_shape() {
        let o = OptimizerConfig {
            peak_lr: 1.0,
            warmup_steps: 4,
            constant_steps: 2,
            decay_steps: 4,
            ..OptimizerConfig::default()
        };
        let lrs: Vec<f64> = (0..o.total_steps()).map(|s| o.lr(s)).collect();
        assert_eq!(
            lrs,
            vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0, 0.75, 0.5, 0.25]
        );
    }

    #[test]
    fn optimizer_clamps_curvature_and_skips_bias_decay() {
        let cfg = tiny_config();
        let mut p =
            PredictorParams::init(cfg.predictor_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let o = OptimizerConfig {
            peak_lr: 1.0,
            warmup_steps: 0,
            constant_steps: 1,
            decay_steps: 0,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        p.tensor_mut("l0.b").unwrap().data[0] = 1.0;
        let w0 = p.tensor("l0.w").unwrap().data[0];
        let mut opt = Optimizer::new(o, &p);
        let mut g = vec![0.0; p.num_params()];
        *g.last_mut().unwrap() = -100.0;
        opt.step(&mut p, &g, 0).unwrap();
        assert!((p.curvature.c() - MAX_CURVATURE).abs() < 1e-9);
        assert_eq!(p.tensor("l0.b").unwrap().data[0], 1.0);
        assert_eq!(p.tensor("l0.w").unwrap().data[0], 0.5 * w0);
    }

    #[test]
    fn zero_steps_leave_the_initialisation() {
        let mut cfg = tiny_config();
        cfg.sft.optimizer = OptimizerConfig {
            warmup_steps: 0,
            constant_steps: 0,
            decay_steps: 0,
            ..OptimizerConfig::default()
        };
        let (world, enc) = build_world(&cfg).unwrap();
        let data = generate_training_data(&cfg, &world, &enc).unwrap();
        let init = init_model(&cfg, &enc).unwrap();
        let out = train_sft(&cfg, &data, init.clone()).unwrap();
        assert_eq!(
            Checkpoint::from_model(&out.model, None).hash(),
            Checkpoint::from_model(&init, None).hash()
        );
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let cfg = tiny_config();
        let a = run_pipeline(&cfg, true).unwrap();
        let b = run_pipeline(&cfg, true).unwrap();
        let ha = Checkpoint::from_model(&a.grl.as_ref().unwrap().model, None).hash();
        let hb = Checkpoint::from_model(&b.grl.as_ref().unwrap().model, None).hash();
        assert_eq!(ha, hb);
        assert_eq!(a.sft_reports, b.sft_reports);
        assert_eq!(a.grl_reports, b.grl_reports);
        for t in a.sft.trace.iter().chain(&a.grl.as_ref().unwrap().trace) {
            assert!(t.loss.is_finite());
            assert!((MIN_CURVATURE..=MAX_CURVATURE).contains(&t.c));
        }
        for t in &a.grl.as_ref().unwrap().trace {
            assert!(t.terms[1] >= 0.0);
        }
        for r in a.sft_reports.iter().chain(&a.grl_reports) {
            assert!(r.disjoint);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let (_, enc) = build_world(&cfg).unwrap();
        let m = init_model(&cfg, &enc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: u64 = rng.random();
        let ck = Checkpoint::from_model(&m, Some(RngState::capture(&rng)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.to_model().unwrap(), m);
        let mut restored = loaded.rng_state.unwrap().restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn config_validation_and_exit_codes() {
        let mut cfg = tiny_config();
        cfg.schema_version = 99;
        let e = cfg.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let mut cfg = tiny_config();
        cfg.grl.loss.horizon = 5;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let e = RuntimeError::Numerical {
            stage: "sft".into(),
            step: 3,
            detail: "nan".into(),
        };
        assert_eq!(e.exit_code(), 3);
        let text = serde_json::to_string(&RunConfig::desk_default()).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::desk_default());
        assert_eq!(back.hash(), RunConfig::desk_default().hash());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "data"), derive_seed(1, "init"));
        assert_ne!(derive_seed(1, "data"), derive_seed(2, "data"));
        assert_eq!(derive_seed(7, "eval-3"), derive_seed(7, "eval-3"));
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let cfg = tiny_config();
        let (world, enc) = build_world(&cfg).unwrap();
        let stream = DatasetStream::new(&world, 5, 2, 3).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_dataset_jsonl(stream.map(Ok), &mut buf).unwrap(), 5);
        let records: Vec<TrajectoryRecord> =
            read_dataset_jsonl(&buf[..]).collect::<Result<_>>().unwrap();
        let direct = crate::envs::generate_dataset(&world, 5, 2, 3).unwrap();
        assert_eq!(records, direct);
        let ds =
            EncodedDataset::from_records(&world, records.into_iter().map(Ok), &enc, 2).unwrap();
        assert_eq!(ds.num_records, 5);
        assert_eq!(
            ds.latent(1, 0),
            enc.encode(&direct[1].observations[0]).unwrap().as_slice()
        );
    }

    #[test]
    fn held_out_segments_never_reach_training() {
        let cfg = tiny_config();
        let (world, enc) = build_world(&cfg).unwrap();
        let data = generate_training_data(&cfg, &world, &enc).unwrap();
        assert_eq!(data.num_records, cfg.data.num_traj);
        assert_eq!(training_segments(&cfg, &world).unwrap(), data.segments);
        let holdout = cfg.holdout();
        assert!(data
            .segments
            .iter()
            .all(|&(s, g, t)| !holdout.contains(s, g, t)));
        let (pairs, unreachable) = sample_eval_pairs(&world, 1, 20, 5, &holdout);
        assert!(!pairs.is_empty());
        assert_eq!(unreachable, 0);
        for p in &pairs {
            assert!(holdout.contains(p.start, p.goal, 1));
            assert!(!data.segments.contains(&(p.start, p.goal, 1)));
        }
    }

    #[test]
    fn oracle_plans_score_perfectly() {
        let cfg = tiny_config();
        let (world, _) = build_world(&cfg).unwrap();
        let (pairs, _) = sample_eval_pairs(
            &world,
            3,
            10,
            1,
            &HoldOut {
                seed: 0,
                fraction: 1.0,
                lengths: vec![3],
            },
        );
        let predicted: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| world.brute_force_plan(p.start, p.goal, 3).unwrap())
            .collect();
        let truth = pairs.iter().map(|p| p.oracle.clone()).collect();
        let s = metrics::summarize(&EvalBatch::new(predicted, truth).unwrap(), false).unwrap();
        assert_eq!(s.sr, 1.0);
    }

    #[test]
    fn eval_report_round_trip() {
        let r = EvalReport {
            sr: 0.5,
            macc: 0.75,
            miou: 0.8333333333333334,
            horizon: 3,
            num_pairs: 12,
            seed: u64::MAX,
            excluded: 0,
            training_overlap: 0,
            disjoint: true,
        };
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
