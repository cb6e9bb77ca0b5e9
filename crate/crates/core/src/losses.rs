//! Training objectives.
//!
//! Each objective exists in two forms: a plain function over latent points
//! (used for evaluation, logging and as the finite-difference reference) and
//! a graph builder used for gradients during training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradengine::{GradError, Graph, Var};
use crate::manifold::LatentMetric;
use crate::worldmodel::{Action, ModelError, PredictorGraph, PredictorParams};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} items, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weighting between teacher forcing and rollout in the supervised stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lambda: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Which hinge order the triangle term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TriangleMode {
    /// `[d(t, t+2) − d(t, t+1) − d(t+1, t+2)]₊`; vanishes for any true metric.
    PaperForm,
    /// `[d(t, t+1) + d(t+1, t+2) − d(t, t+2)]₊`; zero only on geodesics.
    #[default]
    SlackForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    pub gamma: f64,
    pub beta: f64,
    pub horizon: usize,
    #[serde(default)]
    pub triangle_mode: TriangleMode,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            beta: 0.1,
            horizon: 4,
            triangle_mode: TriangleMode::SlackForm,
        }
    }
}

impl GrlConfig {
    /// `γ ∈ [0, 1]`, `β ≥ 0`, `T ≥ 1`, and `T ≥ 2` whenever the triangle
    /// term is active.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LossError::InvalidConfig(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "beta {} must be >= 0",
                self.beta
            )));
        }
        if self.horizon == 0 || (self.beta > 0.0 && self.horizon < 2) {
            return Err(LossError::InvalidConfig(format!(
                "horizon {} too short (beta = {})",
                self.horizon, self.beta
            )));
        }
        Ok(())
    }
}

/// Mean distance between paired predictions and targets.
pub fn teacher_forcing(
    pred: &[Vec<f64>],
    target: &[Vec<f64>],
    metric: &LatentMetric,
) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(LossError::TooShort { need: 1, got: 0 });
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| metric.distance(p, t))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Two-step rollout error for one window: `d(P(P(s, a₁), a₂), target)`.
pub fn rollout_loss(
    model: &PredictorParams,
    start: &[f64],
    actions: &[Action],
    target2: &[f64],
) -> Result<f64> {
    if actions.len() < 2 {
        return Err(LossError::TooShort {
            need: 2,
            got: actions.len(),
        });
    }
    let traj = model.rollout(start, &actions[..2])?;
    Ok(model.distance(traj.end(), target2))
}

/// `λ·tf + (1 − λ)·ro`.
pub fn sft_loss(tf: f64, ro: f64, cfg: &SftConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.lambda * tf + (1.0 - cfg.lambda) * ro)
}

fn triangle_hinge(d01: f64, d12: f64, d02: f64, mode: TriangleMode) -> f64 {
    match mode {
        TriangleMode::PaperForm => (d02 - d01 - d12).max(0.0),
        TriangleMode::SlackForm => (d01 + d12 - d02).max(0.0),
    }
}

/// Mean hinge over consecutive triplets of `pred`.
pub fn triangle_regularizer(
    pred: &[Vec<f64>],
    metric: &LatentMetric,
    mode: TriangleMode,
) -> Result<f64> {
    if pred.len() < 3 {
        return Err(LossError::TooShort {
            need: 3,
            got: pred.len(),
        });
    }
    let n = pred.len() - 2;
    let total: f64 = (0..n)
        .map(|t| {
            let d01 = metric.distance(&pred[t], &pred[t + 1]);
            let d12 = metric.distance(&pred[t + 1], &pred[t + 2]);
            let d02 = metric.distance(&pred[t], &pred[t + 2]);
            triangle_hinge(d01, d12, d02, mode)
        })
        .sum();
    Ok(total / n as f64)
}

/// Energy of a predicted transition; the reward is its negation.
pub fn energy_cost(pred_next: &[f64], true_next: &[f64], metric: &LatentMetric) -> f64 {
    metric.distance(pred_next, true_next)
}

pub fn reward(pred_next: &[f64], true_next: &[f64], metric: &LatentMetric) -> f64 {
    -energy_cost(pred_next, true_next, metric)
}

/// Components of the GRL objective for one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlTerms {
    /// `Σ_t γ^{t−1} d(ŝ_{t+1}, s_{t+1})`.
    pub discounted: f64,
    /// Triangle term over the predicted trajectory, before weighting by `β`.
    pub triangle: f64,
    pub total: f64,
}

/// Discounted rollout energy plus `β` times the triangle term.
pub fn grl_loss(
    model: &PredictorParams,
    start: &[f64],
    actions: &[Action],
    targets: &[Vec<f64>],
    cfg: &GrlConfig,
) -> Result<GrlTerms> {
    cfg.validate()?;
    if actions.len() != cfg.horizon {
        return Err(LossError::LengthMismatch {
            left: actions.len(),
            right: cfg.horizon,
        });
    }
    if targets.len() != cfg.horizon {
        return Err(LossError::LengthMismatch {
            left: targets.len(),
            right: cfg.horizon,
        });
    }
    let traj = model.rollout(start, actions)?;
    let metric = model.metric();
    let per_step: Vec<f64> = traj.states[1..]
        .iter()
        .zip(targets)
        .map(|(p, t)| energy_cost(p, t, &metric))
        .collect();
    let discounted = discounted_sum(&per_step, cfg.gamma);
    let triangle = if cfg.beta > 0.0 {
        triangle_regularizer(&traj.states, &metric, cfg.triangle_mode)?
    } else {
        0.0
    };
    Ok(GrlTerms {
        discounted,
        triangle,
        total: discounted + cfg.beta * triangle,
    })
}

/// `Σ_t γ^t x_t` with `t` starting at 0.
pub fn discounted_sum(values: &[f64], gamma: f64) -> f64 {
    let mut w = 1.0;
    let mut total = 0.0;
    for v in values {
        total += w * v;
        w *= gamma;
    }
    total
}

/// One supervised window. States are encoder outputs (tangent vectors); the
/// projection onto the ball happens inside the objective so that it is
/// differentiable in the curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct SftWindow {
    pub s0: Vec<f64>,
    pub a0: Action,
    pub s1: Vec<f64>,
    pub a1: Action,
    pub s2: Vec<f64>,
}

/// One GRL window of horizon `T`: start, `T` actions, `T` targets (all
/// encoder outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct GrlWindow {
    pub start: Vec<f64>,
    pub actions: Vec<Action>,
    pub targets: Vec<Vec<f64>>,
}

/// Plain-evaluation SFT terms for a batch: `(total, teacher forcing, rollout)`.
pub fn sft_batch_value(
    model: &PredictorParams,
    windows: &[SftWindow],
    cfg: &SftConfig,
) -> Result<(f64, f64, f64)> {
    if windows.is_empty() {
        return Err(LossError::TooShort { need: 1, got: 0 });
    }
    let metric = model.metric();
    let mut tf = 0.0;
    let mut ro = 0.0;
    for w in windows {
        let s0 = model.to_manifold(&w.s0);
        let s1 = model.to_manifold(&w.s1);
        let s2 = model.to_manifold(&w.s2);
        let p1 = model.predict_step(&s0, &w.a0)?;
        tf += metric.distance(&p1, &s1);
        ro += rollout_loss(model, &s0, &[w.a0.clone(), w.a1.clone()], &s2)?;
    }
    let k = windows.len() as f64;
    let (tf, ro) = (tf / k, ro / k);
    Ok((sft_loss(tf, ro, cfg)?, tf, ro))
}

/// Plain-evaluation GRL terms averaged over a batch.
pub fn grl_batch_value(
    model: &PredictorParams,
    windows: &[GrlWindow],
    cfg: &GrlConfig,
) -> Result<GrlTerms> {
    if windows.is_empty() {
        return Err(LossError::TooShort { need: 1, got: 0 });
    }
    let mut acc = GrlTerms {
        discounted: 0.0,
        triangle: 0.0,
        total: 0.0,
    };
    for w in windows {
        let start = model.to_manifold(&w.start);
        let targets: Vec<Vec<f64>> = w.targets.iter().map(|t| model.to_manifold(t)).collect();
        let t = grl_loss(model, &start, &w.actions, &targets, cfg)?;
        acc.discounted += t.discounted;
        acc.triangle += t.triangle;
        acc.total += t.total;
    }
    let k = windows.len() as f64;
    Ok(GrlTerms {
        discounted: acc.discounted / k,
        triangle: acc.triangle / k,
        total: acc.total / k,
    })
}

/// Output nodes of an SFT objective graph.
#[derive(Debug, Clone, Copy)]
pub struct SftNodes {
    pub total: Var,
    pub teacher_forcing: Var,
    pub rollout: Var,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.mul_const(acc, 1.0 / terms.len() as f64)?)
}

/// Records the batch-mean SFT objective and marks it as the graph output.
pub fn build_sft_objective(
    g: &mut Graph,
    pg: &PredictorGraph,
    windows: &[SftWindow],
    cfg: &SftConfig,
) -> Result<SftNodes> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(LossError::TooShort { need: 1, got: 0 });
    }
    let mut tf_terms = Vec::with_capacity(windows.len());
    let mut ro_terms = Vec::with_capacity(windows.len());
    for w in windows {
        let s0 = g.constant(w.s0.clone());
        let s1 = g.constant(w.s1.clone());
        let s2 = g.constant(w.s2.clone());
        let s0 = pg.to_manifold(g, s0)?;
        let s1 = pg.to_manifold(g, s1)?;
        let s2 = pg.to_manifold(g, s2)?;
        let p1 = pg.predict_step(g, s0, &w.a0)?;
        let p2 = pg.predict_step(g, p1, &w.a1)?;
        tf_terms.push(pg.distance(g, p1, s1)?);
        ro_terms.push(pg.distance(g, p2, s2)?);
    }
    let tf = mean_of(g, &tf_terms)?;
    let ro = mean_of(g, &ro_terms)?;
    let a = g.mul_const(tf, cfg.lambda)?;
    let b = g.mul_const(ro, 1.0 - cfg.lambda)?;
    let total = g.add(a, b)?;
    g.set_output(total);
    Ok(SftNodes {
        total,
        teacher_forcing: tf,
        rollout: ro,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GrlNodes {
    pub total: Var,
    pub discounted: Var,
    pub triangle: Var,
}

fn graph_triangle(
    g: &mut Graph,
    pg: &PredictorGraph,
    states: &[Var],
    mode: TriangleMode,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(states.len() - 2);
    for t in 0..states.len() - 2 {
        let d01 = pg.distance(g, states[t], states[t + 1])?;
        let d12 = pg.distance(g, states[t + 1], states[t + 2])?;
        let d02 = pg.distance(g, states[t], states[t + 2])?;
        let s = g.add(d01, d12)?;
        let arg = match mode {
            TriangleMode::SlackForm => g.sub(s, d02)?,
            TriangleMode::PaperForm => g.sub(d02, s)?,
        };
        terms.push(g.pos_part(arg));
    }
    mean_of(g, &terms)
}

/// Records the batch-mean GRL objective and marks it as the graph output.
pub fn build_grl_objective(
    g: &mut Graph,
    pg: &PredictorGraph,
    windows: &[GrlWindow],
    cfg: &GrlConfig,
) -> Result<GrlNodes> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(LossError::TooShort { need: 1, got: 0 });
    }
    let mut disc_terms = Vec::with_capacity(windows.len());
    let mut tri_terms = Vec::with_capacity(windows.len());
    for w in windows {
        if w.actions.len() != cfg.horizon || w.targets.len() != cfg.horizon {
            return Err(LossError::LengthMismatch {
                left: w.actions.len(),
                right: cfg.horizon,
            });
        }
        let s = g.constant(w.start.clone());
        let mut state = pg.to_manifold(g, s)?;
        let mut states = vec![state];
        let mut disc = None;
        let mut weight = 1.0;
        for (a, target) in w.actions.iter().zip(&w.targets) {
            state = pg.predict_step(g, state, a)?;
            states.push(state);
            let tv = g.constant(target.clone());
            let tv = pg.to_manifold(g, tv)?;
            let d = pg.distance(g, state, tv)?;
            let d = g.mul_const(d, weight)?;
            disc = Some(match disc {
                None => d,
                Some(acc) => g.add(acc, d)?,
            });
            weight *= cfg.gamma;
        }
        disc_terms.push(disc.expect("horizon >= 1"));
        if cfg.beta > 0.0 {
            tri_terms.push(graph_triangle(g, pg, &states, cfg.triangle_mode)?);
        }
    }
    let discounted = mean_of(g, &disc_terms)?;
    let triangle = if tri_terms.is_empty() {
        g.scalar(0.0)
    } else {
        mean_of(g, &tri_terms)?
    };
    let weighted = g.mul_const(triangle, cfg.beta)?;
    let total = g.add(discounted, weighted)?;
    g.set_output(total);
    Ok(GrlNodes {
        total,
        discounted,
        triangle,
    })
}

/// Records the goal-conditioned planning energy `d(rollout end, goal)` for
/// encoder-space `start` and `goal`.
pub fn build_plan_energy(
    g: &mut Graph,
    pg: &PredictorGraph,
    start: &[f64],
    actions: &[Action],
    goal: &[f64],
) -> Result<Var> {
    if actions.is_empty() {
        return Err(LossError::TooShort { need: 1, got: 0 });
    }
    let s = g.constant(start.to_vec());
    let mut state = pg.to_manifold(g, s)?;
    for a in actions {
        state = pg.predict_step(g, state, a)?;
    }
    let goal = g.constant(goal.to_vec());
    let goal = pg.to_manifold(g, goal)?;
    let e = pg.distance(g, state, goal)?;
    g.set_output(e);
    Ok(e)
}
