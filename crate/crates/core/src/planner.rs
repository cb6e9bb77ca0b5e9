//! Cross-entropy planning over action sequences.
//!
//! Both variants keep the best sequence ever evaluated rather than the last
//! iteration's best, and break elite ties at the K-th rank by candidate
//! index so that a seed fully determines the result.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, Environment};
use crate::worldmodel::{Action, ModelError, PredictorParams, WorldModel};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error("action sequence has length {got}, horizon is {expected}")]
    Length { expected: usize, got: usize },
    #[error("energy evaluator returned {got} values for {expected} candidates")]
    EnergyCount { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemConfig {
    pub samples: usize,
    pub elites: usize,
    pub iterations: usize,
    pub horizon: usize,
    /// Initial mean, `horizon · action_dim` entries; empty means zeros.
    #[serde(default)]
    pub init_mean: Vec<f64>,
    /// Initial diagonal variances; empty means ones.
    #[serde(default)]
    pub init_var: Vec<f64>,
    #[serde(default = "default_variance_floor")]
    pub variance_floor: f64,
    pub seed: u64,
    /// Refit a full covariance instead of the diagonal (Gaussian variant).
    #[serde(default)]
    pub full_covariance: bool,
    /// Score all `B^T` sequences instead of sampling (categorical variant).
    #[serde(default)]
    pub enumerate: bool,
    /// Pseudo-count added to every category when refitting; `None` is `1/B`.
    #[serde(default)]
    pub smoothing: Option<f64>,
}

fn default_variance_floor() -> f64 {
    1e-3
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            samples: 800,
            elites: 80,
            iterations: 10,
            horizon: 1,
            init_mean: Vec::new(),
            init_var: Vec::new(),
            variance_floor: default_variance_floor(),
            seed: 0,
            full_covariance: false,
            enumerate: false,
            smoothing: None,
        }
    }
}

impl CemConfig {
    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites > self.samples {
            return Err(PlanError::Config(format!(
                "need 1 <= K <= N, got K={} N={}",
                self.elites, self.samples
            )));
        }
        if self.iterations == 0 {
            return Err(PlanError::Config("iterations must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(PlanError::Config("horizon must be >= 1".into()));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(PlanError::Config(format!(
                "variance_floor {} must be > 0",
                self.variance_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub actions: Vec<Action>,
    pub final_energy: f64,
    /// Best energy seen so far, one entry per iteration.
    pub energy_trace: Vec<f64>,
    pub iterations_run: usize,
    /// Final proposal: the Gaussian mean, or the `T × B` probability table
    /// flattened row-major.
    pub proposal: Vec<f64>,
    /// Final diagonal variances (Gaussian variant only).
    pub variance: Vec<f64>,
}

/// Batch energy of candidate discrete sequences.
pub trait SequenceEnergy {
    fn energies(&mut self, seqs: &[Vec<usize>]) -> Vec<f64>;
}

/// Adapts a pure per-sequence energy; candidates are scored in parallel and
/// collected in candidate order.
pub struct Pointwise<F>(pub F);

impl<F: Fn(&[usize]) -> f64 + Sync> SequenceEnergy for Pointwise<F> {
    fn energies(&mut self, seqs: &[Vec<usize>]) -> Vec<f64> {
        seqs.par_iter().map(|s| (self.0)(s)).collect()
    }
}

fn sanitize(e: f64) -> f64 {
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Indices of the `k` lowest energies, ties broken by index.
fn elite_indices(energies: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..energies.len()).collect();
    idx.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gaussian CEM over `horizon · action_dim` real parameters.
pub fn cem_gaussian<F>(energy: F, action_dim: usize, cfg: &CemConfig) -> Result<PlanResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    if action_dim == 0 {
        return Err(PlanError::Config("action_dim must be >= 1".into()));
    }
    let dim = cfg.horizon * action_dim;
    let mut mean = if cfg.init_mean.is_empty() {
        vec![0.0; dim]
    } else {
        cfg.init_mean.clone()
    };
    let mut var = if cfg.init_var.is_empty() {
        vec![1.0; dim]
    } else {
        cfg.init_var.clone()
    };
    if mean.len() != dim || var.len() != dim {
        return Err(PlanError::Config(format!(
            "initial mean/variance must have {dim} entries"
        )));
    }
    if var.iter().any(|v| !(*v >= cfg.variance_floor)) {
        return Err(PlanError::Config(
            "initial variances below the floor".into(),
        ));
    }
    let mut chol: Option<DMatrix<f64>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (f64::INFINITY, mean.clone());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let candidates: Vec<Vec<f64>> = (0..cfg.samples)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                match &chol {
                    Some(l) => {
                        let x = l * DVector::from_vec(z);
                        x.iter().zip(&mean).map(|(a, m)| a + m).collect()
                    }
                    None => z
                        .iter()
                        .zip(&mean)
                        .zip(&var)
                        .map(|((z, m), v)| m + z * v.sqrt())
                        .collect(),
                }
            })
            .collect();
        let energies: Vec<f64> = candidates.par_iter().map(|c| sanitize(energy(c))).collect();
        let elites = elite_indices(&energies, cfg.elites);
        if energies[elites[0]] < best.0 {
            best = (energies[elites[0]], candidates[elites[0]].clone());
        }
        trace.push(best.0);
        let k = elites.len() as f64;
        for j in 0..dim {
            mean[j] = elites.iter().map(|&i| candidates[i][j]).sum::<f64>() / k;
        }
        for j in 0..dim {
            let v = elites
                .iter()
                .map(|&i| (candidates[i][j] - mean[j]).powi(2))
                .sum::<f64>()
                / k;
            var[j] = v.max(cfg.variance_floor);
        }
        if cfg.full_covariance {
            let mut cov = DMatrix::<f64>::zeros(dim, dim);
            for &i in &elites {
                let d = DVector::from_iterator(
                    dim,
                    candidates[i].iter().zip(&mean).map(|(c, m)| c - m),
                );
                cov += &d * d.transpose();
            }
            cov /= k;
            for j in 0..dim {
                cov[(j, j)] = var[j];
            }
            chol = cov.cholesky().map(|c| c.l());
        }
    }
    let actions = best
        .1
        .chunks(action_dim)
        .map(|c| Action::Continuous(c.to_vec()))
        .collect();
    Ok(PlanResult {
        actions,
        final_energy: best.0,
        iterations_run: trace.len(),
        energy_trace: trace,
        proposal: mean,
        variance: var,
    })
}

/// Every sequence in `0..B` of length `T`, in lexicographic order.
pub fn all_sequences(num_actions: usize, horizon: usize) -> Vec<Vec<usize>> {
    let total = num_actions.pow(horizon as u32);
    (0..total)
        .map(|code| {
            let mut rest = code;
            let mut seq = vec![0; horizon];
            for slot in seq.iter_mut().rev() {
                *slot = rest % num_actions;
                rest /= num_actions;
            }
            seq
        })
        .collect()
}

/// Categorical CEM: a `T × B` probability table refit to elite frequencies.
pub fn cem_categorical<E: SequenceEnergy + ?Sized>(
    energy: &mut E,
    num_actions: usize,
    cfg: &CemConfig,
) -> Result<PlanResult> {
    cfg.validate()?;
    if num_actions < 2 {
        return Err(PlanError::Config(format!(
            "categorical CEM needs B >= 2, got {num_actions}"
        )));
    }
    let b = num_actions;
    let t = cfg.horizon;
    let uniform = vec![1.0 / b as f64; t * b];
    if cfg.enumerate {
        let seqs = all_sequences(b, t);
        let energies = checked_energies(energy, &seqs)?;
        let i = elite_indices(&energies, 1)[0];
        return Ok(PlanResult {
            actions: seqs[i].iter().map(|&a| Action::Discrete(a)).collect(),
            final_energy: energies[i],
            energy_trace: vec![energies[i]],
            iterations_run: 1,
            proposal: uniform,
            variance: Vec::new(),
        });
    }
    let alpha = cfg.smoothing.unwrap_or(1.0 / b as f64);
    let mut probs = uniform;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: (f64, Vec<usize>) = (f64::INFINITY, vec![0; t]);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let seqs: Vec<Vec<usize>> = (0..cfg.samples)
            .map(|_| {
                (0..t)
                    .map(|step| sample_category(&probs[step * b..(step + 1) * b], &mut rng))
                    .collect()
            })
            .collect();
        let energies = checked_energies(energy, &seqs)?;
        let elites = elite_indices(&energies, cfg.elites);
        if energies[elites[0]] < best.0 {
            best = (energies[elites[0]], seqs[elites[0]].clone());
        }
        trace.push(best.0);
        let denom = elites.len() as f64 + alpha * b as f64;
        let mut counts = vec![0.0; t * b];
        for &i in &elites {
            for (step, &a) in seqs[i].iter().enumerate() {
                counts[step * b + a] += 1.0;
            }
        }
        for (p, c) in probs.iter_mut().zip(&counts) {
            *p = (c + alpha) / denom;
        }
    }
    Ok(PlanResult {
        actions: best.1.iter().map(|&a| Action::Discrete(a)).collect(),
        final_energy: best.0,
        iterations_run: trace.len(),
        energy_trace: trace,
        proposal: probs,
        variance: Vec::new(),
    })
}

fn checked_energies<E: SequenceEnergy + ?Sized>(
    energy: &mut E,
    seqs: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let e = energy.energies(seqs);
    if e.len() != seqs.len() {
        return Err(PlanError::EnergyCount {
            expected: seqs.len(),
            got: e.len(),
        });
    }
    Ok(e.into_iter().map(sanitize).collect())
}

fn sample_category(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Goal-conditioned energy `d(rollout(start, actions) end, goal)` for ball
/// points `start` and `goal`.
pub fn plan_energy(
    model: &PredictorParams,
    start: &[f64],
    goal: &[f64],
    actions: &[Action],
    horizon: usize,
) -> Result<f64> {
    if actions.len() != horizon {
        return Err(PlanError::Length {
            expected: horizon,
            got: actions.len(),
        });
    }
    let traj = model.rollout(start, actions)?;
    Ok(model.distance(traj.end(), goal))
}

/// Plan energy over discrete sequences with rollouts memoised by prefix.
/// Sampled candidates share most of their prefixes, so this evaluates far
/// fewer predictor steps than `N · T` per iteration.
pub struct RolloutEnergy<'a> {
    model: &'a PredictorParams,
    goal: Vec<f64>,
    cache: HashMap<Vec<usize>, Vec<f64>>,
}

impl<'a> RolloutEnergy<'a> {
    pub fn new(model: &'a PredictorParams, start: &[f64], goal: &[f64]) -> Self {
        let mut cache = HashMap::new();
        cache.insert(Vec::new(), start.to_vec());
        Self {
            model,
            goal: goal.to_vec(),
            cache,
        }
    }

    pub fn state(&mut self, seq: &[usize]) -> std::result::Result<Vec<f64>, ModelError> {
        if let Some(s) = self.cache.get(seq) {
            return Ok(s.clone());
        }
        let mut k = seq.len();
        while !self.cache.contains_key(&seq[..k]) {
            k -= 1;
        }
        let mut state = self.cache[&seq[..k]].clone();
        for j in k..seq.len() {
            state = self.model.predict_step(&state, &Action::Discrete(seq[j]))?;
            self.cache.insert(seq[..=j].to_vec(), state.clone());
        }
        Ok(state)
    }

    pub fn cached_states(&self) -> usize {
        self.cache.len()
    }
}

impl SequenceEnergy for RolloutEnergy<'_> {
    fn energies(&mut self, seqs: &[Vec<usize>]) -> Vec<f64> {
        seqs.iter()
            .map(|s| match self.state(s) {
                Ok(end) => self.model.distance(&end, &self.goal),
                Err(_) => f64::INFINITY,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanMode {
    Categorical { num_actions: usize },
    Gaussian { action_dim: usize },
}

/// One-shot plan from ball point `start` to ball point `goal`.
pub fn plan_latent(
    model: &PredictorParams,
    start: &[f64],
    goal: &[f64],
    mode: PlanMode,
    cfg: &CemConfig,
) -> Result<PlanResult> {
    match mode {
        PlanMode::Categorical { num_actions } => {
            let mut e = RolloutEnergy::new(model, start, goal);
            cem_categorical(&mut e, num_actions, cfg)
        }
        PlanMode::Gaussian { action_dim } => {
            let energy = |flat: &[f64]| -> f64 {
                let acts: Vec<Action> = flat
                    .chunks(action_dim)
                    .map(|c| Action::Continuous(c.to_vec()))
                    .collect();
                plan_energy(model, start, goal, &acts, cfg.horizon).unwrap_or(f64::INFINITY)
            };
            cem_gaussian(energy, action_dim, cfg)
        }
    }
}

/// What the receding-horizon driver needs from a model.
pub trait LatentPlanner {
    fn embed(&self, obs: &[f64]) -> std::result::Result<Vec<f64>, ModelError>;

    fn energy(&self, a: &[f64], b: &[f64]) -> f64;

    fn plan(
        &self,
        start: &[f64],
        goal: &[f64],
        mode: PlanMode,
        cfg: &CemConfig,
    ) -> Result<PlanResult>;
}

impl LatentPlanner for WorldModel {
    fn embed(&self, obs: &[f64]) -> std::result::Result<Vec<f64>, ModelError> {
        WorldModel::embed(self, obs)
    }

    fn energy(&self, a: &[f64], b: &[f64]) -> f64 {
        self.predictor.distance(a, b)
    }

    fn plan(
        &self,
        start: &[f64],
        goal: &[f64],
        mode: PlanMode,
        cfg: &CemConfig,
    ) -> Result<PlanResult> {
        plan_latent(&self.predictor, start, goal, mode, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode<S> {
    pub executed: Vec<Action>,
    pub states: Vec<S>,
    /// Energy between the current latent and the goal before each decision.
    pub energies: Vec<f64>,
    pub reached_goal: bool,
}

/// Plans, executes only the first action, observes, re-encodes and re-plans
/// with the horizon shrunk to the remaining steps. Stops after `horizon`
/// executions, when `is_goal` holds, or when the latent energy to the goal
/// drops to `goal_tolerance`.
#[allow(clippy::too_many_arguments)]
pub fn receding_horizon<E, M, R, G>(
    env: &E,
    model: &M,
    start: E::State,
    goal_obs: &[f64],
    mode: PlanMode,
    cfg: &CemConfig,
    goal_tolerance: f64,
    is_goal: G,
    rng: &mut R,
) -> Result<Episode<E::State>>
where
    E: Environment,
    M: LatentPlanner + ?Sized,
    R: Rng,
    G: Fn(&E::State) -> bool,
{
    cfg.validate()?;
    let goal = model.embed(goal_obs)?;
    let mut state = start;
    let mut ep = Episode {
        executed: Vec::new(),
        states: vec![state.clone()],
        energies: Vec::new(),
        reached_goal: false,
    };
    for step in 0..cfg.horizon {
        let obs = env.observe(&state, rng);
        let current = model.embed(&obs)?;
        let energy = model.energy(&current, &goal);
        ep.energies.push(energy);
        if is_goal(&state) || energy <= goal_tolerance {
            ep.reached_goal = true;
            return Ok(ep);
        }
        let step_cfg = CemConfig {
            horizon: cfg.horizon - step,
            seed: cfg.seed.wrapping_add(step as u64),
            init_mean: Vec::new(),
            init_var: Vec::new(),
            ..cfg.clone()
        };
        let plan = model.plan(&current, &goal, mode, &step_cfg)?;
        let action = plan.actions[0].clone();
        state = env.step(&state, &action)?;
        ep.executed.push(action);
        ep.states.push(state.clone());
    }
    ep.reached_goal = is_goal(&state);
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{TreeWorld, TreeWorldConfig};
    use crate::manifold::PoincareBall;
    use crate::worldmodel::{ActionSpace, Encoder, LatentGeometry, PredictorSpec};

    fn identity_model(num_actions: usize) -> PredictorParams {
        let spec = PredictorSpec {
            latent_dim: 2,
            hidden: vec![4],
            action_space: ActionSpace::Discrete { num_actions },
            geometry: LatentGeometry::Hyperbolic,
            residual: true,
            initial_c: 1.0,
        };
        PredictorParams::zeros(spec).unwrap()
    }

    #[test]
    fn plan_energy_examples() {
        let m = identity_model(3);
        let s = vec![0.3, -0.2];
        let acts = vec![Action::Discrete(2), Action::Discrete(0)];
        assert!(plan_energy(&m, &s, &s, &acts, 2).unwrap() < 1.5e-6);
        let goal = PoincareBall::with_c(1.0).unwrap().exp0(&[0.5, 0.0]);
        let e = plan_energy(&m, &[0.0, 0.0], &goal, &acts, 2).unwrap();
        // d(0, exp0(v)) = 2‖v‖ for c = 1
        assert!((e - 1.0).abs() < 1e-12);
        let e = plan_energy(&m, &[0.0, 0.0], &[0.5, 0.0], &acts, 2).unwrap();
        assert!((e - 1.098612).abs() < 1e-6);
        assert!(matches!(
            plan_energy(&m, &s, &s, &acts, 3),
            Err(PlanError::Length {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn action_independent_model_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = PredictorParams::init(identity_model(3).spec, &mut rng).unwrap();
        m.tensor_mut("action")
            .unwrap()
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let s = m.to_manifold(&[0.2, 0.5]);
        let g = m.to_manifold(&[-0.4, 0.1]);
        let a = [0, 1, 2].map(Action::Discrete).to_vec();
        let b = [2, 0, 1].map(Action::Discrete).to_vec();
        assert_eq!(
            plan_energy(&m, &s, &g, &a, 3).unwrap(),
            plan_energy(&m, &s, &g, &b, 3).unwrap()
        );
    }

    #[test]
    fn gaussian_recovers_quadratic_argmin() {
        let target = [0.3, -0.2, 0.1];
        for seed in 0..5 {
            let cfg = CemConfig {
                horizon: 3,
                seed,
                ..CemConfig::default()
            };
            let r = cem_gaussian(
                |a| a.iter().zip(&target).map(|(x, t)| (x - t).powi(2)).sum(),
                1,
                &cfg,
            )
            .unwrap();
            for (m, t) in r.proposal.iter().zip(&target) {
                assert!((m - t).abs() < 0.01, "seed {seed}: {:?}", r.proposal);
            }
            assert!(r.variance.iter().all(|v| *v >= cfg.variance_floor));
        }
    }

    #[test]
    fn gaussian_degenerate_settings() {
        let energy = |a: &[f64]| (a[0] - 0.5).powi(2) + a[1].powi(2);
        // K = N: the refit is the plain sample mean and variance.
        let cfg = CemConfig {
            samples: 50,
            elites: 50,
            iterations: 1,
            horizon: 2,
            seed: 3,
            variance_floor: 1e-9,
            ..CemConfig::default()
        };
        let r = cem_gaussian(energy, 1, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<[f64; 2]> = (0..50)
            .map(|_| {
                [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ]
            })
            .collect();
        for j in 0..2 {
            let mean = xs.iter().map(|x| x[j]).sum::<f64>() / 50.0;
            let var = xs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / 50.0;
            assert!((r.proposal[j] - mean).abs() < 1e-12);
            assert!((r.variance[j] - var).abs() < 1e-12);
        }
        // I = 1: the best of the initial samples.
        let best = xs.iter().map(|x| energy(x)).fold(f64::INFINITY, f64::min);
        assert_eq!(r.final_energy, best);
    }

    #[test]
    fn gaussian_full_covariance_and_non_finite() {
        let cfg = CemConfig {
            horizon: 2,
            full_covariance: true,
            seed: 1,
            ..CemConfig::default()
        };
        let r = cem_gaussian(
            |a| {
                if a[0] > 1.5 {
                    f64::NAN
                } else {
                    (a[0] + a[1] - 0.4).powi(2) + (a[0] - a[1]).powi(2)
                }
            },
            1,
            &cfg,
        )
        .unwrap();
        assert!((r.proposal[0] - 0.2).abs() < 0.01 && (r.proposal[1] - 0.2).abs() < 0.01);
        assert!(r.final_energy.is_finite());
    }

    #[test]
    fn traces_are_monotone_and_deterministic() {
        let cfg = CemConfig {
            horizon: 3,
            samples: 60,
            elites: 6,
            seed: 8,
            ..CemConfig::default()
        };
        let f = |a: &[f64]| a.iter().map(|x| (x - 0.7).abs()).sum::<f64>();
        let a = cem_gaussian(f, 1, &cfg).unwrap();
        let b = cem_gaussian(f, 1, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.energy_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.final_energy, *a.energy_trace.last().unwrap());

        let mut e = Pointwise(|s: &[usize]| s.iter().map(|&x| (x as f64 - 1.3).abs()).sum::<f64>());
        let c = cem_categorical(&mut e, 4, &cfg).unwrap();
        assert!(c.energy_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(c, cem_categorical(&mut e, 4, &cfg).unwrap());
    }

    #[test]
    fn categorical_single_step() {
        let energy = [2.0, 0.0, 5.0];
        let cfg = CemConfig::default();
        let mut e = Pointwise(|s: &[usize]| energy[s[0]]);
        let r = cem_categorical(&mut e, 3, &cfg).unwrap();
        assert_eq!(r.actions, vec![Action::Discrete(1)]);
        assert!(r.proposal[1] > 0.95);
        assert!(cem_categorical(&mut e, 1, &cfg).is_err());
    }

    #[test]
    fn categorical_uniform_energy_stays_near_uniform() {
        // With flat energies the elites are the first K samples, so each
        // refit is a multinomial draw from the previous table. After I
        // rounds the per-cell drift has variance of about I·p(1−p)/K.
        let cfg = CemConfig {
            horizon: 2,
            ..CemConfig::default()
        };
        let p = 1.0 / 3.0;
        let sigma = (cfg.iterations as f64 * p * (1.0 - p) / cfg.elites as f64).sqrt();
        for seed in 0..10 {
            let mut e = Pointwise(|_: &[usize]| 1.0);
            let r = cem_categorical(
                &mut e,
                3,
                &CemConfig {
                    seed,
                    ..cfg.clone()
                },
            )
            .unwrap();
            for q in &r.proposal {
                assert!((q - p).abs() < 3.0 * sigma, "seed {seed}: {q}");
            }
        }
    }

    #[test]
    fn enumeration_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let table: Vec<f64> = (0..81).map(|_| rng.random::<f64>()).collect();
        let cfg = CemConfig {
            horizon: 4,
            enumerate: true,
            ..CemConfig::default()
        };
        let mut e = Pointwise(|s: &[usize]| table[s.iter().fold(0, |acc, &a| acc * 3 + a)]);
        let r = cem_categorical(&mut e, 3, &cfg).unwrap();
        let best = (0..81)
            .min_by(|&a, &b| table[a].total_cmp(&table[b]))
            .unwrap();
        let expect = all_sequences(3, 4)[best]
            .iter()
            .map(|&a| Action::Discrete(a))
            .collect::<Vec<_>>();
        assert_eq!(r.actions, expect);
    }

    #[test]
    fn memoised_energy_matches_direct_rollouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = PredictorParams::init(identity_model(3).spec, &mut rng).unwrap();
        let s = m.to_manifold(&[0.1, 0.4]);
        let g = m.to_manifold(&[-0.5, 0.2]);
        let seqs = all_sequences(3, 3);
        let mut memo = RolloutEnergy::new(&m, &s, &g);
        let fast = memo.energies(&seqs);
        assert_eq!(memo.cached_states(), 1 + 3 + 9 + 27);
        for (seq, f) in seqs.iter().zip(&fast) {
            let acts: Vec<Action> = seq.iter().map(|&a| Action::Discrete(a)).collect();
            assert_eq!(*f, plan_energy(&m, &s, &g, &acts, 3).unwrap());
        }
    }

    /// Zero energy exactly at the goal node.
    struct ExactTree<'a> {
        world: &'a TreeWorld,
        goal: usize,
    }

    impl SequenceEnergy for ExactTree<'_> {
        fn energies(&mut self, seqs: &[Vec<usize>]) -> Vec<f64> {
            seqs.iter()
                .map(|s| {
                    if self.world.replay(0, s).unwrap() == self.goal {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect()
        }
    }

    #[test]
    fn exact_energy_recovers_oracle_plan() {
        let world = TreeWorld::new(TreeWorldConfig::new(3, 4, 0.0, 1)).unwrap();
        for goal in [40, 53, 66, 120] {
            let oracle = world.brute_force_plan(0, goal, 4).unwrap();
            let mut e = ExactTree {
                world: &world,
                goal,
            };
            let cfg = CemConfig {
                horizon: 4,
                seed: goal as u64,
                ..CemConfig::default()
            };
            let r = cem_categorical(&mut e, 3, &cfg).unwrap();
            let got: Vec<usize> = r
                .actions
                .iter()
                .map(|a| match a {
                    Action::Discrete(x) => *x,
                    _ => unreachable!(),
                })
                .collect();
            assert_eq!(got, oracle);
        }
    }

    /// Reads the node id off the one-hot block and plans through the true
    /// dynamics.
    struct OracleModel<'a> {
        world: &'a TreeWorld,
    }

    impl LatentPlanner for OracleModel<'_> {
        fn embed(&self, obs: &[f64]) -> std::result::Result<Vec<f64>, ModelError> {
            let id = (0..self.world.num_nodes())
                .max_by(|&i, &j| obs[i].total_cmp(&obs[j]))
                .unwrap();
            Ok(vec![id as f64])
        }

        fn energy(&self, a: &[f64], b: &[f64]) -> f64 {
            if a == b {
                0.0
            } else {
                1.0
            }
        }

        fn plan(
            &self,
            start: &[f64],
            goal: &[f64],
            mode: PlanMode,
            cfg: &CemConfig,
        ) -> Result<PlanResult> {
            let PlanMode::Categorical { num_actions } = mode else {
                unreachable!()
            };
            let (start, goal) = (start[0] as usize, goal[0] as usize);
            let w = self.world;
            let mut e =
                Pointwise(move |s: &[usize]| (w.replay(start, s).unwrap() != goal) as u8 as f64);
            cem_categorical(&mut e, num_actions, cfg)
        }
    }

    #[test]
    fn receding_horizon_with_exact_model_follows_oracle() {
        let world = TreeWorld::new(TreeWorldConfig::new(3, 5, 0.05, 1)).unwrap();
        let model = OracleModel { world: &world };
        let mode = PlanMode::Categorical { num_actions: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..10 {
            let t = 1 + k % 4;
            let start = rng.random_range(0..world.start_candidates(t));
            let seq: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
            let goal = world.replay(start, &seq).unwrap();
            let goal_obs = world.observe(&goal, &mut rng);
            let cfg = CemConfig {
                horizon: t,
                seed: k as u64,
                ..CemConfig::default()
            };
            let ep = receding_horizon(
                &world,
                &model,
                start,
                &goal_obs,
                mode,
                &cfg,
                0.0,
                |&s| s == goal,
                &mut rng,
            )
            .unwrap();
            let exec: Vec<Action> = seq.iter().map(|&a| Action::Discrete(a)).collect();
            assert_eq!(ep.executed, exec);
            assert!(ep.reached_goal);
            if t == 1 {
                let obs = world.observe(&start, &mut rng);
                let one_shot = model
                    .plan(&model.embed(&obs).unwrap(), &[goal as f64], mode, &cfg)
                    .unwrap();
                assert_eq!(one_shot.actions, ep.executed);
            }
        }
    }

    #[test]
    fn receding_horizon_stops_at_goal() {
        let world = TreeWorld::new(TreeWorldConfig::new(3, 3, 0.0, 1)).unwrap();
        let encoder = Encoder::new(2, world.obs_dim(), 2);
        let model = WorldModel {
            encoder,
            predictor: identity_model(3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let goal_obs = world.clean_observation(5);
        let cfg = CemConfig {
            horizon: 2,
            samples: 20,
            elites: 4,
            ..CemConfig::default()
        };
        let mode = PlanMode::Categorical { num_actions: 3 };
        let ep = receding_horizon(
            &world,
            &model,
            5,
            &goal_obs,
            mode,
            &cfg,
            0.0,
            |_| false,
            &mut rng,
        )
        .unwrap();
        assert!(ep.executed.is_empty() && ep.reached_goal);
        assert_eq!(ep.energies, vec![0.0]);

        let ep = receding_horizon(
            &world,
            &model,
            0,
            &goal_obs,
            mode,
            &cfg,
            0.0,
            |&s| s == 5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(ep.executed.len(), 2);
        assert_eq!(ep.states.len(), 3);
    }
}
