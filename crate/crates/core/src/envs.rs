//! Synthetic worlds with exact planning oracles.
//!
//! [`TreeWorld`] is a complete `B`-ary tree with level-order node ids. Its
//! observations are a one-hot node code followed by a per-node feature
//! vector. Features are built hierarchically: every (depth, action) pair owns
//! a seeded Gaussian branch code, and a node's feature is the sum of the
//! codes along its root path. Each feature is still a fixed seeded Gaussian
//! vector; the correlation along paths is what makes the dynamics learnable
//! from a random linear encoder.
//!
//! [`DriftWorld`] is a 2-D point mass used to exercise the Gaussian planner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worldmodel::Action;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid action {action} (world has {branching} actions)")]
    InvalidAction { action: usize, branching: usize },
    #[error("invalid node id {node} (world has {num_nodes} nodes)")]
    InvalidNode { node: usize, num_nodes: usize },
    #[error("action kind does not match the world")]
    ActionKind,
    #[error("invalid world configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// A world the receding-horizon driver can act in.
pub trait Environment {
    type State: Clone + PartialEq + std::fmt::Debug;

    fn step(&self, state: &Self::State, action: &Action) -> Result<Self::State>;

    fn observe<R: Rng + ?Sized>(&self, state: &Self::State, rng: &mut R) -> Vec<f64>;

    fn obs_dim(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeWorldConfig {
    pub branching: usize,
    pub depth: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Per-entry observation noise standard deviation.
    #[serde(default)]
    pub noise: f64,
    /// Standard deviation of each branch-code entry.
    #[serde(default = "default_branch_scale")]
    pub branch_scale: f64,
    pub seed: u64,
}

fn default_feature_dim() -> usize {
    16
}

fn default_branch_scale() -> f64 {
    1.0
}

impl TreeWorldConfig {
    pub fn new(branching: usize, depth: usize, noise: f64, seed: u64) -> Self {
        Self {
            branching,
            depth,
            feature_dim: default_feature_dim(),
            noise,
            branch_scale: default_branch_scale(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TreeWorld {
    config: TreeWorldConfig,
    num_nodes: usize,
    /// `num_nodes × feature_dim`, row-major.
    features: Vec<f64>,
}

impl TreeWorld {
    pub fn new(config: TreeWorldConfig) -> Result<Self> {
        let b = config.branching;
        if b < 2 || config.depth < 1 {
            return Err(EnvError::Config(format!(
                "need branching >= 2 and depth >= 1, got B={b} D={}",
                config.depth
            )));
        }
        if !(config.noise >= 0.0 && config.noise.is_finite()) {
            return Err(EnvError::Config(format!(
                "noise {} must be >= 0",
                config.noise
            )));
        }
        let num_nodes = b
            .checked_pow(config.depth as u32 + 1)
            .map(|p| (p - 1) / (b - 1))
            .filter(|&n| n <= 1 << 24)
            .ok_or_else(|| EnvError::Config("tree too large".into()))?;
        let f = config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // codes[(depth - 1) * B + action]
        let codes: Vec<f64> = (0..config.depth * b * f)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * config.branch_scale
            })
            .collect();
        let mut features = vec![0.0; num_nodes * f];
        for id in 1..num_nodes {
            let parent = (id - 1) / b;
            let action = (id - 1) % b;
            let depth = node_depth(b, id);
            let code = &codes[((depth - 1) * b + action) * f..][..f];
            for k in 0..f {
                features[id * f + k] = features[parent * f + k] + code[k];
            }
        }
        Ok(Self {
            config,
            num_nodes,
            features,
        })
    }

    pub fn config(&self) -> &TreeWorldConfig {
        &self.config
    }

    pub fn branching(&self) -> usize {
        self.config.branching
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn node_depth(&self, node: usize) -> usize {
        node_depth(self.config.branching, node)
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.node_depth(node) == self.config.depth
    }

    pub fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.num_nodes {
            return Err(EnvError::InvalidNode {
                node,
                num_nodes: self.num_nodes,
            });
        }
        Ok(())
    }

    /// Level-order child `state·B + action + 1`; leaves absorb.
    pub fn step_node(&self, state: usize, action: usize) -> Result<usize> {
        self.check_node(state)?;
        let b = self.config.branching;
        if action >= b {
            return Err(EnvError::InvalidAction {
                action,
                branching: b,
            });
        }
        if self.is_leaf(state) {
            Ok(state)
        } else {
            Ok(state * b + action + 1)
        }
    }

    pub fn replay(&self, start: usize, actions: &[usize]) -> Result<usize> {
        actions.iter().try_fold(start, |s, &a| self.step_node(s, a))
    }

    pub fn feature(&self, node: usize) -> &[f64] {
        let f = self.config.feature_dim;
        &self.features[node * f..(node + 1) * f]
    }

    /// Noise-free observation.
    pub fn clean_observation(&self, node: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim()];
        obs[node] = 1.0;
        obs[self.num_nodes..].copy_from_slice(self.feature(node));
        obs
    }

    /// Nodes whose subtree is deep enough for `horizon` non-absorbing steps.
    pub fn start_candidates(&self, horizon: usize) -> usize {
        if horizon > self.config.depth {
            return 0;
        }
        let b = self.config.branching;
        (b.pow((self.config.depth - horizon) as u32 + 1) - 1) / (b - 1)
    }

    /// Exhaustive search over all `B^T` sequences. Returns the first (in
    /// lexicographic order) sequence that ends at `goal`.
    pub fn brute_force_plan(
        &self,
        start: usize,
        goal: usize,
        horizon: usize,
    ) -> Option<Vec<usize>> {
        if start >= self.num_nodes || goal >= self.num_nodes {
            return None;
        }
        let b = self.config.branching;
        let total = b.checked_pow(horizon as u32)?;
        let mut seq = vec![0usize; horizon];
        for code in 0..total {
            let mut rest = code;
            for slot in seq.iter_mut().rev() {
                *slot = rest % b;
                rest /= b;
            }
            if self.replay(start, &seq).ok() == Some(goal) {
                return Some(seq);
            }
        }
        None
    }
}

fn node_depth(branching: usize, mut node: usize) -> usize {
    let mut d = 0;
    while node > 0 {
        node = (node - 1) / branching;
        d += 1;
    }
    d
}

impl Environment for TreeWorld {
    type State = usize;

    fn step(&self, state: &usize, action: &Action) -> Result<usize> {
        match action {
            Action::Discrete(a) => self.step_node(*state, *a),
            Action::Continuous(_) => Err(EnvError::ActionKind),
        }
    }

    /// One-hot node code and feature plus fresh `N(0, σ²)` noise per entry.
    fn observe<R: Rng + ?Sized>(&self, state: &usize, rng: &mut R) -> Vec<f64> {
        let mut obs = self.clean_observation(*state);
        if self.config.noise > 0.0 {
            let normal = Normal::new(0.0, self.config.noise).expect("validated noise");
            for v in obs.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        obs
    }

    fn obs_dim(&self) -> usize {
        self.num_nodes + self.config.feature_dim
    }
}

/// One generated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub start_node: usize,
    pub goal_node: usize,
    pub optimal_actions: Vec<usize>,
}

/// Lazily generated dataset. Record `i` uses its own ChaCha stream, so the
/// content of a record depends only on `(seed, i)`.
pub struct DatasetStream<'a> {
    world: &'a TreeWorld,
    horizon: usize,
    seed: u64,
    next: usize,
    end: usize,
}

impl<'a> DatasetStream<'a> {
    pub fn new(world: &'a TreeWorld, num_traj: usize, horizon: usize, seed: u64) -> Result<Self> {
        if num_traj == 0 {
            return Err(EnvError::Config("num_traj must be >= 1".into()));
        }
        if horizon == 0 || horizon > world.depth() {
            return Err(EnvError::Config(format!(
                "trajectory length {horizon} must be in 1..={}",
                world.depth()
            )));
        }
        Ok(Self {
            world,
            horizon,
            seed,
            next: 0,
            end: num_traj,
        })
    }

    /// Start, actions and end node of record `index`, without observations.
    pub fn skeleton(&self, index: usize) -> (usize, Vec<usize>, usize) {
        let mut rng = record_rng(self.seed, index);
        self.skeleton_with(&mut rng)
    }

    fn skeleton_with(&self, rng: &mut ChaCha8Rng) -> (usize, Vec<usize>, usize) {
        let start = rng.random_range(0..self.world.start_candidates(self.horizon));
        let actions: Vec<usize> = (0..self.horizon)
            .map(|_| rng.random_range(0..self.world.branching()))
            .collect();
        let end = self.world.replay(start, &actions).expect("valid ids");
        (start, actions, end)
    }

    pub fn record(&self, index: usize) -> TrajectoryRecord {
        let mut rng = record_rng(self.seed, index);
        let (start, actions, end) = self.skeleton_with(&mut rng);
        let mut node = start;
        let mut observations = vec![self.world.observe(&node, &mut rng)];
        for &a in &actions {
            node = self.world.step_node(node, a).expect("valid ids");
            observations.push(self.world.observe(&node, &mut rng));
        }
        let optimal_actions = self
            .world
            .brute_force_plan(start, end, self.horizon)
            .expect("end reached by construction");
        TrajectoryRecord {
            observations,
            actions,
            start_node: start,
            goal_node: end,
            optimal_actions,
        }
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

impl Iterator for DatasetStream<'_> {
    type Item = TrajectoryRecord;

    fn next(&mut self) -> Option<TrajectoryRecord> {
        if self.next >= self.end {
            return None;
        }
        let r = self.record(self.next);
        self.next += 1;
        Some(r)
    }
}

/// Seeded dataset of random-action trajectories. Starts are drawn uniformly
/// from the nodes with at least `horizon` levels below them, so no record
/// touches an absorbing leaf before its last step.
pub fn generate_dataset(
    world: &TreeWorld,
    num_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    Ok(DatasetStream::new(world, num_traj, horizon, seed)?.collect())
}

/// Point mass in the plane: `p ← p + 0.1·a` with `a` clipped to unit norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftWorld {
    pub step_size: f64,
    pub noise: f64,
}

impl Default for DriftWorld {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            noise: 0.0,
        }
    }
}

impl DriftWorld {
    /// Unit vector of compass direction `k` (0 = east, counter-clockwise in
    /// steps of 45°).
    pub fn compass_action(k: usize) -> [f64; 2] {
        let theta = (k % 8) as f64 * std::f64::consts::FRAC_PI_4;
        [theta.cos(), theta.sin()]
    }

    pub fn step_pos(&self, pos: [f64; 2], action: &[f64]) -> Result<[f64; 2]> {
        if action.len() != 2 {
            return Err(EnvError::ActionKind);
        }
        let n = (action[0] * action[0] + action[1] * action[1]).sqrt();
        let scale = if n > 1.0 { 1.0 / n } else { 1.0 };
        Ok([
            pos[0] + self.step_size * action[0] * scale,
            pos[1] + self.step_size * action[1] * scale,
        ])
    }

    /// The straight-line plan; exact whenever the goal is within reach.
    pub fn greedy_plan(&self, start: [f64; 2], goal: [f64; 2], horizon: usize) -> Vec<[f64; 2]> {
        let per = self.step_size * horizon as f64;
        let a = [(goal[0] - start[0]) / per, (goal[1] - start[1]) / per];
        let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
        let a = if n > 1.0 { [a[0] / n, a[1] / n] } else { a };
        vec![a; horizon]
    }
}

impl Environment for DriftWorld {
    type State = [f64; 2];

    fn step(&self, state: &[f64; 2], action: &Action) -> Result<[f64; 2]> {
        match action {
            Action::Continuous(a) => self.step_pos(*state, a),
            Action::Discrete(_) => Err(EnvError::ActionKind),
        }
    }

    fn observe<R: Rng + ?Sized>(&self, state: &[f64; 2], rng: &mut R) -> Vec<f64> {
        let mut obs = state.to_vec();
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).expect("noise >= 0");
            for v in obs.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        obs
    }

    fn obs_dim(&self) -> usize {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn world(b: usize, d: usize, noise: f64) -> TreeWorld {
        TreeWorld::new(TreeWorldConfig::new(b, d, noise, 3)).unwrap()
    }

    #[test]
    fn step_examples() {
        let w = world(3, 2, 0.0);
        assert_eq!(w.step_node(0, 1).unwrap(), 2);
        let leaf = w.num_nodes() - 1;
        assert!(w.is_leaf(leaf));
        for a in 0..3 {
            assert_eq!(w.step_node(leaf, a).unwrap(), leaf);
        }
        assert_eq!(world(2, 3, 0.0).step_node(1, 0).unwrap(), 3);
        assert!(matches!(
            w.step_node(0, 3),
            Err(EnvError::InvalidAction {
                action: 3,
                branching: 3
            })
        ));
    }

    #[test]
    fn node_count_and_shape() {
        let w = world(3, 6, 0.0);
        assert_eq!(w.num_nodes(), 1093);
        assert_eq!(w.obs_dim(), 1093 + 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(w.observe(&5, &mut rng).len(), w.obs_dim());
    }

    #[test]
    fn observation_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = world(3, 3, 0.0);
        assert_eq!(w.observe(&7, &mut rng), w.observe(&7, &mut rng));
        let w = world(3, 3, 0.1);
        let a = w.observe(&7, &mut rng);
        let b = w.observe(&7, &mut rng);
        assert_ne!(a, b);
        let argmax = |o: &[f64]| {
            (0..w.num_nodes())
                .max_by(|&i, &j| o[i].total_cmp(&o[j]))
                .unwrap()
        };
        assert_eq!(argmax(&a), 7);
        assert_eq!(argmax(&b), 7);
    }

    #[test]
    fn oracle_examples() {
        let w = world(3, 2, 0.0);
        // leaf reached by (1, 1): 0 -> 2 -> 2·3 + 1 + 1 = 8
        assert_eq!(w.brute_force_plan(0, 8, 2), Some(vec![1, 1]));
        assert_eq!(w.brute_force_plan(4, 4, 0), Some(vec![]));
        // node 1's children are 4..=6; node 7 sits under node 2
        assert_eq!(w.brute_force_plan(1, 7, 1), None);
    }

    #[test]
    fn dataset_examples() {
        let w = world(3, 4, 0.0);
        let a = generate_dataset(&w, 30, 3, 17).unwrap();
        let b = generate_dataset(&w, 30, 3, 17).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in &a {
            assert_eq!(r.observations.len(), 4);
            assert_eq!(w.replay(r.start_node, &r.actions).unwrap(), r.goal_node);
            assert_eq!(r.optimal_actions, r.actions);
            let mut node = r.start_node;
            assert_eq!(r.observations[0], w.observe(&node, &mut rng));
            for (k, &act) in r.actions.iter().enumerate() {
                node = w.step_node(node, act).unwrap();
                assert_eq!(r.observations[k + 1], w.observe(&node, &mut rng));
            }
        }
        assert!(generate_dataset(&w, 0, 3, 1).is_err());
    }

    #[test]
    fn features_follow_paths() {
        let w = world(3, 3, 0.0);
        // siblings share the parent's feature and differ only in the last code
        let p = w.feature(1).to_vec();
        let c0 = w.feature(4);
        let c1 = w.feature(5);
        assert!(c0.iter().zip(&p).any(|(a, b)| a != b));
        assert!(c0.iter().zip(c1).any(|(a, b)| a != b));
        assert!(w.feature(0).iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn oracle_plans_are_unique_and_minimal(
            start_pick in 0usize..1000, seq in proptest::collection::vec(0usize..3, 0..5)
        ) {
            let w = world(3, 5, 0.0);
            let t = seq.len();
            let start = start_pick % w.start_candidates(t);
            let goal = w.replay(start, &seq).unwrap();
            let plan = w.brute_force_plan(start, goal, t).unwrap();
            prop_assert_eq!(&plan, &seq);
            for k in 0..t {
                prop_assert_ne!(w.replay(start, &plan[..k]).unwrap(), goal);
            }
        }
    }

    #[test]
    fn drift_world_oracle() {
        let d = DriftWorld::default();
        let start = [0.1, -0.2];
        let goal = [0.3, 0.1];
        let plan = d.greedy_plan(start, goal, 5);
        let end = plan
            .iter()
            .try_fold(start, |p, a| d.step_pos(p, a))
            .unwrap();
        assert!((end[0] - goal[0]).abs() < 1e-12 && (end[1] - goal[1]).abs() < 1e-12);
        let e = DriftWorld::compass_action(2);
        assert!(e[0].abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15);
        let far = d.step_pos([0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((far[0] - 0.06).abs() < 1e-15 && (far[1] - 0.08).abs() < 1e-15);
    }
}
