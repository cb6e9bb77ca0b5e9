//! Frozen encoder, hyperbolic projection and the action-conditioned predictor.
//!
//! In the default geometry the predictor maps a ball point to its tangent
//! coordinates at the origin, runs a small tanh MLP there and maps the result
//! back with `exp_0`. The same network is exposed twice: as plain `f64`
//! inference ([`PredictorParams::predict_step`]) and as a differentiable graph
//! ([`PredictorGraph`]); tests pin the two against each other.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradengine::{self, geometry, Bindings, Gradients, Graph, Var};
use crate::manifold::{self, Curvature, GeometryError, LatentMetric, PoincareBall};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("observation has length {got}, encoder expects {expected}")]
    ObsDim { expected: usize, got: usize },
    #[error("state has length {got}, model latent dimension is {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("unknown action id {id} (model has {num_actions} actions)")]
    UnknownAction { id: usize, num_actions: usize },
    #[error("action kind does not match the model's action space")]
    ActionKind,
    #[error("continuous action has length {got}, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("empty action list")]
    EmptyActions,
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] gradengine::GradError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Frozen random linear encoder `s = Wᵀ x`, with `W` drawn from a seeded
/// standard normal scaled by `1/√obs_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub seed: u64,
    pub obs_dim: usize,
    pub latent_dim: usize,
    /// Row-major `obs_dim × latent_dim`.
    weights: Vec<f64>,
}

impl Encoder {
    pub fn new(seed: u64, obs_dim: usize, latent_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (obs_dim as f64).sqrt();
        let weights = (0..obs_dim * latent_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            seed,
            obs_dim,
            latent_dim,
            weights,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(ModelError::ObsDim {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        let n = self.latent_dim;
        let mut out = vec![0.0; n];
        for (i, &x) in obs.iter().enumerate() {
            if x != 0.0 {
                let row = &self.weights[i * n..(i + 1) * n];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += x * w;
                }
            }
        }
        Ok(out)
    }
}

/// Latent geometry of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentGeometry {
    /// Ball latents; the network runs on `log_0` of the state.
    #[default]
    Hyperbolic,
    /// Ball latents; the network consumes raw ball coordinates.
    RawBall,
    /// Euclidean latents and distance, no exp/log maps.
    Euclidean,
}

impl LatentGeometry {
    pub fn is_hyperbolic(&self) -> bool {
        !matches!(self, LatentGeometry::Euclidean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { num_actions: usize },
    Continuous { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub latent_dim: usize,
    /// Hidden layer widths; the default is two layers of `4 n`.
    pub hidden: Vec<usize>,
    pub action_space: ActionSpace,
    pub geometry: LatentGeometry,
    /// Adds the input tangent vector to the network output.
    pub residual: bool,
    pub initial_c: f64,
}

impl PredictorSpec {
    pub fn new(latent_dim: usize, action_space: ActionSpace) -> Self {
        Self {
            latent_dim,
            hidden: vec![4 * latent_dim, 4 * latent_dim],
            action_space,
            geometry: LatentGeometry::Hyperbolic,
            residual: true,
            initial_c: 1.0,
        }
    }

    /// `[n, hidden.., n]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.latent_dim];
        s.extend(&self.hidden);
        s.push(self.latent_dim);
        s
    }
}

/// One named parameter block, row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(name: String, rows: usize, cols: usize) -> Self {
        Self {
            name,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }
}

/// Predictor weights plus the learnable curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub spec: PredictorSpec,
    /// Layer weights and biases in order (`l0.w`, `l0.b`, ...) followed by
    /// the action embedding `action`.
    pub tensors: Vec<ParamTensor>,
    pub curvature: Curvature,
}

impl PredictorParams {
    /// All-zero weights: the network outputs 0 for every input.
    pub fn zeros(spec: PredictorSpec) -> Result<Self> {
        let sizes = spec.layer_sizes();
        let mut tensors = Vec::new();
        for l in 0..sizes.len() - 1 {
            tensors.push(ParamTensor::zeros(
                format!("l{l}.w"),
                sizes[l + 1],
                sizes[l],
            ));
            tensors.push(ParamTensor::zeros(format!("l{l}.b"), sizes[l + 1], 1));
        }
        let n = spec.latent_dim;
        let action = match spec.action_space {
            ActionSpace::Discrete { num_actions } => {
                ParamTensor::zeros("action".into(), num_actions, n)
            }
            ActionSpace::Continuous { dim } => ParamTensor::zeros("action".into(), n, dim),
        };
        tensors.push(action);
        let curvature = Curvature::new(spec.initial_c)?;
        Ok(Self {
            spec,
            tensors,
            curvature,
        })
    }

    /// Seeded initialisation: weights `N(0, 1/fan_in)`, zero biases, output
    /// layer scaled down by 10, action embeddings `N(0, 1/n)` per entry.
    pub fn init<R: Rng>(spec: PredictorSpec, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let num_layers = p.num_layers();
        let n = p.spec.latent_dim;
        for (k, t) in p.tensors.iter_mut().enumerate() {
            let scale = if t.name == "action" {
                1.0 / (n as f64).sqrt()
            } else if t.name.ends_with(".w") {
                let s = 1.0 / (t.cols as f64).sqrt();
                if k / 2 == num_layers - 1 {
                    0.1 * s
                } else {
                    s
                }
            } else {
                continue;
            };
            for v in t.data.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * scale;
            }
        }
        Ok(p)
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layer_sizes().len() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn geometry(&self) -> LatentGeometry {
        self.spec.geometry
    }

    pub fn ball(&self) -> PoincareBall {
        PoincareBall::new(self.curvature)
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    fn layer(&self, l: usize) -> (&ParamTensor, &ParamTensor) {
        (&self.tensors[2 * l], &self.tensors[2 * l + 1])
    }

    fn action_table(&self) -> &ParamTensor {
        self.tensors.last().expect("action tensor")
    }

    /// Number of entries in [`PredictorParams::to_flat`].
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum::<usize>() + 1
    }

    /// All tensors concatenated in order, followed by `log_c`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            v.extend_from_slice(&t.data);
        }
        v.push(self.curvature.log_c());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(ModelError::ParamLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for t in self.tensors.iter_mut() {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        self.curvature = Curvature::from_log(flat[off])?;
        Ok(())
    }

    /// Projects an encoder output onto the model's latent space.
    pub fn to_manifold(&self, s: &[f64]) -> Vec<f64> {
        if self.geometry().is_hyperbolic() {
            self.ball().exp0(s)
        } else {
            s.to_vec()
        }
    }

    pub fn metric(&self) -> LatentMetric {
        if self.geometry().is_hyperbolic() {
            LatentMetric::Hyperbolic(self.ball())
        } else {
            LatentMetric::Euclidean
        }
    }

    /// Latent distance: hyperbolic for ball geometries, Euclidean otherwise.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.metric().distance(a, b)
    }

    fn action_vector(&self, action: &Action) -> Result<Vec<f64>> {
        let n = self.latent_dim();
        let table = self.action_table();
        match (self.spec.action_space, action) {
            (ActionSpace::Discrete { num_actions }, Action::Discrete(id)) => {
                if *id >= num_actions {
                    return Err(ModelError::UnknownAction {
                        id: *id,
                        num_actions,
                    });
                }
                Ok(table.data[id * n..(id + 1) * n].to_vec())
            }
            (ActionSpace::Continuous { dim }, Action::Continuous(a)) => {
                if a.len() != dim {
                    return Err(ModelError::ActionDim {
                        expected: dim,
                        got: a.len(),
                    });
                }
                Ok(matvec(&table.data, a, n, dim))
            }
            _ => Err(ModelError::ActionKind),
        }
    }

    /// One latent transition `ŝ_{t+1} = P(ŝ_t, a_t)`.
    pub fn predict_step(&self, state: &[f64], action: &Action) -> Result<Vec<f64>> {
        let n = self.latent_dim();
        if state.len() != n {
            return Err(ModelError::StateDim {
                expected: n,
                got: state.len(),
            });
        }
        let ball = self.ball();
        let (net_in, base) = match self.geometry() {
            LatentGeometry::Hyperbolic => {
                let t = ball.log0(state)?;
                (t.clone(), t)
            }
            LatentGeometry::RawBall => (state.to_vec(), ball.log0(state)?),
            LatentGeometry::Euclidean => (state.to_vec(), state.to_vec()),
        };
        let emb = self.action_vector(action)?;
        let mut x: Vec<f64> = net_in.iter().zip(&emb).map(|(a, b)| a + b).collect();
        let layers = self.num_layers();
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let mut y = matvec(&w.data, &x, w.rows, w.cols);
            for (yi, bi) in y.iter_mut().zip(&b.data) {
                *yi += bi;
            }
            if l + 1 < layers {
                for yi in y.iter_mut() {
                    *yi = yi.tanh();
                }
            }
            x = y;
        }
        if self.spec.residual {
            for (xi, bi) in x.iter_mut().zip(&base) {
                *xi += bi;
            }
        }
        Ok(if self.geometry().is_hyperbolic() {
            ball.exp0(&x)
        } else {
            x
        })
    }

    /// Feeds each prediction back as the next input.
    pub fn rollout(&self, state: &[f64], actions: &[Action]) -> Result<LatentTrajectory> {
        if actions.is_empty() {
            return Err(ModelError::EmptyActions);
        }
        let mut states = Vec::with_capacity(actions.len() + 1);
        states.push(state.to_vec());
        for a in actions {
            let next = self.predict_step(states.last().expect("non-empty"), a)?;
            states.push(next);
        }
        Ok(LatentTrajectory {
            states,
            actions: actions.to_vec(),
        })
    }
}

pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| manifold::dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

/// Predicted latent states `ŝ_1 .. ŝ_{T+1}` (with `ŝ_1` the start) and the
/// actions that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

impl LatentTrajectory {
    pub fn end(&self) -> &[f64] {
        self.states.last().expect("trajectory has a start state")
    }
}

/// Encoder plus predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub encoder: Encoder,
    pub predictor: PredictorParams,
}

impl WorldModel {
    /// `s_H = exp_0(E(x))` (or `E(x)` for the Euclidean geometry).
    pub fn embed(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predictor.to_manifold(&self.encoder.encode(obs)?))
    }
}

/// Graph nodes for one predictor inside a [`Graph`]. Parameters are inputs
/// named after their tensors plus `log_c`.
#[derive(Debug, Clone)]
pub struct PredictorGraph {
    spec: PredictorSpec,
    tensors: Vec<(Var, usize, usize)>,
    pub log_c: Var,
    pub c: Var,
    pub sqrt_c: Var,
}

impl PredictorGraph {
    pub fn new(g: &mut Graph, params: &PredictorParams) -> Result<Self> {
        let tensors = params
            .tensors
            .iter()
            .map(|t| (g.input(&t.name, t.data.len()), t.rows, t.cols))
            .collect();
        let log_c = g.input("log_c", 1);
        let (c, sqrt_c) = geometry::curvature_nodes(g, log_c)?;
        Ok(Self {
            spec: params.spec.clone(),
            tensors,
            log_c,
            c,
            sqrt_c,
        })
    }

    /// Bindings for every parameter of `params` (which must share the spec
    /// used in [`PredictorGraph::new`]).
    pub fn bindings<'a>(params: &'a PredictorParams, log_c: &'a [f64; 1]) -> Bindings<'a> {
        let mut b = Bindings::new();
        for t in &params.tensors {
            b.bind(&t.name, &t.data);
        }
        b.bind("log_c", log_c);
        b
    }

    /// Gradient in the layout of [`PredictorParams::to_flat`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut v = Vec::new();
        for (var, _, _) in &self.tensors {
            v.extend_from_slice(grads.of(*var));
        }
        v.push(grads.of(self.log_c)[0]);
        v
    }

    pub fn to_manifold(&self, g: &mut Graph, s: Var) -> Result<Var> {
        if self.spec.geometry.is_hyperbolic() {
            Ok(geometry::exp0(g, s, self.sqrt_c)?)
        } else {
            Ok(s)
        }
    }

    pub fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        if self.spec.geometry.is_hyperbolic() {
            Ok(geometry::distance(g, a, b, self.c, self.sqrt_c)?)
        } else {
            Ok(geometry::euclidean_distance(g, a, b)?)
        }
    }

    pub fn predict_step(&self, g: &mut Graph, state: Var, action: &Action) -> Result<Var> {
        let n = self.spec.latent_dim;
        let (net_in, base) = match self.spec.geometry {
            LatentGeometry::Hyperbolic => {
                let t = geometry::log0(g, state, self.sqrt_c)?;
                (t, t)
            }
            LatentGeometry::RawBall => (state, geometry::log0(g, state, self.sqrt_c)?),
            LatentGeometry::Euclidean => (state, state),
        };
        let (table, _, _) = *self.tensors.last().expect("action tensor");
        let emb = match (self.spec.action_space, action) {
            (ActionSpace::Discrete { num_actions }, Action::Discrete(id)) => {
                if *id >= num_actions {
                    return Err(ModelError::UnknownAction {
                        id: *id,
                        num_actions,
                    });
                }
                g.row(table, *id, n)?
            }
            (ActionSpace::Continuous { dim }, Action::Continuous(a)) => {
                if a.len() != dim {
                    return Err(ModelError::ActionDim {
                        expected: dim,
                        got: a.len(),
                    });
                }
                let av = g.constant(a.clone());
                g.matvec(table, av, n, dim)?
            }
            _ => return Err(ModelError::ActionKind),
        };
        let mut x = g.add(net_in, emb)?;
        let layers = (self.tensors.len() - 1) / 2;
        for l in 0..layers {
            let (w, rows, cols) = self.tensors[2 * l];
            let (b, _, _) = self.tensors[2 * l + 1];
            let y = g.matvec(w, x, rows, cols)?;
            let y = g.add(y, b)?;
            x = if l + 1 < layers { g.tanh(y) } else { y };
        }
        if self.spec.residual {
            x = g.add(x, base)?;
        }
        if self.spec.geometry.is_hyperbolic() {
            Ok(geometry::exp0(g, x, self.sqrt_c)?)
        } else {
            Ok(x)
        }
    }
}
