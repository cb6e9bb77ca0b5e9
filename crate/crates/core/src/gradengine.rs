//! Reverse-mode differentiation over a small vector-valued primitive set.
//!
//! A [`Graph`] is recorded symbolically (inputs are named placeholders), then
//! [`Graph::forward`] binds values and produces a [`Tape`] whose
//! [`Tape::backward`] returns adjoints for every node. Graphs are cheap to
//! rebuild, so training code records a fresh one for every step.
//!
//! Scalars are length-1 vectors. The elementwise binary ops broadcast a
//! length-1 operand against a vector operand.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::manifold::{ARCOSH_FLOOR, BALL_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("input `{name}` bound with length {got}, expected {expected}")]
    BindingLength {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("domain error in {op}: argument {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("output has length {0}; gradients need a scalar")]
    NotScalar(usize),
    #[error("graph has no output")]
    NoOutput,
    #[error("unknown input `{0}`")]
    UnknownInput(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Const(Vec<f64>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Sum(Var),
    Dot(Var, Var),
    Norm(Var),
    MatVec {
        w: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Row {
        table: Var,
        index: usize,
        width: usize,
    },
    Tanh(Var),
    Artanh(Var),
    Arcosh(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    PosPart(Var),
    TanhRatio(Var),
    ArtanhRatio(Var),
    ClampNorm {
        x: Var,
        max: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    len: usize,
}

/// Recorded computation. Nodes are appended in creation order, which is a
/// topological order because every op only references earlier nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, Var>,
    output: Option<Var>,
}

fn broadcast_len(op: &'static str, a: usize, b: usize) -> Result<usize> {
    if a == b || b == 1 {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else {
        Err(GradError::Shape {
            op,
            left: a,
            right: b,
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, len: usize) -> Var {
        self.nodes.push(Node { op, len });
        Var(self.nodes.len() - 1)
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    /// Named placeholder of length `len`. Re-declaring a name returns the
    /// existing node.
    pub fn input(&mut self, name: &str, len: usize) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(Op::Input(name.to_string()), len);
        self.inputs.insert(name.to_string(), v);
        v
    }

    pub fn input_var(&self, name: &str) -> Option<Var> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        let len = values.len();
        self.push(Op::Const(values), len)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v);
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(Var, Var) -> Op) -> Result<Var> {
        let len = broadcast_len(name, self.len_of(a), self.len_of(b))?;
        Ok(self.push(f(a, b), len))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let len = self.len_of(a);
        self.push(Op::Neg(a), len)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), 1)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return Err(GradError::Shape {
                op: "dot",
                left: la,
                right: lb,
            });
        }
        Ok(self.push(Op::Dot(a, b), 1))
    }

    pub fn norm(&mut self, a: Var) -> Var {
        self.push(Op::Norm(a), 1)
    }

    /// `w` is a row-major `rows × cols` matrix, `x` has length `cols`.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.len_of(w) != rows * cols {
            return Err(GradError::Shape {
                op: "matvec",
                left: self.len_of(w),
                right: rows * cols,
            });
        }
        if self.len_of(x) != cols {
            return Err(GradError::Shape {
                op: "matvec",
                left: self.len_of(x),
                right: cols,
            });
        }
        Ok(self.push(Op::MatVec { w, x, rows, cols }, rows))
    }

    /// Row `index` of a row-major table with rows of length `width`.
    pub fn row(&mut self, table: Var, index: usize, width: usize) -> Result<Var> {
        if (index + 1) * width > self.len_of(table) {
            return Err(GradError::Shape {
                op: "row",
                left: self.len_of(table),
                right: (index + 1) * width,
            });
        }
        Ok(self.push(
            Op::Row {
                table,
                index,
                width,
            },
            width,
        ))
    }

    fn unary(&mut self, a: Var, f: fn(Var) -> Op) -> Var {
        let len = self.len_of(a);
        self.push(f(a), len)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh)
    }

    /// `artanh`, erroring for `|x| ≥ 1` and capping `|x|` at `1 − BALL_EPS`.
    pub fn artanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Artanh)
    }

    /// `arcosh`, erroring for `x < 1` and flooring at `ARCOSH_FLOOR`.
    pub fn arcosh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Arcosh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln)
    }

    /// Positive part `max(x, 0)`.
    pub fn pos_part(&mut self, a: Var) -> Var {
        self.unary(a, Op::PosPart)
    }

    /// `tanh(x)/x`, equal to 1 at `x = 0`.
    pub fn tanh_ratio(&mut self, a: Var) -> Var {
        self.unary(a, Op::TanhRatio)
    }

    /// `artanh(x)/x`, equal to 1 at `x = 0`; same domain rules as `artanh`.
    pub fn artanh_ratio(&mut self, a: Var) -> Var {
        self.unary(a, Op::ArtanhRatio)
    }

    /// `x · min(1, max/‖x‖)`.
    pub fn clamp_norm(&mut self, x: Var, max: Var) -> Result<Var> {
        if self.len_of(max) != 1 {
            return Err(GradError::Shape {
                op: "clamp_norm",
                left: self.len_of(max),
                right: 1,
            });
        }
        let len = self.len_of(x);
        Ok(self.push(Op::ClampNorm { x, max }, len))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let c = self.scalar(k);
        self.add(a, c)
    }

    pub fn mul_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let c = self.scalar(k);
        self.mul(a, c)
    }

    /// Runs the forward pass with the given bindings.
    pub fn forward<'a>(&'a self, bindings: &Bindings<'_>) -> Result<Tape<'a>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = eval_node(node, &values, bindings)?;
            values.push(v);
        }
        Ok(Tape {
            graph: self,
            values,
        })
    }

    /// Scalar value of the graph output.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<f64> {
        let out = self.output.ok_or(GradError::NoOutput)?;
        let tape = self.forward(bindings)?;
        tape.scalar(out)
    }

    /// Partial derivatives of the scalar output with respect to the named
    /// inputs.
    pub fn gradient(
        &self,
        bindings: &Bindings<'_>,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        let out = self.output.ok_or(GradError::NoOutput)?;
        let tape = self.forward(bindings)?;
        let grads = tape.backward(out)?;
        wrt.iter()
            .map(|&name| {
                let v = self
                    .input_var(name)
                    .ok_or_else(|| GradError::UnknownInput(name.to_string()))?;
                Ok((name.to_string(), grads.of(v).to_vec()))
            })
            .collect()
    }
}

/// Input values keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    values: HashMap<&'a str, &'a [f64]>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, value: &'a [f64]) -> &mut Self {
        self.values.insert(name, value);
        self
    }

    pub fn with(mut self, name: &'a str, value: &'a [f64]) -> Self {
        self.values.insert(name, value);
        self
    }
}

fn arg_of<'v>(values: &'v [Vec<f64>], v: Var) -> &'v [f64] {
    &values[v.0]
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (la, lb) if la == lb => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        (1, _) => b.iter().map(|y| f(a[0], *y)).collect(),
        _ => a.iter().map(|x| f(*x, b[0])).collect(),
    }
}

fn tanh_ratio(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0
    } else {
        x.tanh() / x
    }
}

fn tanh_ratio_grad(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        -2.0 * x / 3.0 + 8.0 * x * x * x / 15.0
    } else {
        let t = x.tanh();
        ((1.0 - t * t) * x - t) / (x * x)
    }
}

fn artanh_cap() -> f64 {
    1.0 - BALL_EPS
}

fn check_artanh(op: &'static str, x: f64) -> Result<()> {
    if !(x.abs() < 1.0) {
        return Err(GradError::Domain { op, value: x });
    }
    Ok(())
}

fn artanh_ratio(x: f64) -> f64 {
    let x = x.clamp(-artanh_cap(), artanh_cap());
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 + x2 / 3.0 + x2 * x2 / 5.0
    } else {
        x.atanh() / x
    }
}

fn artanh_ratio_grad(x: f64) -> f64 {
    if x.abs() > artanh_cap() {
        // Capped region: the ratio uses the capped artanh but still divides
        // by x, so only the 1/x factor varies.
        let cap = artanh_cap() * x.signum();
        return -cap.atanh() / (x * x);
    }
    if x.abs() < 1e-4 {
        2.0 * x / 3.0 + 4.0 * x * x * x / 5.0
    } else {
        (x / (1.0 - x * x) - x.atanh()) / (x * x)
    }
}

fn eval_node(node: &Node, values: &[Vec<f64>], bindings: &Bindings<'_>) -> Result<Vec<f64>> {
    let out = match &node.op {
        Op::Input(name) => {
            let v = bindings
                .values
                .get(name.as_str())
                .ok_or_else(|| GradError::Unbound(name.clone()))?;
            if v.len() != node.len {
                return Err(GradError::BindingLength {
                    name: name.clone(),
                    expected: node.len,
                    got: v.len(),
                });
            }
            v.to_vec()
        }
        Op::Const(v) => v.clone(),
        Op::Add(a, b) => zip_broadcast(arg_of(values, *a), arg_of(values, *b), |x, y| x + y),
        Op::Sub(a, b) => zip_broadcast(arg_of(values, *a), arg_of(values, *b), |x, y| x - y),
        Op::Mul(a, b) => zip_broadcast(arg_of(values, *a), arg_of(values, *b), |x, y| x * y),
        Op::Div(a, b) => zip_broadcast(arg_of(values, *a), arg_of(values, *b), |x, y| x / y),
        Op::Neg(a) => arg_of(values, *a).iter().map(|x| -x).collect(),
        Op::Sum(a) => vec![arg_of(values, *a).iter().sum()],
        Op::Dot(a, b) => vec![arg_of(values, *a)
            .iter()
            .zip(arg_of(values, *b))
            .map(|(x, y)| x * y)
            .sum()],
        Op::Norm(a) => vec![arg_of(values, *a).iter().map(|x| x * x).sum::<f64>().sqrt()],
        Op::MatVec { w, x, rows, cols } => {
            let w = arg_of(values, *w);
            let x = arg_of(values, *x);
            (0..*rows)
                .map(|r| {
                    w[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect()
        }
        Op::Row {
            table,
            index,
            width,
        } => arg_of(values, *table)[index * width..(index + 1) * width].to_vec(),
        Op::Tanh(a) => arg_of(values, *a).iter().map(|x| x.tanh()).collect(),
        Op::Artanh(a) => {
            let xs = arg_of(values, *a);
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                check_artanh("artanh", x)?;
                out.push(x.clamp(-artanh_cap(), artanh_cap()).atanh());
            }
            out
        }
        Op::Arcosh(a) => {
            let xs = arg_of(values, *a);
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                if !(x >= 1.0) {
                    return Err(GradError::Domain {
                        op: "arcosh",
                        value: x,
                    });
                }
                out.push(x.max(ARCOSH_FLOOR).acosh());
            }
            out
        }
        Op::Sqrt(a) => {
            let xs = arg_of(values, *a);
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                if !(x >= 0.0) {
                    return Err(GradError::Domain {
                        op: "sqrt",
                        value: x,
                    });
                }
                out.push(x.sqrt());
            }
            out
        }
        Op::Exp(a) => arg_of(values, *a).iter().map(|x| x.exp()).collect(),
        Op::Ln(a) => {
            let xs = arg_of(values, *a);
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                if !(x > 0.0) {
                    return Err(GradError::Domain { op: "ln", value: x });
                }
                out.push(x.ln());
            }
            out
        }
        Op::PosPart(a) => arg_of(values, *a).iter().map(|x| x.max(0.0)).collect(),
        Op::TanhRatio(a) => arg_of(values, *a).iter().map(|&x| tanh_ratio(x)).collect(),
        Op::ArtanhRatio(a) => {
            let xs = arg_of(values, *a);
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                check_artanh("artanh_ratio", x)?;
                out.push(artanh_ratio(x));
            }
            out
        }
        Op::ClampNorm { x, max } => {
            let xs = arg_of(values, *x);
            let m = arg_of(values, *max)[0];
            let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= m {
                xs.to_vec()
            } else {
                let s = m / n;
                xs.iter().map(|v| v * s).collect()
            }
        }
    };
    Ok(out)
}

/// Forward values of one evaluation of a [`Graph`].
#[derive(Debug)]
pub struct Tape<'a> {
    graph: &'a Graph,
    values: Vec<Vec<f64>>,
}

/// Adjoints indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> &[f64] {
        &self.adjoints[v.0]
    }
}

fn accumulate_broadcast(target: &mut [f64], update: impl Iterator<Item = f64>) {
    if target.len() == 1 {
        target[0] += update.sum::<f64>();
    } else {
        for (t, u) in target.iter_mut().zip(update) {
            *t += u;
        }
    }
}

impl<'a> Tape<'a> {
    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let val = &self.values[v.0];
        if val.len() != 1 {
            return Err(GradError::NotScalar(val.len()));
        }
        Ok(val[0])
    }

    /// Adjoints of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = &self.graph.nodes;
        if nodes[output.0].len != 1 {
            return Err(GradError::NotScalar(nodes[output.0].len));
        }
        let mut adj: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.len]).collect();
        adj[output.0][0] = 1.0;
        let vals = &self.values;
        for i in (0..=output.0).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let y = &vals[i];
            match &nodes[i].op {
                Op::Input(_) | Op::Const(_) => {}
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut adj[a.0], g.iter().copied());
                    accumulate_broadcast(&mut adj[b.0], g.iter().copied());
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(&mut adj[a.0], g.iter().copied());
                    accumulate_broadcast(&mut adj[b.0], g.iter().copied().map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&vals[a.0], &vals[b.0]);
                    let ga: Vec<f64> = (0..g.len()).map(|k| g[k] * pick(vb, k)).collect();
                    let gb: Vec<f64> = (0..g.len()).map(|k| g[k] * pick(va, k)).collect();
                    accumulate_broadcast(&mut adj[a.0], ga.into_iter());
                    accumulate_broadcast(&mut adj[b.0], gb.into_iter());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&vals[a.0], &vals[b.0]);
                    let ga: Vec<f64> = (0..g.len()).map(|k| g[k] / pick(vb, k)).collect();
                    let gb: Vec<f64> = (0..g.len())
                        .map(|k| {
                            let d = pick(vb, k);
                            -g[k] * pick(va, k) / (d * d)
                        })
                        .collect();
                    accumulate_broadcast(&mut adj[a.0], ga.into_iter());
                    accumulate_broadcast(&mut adj[b.0], gb.into_iter());
                }
                Op::Neg(a) => {
                    for (t, u) in adj[a.0].iter_mut().zip(&g) {
                        *t -= u;
                    }
                }
                Op::Sum(a) => {
                    for t in adj[a.0].iter_mut() {
                        *t += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    for (t, u) in adj[a.0].iter_mut().zip(&vals[b.0]) {
                        *t += g[0] * u;
                    }
                    for (t, u) in adj[b.0].iter_mut().zip(&vals[a.0]) {
                        *t += g[0] * u;
                    }
                }
                Op::Norm(a) => {
                    let n = y[0];
                    if n > 0.0 {
                        let va = &vals[a.0];
                        for (t, u) in adj[a.0].iter_mut().zip(va) {
                            *t += g[0] * u / n;
                        }
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let wv = &vals[w.0];
                    let xv = &vals[x.0];
                    {
                        let gw = &mut adj[w.0];
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for (t, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                    *t += gr * xc;
                                }
                            }
                        }
                    }
                    let gx = &mut adj[x.0];
                    for r in 0..rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            for (t, wc) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                                *t += gr * wc;
                            }
                        }
                    }
                }
                Op::Row {
                    table,
                    index,
                    width,
                } => {
                    let dst = &mut adj[table.0][index * width..(index + 1) * width];
                    for (t, u) in dst.iter_mut().zip(&g) {
                        *t += u;
                    }
                }
                Op::Tanh(a) => {
                    for ((t, u), yk) in adj[a.0].iter_mut().zip(&g).zip(y) {
                        *t += u * (1.0 - yk * yk);
                    }
                }
                Op::Artanh(a) => {
                    let va = &vals[a.0];
                    for ((t, u), x) in adj[a.0].iter_mut().zip(&g).zip(va) {
                        if x.abs() <= artanh_cap() {
                            *t += u / (1.0 - x * x);
                        }
                    }
                }
                Op::Arcosh(a) => {
                    let va = &vals[a.0];
                    for ((t, u), x) in adj[a.0].iter_mut().zip(&g).zip(va) {
                        if *x >= ARCOSH_FLOOR {
                            *t += u / (x * x - 1.0).sqrt();
                        }
                    }
                }
                Op::Sqrt(a) => {
                    for ((t, u), yk) in adj[a.0].iter_mut().zip(&g).zip(y) {
                        if *yk > 0.0 {
                            *t += u * 0.5 / yk;
                        }
                    }
                }
                Op::Exp(a) => {
                    for ((t, u), yk) in adj[a.0].iter_mut().zip(&g).zip(y) {
                        *t += u * yk;
                    }
                }
                Op::Ln(a) => {
                    let va = &vals[a.0];
                    for ((t, u), x) in adj[a.0].iter_mut().zip(&g).zip(va) {
                        *t += u / x;
                    }
                }
                Op::PosPart(a) => {
                    let va = &vals[a.0];
                    for ((t, u), x) in adj[a.0].iter_mut().zip(&g).zip(va) {
                        if *x > 0.0 {
                            *t += u;
                        }
                    }
                }
                Op::TanhRatio(a) => {
                    let va = &vals[a.0];
                    for ((t, u), x) in adj[a.0].iter_mut().zip(&g).zip(va) {
                        *t += u * tanh_ratio_grad(*x);
                    }
                }
                Op::ArtanhRatio(a) => {
                    let va = &vals[a.0];
                    for ((t, u), x) in adj[a.0].iter_mut().zip(&g).zip(va) {
                        *t += u * artanh_ratio_grad(*x);
                    }
                }
                Op::ClampNorm { x, max } => {
                    let xv = &vals[x.0];
                    let m = vals[max.0][0];
                    let n = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n <= m {
                        for (t, u) in adj[x.0].iter_mut().zip(&g) {
                            *t += u;
                        }
                    } else {
                        let xg: f64 = xv.iter().zip(&g).map(|(a, b)| a * b).sum();
                        let s = m / n;
                        for ((t, u), xk) in adj[x.0].iter_mut().zip(&g).zip(xv) {
                            *t += s * (u - xk * xg / (n * n));
                        }
                        adj[max.0][0] += xg / n;
                    }
                }
            }
            adj[i] = g;
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn pick(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

/// Central-difference comparison against an analytic gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` with `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` at `point`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], analytic: &[f64], h: f64) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max);
    GradReport {
        analytic: analytic.to_vec(),
        numeric,
        max_rel_err,
    }
}

/// Graph builders for the ball operations. The curvature enters as the
/// scalar node `sqrt_c`, so these are differentiable in `c` as well.
pub mod geometry {
    use super::{Graph, Result, Var};
    use crate::manifold::BALL_EPS;

    /// Rescales `z` to norm at most `(1 − ε)/√c`.
    pub fn clamp_to_ball(g: &mut Graph, z: Var, sqrt_c: Var) -> Result<Var> {
        let one_minus = g.scalar(1.0 - BALL_EPS);
        let max = g.div(one_minus, sqrt_c)?;
        g.clamp_norm(z, max)
    }

    /// `exp_0(v) = v · tanh(√c‖v‖)/(√c‖v‖)`, clamped.
    pub fn exp0(g: &mut Graph, v: Var, sqrt_c: Var) -> Result<Var> {
        let n = g.norm(v);
        let arg = g.mul(sqrt_c, n)?;
        let ratio = g.tanh_ratio(arg);
        let y = g.mul(v, ratio)?;
        clamp_to_ball(g, y, sqrt_c)
    }

    /// `log_0(y) = y · artanh(√c‖y‖)/(√c‖y‖)`.
    pub fn log0(g: &mut Graph, y: Var, sqrt_c: Var) -> Result<Var> {
        let n = g.norm(y);
        let arg = g.mul(sqrt_c, n)?;
        let ratio = g.artanh_ratio(arg);
        g.mul(y, ratio)
    }

    /// Hyperbolic distance with curvature `c = sqrt_c²`.
    pub fn distance(g: &mut Graph, u: Var, v: Var, c: Var, sqrt_c: Var) -> Result<Var> {
        let diff = g.sub(u, v)?;
        let d2 = g.dot(diff, diff)?;
        let u2 = g.dot(u, u)?;
        let v2 = g.dot(v, v)?;
        let one = g.scalar(1.0);
        let cu = g.mul(c, u2)?;
        let cv = g.mul(c, v2)?;
        let au = g.sub(one, cu)?;
        let av = g.sub(one, cv)?;
        let den = g.mul(au, av)?;
        let two_c = g.mul_const(c, 2.0)?;
        let num = g.mul(two_c, d2)?;
        let frac = g.div(num, den)?;
        let arg = g.add(one, frac)?;
        let ac = g.arcosh(arg);
        g.div(ac, sqrt_c)
    }

    /// Euclidean distance `‖u − v‖`.
    pub fn euclidean_distance(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
        let diff = g.sub(u, v)?;
        Ok(g.norm(diff))
    }

    /// `c` and `√c` nodes from a `log_c` node.
    pub fn curvature_nodes(g: &mut Graph, log_c: Var) -> Result<(Var, Var)> {
        let c = g.exp(log_c);
        let half = g.mul_const(log_c, 0.5)?;
        let sqrt_c = g.exp(half);
        Ok((c, sqrt_c))
    }
}
