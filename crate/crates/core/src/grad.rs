//! Minimal dense reverse-mode differentiation over row-major matrices, plus
//! the plain SGD update and staircase learning-rate schedule.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so every
//! node's inputs precede it and a single reverse sweep computes all
//! gradients. Leaves are either parameters (gradients reported) or
//! constants (gradients never computed).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Owned dense array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view of a 1-D or 2-D tensor.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => (self.shape[0], self.data.len() / self.shape[0].max(1)),
        }
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Param(usize),
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    RowSqNorm(Var),
    Sqrt(Var),
    Hinge(Var, f64),
    Square(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Tape of primitive operations in evaluation order.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
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

    /// Parameter leaves, in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Total scalar count across parameter leaves.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| self.nodes[p.0].value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.nodes[v.0].value.as_slice() {
            [x] => Ok(*x),
            other => Err(Error::Contract(format!(
                "expected a scalar node, found {} values",
                other.len()
            ))),
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => op_inputs(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        let slot = self.params.len();
        let v = self.push(Op::Param(slot), r, c, t.data.clone());
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Contract(format!(
                "{rows}x{cols} constant given {} values",
                data.len()
            )));
        }
        Ok(self.push(Op::Constant, rows, cols, data))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Contract(format!("{what}: shapes {da:?} and {db:?} differ")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Contract(format!("matmul: {m}x{k} times {k2}x{n}")));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), m, n, out))
    }

    /// Adds a `1 x cols` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(bias) != (1, n) {
            return Err(Error::Contract(format!(
                "bias of shape {:?} for {m}x{n} input",
                self.dims(bias)
            )));
        }
        let bv = &self.nodes[bias.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(Op::AddBias(a, bias), m, n, out))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, "elementwise")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(op, m, n, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        self.push(op, m, n, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        self.map(a, Op::Act(a, act), |x| act.apply(x))
    }

    /// Squared Euclidean norm of each row, as a `rows x 1` column.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self.nodes[a.0]
            .value
            .chunks(n.max(1))
            .map(|r| r.iter().map(|x| x * x).sum())
            .collect();
        self.push(Op::RowSqNorm(a), m, 1, out)
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    /// `max(0, margin - a)`; the subgradient at the kink is 0.
    pub fn hinge(&mut self, a: Var, margin: f64) -> Var {
        self.map(a, Op::Hinge(a, margin), |x| (margin - x).max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![s])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node has shape {}x{}",
                root.rows, root.cols
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(_) = node.op {
                adj[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        let params = self
            .params
            .iter()
            .map(|p| {
                adj[p.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.nodes[p.0].value.len()])
            })
            .collect();
        Ok(Gradients { params })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut accumulate = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = node.cols;
                if self.nodes[a.0].needs_grad {
                    // dA = G * B^T
                    let bv = val(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = grow.iter().zip(&bv[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T * G
                    let av = val(a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                    accumulate(b, db);
                }
            }
            Op::AddBias(a, bias) => {
                accumulate(a, g.to_vec());
                let n = node.cols;
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                accumulate(bias, db);
            }
            Op::Add(a, b) => {
                accumulate(a, g.to_vec());
                accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(a, g.to_vec());
                accumulate(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                accumulate(a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                accumulate(b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => accumulate(a, g.iter().map(|x| c * x).collect()),
            Op::Act(a, act) => accumulate(
                a,
                g.iter()
                    .zip(val(a).iter().zip(&node.value))
                    .map(|(gv, (x, y))| gv * act.derivative(*x, *y))
                    .collect(),
            ),
            Op::RowSqNorm(a) => {
                let n = self.nodes[a.0].cols;
                let av = val(a);
                let d = av
                    .iter()
                    .enumerate()
                    .map(|(idx, x)| 2.0 * x * g[idx / n])
                    .collect();
                accumulate(a, d);
            }
            Op::Sqrt(a) => accumulate(
                a,
                g.iter()
                    .zip(&node.value)
                    .map(|(gv, y)| if *y > 0.0 { gv * 0.5 / y } else { 0.0 })
                    .collect(),
            ),
            Op::Hinge(a, margin) => accumulate(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(gv, x)| if *x < margin { -gv } else { 0.0 })
                    .collect(),
            ),
            Op::Square(a) => accumulate(a, g.iter().zip(val(a)).map(|(gv, x)| 2.0 * x * gv).collect()),
            Op::Sum(a) => accumulate(a, vec![g[0]; self.nodes[a.0].value.len()]),
        }
    }
}

fn op_inputs(op: Op) -> Vec<Var> {
    match op {
        Op::Param(_) | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![a, b]
        }
        Op::Scale(a, _)
        | Op::Act(a, _)
        | Op::RowSqNorm(a)
        | Op::Sqrt(a)
        | Op::Hinge(a, _)
        | Op::Square(a)
        | Op::Sum(a) => vec![a],
    }
}

/// Gradients of a scalar loss with respect to each parameter leaf, in
/// registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, slot: usize) -> &[f64] {
        &self.params[slot]
    }
}

/// Attaches gradients to tensors registered in the same order.
pub fn assign_grads<'a>(
    tensors: impl IntoIterator<Item = &'a mut Tensor>,
    grads: Gradients,
) -> Result<()> {
    let mut it = grads.params.into_iter();
    for t in tensors {
        let g = it
            .next()
            .ok_or_else(|| Error::Contract("fewer gradients than parameters".into()))?;
        if g.len() != t.len() {
            return Err(Error::Contract(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                t.shape
            )));
        }
        t.grad = Some(g);
    }
    if it.next().is_some() {
        return Err(Error::Contract("more gradients than parameters".into()));
    }
    Ok(())
}

/// `theta <- theta - lr * grad` for every tensor carrying a gradient.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
    }
    for t in params {
        if let Some(g) = t.grad.take() {
            if g.len() != t.data.len() {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match tensor shape {:?}",
                    g.len(),
                    t.shape
                )));
            }
            t.data.iter_mut().zip(&g).for_each(|(w, d)| *w -= lr * d);
        }
    }
    Ok(())
}

/// Staircase exponential decay: `initial * rate^floor(step / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.05,
            decay_rate: 0.95,
            decay_steps: 10_000,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        self.initial * self.decay_rate.powi((step / self.decay_steps.max(1)) as i32)
    }
}

/// Learning rate at a global step under the default schedule.
pub fn lr_schedule(step: u64) -> f64 {
    LrSchedule::default().at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut g = Graph::new();
        let w = g.param(&t(vec![1, 3], vec![0.3, -1.0, 2.0]));
        let x = g.constant(1, 3, vec![4.0, 5.0, 6.0]).unwrap();
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(0), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn half_squared_norm() {
        let mut g = Graph::new();
        let w = g.param(&t(vec![2], vec![3.0, 4.0]));
        let sq = g.row_sq_norm(w);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        assert_eq!(g.scalar(loss).unwrap(), 12.5);
        assert_eq!(g.backward(loss).unwrap().param(0), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(&t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient_and_are_not_params() {
        let mut g = Graph::new();
        let c = g.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let w = g.param(&t(vec![1, 2], vec![1.0, 2.0]));
        let d = g.sub(c, w).unwrap();
        let s = g.sum(d);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.params.len(), 1);
        assert_eq!(grads.param(0), &[-1.0, -1.0]);
        assert_eq!(g.param_count(), 2);
    }

    #[test]
    fn hinge_gradient_sides() {
        for (x, expect) in [(0.5, -1.0), (2.0, 0.0), (1.0, 0.0)] {
            let mut g = Graph::new();
            let w = g.param(&t(vec![1], vec![x]));
            let h = g.hinge(w, 1.0);
            let loss = g.sum(h);
            assert_eq!(g.backward(loss).unwrap().param(0), &[expect], "x={x}");
        }
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(&t(vec![1], vec![0.0]));
        let s = g.sqrt(w);
        let loss = g.sum(s);
        assert_eq!(g.backward(loss).unwrap().param(0), &[0.0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(3, 2, vec![0.0; 6]).unwrap();
        assert!(g.add(a, c).is_err());
        assert!(g.constant(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = t(vec![1], vec![1.0]);
        p.grad = Some(vec![2.0]);
        sgd_step([&mut p], 0.05).unwrap();
        assert!((p.data[0] - 0.9).abs() < 1e-15);

        let mut q = t(vec![2], vec![1.5, -2.0]);
        q.grad = Some(vec![0.0, 0.0]);
        sgd_step([&mut q], 0.05).unwrap();
        assert_eq!(q.data, vec![1.5, -2.0]);
    }

    #[test]
    fn sgd_is_deterministic() {
        let run = || {
            let mut p = t(vec![3], vec![0.1, 0.2, 0.3]);
            p.grad = Some(vec![0.7, -0.1, 1e-3]);
            sgd_step([&mut p], 0.0475).unwrap();
            p.data
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_rejects_shape_mismatch_and_bad_lr() {
        let mut p = t(vec![2], vec![0.0, 0.0]);
        p.grad = Some(vec![1.0]);
        assert!(matches!(sgd_step([&mut p], 0.1), Err(Error::Contract(_))));
        let mut p = t(vec![1], vec![0.0]);
        assert!(matches!(sgd_step([&mut p], 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn staircase_schedule() {
        assert_eq!(lr_schedule(0), 0.05);
        assert_eq!(lr_schedule(9_999), 0.05);
        assert!((lr_schedule(10_000) - 0.0475).abs() < 1e-15);
        assert!((lr_schedule(25_000) - 0.045125).abs() < 1e-15);
    }
}
