//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value. Nodes whose
//! inputs all lack `requires_grad` are constants: they are kept for their
//! values but skipped during the backward sweep. Because nodes can only
//! reference earlier nodes, the node list is already in topological order.

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    L1Norm(Var),
    Cosine(Var, Var),
    RowCosine(Var, Var),
    Softmax(Var),
    Exp(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    GatherRows(Var, Vec<usize>),
    PairwiseSqDist(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected a matrix",
        }),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_parts(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine: zero-norm input"));
    }
    Ok((dot(a, b) / (na * nb), na, nb))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Node {
            shape,
            values,
            requires_grad,
            op,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Places a tensor on the tape; it participates in gradients iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_node(Node {
            shape: tensor.shape().to_vec(),
            values: tensor.values().to_vec(),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        })
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value))
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, values) = (node.shape.clone(), node.values.clone());
        self.push_node(Node {
            shape,
            values,
            requires_grad: false,
            op: Op::Leaf,
        })
    }

    pub fn value(&self, x: Var) -> &[f64] {
        &self.nodes[x.0].values
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, x: Var) -> f64 {
        self.nodes[x.0].values[0]
    }

    pub fn to_tensor(&self, x: Var) -> Tensor {
        let node = &self.nodes[x.0];
        Tensor::new(node.shape.clone(), node.values.clone()).expect("tape node shape is consistent")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, op, &[a, b])
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let values = self.nodes[x.0].values.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// `m[r, c] + row[c]` for an `n × k` matrix and a length-`k` vector.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (rows, cols) = dims2("add_row", &self.nodes[m.0].shape)?;
        let rs = &self.nodes[row.0].shape;
        if rs.iter().product::<usize>() != cols || rs.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: vec![rows, cols],
                right: rs.clone(),
            });
        }
        let bias = &self.nodes[row.0].values;
        let values = self.nodes[m.0]
            .values
            .chunks(cols)
            .flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(vec![rows, cols], values, Op::AddRow(m, row), &[m, row]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", &self.nodes[a.0].shape)?;
        let (k2, n) = dims2("matmul", &self.nodes[b.0].shape)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bpj) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(Op::LeakyRelu(x, slope), x, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].values.iter().sum();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vals = &self.nodes[x.0].values;
        if vals.is_empty() {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: self.nodes[x.0].shape.clone(),
                reason: "empty input",
            });
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        Ok(self.push(vec![], vec![m], Op::Mean(x), &[x]))
    }

    /// Sum of squares of all entries.
    pub fn sq_norm(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].values.iter().map(|v| v * v).sum();
        self.push(vec![], vec![s], Op::SqNorm(x), &[x])
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].values.iter().map(|v| v.abs()).sum();
        self.push(vec![], vec![s], Op::L1Norm(x), &[x])
    }

    /// Cosine of the angle between two flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].values.len() != self.nodes[b.0].values.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let (c, _, _) = cosine_parts(&self.nodes[a.0].values, &self.nodes[b.0].values)?;
        Ok(self.push(vec![], vec![c], Op::Cosine(a, b), &[a, b]))
    }

    /// Per-row cosine of two `n × d` matrices, giving a length-`n` vector.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (n, d) = dims2("row_cosine", &self.nodes[a.0].shape)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let ra = &self.nodes[a.0].values[i * d..(i + 1) * d];
            let rb = &self.nodes[b.0].values[i * d..(i + 1) * d];
            out.push(cosine_parts(ra, rb)?.0);
        }
        Ok(self.push(vec![n], out, Op::RowCosine(a, b), &[a, b]))
    }

    /// Softmax over all entries, treated as one flat vector.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vals = &self.nodes[x.0].values;
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = exps.into_iter().map(|e| e / total).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Softmax(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(Op::Exp(x), x, f64::exp)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(Op::Softplus(x), x, softplus)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(Op::Scale(x, factor), x, |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(Op::AddScalar(x), x, |v| v + c)
    }

    /// Selects rows of a matrix by index; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = dims2("gather_rows", &self.nodes[x.0].shape)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let src = &self.nodes[x.0].values;
        let values = indices
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            vec![indices.len(), d],
            values,
            Op::GatherRows(x, indices.to_vec()),
            &[x],
        ))
    }

    /// `out[i, j] = ‖a_i − b_j‖²` for `a: n × d`, `b: m × d`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = dims2("pairwise_sq_dist", &self.nodes[a.0].shape)?;
        let (m, d2) = dims2("pairwise_sq_dist", &self.nodes[b.0].shape)?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sq_dist",
                left: vec![n, d],
                right: vec![m, d2],
            });
        }
        let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &bv[j * d..(j + 1) * d];
                out.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(self.push(vec![n, m], out, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    /// Gradient of the last backward root with respect to `x`, if `x` was
    /// reached.
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.grads.get(x.0).and_then(|g| g.as_deref())
    }

    /// Like [`Tape::grad`], but an unreached node yields zeros.
    pub fn grad_or_zero(&self, x: Var) -> Vec<f64> {
        self.grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[x.0].values.len()])
    }

    /// Adds this tape's gradient for `x` into `tensor`'s gradient buffer.
    pub fn write_grad(&self, x: Var, tensor: &mut Tensor) -> Result<()> {
        tensor.accumulate_grad(&self.grad_or_zero(x))
    }

    /// Reverse sweep from a scalar root. Gradients from different uses of
    /// a node accumulate additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.values.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].values;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(m, row) => {
                acc(*m, g.to_vec());
                if wants(*row) {
                    let cols = val(*row).len();
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(s, c)| *s += c);
                    }
                    acc(*row, gr);
                }
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.nodes[a.0].shape[..] else { unreachable!() };
                let n = node.shape[1];
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] = dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for (o, gj) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += arp * gj;
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect();
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SqNorm(x) => acc(*x, val(*x).iter().map(|v| 2.0 * v * g[0]).collect()),
            Op::L1Norm(x) => acc(
                *x,
                val(*x)
                    .iter()
                    .map(|v| if *v == 0.0 { 0.0 } else { v.signum() * g[0] })
                    .collect(),
            ),
            Op::Cosine(a, b) => {
                let (ga, gb) = cosine_grad(val(*a), val(*b), g[0]);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::RowCosine(a, b) => {
                let d = self.nodes[a.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for (r, gr) in g.iter().enumerate() {
                    let (x, y) = cosine_grad(&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d], *gr);
                    ga.extend(x);
                    gb.extend(y);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Softmax(x) => {
                let y = &node.values;
                let inner = dot(g, y);
                acc(*x, y.iter().zip(g).map(|(y, g)| y * (g - inner)).collect());
            }
            Op::Exp(x) => acc(*x, node.values.iter().zip(g).map(|(y, g)| y * g).collect()),
            Op::Softplus(x) => acc(
                *x,
                val(*x).iter().zip(g).map(|(v, g)| sigmoid(*v) * g).collect(),
            ),
            Op::Scale(x, f) => acc(*x, g.iter().map(|g| g * f).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::GatherRows(x, indices) => {
                let d = node.shape[1];
                let mut gx = vec![0.0; val(*x).len()];
                for (r, &src) in indices.iter().enumerate() {
                    gx[src * d..(src + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(o, gi)| *o += gi);
                }
                acc(*x, gx);
            }
            Op::PairwiseSqDist(a, b) => {
                let d = self.nodes[a.0].shape[1];
                let m = node.shape[1];
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for (idx, gij) in g.iter().enumerate() {
                    if *gij == 0.0 {
                        continue;
                    }
                    let (i, j) = (idx / m, idx % m);
                    for c in 0..d {
                        let diff = 2.0 * gij * (av[i * d + c] - bv[j * d + c]);
                        ga[i * d + c] += diff;
                        gb[j * d + c] -= diff;
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
    }
}

fn cosine_grad(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let (c, na, nb) = cosine_parts(a, b).expect("checked in forward");
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (y * inv - c * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (x * inv - c * y / (nb * nb)))
        .collect();
    (ga, gb)
}
