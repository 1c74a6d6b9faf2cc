//! Minimal reverse-mode differentiation tape.
//!
//! Nodes are appended eagerly: creating a node evaluates and caches its
//! forward value immediately, so node ids always form a DAG by construction
//! and the backward pass can sweep ids in reverse order. Values are dense
//! matrices; column vectors are n x 1 and scalars 1 x 1.
//!
//! The op vocabulary is deliberately small (add, mul, matvec, matmul, tanh,
//! logistic, softmin, dot, scale, sum, clamp); anything else is composed
//! from these.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf without gradient flow; also used to detach carried state.
    Const,
    /// Leaf that accumulates a gradient.
    Var,
    Add(NodeId, NodeId),
    /// Elementwise product; a 1x1 operand broadcasts over the other side.
    Mul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Logistic(NodeId),
    Softmin(NodeId, f64),
    Dot(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Clamp(NodeId, f64, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Node id -> adjoint of matching shape, for every node reached from the
/// backward root. Const leaves receive adjoints but stop the propagation.
pub struct GradientMap {
    adjoints: Vec<Option<Matrix>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Gradient of a leaf; zeros when the leaf does not influence the output.
    pub fn grad_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Matrix {
        match self.get(id) {
            Some(m) => m.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.value(id).as_slice().len(), 1);
        self.value(id).as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by tape op {op:?}"
            )));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Const, value)
    }

    pub fn var(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Var, value)
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Matrix::column(vec![value]))
    }

    pub fn vector_const(&mut self, value: &[f64]) -> Result<NodeId> {
        self.constant(Matrix::column(value.to_vec()))
    }

    pub fn vector_var(&mut self, value: &[f64]) -> Result<NodeId> {
        self.var(Matrix::column(value.to_vec()))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", va.rows(), va.cols()),
                got: format!("{}x{}", vb.rows(), vb.cols()),
            });
        }
        Ok(())
    }

    fn is_scalar(&self, id: NodeId) -> bool {
        let v = self.value(id);
        v.rows() == 1 && v.cols() == 1
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| x + y)
            .collect();
        let value = Matrix::new(va.rows(), va.cols(), data)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = if self.is_scalar(a) && !self.is_scalar(b) {
            let s = self.scalar_value(a);
            let vb = self.value(b);
            Matrix::new(
                vb.rows(),
                vb.cols(),
                vb.as_slice().iter().map(|y| s * y).collect(),
            )?
        } else if self.is_scalar(b) && !self.is_scalar(a) {
            let s = self.scalar_value(b);
            let va = self.value(a);
            Matrix::new(
                va.rows(),
                va.cols(),
                va.as_slice().iter().map(|x| x * s).collect(),
            )?
        } else {
            self.same_shape(a, b)?;
            let (va, vb) = (self.value(a), self.value(b));
            Matrix::new(
                va.rows(),
                va.cols(),
                va.as_slice()
                    .iter()
                    .zip(vb.as_slice())
                    .map(|(x, y)| x * y)
                    .collect(),
            )?
        };
        self.push(Op::Mul(a, b), value)
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (va, vx) = (self.value(a), self.value(x));
        if vx.cols() != 1 || va.cols() != vx.rows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x1 vector for {}x{} matrix", va.cols(), va.rows(), va.cols()),
                got: format!("{}x{}", vx.rows(), vx.cols()),
            });
        }
        let value = Matrix::column(va.matvec(vx.as_slice()));
        self.push(Op::MatVec(a, x), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let value = Matrix::new(
            vx.rows(),
            vx.cols(),
            vx.as_slice().iter().map(|v| v.tanh()).collect(),
        )?;
        self.push(Op::Tanh(x), value)
    }

    pub fn logistic(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let value = Matrix::new(
            vx.rows(),
            vx.cols(),
            vx.as_slice().iter().map(|v| logistic(*v)).collect(),
        )?;
        self.push(Op::Logistic(x), value)
    }

    /// Softmin over a column vector; same stabilized evaluation as
    /// `linalg::softmin`.
    pub fn softmin(&mut self, x: NodeId, beta: f64) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.cols() != 1 {
            return Err(Error::invalid("softmin expects a column vector"));
        }
        let s = linalg::softmin(vx.as_slice(), beta)?;
        let value = Matrix::column(s.into_vec());
        self.push(Op::Softmin(x, beta), value)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = linalg::dot(self.value(a).as_slice(), self.value(b).as_slice());
        self.push(Op::Dot(a, b), Matrix::column(vec![v]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let value = Matrix::new(
            vx.rows(),
            vx.cols(),
            vx.as_slice().iter().map(|v| c * v).collect(),
        )?;
        self.push(Op::Scale(x, c), value)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v: f64 = self.value(x).as_slice().iter().sum();
        self.push(Op::Sum(x), Matrix::column(vec![v]))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let vx = self.value(x);
        let value = Matrix::new(
            vx.rows(),
            vx.cols(),
            vx.as_slice().iter().map(|v| v.clamp(lo, hi)).collect(),
        )?;
        self.push(Op::Clamp(x, lo, hi), value)
    }

    /// Reverse-topological adjoint accumulation from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<GradientMap> {
        let out_val = self.value(output);
        if out_val.rows() != 1 || out_val.cols() != 1 {
            return Err(Error::invalid("backward root must be a 1x1 scalar node"));
        }
        let mut adjoints: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[output.0] = Some(Matrix::column(vec![1.0]));

        for id in (0..=output.0).rev() {
            let Some(out_adj) = adjoints[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            match node.op {
                Op::Const | Op::Var => {}
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, a, out_adj.clone());
                    accumulate(&mut adjoints, b, out_adj);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let a_scalar = va.as_slice().len() == 1 && vb.as_slice().len() != 1;
                    let b_scalar = vb.as_slice().len() == 1 && va.as_slice().len() != 1;
                    if a_scalar {
                        let s = va.as_slice()[0];
                        let da = linalg::dot(out_adj.as_slice(), vb.as_slice());
                        accumulate(&mut adjoints, a, Matrix::column(vec![da]));
                        accumulate(&mut adjoints, b, scaled(&out_adj, s));
                    } else if b_scalar {
                        let s = vb.as_slice()[0];
                        let db = linalg::dot(out_adj.as_slice(), va.as_slice());
                        accumulate(&mut adjoints, a, scaled(&out_adj, s));
                        accumulate(&mut adjoints, b, Matrix::column(vec![db]));
                    } else {
                        accumulate(&mut adjoints, a, hadamard(&out_adj, vb));
                        accumulate(&mut adjoints, b, hadamard(&out_adj, va));
                    }
                }
                Op::MatVec(a, x) => {
                    let (va, vx) = (self.value(a), self.value(x));
                    accumulate(
                        &mut adjoints,
                        a,
                        Matrix::outer(1.0, out_adj.as_slice(), vx.as_slice()),
                    );
                    accumulate(
                        &mut adjoints,
                        x,
                        Matrix::column(va.matvec_t(out_adj.as_slice())),
                    );
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let da = out_adj.matmul(&vb.transpose()).expect("shape checked");
                    let db = va.transpose().matmul(&out_adj).expect("shape checked");
                    accumulate(&mut adjoints, a, da);
                    accumulate(&mut adjoints, b, db);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let data: Vec<f64> = out_adj
                        .as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(g, yv)| g * (1.0 - yv * yv))
                        .collect();
                    accumulate(
                        &mut adjoints,
                        x,
                        Matrix::new(y.rows(), y.cols(), data).unwrap(),
                    );
                }
                Op::Logistic(x) => {
                    let y = &node.value;
                    let data: Vec<f64> = out_adj
                        .as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(g, yv)| g * yv * (1.0 - yv))
                        .collect();
                    accumulate(
                        &mut adjoints,
                        x,
                        Matrix::new(y.rows(), y.cols(), data).unwrap(),
                    );
                }
                Op::Softmin(x, beta) => {
                    // J = -beta (diag(sigma) - sigma sigma^T) is symmetric, so
                    // J^T g = -beta (sigma .* g - sigma <sigma, g>).
                    let sigma = node.value.as_slice();
                    let g = out_adj.as_slice();
                    let inner = linalg::dot(sigma, g);
                    let data: Vec<f64> = sigma
                        .iter()
                        .zip(g)
                        .map(|(s, gi)| -beta * s * (gi - inner))
                        .collect();
                    accumulate(&mut adjoints, x, Matrix::column(data));
                }
                Op::Dot(a, b) => {
                    let g = out_adj.as_slice()[0];
                    accumulate(&mut adjoints, a, scaled(self.value(b), g));
                    accumulate(&mut adjoints, b, scaled(self.value(a), g));
                }
                Op::Scale(x, c) => {
                    accumulate(&mut adjoints, x, scaled(&out_adj, c));
                }
                Op::Sum(x) => {
                    let g = out_adj.as_slice()[0];
                    let vx = self.value(x);
                    accumulate(
                        &mut adjoints,
                        x,
                        Matrix::new(vx.rows(), vx.cols(), vec![g; vx.as_slice().len()]).unwrap(),
                    );
                }
                Op::Clamp(x, lo, hi) => {
                    let vx = self.value(x);
                    let data: Vec<f64> = out_adj
                        .as_slice()
                        .iter()
                        .zip(vx.as_slice())
                        .map(|(g, v)| if *v > lo && *v < hi { *g } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut adjoints,
                        x,
                        Matrix::new(vx.rows(), vx.cols(), data).unwrap(),
                    );
                }
            }
        }
        Ok(GradientMap { adjoints })
    }
}

fn accumulate(adjoints: &mut [Option<Matrix>], id: NodeId, contrib: Matrix) {
    match &mut adjoints[id.0] {
        Some(existing) => existing.add_scaled(1.0, &contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn scaled(m: &Matrix, c: f64) -> Matrix {
    let mut out = m.clone();
    out.scale_in_place(c);
    out
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data: Vec<f64> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .collect();
    Matrix::new(a.rows(), a.cols(), data).unwrap()
}
