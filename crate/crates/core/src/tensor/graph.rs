//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it in reverse.

use super::{Result, Tensor, TensorError};
use rand::Rng;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the
/// cross-entropy losses.
pub const PROB_CLIP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Mul,
    Add,
    Tanh,
    Sigmoid,
    Relu,
    /// Multiply by a constant mask; the mask is the second operand.
    DropoutMaskApply,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Sum(Var),
    CrossEntropy(Var, Tensor),
    BinaryCrossEntropy(Var, Tensor),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and their values; `backward` fills gradients.
#[derive(Default, Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Adds an input tensor. Gradients are only kept for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participates in a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x c` row to every row of an `r x c` tensor (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let rs = self.shape(row);
        if rs != (1, ac) {
            return Err(TensorError::Shape {
                op: "add_row",
                left: (ar, ac),
                right: rs,
            });
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..ar {
            for (v, b) in value.data_mut()[r * ac..(r + 1) * ac].iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Dispatches one of the pointwise kinds. Binary kinds require `b`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or(TensorError::Invalid {
                op: "elementwise",
                msg: format!("{kind:?} needs a second operand"),
            })
        };
        match kind {
            ElementwiseKind::Mul | ElementwiseKind::DropoutMaskApply => self.mul(a, need_b()?),
            ElementwiseKind::Add => self.add(a, need_b()?),
            ElementwiseKind::Tanh => Ok(self.tanh(a)),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseKind::Relu => Ok(self.relu(a)),
        }
    }

    /// Inverted dropout: each entry is kept with probability `1 - rate` and
    /// scaled by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = self.constant(Tensor::new(r, c, mask)?);
        self.elementwise(ElementwiseKind::DropoutMaskApply, a, Some(mask))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::RowSoftmax(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no parts".into(),
            });
        }
        let value = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&refs)?
        };
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no parts".into(),
            });
        }
        let value = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&refs)?
        };
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `i` of `a` as a `1 x c` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if i >= r {
            return Err(TensorError::Invalid {
                op: "row",
                msg: format!("row {i} out of range for {r}x{c}"),
            });
        }
        let value = Tensor::row_vector(self.value(a).row(i).to_vec());
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Row(a, i), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-sum_j target_ij * ln(clip(p_ij))`.
    pub fn cross_entropy(&mut self, probs: Var, target: Tensor) -> Result<Var> {
        let p = self.value(probs);
        p.check_same_shape(&target, "cross_entropy")?;
        let n = p.rows().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * clip(p).ln() })
            .sum();
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy(probs, target),
            rg,
        ))
    }

    /// Mean over all entries of the binary cross-entropy with clipping.
    pub fn binary_cross_entropy(&mut self, probs: Var, target: Tensor) -> Result<Var> {
        let p = self.value(probs);
        p.check_same_shape(&target, "binary_cross_entropy")?;
        let n = p.len().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = clip(p);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BinaryCrossEntropy(probs, target),
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Replaces gradients of any earlier
    /// pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(TensorError::NotScalar { rows, cols });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = if self.requires_grad(a) {
                    Some(g.matmul(&self.value(b).transpose())?)
                } else {
                    None
                };
                let db = if self.requires_grad(b) {
                    Some(self.value(a).transpose().matmul(g)?)
                } else {
                    None
                };
                if let Some(da) = da {
                    self.accumulate(a, da)?;
                }
                if let Some(db) = db {
                    self.accumulate(b, db)?;
                }
            }
            Op::Transpose(a) => self.accumulate(a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(self.value(b))?;
                let db = g.hadamard(self.value(a))?;
                self.accumulate(a, da)?;
                self.accumulate(b, db)?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, g.clone())?;
                let mut db = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(row, Tensor::row_vector(db))?;
            }
            Op::Scale(a, k) => self.accumulate(a, g.scale(k))?,
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let d = g.zip_with(y, "tanh'", |g, y| g * (1.0 - y * y))?;
                self.accumulate(a, d)?;
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let d = g.zip_with(y, "sigmoid'", |g, y| g * y * (1.0 - y))?;
                self.accumulate(a, d)?;
            }
            Op::Relu(a) => {
                let x = self.value(a);
                let d = g.zip_with(x, "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(a, d)?;
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(p).1;
                    self.accumulate(p, g.slice_cols(start, start + w))?;
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let (h, w) = self.shape(p);
                    let slice = g.data()[start * w..(start + h) * w].to_vec();
                    self.accumulate(p, Tensor::new(h, w, slice)?)?;
                    start += h;
                }
            }
            Op::Row(a, i) => {
                let (r, c) = self.shape(a);
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                self.accumulate(a, d)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Tensor::full(r, c, g.get(0, 0)))?;
            }
            Op::CrossEntropy(probs, target) => {
                let p = self.value(probs);
                let n = p.rows().max(1) as f64;
                let k = g.get(0, 0) / n;
                let d = p.zip_with(&target, "cross_entropy'", |p, t| {
                    if t == 0.0 || !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                        0.0
                    } else {
                        -k * t / p
                    }
                })?;
                self.accumulate(probs, d)?;
            }
            Op::BinaryCrossEntropy(probs, target) => {
                let p = self.value(probs);
                let n = p.len().max(1) as f64;
                let k = g.get(0, 0) / n;
                let d = p.zip_with(&target, "binary_cross_entropy'", |p, t| {
                    if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                        0.0
                    } else {
                        -k * (t / p - (1.0 - t) / (1.0 - p))
                    }
                })?;
                self.accumulate(probs, d)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}
