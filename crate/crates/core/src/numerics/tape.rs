//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to a [`Tape`]; nodes only reference
//! earlier nodes, so the tape is a DAG already sorted topologically and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Binary element-wise operations broadcast over matrix dimensions of
//! size one (a `1×c` row vector, an `r×1` column vector or a `1×1`
//! scalar against an `r×c` matrix, or an `r×1` against a `1×c` outer
//! expansion). Gradients of broadcast operands are summed back down to
//! the operand's own shape.

use super::tensor::{softmax_in_place, Tensor};
use super::NumericsError;

/// Floor applied to the argument of [`Tape::log`].
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    RowSoftmax(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per training step or evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, var: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        self.value(var).matrix_dims(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.broadcast_binary("subtract", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.broadcast_binary("elementwise-multiply", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.needs(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// Natural log of `max(a, LOG_EPS)`; the clamped region has zero gradient.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(LOG_EPS).ln());
        let rg = self.needs(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Absolute value, subgradient 0 at exact zeros.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.needs(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.dims(a, "row-softmax")?;
        let value = self.value(a).row_softmax();
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::RowSoftmax(a), rg))
    }

    /// `r×c → r×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, "row-sum")?;
        let data = self.value(a).data();
        let sums = (0..r).map(|i| data[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, sums), Op::RowSum(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(NumericsError::shapes("mean", &[t]));
        }
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Euclidean (Frobenius) norm of the whole tensor.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt());
        let rg = self.needs(&[a]);
        self.push(value, Op::Norm(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a, "gather-rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NumericsError::RowIndex { index: bad, rows: r });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, data),
            Op::GatherRows(a, rows.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Empty("concatenate"));
        };
        let (_, c) = self.dims(first, "concatenate")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p, "concatenate")?;
            if pc != c {
                let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
                return Err(NumericsError::shapes("concatenate", &ts));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.dims(a, "transpose")?;
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let plan = Broadcast::plan(op, ta, tb)?;
        let mut out = Vec::with_capacity(plan.rows * plan.cols);
        for i in 0..plan.rows {
            for j in 0..plan.cols {
                out.push(f(ta.data()[plan.a_index(i, j)], tb.data()[plan.b_index(i, j)]));
            }
        }
        let value = if ta.shape() == tb.shape() {
            Tensor::new(ta.shape().to_vec(), out)?
        } else {
            Tensor::matrix(plan.rows, plan.cols, out)
        };
        Ok(value)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let g2 = g.clone().reshape(&[y.rows(), y.cols()])?;
                if self.nodes[a.0].requires_grad {
                    let ga = g2.matmul(&tb.transpose())?.reshape(ta.shape())?;
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = ta.transpose().matmul(&g2)?.reshape(tb.shape())?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let plan = Broadcast::plan("backward", ta, tb)?;
                let (mut ga, mut gb) = (vec![0.0; ta.numel()], vec![0.0; tb.numel()]);
                for i in 0..plan.rows {
                    for j in 0..plan.cols {
                        let gv = g.data()[i * plan.cols + j];
                        let (ia, ib) = (plan.a_index(i, j), plan.b_index(i, j));
                        match &node.op {
                            Op::Add(..) => {
                                ga[ia] += gv;
                                gb[ib] += gv;
                            }
                            Op::Sub(..) => {
                                ga[ia] += gv;
                                gb[ib] -= gv;
                            }
                            _ => {
                                ga[ia] += gv * tb.data()[ib];
                                gb[ib] += gv * ta.data()[ia];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    zip_map(g, x, |gv, xv| if xv > LOG_EPS { gv / xv } else { 0.0 }),
                );
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    zip_map(g, x, |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::RowSoftmax(a) => {
                let (r, c) = y.matrix_dims("row-softmax")?;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        out[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let (r, c) = x.matrix_dims("row-sum")?;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c..(i + 1) * c].fill(g.data()[i]);
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(x.shape(), g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(x.shape(), g.item() / x.numel() as f64));
            }
            Op::Norm(a) => {
                let x = self.value(*a);
                let norm = y.item();
                let gv = g.item();
                let ga = if norm > 0.0 {
                    x.map(|v| gv * v / norm)
                } else {
                    Tensor::zeros(x.shape())
                };
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, rows) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut out = vec![0.0; x.numel()];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let x = self.value(*p);
                    let n = x.numel();
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    self.accumulate(grads, *p, Tensor::new(x.shape().to_vec(), slice)?);
                }
            }
            Op::Transpose(a) => {
                let x = self.value(*a);
                let gt = g.clone().reshape(&[y.rows(), y.cols()])?.transpose();
                self.accumulate(grads, *a, gt.reshape(x.shape())?);
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("zip_map shapes")
}

/// Index mapping for 2-D broadcasting.
struct Broadcast {
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    fn plan(op: &'static str, ta: &Tensor, tb: &Tensor) -> Result<Self, NumericsError> {
        let err = || NumericsError::shapes(op, &[ta, tb]);
        let a = ta.dims2().ok_or_else(err)?;
        let b = tb.dims2().ok_or_else(err)?;
        let join = |x: usize, y: usize| {
            if x == y {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else if y == 1 {
                Some(x)
            } else {
                None
            }
        };
        let rows = join(a.0, b.0).ok_or_else(err)?;
        let cols = join(a.1, b.1).ok_or_else(err)?;
        Ok(Self { rows, cols, a, b })
    }

    fn a_index(&self, i: usize, j: usize) -> usize {
        index_in(self.a, i, j)
    }

    fn b_index(&self, i: usize, j: usize) -> usize {
        index_in(self.b, i, j)
    }
}

fn index_in((r, c): (usize, usize), i: usize, j: usize) -> usize {
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    ii * c + jj
}

/// Softmax of a single row, outside any tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]));
        let y = tape.row_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_with_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).shape(), &[3]);
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_mismatch_reports_operands() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn log_clamps_below_eps() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![0.0, -1.0]).unwrap());
        let y = tape.log(x);
        assert!(tape.value(y).all_finite());
        assert_eq!(tape.value(y).data()[0], LOG_EPS.ln());
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn outer_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]));
        let b = tape.constant(Tensor::matrix(1, 3, vec![10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).item(), 2.0);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.exp(x);
        let b = tape.add(a, a).unwrap();
        let g = tape.backward(b).unwrap();
        assert!((g.wrt(x).item() - 2.0 * 2f64.exp()).abs() < 1e-12);
    }
}
