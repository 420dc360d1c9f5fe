//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A `Tape` records forward operations in topological order; `backward`
//! replays them in reverse and accumulates chain-rule gradients for every
//! reachable node that requires them. Tapes are single-owner: one tape is
//! built and consumed by one logical thread; independent tapes may run
//! concurrently.

use std::cell::RefCell;

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
#[allow(dead_code)] // scalar operands are kept on the record for diagnostics
enum Op {
    Leaf,
    MatMul,
    /// a @ b^T
    MatMulNT,
    Add,
    Sub,
    Mul,
    /// matrix + broadcast row vector
    AddRow,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    LnGamma,
    SoftmaxRows,
    LayerNorm { eps: f64 },
    SumAll,
    MeanAll,
    RowSums,
    ConcatCols { widths: Vec<usize> },
    SliceCols { start: usize, len: usize },
    Reshape,
    PadRowsRepeatLast { count: usize },
    MinElem,
    ClampConst { lo: f64, hi: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Operation record for reverse-mode differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Gradients produced by `Tape::backward`, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take_id(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Var<'_> {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => {
                let nodes = self.nodes.borrow();
                inputs.iter().any(|&i| nodes[i].requires_grad)
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Register a tensor; it participates in gradients iff `requires_grad` is set.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, vec![], value)
    }

    /// Register a constant (never differentiated).
    pub fn constant(&self, mut value: Tensor) -> Var<'_> {
        value.requires_grad = false;
        self.push(Op::Leaf, vec![], value)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Column-concatenate several vars with equal row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let tensors: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.id].value).collect();
        let value = tensor::concat_cols(&tensors)?;
        let widths = tensors.iter().map(|t| t.cols()).collect();
        drop(nodes);
        Ok(self.push(
            Op::ConcatCols { widths },
            parts.iter().map(|v| v.id).collect(),
            value,
        ))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// reachable node with `requires_grad`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let contribs = backward_op(&node.op, &ins, &node.value, &g)?;
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (&input_id, contrib) in node.inputs.iter().zip(contribs) {
                if !nodes[input_id].requires_grad {
                    continue;
                }
                match &mut grads[input_id] {
                    Some(acc) => {
                        *acc = tensor::add(acc, &contrib)?;
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-op vector-Jacobian products. `ins` are input values, `out` the saved
/// forward value, `g` the gradient flowing into the output.
fn backward_op(op: &Op, ins: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    Ok(match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let da = tensor::matmul_nt(g, ins[1])?;
            let db = tensor::matmul_tn(ins[0], g)?;
            vec![da.reshaped(ins[0].shape().to_vec())?, db.reshaped(ins[1].shape().to_vec())?]
        }
        Op::MatMulNT => {
            // out = a @ b^T
            let da = tensor::matmul(g, ins[1])?;
            let db = tensor::matmul_tn(g, ins[0])?;
            vec![da.reshaped(ins[0].shape().to_vec())?, db.reshaped(ins[1].shape().to_vec())?]
        }
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), tensor::scale(g, -1.0)],
        Op::Mul => vec![tensor::mul(g, ins[1])?, tensor::mul(g, ins[0])?],
        Op::AddRow => {
            let k = ins[0].cols();
            let n = ins[0].rows();
            let mut row = vec![0.0; k];
            for i in 0..n {
                for j in 0..k {
                    row[j] += g.data()[i * k + j];
                }
            }
            let mut rt = Tensor::vector(row);
            rt = rt.reshaped(ins[1].shape().to_vec())?;
            vec![g.clone(), rt]
        }
        Op::Scale(c) => vec![tensor::scale(g, *c)],
        Op::AddScalar(_) => vec![g.clone()],
        Op::Relu => vec![tensor::zip_map(g, ins[0], "relu'", |gv, x| {
            if x > 0.0 {
                gv
            } else {
                0.0
            }
        })?],
        Op::Tanh => vec![tensor::zip_map(g, out, "tanh'", |gv, y| gv * (1.0 - y * y))?],
        Op::Sigmoid => vec![tensor::zip_map(g, out, "sigmoid'", |gv, y| gv * y * (1.0 - y))?],
        Op::Softplus => vec![tensor::zip_map(g, ins[0], "softplus'", |gv, x| {
            gv / (1.0 + (-x).exp())
        })?],
        Op::Exp => vec![tensor::mul(g, out)?],
        Op::Ln => vec![tensor::zip_map(g, ins[0], "ln'", |gv, x| gv / x)?],
        Op::Sqrt => vec![tensor::zip_map(g, out, "sqrt'", |gv, y| gv / (2.0 * y))?],
        Op::LnGamma => vec![tensor::zip_map(g, ins[0], "ln_gamma'", |gv, x| {
            gv * digamma(x)
        })?],
        Op::SoftmaxRows => {
            // dx_row = p .* (g - <g, p>)
            let (n, k) = (out.rows(), out.cols());
            let mut dx = vec![0.0; n * k];
            for i in 0..n {
                let p = &out.data()[i * k..(i + 1) * k];
                let gr = &g.data()[i * k..(i + 1) * k];
                let dot: f64 = p.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                for j in 0..k {
                    dx[i * k + j] = p[j] * (gr[j] - dot);
                }
            }
            vec![Tensor::new(out.shape().to_vec(), dx)?]
        }
        Op::LayerNorm { eps } => {
            let x = ins[0];
            let gain = ins[1];
            let (n, d) = (x.rows(), x.cols());
            let df = d as f64;
            let mut dx = vec![0.0; n * d];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for i in 0..n {
                let row = &x.data()[i * d..(i + 1) * d];
                let gr = &g.data()[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / df;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                // gy = g .* gain
                let gy: Vec<f64> = gr
                    .iter()
                    .zip(gain.data())
                    .map(|(&gv, &gn)| gv * gn)
                    .collect();
                let mean_gy = gy.iter().sum::<f64>() / df;
                let mean_gy_xhat = gy.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / df;
                for j in 0..d {
                    dx[i * d + j] = inv * (gy[j] - mean_gy - xhat[j] * mean_gy_xhat);
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
            }
            vec![
                Tensor::new(x.shape().to_vec(), dx)?,
                Tensor::vector(dgain).reshaped(ins[1].shape().to_vec())?,
                Tensor::vector(dbias).reshaped(ins[2].shape().to_vec())?,
            ]
        }
        Op::SumAll => vec![Tensor::full(ins[0].shape(), g.item())],
        Op::MeanAll => vec![Tensor::full(
            ins[0].shape(),
            g.item() / ins[0].numel() as f64,
        )],
        Op::RowSums => {
            let (n, k) = (ins[0].rows(), ins[0].cols());
            let mut dx = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..k {
                    dx[i * k + j] = g.data()[i];
                }
            }
            vec![Tensor::new(ins[0].shape().to_vec(), dx)?]
        }
        Op::ConcatCols { widths } => {
            let mut parts = Vec::with_capacity(widths.len());
            let mut start = 0;
            for (&w, input) in widths.iter().zip(ins) {
                parts.push(tensor::slice_cols(g, start, w)?.reshaped(input.shape().to_vec())?);
                start += w;
            }
            parts
        }
        Op::SliceCols { start, len } => {
            let (n, k) = (ins[0].rows(), ins[0].cols());
            let mut dx = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..*len {
                    dx[i * k + start + j] = g.data()[i * len + j];
                }
            }
            vec![Tensor::new(ins[0].shape().to_vec(), dx)?]
        }
        Op::Reshape => vec![g.reshaped(ins[0].shape().to_vec())?],
        Op::PadRowsRepeatLast { count } => {
            let (n, k) = (ins[0].rows(), ins[0].cols());
            let mut dx = g.data()[..n * k].to_vec();
            for c in 0..*count {
                for j in 0..k {
                    dx[(n - 1) * k + j] += g.data()[(n + c) * k + j];
                }
            }
            vec![Tensor::new(ins[0].shape().to_vec(), dx)?]
        }
        Op::MinElem => {
            // ties route the gradient to the first argument
            let da = tensor::zip_map(
                g,
                &tensor::zip_map(ins[0], ins[1], "min-mask", |a, b| {
                    if a <= b {
                        1.0
                    } else {
                        0.0
                    }
                })?,
                "min-da",
                |gv, m| gv * m,
            )?;
            let db = tensor::sub(g, &da)?;
            vec![da, db]
        }
        Op::ClampConst { lo, hi } => vec![tensor::zip_map(g, ins[0], "clamp'", |gv, x| {
            if x >= *lo && x <= *hi {
                gv
            } else {
                0.0
            }
        })?],
    })
}

macro_rules! binary_op {
    ($name:ident, $op:expr, $fwd:path) => {
        pub fn $name(self, other: Var<'t>) -> Result<Var<'t>> {
            let value = {
                let nodes = self.tape.nodes.borrow();
                $fwd(&nodes[self.id].value, &nodes[other.id].value)?
            };
            Ok(self.tape.push($op, vec![self.id, other.id], value))
        }
    };
}

macro_rules! unary_op {
    ($name:ident, $op:expr, $fwd:path) => {
        pub fn $name(self) -> Var<'t> {
            let value = {
                let nodes = self.tape.nodes.borrow();
                $fwd(&nodes[self.id].value)
            };
            self.tape.push($op, vec![self.id], value)
        }
    };
}

impl<'t> Var<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn value(self) -> Tensor {
        self.tape.value(self)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    binary_op!(matmul, Op::MatMul, tensor::matmul);
    binary_op!(matmul_nt, Op::MatMulNT, tensor::matmul_nt);
    binary_op!(add, Op::Add, tensor::add);
    binary_op!(sub, Op::Sub, tensor::sub);
    binary_op!(mul, Op::Mul, tensor::mul);
    binary_op!(add_row, Op::AddRow, tensor::add_row);

    unary_op!(relu, Op::Relu, tensor::relu);
    unary_op!(tanh, Op::Tanh, tensor::tanh);
    unary_op!(sigmoid, Op::Sigmoid, tensor::sigmoid);
    unary_op!(softplus, Op::Softplus, tensor::softplus);
    unary_op!(softmax_rows, Op::SoftmaxRows, tensor::softmax_rows);

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::scale(&nodes[self.id].value, c)
        };
        self.tape.push(Op::Scale(c), vec![self.id], value)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::map(&nodes[self.id].value, |v| v + c)
        };
        self.tape.push(Op::AddScalar(c), vec![self.id], value)
    }

    pub fn exp(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::map(&nodes[self.id].value, f64::exp)
        };
        self.tape.push(Op::Exp, vec![self.id], value)
    }

    pub fn ln(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::map(&nodes[self.id].value, f64::ln)
        };
        self.tape.push(Op::Ln, vec![self.id], value)
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::map(&nodes[self.id].value, f64::sqrt)
        };
        self.tape.push(Op::Sqrt, vec![self.id], value)
    }

    pub fn ln_gamma(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::map(&nodes[self.id].value, ln_gamma)
        };
        self.tape.push(Op::LnGamma, vec![self.id], value)
    }

    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::layer_norm(
                &nodes[self.id].value,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
                eps,
            )?
        };
        Ok(self
            .tape
            .push(Op::LayerNorm { eps }, vec![self.id, gain.id, bias.id], value))
    }

    pub fn sum_all(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            Tensor::scalar(tensor::sum_all(&nodes[self.id].value))
        };
        self.tape.push(Op::SumAll, vec![self.id], value)
    }

    pub fn mean_all(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            Tensor::scalar(tensor::sum_all(t) / t.numel() as f64)
        };
        self.tape.push(Op::MeanAll, vec![self.id], value)
    }

    pub fn row_sums(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::row_sums(&nodes[self.id].value)
        };
        self.tape.push(Op::RowSums, vec![self.id], value)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::slice_cols(&nodes[self.id].value, start, len)?
        };
        Ok(self
            .tape
            .push(Op::SliceCols { start, len }, vec![self.id], value))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut t = nodes[self.id].value.reshaped(shape)?;
            t.requires_grad = false;
            t
        };
        Ok(self.tape.push(Op::Reshape, vec![self.id], value))
    }

    pub fn pad_rows_repeat_last(self, count: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::pad_rows_repeat_last(&nodes[self.id].value, count)?
        };
        Ok(self
            .tape
            .push(Op::PadRowsRepeatLast { count }, vec![self.id], value))
    }

    binary_op!(min_elem, Op::MinElem, min_elem_fwd);

    pub fn clamp_const(self, lo: f64, hi: f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            tensor::map(&nodes[self.id].value, |v| v.clamp(lo, hi))
        };
        self.tape.push(Op::ClampConst { lo, hi }, vec![self.id], value)
    }
}

fn min_elem_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    tensor::zip_map(a, b, "min_elem", f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences of `f` over the entries of `x`.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.push((f(&xp) - f(&xm)) / (2.0 * h));
        }
        out
    }

    /// Checks the analytic gradient of `build` against finite differences.
    fn check_grad(build: &dyn for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>, x: &Tensor, tol: f64) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad());
        let loss = build(&tape, xv);
        assert_eq!(loss.value().numel(), 1);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(xv).expect("missing gradient").clone();
        assert_eq!(analytic.shape(), x.shape());

        let f = |t: &Tensor| {
            let tape = Tape::new();
            let v = tape.leaf(t.clone());
            build(&tape, v).value().item()
        };
        let numeric = numeric_grad(&f, x, 1e-5);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(
                rel_err(*a, *n) < tol,
                "analytic {a} vs numeric {n} (rel {})",
                rel_err(*a, *n)
            );
        }
    }

    #[test]
    fn square_gradient_at_three() {
        // loss = x^2 at x = 3 -> grad 6
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let loss = x.mul(x).unwrap().sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_row_sum_has_zero_gradient() {
        // rows of softmax sum to 1, so d(sum)/dx = 0 everywhere
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_tensor(&[3, 4], &mut rng);
        let tape = Tape::new();
        let xv = tape.leaf(x.with_grad());
        let loss = xv.softmax_rows().sum_all();
        let grads = tape.backward(loss).unwrap();
        for g in grads.get(xv).unwrap().data() {
            assert!(g.abs() < 1e-12, "expected zero gradient, got {g}");
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let w = rand_tensor(&[3, 3], &mut rng);
            let x = rand_tensor(&[3, 3], &mut rng);
            // d(sum(W @ x))/dW
            check_grad(
                &|tape, v| {
                    let xc = tape.constant(x.clone());
                    v.matmul(xc).unwrap().sum_all()
                },
                &w,
                1e-4,
            );
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        type BuildFn = for<'a> fn(&'a Tape, Var<'a>) -> Var<'a>;
        let cases: Vec<(&'static str, BuildFn)> = vec![
            ("relu", |_t, v| v.add_scalar(0.3).relu().sum_all()),
            ("tanh", |_t, v| v.tanh().sum_all()),
            ("sigmoid", |_t, v| v.sigmoid().sum_all()),
            ("softplus", |_t, v| v.softplus().sum_all()),
            ("exp", |_t, v| v.exp().sum_all()),
            ("sqrt", |_t, v| v.add_scalar(3.0).sqrt().sum_all()),
            ("ln", |_t, v| v.add_scalar(3.0).ln().sum_all()),
            ("ln_gamma", |_t, v| v.add_scalar(3.0).ln_gamma().sum_all()),
            ("scale", |_t, v| v.scale(2.5).sum_all()),
            ("mean", |_t, v| v.mean_all()),
            ("row_sums", |_t, v| v.row_sums().mul(v.row_sums()).unwrap().sum_all()),
            ("softmax", |_t, v| {
                v.softmax_rows().mul(v.softmax_rows()).unwrap().sum_all()
            }),
            ("reshape", |_t, v| {
                v.reshape(vec![4, 2]).unwrap().row_sums().sum_all()
            }),
            ("pad", |_t, v| {
                v.pad_rows_repeat_last(2)
                    .unwrap()
                    .mul(v.pad_rows_repeat_last(2).unwrap())
                    .unwrap()
                    .sum_all()
            }),
            ("slice", |_t, v| {
                v.slice_cols(1, 2).unwrap().mul(v.slice_cols(1, 2).unwrap()).unwrap().sum_all()
            }),
            ("clamp", |_t, v| v.clamp_const(-0.9, 0.9).sum_all()),
        ];
        for (name, build) in cases {
            for seed in 0..10u64 {
                let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
                let x = rand_tensor(&[2, 4], &mut rng);
                let tol = 1e-4;
                // clamp has kinks at the bounds; keep points away from them
                let x = if name == "clamp" {
                    Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .map(|v| if v.abs() > 0.85 && v.abs() < 0.95 { 0.5 } else { *v })
                            .collect(),
                    )
                    .unwrap()
                } else {
                    x
                };
                check_grad(&build, &x, tol);
            }
        }
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(2000 + seed);
            let other = rand_tensor(&[3, 3], &mut rng);
            let x = rand_tensor(&[3, 3], &mut rng);
            check_grad(
                &|tape, v| {
                    let o = tape.constant(other.clone());
                    v.mul(o).unwrap().sum_all()
                },
                &x,
                1e-4,
            );
            check_grad(
                &|tape, v| {
                    let o = tape.constant(other.clone());
                    v.sub(o).unwrap().mul(v).unwrap().sum_all()
                },
                &x,
                1e-4,
            );
            check_grad(
                &|tape, v| {
                    let o = tape.constant(other.clone());
                    v.matmul_nt(o).unwrap().sum_all()
                },
                &x,
                1e-4,
            );
            // keep away from min ties
            check_grad(
                &|tape, v| {
                    let o = tape.constant(other.clone());
                    v.scale(1.7).min_elem(o).unwrap().sum_all()
                },
                &x,
                1e-4,
            );
            let row = rand_tensor(&[3], &mut rng);
            check_grad(
                &|tape, v| {
                    let r = tape.constant(row.clone());
                    v.add_row(r).unwrap().mul(v).unwrap().sum_all()
                },
                &x,
                1e-4,
            );
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(3000 + seed);
            let x = rand_tensor(&[3, 5], &mut rng);
            let gain = rand_tensor(&[5], &mut rng);
            let bias = rand_tensor(&[5], &mut rng);
            // gradient wrt x
            check_grad(
                &|tape, v| {
                    let g = tape.constant(gain.clone());
                    let b = tape.constant(bias.clone());
                    let y = v.layer_norm(g, b, 1e-5).unwrap();
                    y.mul(y).unwrap().sum_all()
                },
                &x,
                1e-4,
            );
            // gradient wrt gain and bias
            check_grad(
                &|tape, v| {
                    let xc = tape.constant(x.clone());
                    let b = tape.constant(bias.clone());
                    let y = xc.layer_norm(v, b, 1e-5).unwrap();
                    y.mul(y).unwrap().sum_all()
                },
                &gain,
                1e-4,
            );
            check_grad(
                &|tape, v| {
                    let xc = tape.constant(x.clone());
                    let g = tape.constant(gain.clone());
                    let y = xc.layer_norm(g, v, 1e-5).unwrap();
                    y.mul(y).unwrap().sum_all()
                },
                &bias,
                1e-4,
            );
        }
    }

    #[test]
    fn concat_cols_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(4000);
        let x = rand_tensor(&[2, 3], &mut rng);
        check_grad(
            &|tape, v| {
                let a = v.slice_cols(0, 2).unwrap();
                let b = v.scale(2.0);
                let c = tape.concat_cols(&[a, b]).unwrap();
                c.mul(c).unwrap().sum_all()
            },
            &x,
            1e-4,
        );
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gradients_match_leaf_shapes() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap().with_grad());
        let x = tape.constant(Tensor::matrix(3, 1, vec![1., 1., 1.]).unwrap());
        let loss = w.matmul(x).unwrap().sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().shape(), &[2, 3]);
    }
}
