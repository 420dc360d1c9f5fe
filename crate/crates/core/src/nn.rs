//! Neural-network building blocks on top of the tape: linear layers, an LSTM
//! cell, parameter initialization, and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Var};
use crate::tensor::Tensor;

/// Weights uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)].
pub fn init_weight(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).unwrap()
}

/// Bias uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)].
pub fn init_bias(fan_in: usize, len: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::vector((0..len).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Affine layer y = x W + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Self {
        Linear {
            w: init_weight(fan_in, fan_out, rng),
            b: init_bias(fan_in, fan_out, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLinear<'t> {
        BoundLinear {
            w: tape.leaf(self.w.clone().with_grad()),
            b: tape.leaf(self.b.clone().with_grad()),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.w)?.add_row(self.b)
    }

    pub fn ids(&self) -> [NodeId; 2] {
        [self.w.id(), self.b.id()]
    }
}

/// Straight-line linear map, also exposed as a standalone operation.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    crate::tensor::add_row(&crate::tensor::matmul(x, w)?, b)
}

/// Gated recurrent cell. Gate layout along the 4h axis: input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        LstmCell {
            w_x: init_weight(input, 4 * hidden, rng),
            w_h: init_weight(hidden, 4 * hidden, rng),
            b: init_bias(input + hidden, 4 * hidden, rng),
            hidden,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLstmCell<'t> {
        BoundLstmCell {
            w_x: tape.leaf(self.w_x.clone().with_grad()),
            w_h: tape.leaf(self.w_h.clone().with_grad()),
            b: tape.leaf(self.b.clone().with_grad()),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLstmCell<'t> {
    pub w_x: Var<'t>,
    pub w_h: Var<'t>,
    pub b: Var<'t>,
    hidden: usize,
}

impl<'t> BoundLstmCell<'t> {
    /// One step: i,f,o = sigmoid, g = tanh, c' = f*c + i*g, h' = o*tanh(c').
    /// Rows of `x`, `h`, `c` are independent batch entries.
    pub fn step(&self, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let d = self.hidden;
        let pre = x
            .matmul(self.w_x)?
            .add(h.matmul(self.w_h)?)?
            .add_row(self.b)?;
        let i = pre.slice_cols(0, d)?.sigmoid();
        let f = pre.slice_cols(d, d)?.sigmoid();
        let g = pre.slice_cols(2 * d, d)?.tanh();
        let o = pre.slice_cols(3 * d, d)?.sigmoid();
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next))
    }

    pub fn ids(&self) -> [NodeId; 3] {
        [self.w_x.id(), self.w_h.id(), self.b.id()]
    }
}

/// Standalone single-sample LSTM step over plain tensors.
pub fn lstm_cell_step(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    cell: &LstmCell,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let bound = cell.bind(&tape);
    let xv = tape.constant(x.reshaped(vec![1, x.numel()])?);
    let hv = tape.constant(h.reshaped(vec![1, h.numel()])?);
    let cv = tape.constant(c.reshaped(vec![1, c.numel()])?);
    let (hn, cn) = bound.step(xv, hv, cv)?;
    Ok((hn.value(), cn.value()))
}

/// Adam with bias correction. Moment tensors mirror the parameter shapes;
/// `step_count` advances by exactly one per `step` call.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], learning_rate: f64) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::dimension(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            if param.shape() != grad.shape() {
                return Err(Error::dimension(format!(
                    "adam: param {:?} vs grad {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = grad.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
