//! Small helpers shared by the network modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamSet, Tape, Tensor, TensorError, Var};

pub type ModelRng = ChaCha8Rng;

/// Trainable tensor with entries drawn uniformly from `[-range, range]`.
pub fn uniform(rng: &mut ModelRng, shape: Vec<usize>, range: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-range..=range)).collect();
    Tensor::new(shape, data)
        .expect("generated length matches shape")
        .with_requires_grad(true)
}

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![value; n])
        .expect("length matches shape")
        .with_requires_grad(true)
}

/// Affine map `x W + b` over rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ModelRng,
        range: f64,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), uniform(rng, vec![input, output], range));
        let bias = bias.then(|| params.add(format!("{name}.bias"), zeros(vec![output])));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(params, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Inverted dropout with a freshly sampled mask.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ModelRng) -> Result<Var, TensorError> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}
