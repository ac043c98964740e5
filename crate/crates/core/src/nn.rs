//! Parameter containers shared by the encoders, pooling and projection heads.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Rounds to the nearest `f32`. Parameters and optimizer state are stored at
/// single precision so that checkpoints written as `float32` reload exactly;
/// arithmetic is carried out in `f64`.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Anything that owns named parameter tensors.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records which tape leaf stands for which named parameter.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Var)>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: String, value: &Array2<f64>) -> Var {
        let v = tape.leaf(value.clone());
        self.entries.push((name, v));
        v
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Gradients for every bound parameter, in binding order.
    pub fn collect(&self, grads: &Gradients) -> Vec<(String, Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.clone(), grads.wrt(*v))).collect()
    }
}

/// Affine map `x W + b` applied row-wise; `W` is `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    /// Uniform fan-in initialization, `U(-1/√in, 1/√in)` for weight and bias.
    pub fn init(rng: &mut impl Rng, input: usize, output: usize, with_bias: bool) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut sample = |n: usize, m: usize| {
            Array2::from_shape_fn((n, m), |_| round_f32(rng.random_range(-bound..bound)))
        };
        let weight = sample(input, output);
        let bias = with_bias.then(|| sample(1, output));
        Self { weight, bias }
    }

    pub fn identity(dim: usize) -> Self {
        Self { weight: Array2::eye(dim), bias: Some(Array2::zeros((1, dim))) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((input, output)), bias: Some(Array2::zeros((1, output))) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry, prefix: &str) -> LinearVars {
        let weight = reg.bind(tape, join(prefix, "weight"), &self.weight);
        let bias = self.bias.as_ref().map(|b| reg.bind(tape, join(prefix, "bias"), b));
        LinearVars { weight, bias }
    }

    /// Plain forward pass without recording gradients.
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "linear layer expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut out = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            out += b;
        }
        Ok(out)
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.weight);
        match self.bias {
            Some(b) => tape.add_row(y, b),
            None => y,
        }
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Two affine layers with a `tanh` in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp2 {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::init(rng, input, hidden, true),
            output: Linear::init(rng, hidden, output, true),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry, prefix: &str) -> Mlp2Vars {
        Mlp2Vars {
            hidden: self.hidden.bind(tape, reg, &join(prefix, "hidden")),
            output: self.output.bind(tape, reg, &join(prefix, "output")),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp2Vars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl Mlp2Vars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.tanh(h);
        self.output.forward(tape, h)
    }
}

impl Parameterized for Mlp2 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
