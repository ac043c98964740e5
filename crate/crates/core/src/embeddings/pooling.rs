use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{masked_mean_weights, GlobalEmbedding, LocalEmbeddings};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, LinearVars, ParamRegistry, Parameterized};

/// Single-head attention pooling. The query is an affine map of the masked
/// mean of the locals; keys and values are linear maps of the locals; the
/// attended value goes through an output affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPool {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionPoolVars {
    query: LinearVars,
    key: LinearVars,
    value: LinearVars,
    output: LinearVars,
    dim: usize,
}

impl AttentionPool {
    pub fn init(rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            query: Linear::init(rng, dim, dim, true),
            key: Linear::init(rng, dim, dim, false),
            value: Linear::init(rng, dim, dim, false),
            output: Linear::init(rng, dim, dim, true),
        }
    }

    pub fn dim(&self) -> usize {
        self.key.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry, prefix: &str) -> AttentionPoolVars {
        AttentionPoolVars {
            query: self.query.bind(tape, reg, &join(prefix, "query")),
            key: self.key.bind(tape, reg, &join(prefix, "key")),
            value: self.value.bind(tape, reg, &join(prefix, "value")),
            output: self.output.bind(tape, reg, &join(prefix, "output")),
            dim: self.dim(),
        }
    }
}

impl AttentionPoolVars {
    /// Pools `locals` (`N × D`) into a `1 × D` row. Returns the pooled row and
    /// the attention weights (`1 × N`).
    pub fn forward(&self, tape: &mut Tape, locals: Var, mask: &[bool]) -> (Var, Var) {
        let mean_w = tape.leaf(masked_mean_weights(mask));
        let mean = tape.matmul(mean_w, locals);
        let q = self.query.forward(tape, mean);
        let k = self.key.forward(tape, locals);
        let v = self.value.forward(tape, locals);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let mask_row = Array2::from_shape_fn((1, mask.len()), |(_, j)| mask[j]);
        let weights = tape.masked_softmax_rows(scores, mask_row);
        let ctx = tape.matmul(weights, v);
        (self.output.forward(tape, ctx), weights)
    }
}

impl Parameterized for AttentionPool {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

pub fn attention_pool(locals: &LocalEmbeddings, params: &AttentionPool) -> Result<GlobalEmbedding> {
    if locals.dim() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "attention pool of width {} applied to {}-dim locals",
            params.dim(),
            locals.dim()
        )));
    }
    if locals.valid_count() == 0 {
        return Err(Error::InvalidInput("attention pooling over fully masked locals".into()));
    }
    let mut tape = Tape::new();
    let mut reg = ParamRegistry::new();
    let vars = params.bind(&mut tape, &mut reg, "");
    let x = tape.leaf(locals.vectors().clone());
    let (out, _) = vars.forward(&mut tape, x, locals.mask());
    GlobalEmbedding::new(locals.modality(), tape.value(out).row(0).to_owned())
}
