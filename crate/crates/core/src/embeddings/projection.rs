use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GlobalEmbedding, LocalEmbeddings};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, LinearVars, ParamRegistry, Parameterized};

/// Per-modality heads into the joint space: one affine map for locals, one
/// for the pooled global vector, and the value transform applied when this
/// modality is the counterpart in cross-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub local: Linear,
    pub global: Linear,
    pub value: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionHeadVars {
    pub local: LinearVars,
    pub global: LinearVars,
    pub value: LinearVars,
}

impl ProjectionHead {
    pub fn init(rng: &mut impl Rng, input_dim: usize, joint_dim: usize) -> Self {
        Self {
            local: Linear::init(rng, input_dim, joint_dim, true),
            global: Linear::init(rng, input_dim, joint_dim, true),
            value: Linear::init(rng, joint_dim, joint_dim, false),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            local: Linear::identity(dim),
            global: Linear::identity(dim),
            value: Linear { weight: Array2::eye(dim), bias: None },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.local.input_dim()
    }

    pub fn joint_dim(&self) -> usize {
        self.local.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry, prefix: &str) -> ProjectionHeadVars {
        ProjectionHeadVars {
            local: self.local.bind(tape, reg, &join(prefix, "local")),
            global: self.global.bind(tape, reg, &join(prefix, "global")),
            value: self.value.bind(tape, reg, &join(prefix, "value")),
        }
    }
}

impl Parameterized for ProjectionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.local.visit(&join(prefix, "local"), f);
        self.global.visit(&join(prefix, "global"), f);
        self.value.visit(&join(prefix, "value"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.local.visit_mut(&join(prefix, "local"), f);
        self.global.visit_mut(&join(prefix, "global"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
    }
}

fn check_input(head: &ProjectionHead, dim: usize) -> Result<()> {
    if dim != head.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "projection head expects {}-dim input, got {dim}",
            head.input_dim()
        )));
    }
    Ok(())
}

pub fn project_local(y: &LocalEmbeddings, head: &ProjectionHead) -> Result<LocalEmbeddings> {
    check_input(head, y.dim())?;
    y.with_vectors(head.local.apply(y.vectors())?)
}

pub fn project_global(y: &GlobalEmbedding, head: &ProjectionHead) -> Result<GlobalEmbedding> {
    check_input(head, y.dim())?;
    let out = head.global.apply(&y.as_row())?;
    GlobalEmbedding::new(y.modality, out.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Modality;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn locals() -> LocalEmbeddings {
        LocalEmbeddings::text(array![[1.0, -2.0, 0.5], [0.3, 0.0, 4.0]], vec![true, false]).unwrap()
    }

    #[test]
    fn identity_head_is_identity() {
        let y = locals();
        let z = project_local(&y, &ProjectionHead::identity(3)).unwrap();
        assert_eq!(z, y);
        let g = GlobalEmbedding::new(Modality::Image, array![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(project_global(&g, &ProjectionHead::identity(3)).unwrap(), g);
    }

    #[test]
    fn zero_head_gives_zero_and_keeps_mask() {
        let head = ProjectionHead {
            local: Linear::zeros(3, 2),
            global: Linear::zeros(3, 2),
            value: Linear { weight: Array2::zeros((2, 2)), bias: None },
        };
        let z = project_local(&locals(), &head).unwrap();
        assert!(z.vectors().iter().all(|&v| v == 0.0));
        assert_eq!(z.mask(), &[true, false]);
        assert_eq!(z.dim(), 2);
    }

    #[test]
    fn matches_explicit_matmul() {
        let head = ProjectionHead::init(&mut ChaCha8Rng::seed_from_u64(11), 3, 2);
        let y = locals();
        let z = project_local(&y, &head).unwrap();
        let b = head.local.bias.as_ref().unwrap();
        for i in 0..2 {
            for o in 0..2 {
                let mut acc = b[[0, o]];
                for k in 0..3 {
                    acc += y.vectors()[[i, k]] * head.local.weight[[k, o]];
                }
                assert!((z.vectors()[[i, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let head = ProjectionHead::identity(4);
        assert!(project_local(&locals(), &head).is_err());
    }
}
