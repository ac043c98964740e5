use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{cosine_matrix_on_tape, pair_mask, LocalEmbeddings};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, LinearVars, ParamRegistry};

/// How cosine correlations become attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum CrossAttentionWeights {
    /// Raw cosine values used directly as weights.
    #[default]
    Cosine,
    /// Row softmax of `cos / temperature` over valid counterpart positions.
    Softmax { temperature: f64 },
}

/// Row `i` of the result is `Σ_j w_ij · (z'_j W_v)` where `w_ij` derives
/// from `cos(z_i, z'_j)`. Masked counterpart positions contribute nothing.
pub fn cross_attend_on_tape(
    tape: &mut Tape,
    z: Var,
    counterpart: Var,
    counterpart_mask: &[bool],
    value: LinearVars,
    weights: CrossAttentionWeights,
) -> Var {
    let n = tape.shape(z).0;
    let cos = cosine_matrix_on_tape(tape, z, counterpart);
    let mask = pair_mask(&vec![true; n], counterpart_mask);
    let w = match weights {
        CrossAttentionWeights::Cosine => {
            let keep = mask.mapv(|m| if m { 1.0 } else { 0.0 });
            tape.mul_const(cos, keep)
        }
        CrossAttentionWeights::Softmax { temperature } => {
            let scaled = tape.scale(cos, 1.0 / temperature);
            tape.masked_softmax_rows(scaled, mask)
        }
    };
    let values = value.forward(tape, counterpart);
    tape.matmul(w, values)
}

pub fn cross_attend(
    z: &LocalEmbeddings,
    counterpart: &LocalEmbeddings,
    value: &Array2<f64>,
    weights: CrossAttentionWeights,
) -> Result<LocalEmbeddings> {
    let d = z.dim();
    if counterpart.dim() != d || value.dim() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "cross-attention needs joint dimension {d} on both sides and a {d}x{d} value map"
        )));
    }
    if counterpart.valid_count() == 0 {
        return Err(Error::InvalidInput("cross-attention counterpart has no valid positions".into()));
    }
    if let CrossAttentionWeights::Softmax { temperature } = weights {
        if !(temperature > 0.0) {
            return Err(Error::InvalidInput("cross-attention temperature must be positive".into()));
        }
    }
    let mut tape = Tape::new();
    let mut reg = ParamRegistry::new();
    let lin = Linear { weight: value.clone(), bias: None };
    let vars = lin.bind(&mut tape, &mut reg, "value");
    let zv = tape.leaf(z.vectors().clone());
    let cv = tape.leaf(counterpart.vectors().clone());
    let out = cross_attend_on_tape(&mut tape, zv, cv, counterpart.mask(), vars, weights);
    z.with_vectors(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn text(v: Array2<f64>) -> LocalEmbeddings {
        let n = v.nrows();
        LocalEmbeddings::text(v, vec![true; n]).unwrap()
    }

    #[test]
    fn unit_self_attention_returns_input() {
        let s = 1.0 / 3f64.sqrt();
        let v = array![[s, s, s]];
        let out = cross_attend(&text(v.clone()), &text(v.clone()), &Array2::eye(3), Default::default()).unwrap();
        for (a, b) in out.vectors().iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn orthogonal_counterpart_is_ignored() {
        let out = cross_attend(
            &text(array![[1.0, 0.0]]),
            &text(array![[1.0, 0.0], [0.0, 1.0]]),
            &Array2::eye(2),
            Default::default(),
        )
        .unwrap();
        assert!((out.vectors()[[0, 0]] - 1.0).abs() < 1e-7);
        assert!(out.vectors()[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn masked_counterpart_contributes_nothing() {
        let cp = LocalEmbeddings::text(array![[1.0, 0.0], [1.0, 1.0]], vec![true, false]).unwrap();
        let out = cross_attend(&text(array![[1.0, 1.0]]), &cp, &Array2::eye(2), Default::default()).unwrap();
        let c = 1.0 / 2f64.sqrt();
        assert!((out.vectors()[[0, 0]] - c).abs() < 1e-7);
        assert_eq!(out.vectors()[[0, 1]], 0.0);
    }

    #[test]
    fn softmax_weights_are_convex() {
        let cp = text(array![[1.0, 0.0], [0.0, 1.0]]);
        let out = cross_attend(
            &text(array![[1.0, 0.0]]),
            &cp,
            &Array2::eye(2),
            CrossAttentionWeights::Softmax { temperature: 1.0 },
        )
        .unwrap();
        let e = 1f64.exp();
        assert!((out.vectors()[[0, 0]] - e / (e + 1.0)).abs() < 1e-7);
        assert!((out.vectors().row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(cross_attend(&text(array![[1.0, 0.0]]), &text(array![[1.0]]), &Array2::eye(2), Default::default())
            .is_err());
    }
}
