use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{pair_mask, LocalEmbeddings, NORM_EPS};
use crate::autograd::{masked_softmax_rows, Tape, Var};
use crate::error::{Error, Result};

/// `aᵀb / ((‖a‖ + ε)(‖b‖ + ε))`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine similarity of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn normalized_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt() + NORM_EPS;
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn pairwise_similarity_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "pairwise similarity of {}-dim and {}-dim rows",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(normalized_rows(a).dot(&normalized_rows(b).t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Differentiable cosine matrix (no clamping).
pub fn cosine_matrix_on_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let na = tape.normalize_rows(a, NORM_EPS);
    let nb = tape.normalize_rows(b, NORM_EPS);
    let nbt = tape.transpose(nb);
    tape.matmul(na, nbt)
}

/// Cosine similarities with the validity masks of both sides. Entries in a
/// masked row or column hold the sentinel 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub row_mask: Vec<bool>,
    pub col_mask: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>, row_mask: Vec<bool>, col_mask: Vec<bool>) -> Result<Self> {
        if values.nrows() != row_mask.len() || values.ncols() != col_mask.len() {
            return Err(Error::DimensionMismatch("similarity masks do not match values".into()));
        }
        let mut values = values;
        for ((i, j), v) in values.indexed_iter_mut() {
            if !(row_mask[i] && col_mask[j]) {
                *v = 0.0;
            }
        }
        Ok(Self { values, row_mask, col_mask })
    }

    pub fn unmasked(values: Array2<f64>) -> Self {
        let (r, c) = values.dim();
        Self { values, row_mask: vec![true; r], col_mask: vec![true; c] }
    }

    pub fn mask(&self) -> Array2<bool> {
        pair_mask(&self.row_mask, &self.col_mask)
    }

    pub fn transpose(&self) -> Self {
        Self {
            values: self.values.t().as_standard_layout().into_owned(),
            row_mask: self.col_mask.clone(),
            col_mask: self.row_mask.clone(),
        }
    }
}

pub fn pairwise_similarity(a: &LocalEmbeddings, b: &LocalEmbeddings) -> Result<SimilarityMatrix> {
    let values = pairwise_similarity_matrix(a.vectors(), b.vectors())?;
    SimilarityMatrix::new(values, a.mask().to_vec(), b.mask().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbabilityAxis {
    Row,
    Col,
}

/// Temperature softmax of a similarity matrix along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub values: Array2<f64>,
    pub axis: ProbabilityAxis,
    pub temperature: f64,
}

/// Softmax of `sim / temperature` along `axis`, over valid entries only.
pub fn probability_map(sim: &SimilarityMatrix, axis: ProbabilityAxis, temperature: f64) -> Result<ProbabilityMap> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    let scaled = &sim.values / temperature;
    let mask = sim.mask();
    let values = match axis {
        ProbabilityAxis::Row => masked_softmax_rows(&scaled, &mask),
        ProbabilityAxis::Col => {
            let t = masked_softmax_rows(&scaled.t().to_owned(), &mask.t().to_owned());
            t.t().as_standard_layout().into_owned()
        }
    };
    Ok(ProbabilityMap { values, axis, temperature })
}
