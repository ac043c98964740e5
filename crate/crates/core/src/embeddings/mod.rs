//! Embedding types and the operations that map between them: cosine
//! similarity, attention pooling, projection into the joint space and
//! cosine-weighted cross-attention.

mod cross_attention;
mod pooling;
mod projection;
mod similarity;

pub use cross_attention::{cross_attend, cross_attend_on_tape, CrossAttentionWeights};
pub use pooling::{attention_pool, AttentionPool, AttentionPoolVars};
pub use projection::{project_global, project_local, ProjectionHead, ProjectionHeadVars};
pub use similarity::{
    cosine_matrix_on_tape, cosine_similarity, pairwise_similarity, pairwise_similarity_matrix,
    probability_map, ProbabilityAxis, ProbabilityMap, SimilarityMatrix,
};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to every vector norm before dividing, so zero vectors give
/// similarity 0 instead of NaN.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// `N × D` local vectors (grid cells or sentences) with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEmbeddings {
    modality: Modality,
    vectors: Array2<f64>,
    mask: Vec<bool>,
    grid_shape: Option<(usize, usize)>,
}

impl LocalEmbeddings {
    /// Image locals laid out row-major over a `rows × cols` grid; no padding.
    pub fn image(vectors: Array2<f64>, grid_shape: (usize, usize)) -> Result<Self> {
        let n = vectors.nrows();
        if grid_shape.0 * grid_shape.1 != n {
            return Err(Error::InvalidInput(format!(
                "grid {}x{} does not match {n} image locals",
                grid_shape.0, grid_shape.1
            )));
        }
        Self::new(Modality::Image, vectors, vec![true; n], Some(grid_shape))
    }

    pub fn text(vectors: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        Self::new(Modality::Text, vectors, mask, None)
    }

    pub fn new(
        modality: Modality,
        vectors: Array2<f64>,
        mask: Vec<bool>,
        grid_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        let (n, d) = vectors.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(format!("local embeddings must be non-empty, got {n}x{d}")));
        }
        if mask.len() != n {
            return Err(Error::DimensionMismatch(format!("mask length {} for {n} locals", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("all local positions are masked".into()));
        }
        if let Some((r, c)) = grid_shape {
            if r * c != mask.iter().filter(|&&m| m).count() || mask.iter().any(|&m| !m) {
                return Err(Error::InvalidInput("image grids must be fully valid with rows*cols locals".into()));
            }
        }
        if modality == Modality::Image && grid_shape.is_none() {
            return Err(Error::InvalidInput("image locals need a grid shape".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("local embedding entry".into()));
        }
        Ok(Self { modality, vectors, mask, grid_shape })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grid_shape
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same layout and mask, new vectors (e.g. after projection).
    pub fn with_vectors(&self, vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "replacement has {} rows, expected {}",
                vectors.nrows(),
                self.len()
            )));
        }
        Self::new(self.modality, vectors, self.mask.clone(), self.grid_shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub modality: Modality,
    pub vector: Array1<f64>,
}

impl GlobalEmbedding {
    pub fn new(modality: Modality, vector: Array1<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidInput("global embedding has dimension 0".into()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("global embedding entry".into()));
        }
        Ok(Self { modality, vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// The vector as a `1 × D` row.
    pub fn as_row(&self) -> Array2<f64> {
        self.vector.clone().insert_axis(ndarray::Axis(0))
    }
}

/// Outer product of two validity masks.
pub fn pair_mask(rows: &[bool], cols: &[bool]) -> Array2<bool> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| rows[i] && cols[j])
}

/// Row vector of weights `1/valid` on valid entries, for masked means.
pub(crate) fn masked_mean_weights(mask: &[bool]) -> Array2<f64> {
    let valid = mask.iter().filter(|&&m| m).count().max(1) as f64;
    Array2::from_shape_fn((1, mask.len()), |(_, j)| if mask[j] { 1.0 / valid } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn image_locals_reject_bad_grid() {
        let v = Array2::zeros((4, 2));
        assert!(LocalEmbeddings::image(v.clone(), (2, 2)).is_ok());
        assert!(LocalEmbeddings::image(v, (3, 2)).is_err());
    }

    #[test]
    fn rejects_all_masked_and_nonfinite() {
        let v = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(LocalEmbeddings::text(v.clone(), vec![false, false]).is_err());
        assert!(LocalEmbeddings::text(v.clone(), vec![true]).is_err());
        let mut bad = v;
        bad[[1, 1]] = f64::NAN;
        assert!(LocalEmbeddings::text(bad, vec![true, true]).is_err());
        assert!(GlobalEmbedding::new(Modality::Text, Array1::zeros(0)).is_err());
    }

    #[test]
    fn masked_mean_weights_sum_to_one() {
        let w = masked_mean_weights(&[true, false, true]);
        assert_eq!(w, array![[0.5, 0.0, 0.5]]);
    }
}
