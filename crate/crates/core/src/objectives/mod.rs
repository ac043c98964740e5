//! Training objectives: batch InfoNCE over global embeddings, the local
//! cross-entropy between intra-modal similarity targets and local/cross-attended
//! similarities, and their weighted total.

mod gradcheck;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{masked_softmax_rows, Tape, Var};
use crate::embeddings::{
    cosine_matrix_on_tape, pair_mask, pairwise_similarity, probability_map, GlobalEmbedding, LocalEmbeddings, ProbabilityAxis,
    ProbabilityMap, SimilarityMatrix,
};
use crate::error::{Error, Result};

/// Guard inside `ln(q + ε)` for the local cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Reduction {
    /// Double sum over all valid `(i, j)` entries.
    #[default]
    Sum,
    /// The double sum divided by the number of valid positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_g: f64,
    pub tau_l_src: f64,
    pub tau_l_tgt: f64,
    /// Weights of `[global img|txt, global txt|img, local image, local text]`.
    pub lambdas: [f64; 4],
    pub target_gradient_blocked: bool,
    pub reduction: Reduction,
    pub mask_self_similarity_diagonal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_g: 0.3,
            tau_l_src: 0.3,
            tau_l_tgt: 0.1,
            lambdas: [0.25, 0.75, 0.375, 0.375],
            target_gradient_blocked: true,
            reduction: Reduction::Sum,
            mask_self_similarity_diagonal: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, t) in [("tau_g", self.tau_g), ("tau_l_src", self.tau_l_src), ("tau_l_tgt", self.tau_l_tgt)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!("loss.{key}"), format!("temperature must be positive, got {t}")));
            }
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("loss.lambdas", "weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The four loss components and their weighted total for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub global_img_given_txt: f64,
    pub global_txt_given_img: f64,
    pub local_image: f64,
    pub local_text: f64,
    pub total: f64,
    pub batch_size: usize,
}

impl LossBundle {
    pub fn from_components(components: [f64; 4], lambdas: &[f64; 4], batch_size: usize) -> Result<Self> {
        let total = total_loss(components, lambdas)?;
        Ok(Self {
            global_img_given_txt: components[0],
            global_txt_given_img: components[1],
            local_image: components[2],
            local_text: components[3],
            total,
            batch_size,
        })
    }

    pub fn components(&self) -> [f64; 4] {
        [self.global_img_given_txt, self.global_txt_given_img, self.local_image, self.local_text]
    }
}

/// `λᵀ · components`.
pub fn total_loss(components: [f64; 4], lambdas: &[f64; 4]) -> Result<f64> {
    if components.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("loss components {components:?}")));
    }
    Ok(components.iter().zip(lambdas).map(|(c, l)| c * l).sum())
}

/// Batch InfoNCE on `B × D` global embeddings. Returns the image-given-text
/// (row-normalized) and text-given-image (column-normalized) losses, each
/// averaged over the batch.
pub fn global_contrastive_on_tape(tape: &mut Tape, img: Var, txt: Var, tau: f64) -> (Var, Var) {
    let b = tape.shape(img).0;
    let s = cosine_matrix_on_tape(tape, img, txt);
    let s = tape.scale(s, 1.0 / tau);
    let diag = Array2::eye(b) * (-1.0 / b as f64);
    let row = tape.log_softmax_rows(s);
    let l_it = tape.weighted_sum(row, diag.clone());
    let st = tape.transpose(s);
    let col = tape.log_softmax_rows(st);
    let l_ti = tape.weighted_sum(col, diag);
    (l_it, l_ti)
}

fn stack_globals(xs: &[GlobalEmbedding]) -> Result<Array2<f64>> {
    let d = xs[0].dim();
    if xs.iter().any(|x| x.dim() != d) {
        return Err(Error::DimensionMismatch("global embeddings of unequal dimension".into()));
    }
    let views: Vec<_> = xs.iter().map(|x| x.vector.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

pub fn global_contrastive_loss(img: &[GlobalEmbedding], txt: &[GlobalEmbedding], tau_g: f64) -> Result<(f64, f64)> {
    if img.is_empty() || img.len() != txt.len() {
        return Err(Error::InvalidInput(format!(
            "global contrast needs equal non-empty batches, got {} and {}",
            img.len(),
            txt.len()
        )));
    }
    if !(tau_g > 0.0) {
        return Err(Error::InvalidInput("tau_g must be positive".into()));
    }
    let (a, b) = (stack_globals(img)?, stack_globals(txt)?);
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch("image and text globals differ in dimension".into()));
    }
    let mut tape = Tape::new();
    let (ia, ib) = (tape.leaf(a), tape.leaf(b));
    let (it, ti) = global_contrastive_on_tape(&mut tape, ia, ib, tau_g);
    let (it, ti) = (tape.scalar_value(it), tape.scalar_value(ti));
    if !(it.is_finite() && ti.is_finite()) {
        return Err(Error::NonFinite("global contrastive loss".into()));
    }
    Ok((it, ti))
}

fn target_mask(mask: &[bool], mask_diagonal: bool) -> Array2<bool> {
    let mut m = pair_mask(mask, mask);
    if mask_diagonal {
        for i in 0..mask.len() {
            m[[i, i]] = false;
        }
    }
    m
}

/// Row and column targets from intra-modal similarity of `y` (`N × D_M`).
/// When `blocked`, the returned nodes are detached constants.
pub fn intra_modal_target_on_tape(
    tape: &mut Tape,
    y: Var,
    mask: &[bool],
    tau_tgt: f64,
    mask_diagonal: bool,
    blocked: bool,
) -> (Var, Var) {
    let s = cosine_matrix_on_tape(tape, y, y);
    let s = tape.scale(s, 1.0 / tau_tgt);
    let m = target_mask(mask, mask_diagonal);
    let p_row = tape.masked_softmax_rows(s, m.clone());
    let p_col = tape.masked_softmax_cols(s, m);
    if blocked {
        (tape.detach(p_row), tape.detach(p_col))
    } else {
        (p_row, p_col)
    }
}

pub fn intra_modal_target(y: &LocalEmbeddings, cfg: &LossConfig) -> Result<(ProbabilityMap, ProbabilityMap)> {
    let sim = pairwise_similarity(y, y)?;
    let diag = cfg.mask_self_similarity_diagonal;
    Ok((
        target_map(&sim, ProbabilityAxis::Row, cfg.tau_l_tgt, diag)?,
        target_map(&sim, ProbabilityAxis::Col, cfg.tau_l_tgt, diag)?,
    ))
}

fn target_map(sim: &SimilarityMatrix, axis: ProbabilityAxis, temperature: f64, mask_diagonal: bool) -> Result<ProbabilityMap> {
    if !mask_diagonal {
        return probability_map(sim, axis, temperature);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    let m = target_mask(&sim.row_mask, true);
    let scaled = &sim.values / temperature;
    let values = match axis {
        ProbabilityAxis::Row => masked_softmax_rows(&scaled, &m),
        ProbabilityAxis::Col => masked_softmax_rows(&scaled.t().to_owned(), &m.t().to_owned())
            .t()
            .as_standard_layout()
            .into_owned(),
    };
    Ok(ProbabilityMap { values, axis, temperature })
}

/// Cross-entropy between the targets and the softmax of
/// `sim(z, z_cross) / τ_src`, summed over rows and columns.
#[allow(clippy::too_many_arguments)]
pub fn local_contrastive_on_tape(
    tape: &mut Tape,
    z: Var,
    z_cross: Var,
    mask: &[bool],
    p_row: Var,
    p_col: Var,
    tau_src: f64,
    reduction: Reduction,
) -> Var {
    let s = cosine_matrix_on_tape(tape, z, z_cross);
    let s = tape.scale(s, 1.0 / tau_src);
    let m = pair_mask(mask, mask);
    let q_row = tape.masked_softmax_rows(s, m.clone());
    let q_col = tape.masked_softmax_cols(s, m);
    let lr = tape.log(q_row, LOG_EPS);
    let lc = tape.log(q_col, LOG_EPS);
    let a = tape.mul(p_row, lr);
    let b = tape.mul(p_col, lc);
    let a = tape.sum(a);
    let b = tape.sum(b);
    let total = tape.add_scalars(&[a, b]);
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / mask.iter().filter(|&&v| v).count().max(1) as f64,
    };
    tape.scale(total, scale)
}

pub fn local_contrastive_loss(
    z: &LocalEmbeddings,
    z_cross: &LocalEmbeddings,
    p_row: &ProbabilityMap,
    p_col: &ProbabilityMap,
    cfg: &LossConfig,
) -> Result<f64> {
    let n = z.len();
    if z_cross.len() != n || z.dim() != z_cross.dim() {
        return Err(Error::DimensionMismatch("local and cross-attended embeddings differ in shape".into()));
    }
    if p_row.values.dim() != (n, n) || p_col.values.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!("targets must be {n}x{n}")));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.vectors().clone());
    let cv = tape.leaf(z_cross.vectors().clone());
    let pr = tape.leaf(p_row.values.clone());
    let pc = tape.leaf(p_col.values.clone());
    let loss = local_contrastive_on_tape(&mut tape, zv, cv, z.mask(), pr, pc, cfg.tau_l_src, cfg.reduction);
    let v = tape.scalar_value(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("local contrastive loss".into()));
    }
    Ok(v)
}

/// `-Σ p ln p` over entries with `p > 0`.
pub fn entropy_sum(p: &Array2<f64>) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Modality;
    use ndarray::{array, Array1};

    fn globals(m: Modality, rows: &Array2<f64>) -> Vec<GlobalEmbedding> {
        rows.rows().into_iter().map(|r| GlobalEmbedding::new(m, r.to_owned()).unwrap()).collect()
    }

    #[test]
    fn single_sample_global_loss_is_zero() {
        let a = globals(Modality::Image, &array![[0.3, -1.0, 2.0]]);
        let b = globals(Modality::Text, &array![[5.0, 1.0, 0.0]]);
        assert_eq!(global_contrastive_loss(&a, &b, 0.3).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn identity_similarity_global_loss() {
        let e = Array2::eye(2);
        let (it, ti) =
            global_contrastive_loss(&globals(Modality::Image, &e), &globals(Modality::Text, &e), 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((expected - 0.31326).abs() < 1e-5);
        assert!((it - expected).abs() < 1e-6 && (ti - expected).abs() < 1e-6);
    }

    #[test]
    fn uniform_similarity_gives_ln_batch() {
        let rows = Array2::from_elem((4, 3), 1.0);
        let (it, ti) =
            global_contrastive_loss(&globals(Modality::Image, &rows), &globals(Modality::Text, &rows), 0.3).unwrap();
        assert!((it - 4f64.ln()).abs() < 1e-9 && (ti - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn global_loss_rejects_bad_batches() {
        let a = globals(Modality::Image, &array![[1.0, 0.0]]);
        assert!(global_contrastive_loss(&a, &[], 0.3).is_err());
        assert!(global_contrastive_loss(&[], &[], 0.3).is_err());
        let b = vec![GlobalEmbedding::new(Modality::Text, Array1::ones(3)).unwrap()];
        assert!(global_contrastive_loss(&a, &b, 0.3).is_err());
    }

    #[test]
    fn target_examples() {
        let cfg = LossConfig::default();
        let same = LocalEmbeddings::text(Array2::from_elem((3, 2), 0.7), vec![true; 3]).unwrap();
        let (row, col) = intra_modal_target(&same, &cfg).unwrap();
        assert!(row.values.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(col.values.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

        let one = LocalEmbeddings::text(array![[1.0, 2.0]], vec![true]).unwrap();
        assert_eq!(intra_modal_target(&one, &cfg).unwrap().0.values, array![[1.0]]);

        let ortho = LocalEmbeddings::text(Array2::eye(2), vec![true; 2]).unwrap();
        let (row, _) = intra_modal_target(&ortho, &cfg).unwrap();
        let e10 = 10f64.exp();
        assert!((row.values[[0, 0]] - e10 / (e10 + 1.0)).abs() < 1e-6);
        assert!((row.values[[0, 0]] - 0.999_954_6).abs() < 1e-7);
    }

    #[test]
    fn diagonal_masking_zeroes_self_weight() {
        let cfg = LossConfig { mask_self_similarity_diagonal: true, ..Default::default() };
        let y = LocalEmbeddings::text(array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]], vec![true; 3]).unwrap();
        let (row, col) = intra_modal_target(&y, &cfg).unwrap();
        for i in 0..3 {
            assert_eq!(row.values[[i, i]], 0.0);
            assert!((row.values.row(i).sum() - 1.0).abs() < 1e-12);
            assert!((col.values.column(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_local_loss_is_four_ln_two() {
        let cfg = LossConfig::default();
        let y = LocalEmbeddings::text(Array2::from_elem((2, 3), 1.0), vec![true; 2]).unwrap();
        let (pr, pc) = intra_modal_target(&y, &cfg).unwrap();
        let z = LocalEmbeddings::text(Array2::from_elem((2, 4), -0.5), vec![true; 2]).unwrap();
        let loss = local_contrastive_loss(&z, &z, &pr, &pc, &cfg).unwrap();
        assert!((loss - 4.0 * 2f64.ln()).abs() < 1e-6, "{loss}");
        assert!((4.0 * 2f64.ln() - 2.77259).abs() < 1e-5);

        let mean = LossConfig { reduction: Reduction::Mean, ..cfg };
        let l2 = local_contrastive_loss(&z, &z, &pr, &pc, &mean).unwrap();
        assert!((l2 - 2.0 * 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn local_loss_shape_errors() {
        let cfg = LossConfig::default();
        let y = LocalEmbeddings::text(Array2::eye(2), vec![true; 2]).unwrap();
        let (pr, pc) = intra_modal_target(&y, &cfg).unwrap();
        let z3 = LocalEmbeddings::text(Array2::eye(3), vec![true; 3]).unwrap();
        assert!(local_contrastive_loss(&z3, &z3, &pr, &pc, &cfg).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let l = LossConfig::default().lambdas;
        assert_eq!(total_loss([0.0; 4], &l).unwrap(), 0.0);
        assert!((total_loss([1.0; 4], &l).unwrap() - 1.75).abs() < 1e-15);
        assert_eq!(total_loss([1.0, 0.0, 0.0, 0.0], &[0.25, 9.0, 9.0, 9.0]).unwrap(), 0.25);
        assert!(total_loss([f64::NAN, 0.0, 0.0, 0.0], &l).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau_g: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambdas: [0.1, -1.0, 0.0, 0.0], ..Default::default() }.validate().is_err());
    }
}
