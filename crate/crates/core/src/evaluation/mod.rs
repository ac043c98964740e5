//! Phrase grounding (contrast-to-noise ratio of similarity maps), Dice
//! scored linear probing, similarity-structure correlation and heatmap
//! export.

mod grounding;
mod heatmap;
mod probe;

pub use grounding::{
    build_grounding_cases, grounding_report, GroundingCase, GroundingReport, ReportRow, Exclusion,
};
pub use heatmap::{export_heatmap, read_heatmap_csv, HeatmapOptions, HeatmapSidecar};
pub use probe::{
    evaluate_probe, linear_probe_train, train_on_data, upsample_mask, LinearProbe, ProbeConfig, PROBE_KEYS, ProbeData, ProbeEvaluation,
};

use ndarray::Array2;

use crate::data::GridBox;
use crate::embeddings::{pairwise_similarity_matrix, LocalEmbeddings, SimilarityMatrix};
use crate::error::{Error, Result};

/// Guard added to the CNR denominator.
pub const CNR_EPS: f64 = 1e-8;

/// Cosine similarity of `query` with every image cell, shaped to the grid.
pub fn similarity_map(query: &[f64], image_locals: &LocalEmbeddings) -> Result<SimilarityMatrix> {
    let (rows, cols) = image_locals
        .grid_shape()
        .ok_or_else(|| Error::InvalidInput("similarity map needs image locals with a grid shape".into()))?;
    if query.len() != image_locals.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} entries, image locals have {}",
            query.len(),
            image_locals.dim()
        )));
    }
    let q = Array2::from_shape_vec((1, query.len()), query.to_vec()).expect("row vector");
    let sims = pairwise_similarity_matrix(image_locals.vectors(), &q)?;
    let values = Array2::from_shape_fn((rows, cols), |(r, c)| sims[[r * cols + c, 0]]);
    Ok(SimilarityMatrix::unmasked(values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnrResult {
    pub non_absolute: f64,
    pub absolute: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub mu_in: f64,
    pub mu_out: f64,
    pub var_in: f64,
    pub var_out: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

/// CNR from explicit interior and exterior values (population variances).
pub fn cnr_from_values(inside: &[f64], outside: &[f64]) -> Result<CnrResult> {
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::InvalidInput(format!(
            "CNR needs interior and exterior cells, got {} and {}",
            inside.len(),
            outside.len()
        )));
    }
    let (mu_in, var_in) = mean_var(inside);
    let (mu_out, var_out) = mean_var(outside);
    let non_absolute = (mu_in - mu_out) / ((var_in + var_out).sqrt() + CNR_EPS);
    if !non_absolute.is_finite() {
        return Err(Error::NonFinite("CNR".into()));
    }
    Ok(CnrResult {
        non_absolute,
        absolute: non_absolute.abs(),
        n_in: inside.len(),
        n_out: outside.len(),
        mu_in,
        mu_out,
        var_in,
        var_out,
    })
}

/// A cell is interior when its centre lies inside any box.
pub fn cnr(map: &SimilarityMatrix, boxes: &[GridBox]) -> Result<CnrResult> {
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for ((r, c), v) in map.values.indexed_iter() {
        if !(map.row_mask[r] && map.col_mask[c]) {
            continue;
        }
        if boxes.iter().any(|b| b.contains_center(r, c)) {
            inside.push(*v);
        } else {
            outside.push(*v);
        }
    }
    cnr_from_values(&inside, &outside)
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::DimensionMismatch(format!("masks {:?} and {:?}", pred.dim(), gt.dim())));
    }
    let a = pred.iter().filter(|&&v| v).count();
    let b = gt.iter().filter(|&&v| v).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    let both = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Mean and half-width of the normal 95% interval, `1.96·sd/√n` with the
/// sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput("pearson needs two equal-length series of at least 2 values".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Pearson correlation between the strict upper triangles of the pairwise
/// similarity matrices of `before` and `after` (valid positions only).
pub fn similarity_structure_correlation(before: &LocalEmbeddings, after: &LocalEmbeddings) -> Result<f64> {
    if before.len() != after.len() || before.mask() != after.mask() {
        return Err(Error::DimensionMismatch("embeddings describe different positions".into()));
    }
    let sa = pairwise_similarity_matrix(before.vectors(), before.vectors())?;
    let sb = pairwise_similarity_matrix(after.vectors(), after.vectors())?;
    let valid: Vec<usize> = (0..before.len()).filter(|&i| before.mask()[i]).collect();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (k, &i) in valid.iter().enumerate() {
        for &j in &valid[k + 1..] {
            xa.push(sa[[i, j]]);
            xb.push(sb[[i, j]]);
        }
    }
    pearson(&xa, &xb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cnr_hand_case() {
        let r = cnr_from_values(&[0.8, 0.6], &[0.2, 0.4]).unwrap();
        assert!((r.non_absolute - 2.828_427).abs() < 1e-5, "{r:?}");
        assert_eq!(r.absolute, r.non_absolute);
        let rev = cnr_from_values(&[0.2, 0.4], &[0.8, 0.6]).unwrap();
        assert!((rev.non_absolute + 2.828_427).abs() < 1e-5);
        assert_eq!(rev.absolute, -rev.non_absolute);
    }

    #[test]
    fn cnr_degenerate_cases() {
        assert_eq!(cnr_from_values(&[0.5, 0.5], &[0.5]).unwrap().non_absolute, 0.0);
        let r = cnr_from_values(&[0.1], &[0.9]).unwrap();
        assert!(r.non_absolute < -1e6 && r.absolute == -r.non_absolute);
        assert!(cnr_from_values(&[], &[1.0]).is_err());
    }

    #[test]
    fn cnr_uses_cell_centres() {
        let map = SimilarityMatrix::unmasked(array![[0.8, 0.2], [0.6, 0.4]]);
        let b = GridBox { row0: 0, col0: 0, row1: 2, col1: 1, label: "x".into() };
        let r = cnr(&map, &[b]).unwrap();
        assert_eq!((r.n_in, r.n_out), (2, 2));
        assert!((r.non_absolute - 2.828_427).abs() < 1e-5);
        let whole = GridBox { row0: 0, col0: 0, row1: 2, col1: 2, label: "x".into() };
        assert!(cnr(&map, &[whole]).is_err());
    }

    #[test]
    fn similarity_map_examples() {
        let locals = LocalEmbeddings::image(Array2::eye(4), (2, 2)).unwrap();
        let m = similarity_map(&[0.0, 0.0, 1.0, 0.0], &locals).unwrap();
        assert!((m.values[[1, 0]] - 1.0).abs() < 1e-7);
        assert!(m.values.iter().filter(|v| v.abs() < 1e-12).count() == 3);
        let z = similarity_map(&[0.0; 4], &locals).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(similarity_map(&[1.0], &locals).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = array![[true, true], [true, true]];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let e = Array2::from_elem((2, 2), false);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        let x = array![[true, true, true, true, false, false]];
        let y = array![[false, false, true, true, true, true]];
        assert_eq!(dice(&x, &y).unwrap(), 0.5);
        assert!(dice(&x, &a).is_err());
    }

    #[test]
    fn ci_of_constant_series_is_zero() {
        assert_eq!(mean_ci95(&[0.4, 0.4, 0.4, 0.4]), (0.4, 0.0));
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((h - 1.96 * (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn structure_correlation_of_identity_map_is_one() {
        let y = LocalEmbeddings::image(array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [0.2, 0.9]], (2, 2)).unwrap();
        assert!((similarity_structure_correlation(&y, &y).unwrap() - 1.0).abs() < 1e-12);
    }
}
