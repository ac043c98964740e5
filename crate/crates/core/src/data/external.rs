//! Precomputed local features from external backbones, stored next to a
//! manifest as `features/<id>.img.f32` (`N_I × D_I`, with `N_I` a perfect
//! square) and `features/<id>.txt.f32` (`N_T × D_T`, one row per sentence).

use std::path::Path;

use super::io::{decode_matrix, read_checked, read_manifest};
use crate::embeddings::LocalEmbeddings;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPair {
    pub id: String,
    pub image: LocalEmbeddings,
    pub text: LocalEmbeddings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFeatures {
    pub pairs: Vec<ExternalPair>,
    pub image_dim: usize,
    pub text_dim: usize,
    pub grid: usize,
}

pub fn load_external_features(dir: &Path) -> Result<ExternalFeatures> {
    let manifest = read_manifest(dir)?;
    if manifest.samples.is_empty() {
        return Err(Error::Dataset("manifest lists no samples".into()));
    }
    let mut pairs = Vec::with_capacity(manifest.samples.len());
    let mut dims: Option<(usize, usize, usize)> = None;
    for entry in &manifest.samples {
        let id = entry.id.as_str();
        let load = |suffix: &str| -> Result<ndarray::Array2<f64>> {
            let rel = format!("features/{id}.{suffix}.f32");
            if !dir.join(&rel).exists() {
                return Err(Error::Dataset(format!("sample `{id}`: missing pair member {rel}")));
            }
            let bytes = read_checked(dir, id, &rel, &entry.files)?;
            decode_matrix(&bytes).map_err(|e| e.context(format!("sample `{id}` {rel}")))
        };
        let img = load("img")?;
        let txt = load("txt")?;
        let n = img.nrows();
        let grid = (n as f64).sqrt().round() as usize;
        if n == 0 || grid * grid != n {
            return Err(Error::Dataset(format!("sample `{id}`: {n} image cells do not form a square grid")));
        }
        if txt.nrows() == 0 {
            return Err(Error::Dataset(format!("sample `{id}`: report features hold 0 sentences")));
        }
        let these = (grid, img.ncols(), txt.ncols());
        match dims {
            None => dims = Some(these),
            Some(expected) if expected != these => {
                return Err(Error::Dataset(format!(
                    "sample `{id}`: (grid, D_I, D_T) = {these:?} differs from {expected:?} of earlier samples"
                )))
            }
            Some(_) => {}
        }
        let image = LocalEmbeddings::image(img, (grid, grid)).map_err(|e| e.context(format!("sample `{id}`")))?;
        let mask = vec![true; txt.nrows()];
        let text = LocalEmbeddings::text(txt, mask).map_err(|e| e.context(format!("sample `{id}`")))?;
        pairs.push(ExternalPair { id: id.to_string(), image, text });
    }
    let (grid, image_dim, text_dim) = dims.expect("at least one sample");
    Ok(ExternalFeatures { pairs, image_dim, text_dim, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::{atomic_write, encode_matrix};
    use ndarray::Array2;

    fn fixture(dir: &Path, items: &[(&str, (usize, usize), (usize, usize))]) {
        let samples: Vec<String> = items.iter().map(|(id, _, _)| format!(r#"{{"id": "{id}"}}"#)).collect();
        let manifest = format!(r#"{{"format_version": 1, "max_sentences": 8, "samples": [{}]}}"#, samples.join(","));
        atomic_write(&dir.join("manifest.json"), manifest.as_bytes()).unwrap();
        for (id, img, txt) in items {
            let m = |shape: (usize, usize)| Array2::from_shape_fn(shape, |(i, j)| (i + 2 * j) as f64 * 0.25);
            atomic_write(&dir.join(format!("features/{id}.img.f32")), &encode_matrix(&m(*img))).unwrap();
            atomic_write(&dir.join(format!("features/{id}.txt.f32")), &encode_matrix(&m(*txt))).unwrap();
        }
    }

    #[test]
    fn minimal_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("a", (49, 5), (3, 4))]);
        let f = load_external_features(dir.path()).unwrap();
        assert_eq!(f.grid, 7);
        assert_eq!(f.pairs[0].image.len(), 49);
        assert_eq!(f.pairs[0].text.len(), 3);
        assert_eq!(f.pairs[0].image.vectors()[[3, 2]], 3.0 * 0.25 + 4.0 * 0.25);
    }

    #[test]
    fn mismatched_image_dim_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("a", (49, 5), (3, 4)), ("b", (49, 6), (3, 4))]);
        let err = load_external_features(dir.path()).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("a", (49, 5), (0, 4))]);
        assert!(load_external_features(dir.path()).is_err());
    }

    #[test]
    fn missing_member_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("a", (4, 5), (2, 4))]);
        std::fs::remove_file(dir.path().join("features/a.txt.f32")).unwrap();
        let err = load_external_features(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing pair member"), "{err}");
    }
}
