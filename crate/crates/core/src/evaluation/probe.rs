//! Linear probing: a single affine map from each frozen joint-space cell
//! embedding to a foreground logit, trained with binary cross-entropy on
//! grid-rasterized masks.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dice;
use crate::data::AlignedSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Linear;
use crate::training::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    /// Segment only boxes with this label; `None` segments every box.
    pub target_label: Option<String>,
    /// Share of a dataset (by id hash) held out for scoring.
    pub holdout_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 64,
            plateau_factor: 0.1,
            plateau_patience: 10,
            seed: 0,
            target_label: None,
            holdout_fraction: 0.2,
        }
    }
}

pub const PROBE_KEYS: &[&str] = &[
    "probe.learning_rate",
    "probe.epochs",
    "probe.batch_size",
    "probe.plateau_factor",
    "probe.plateau_patience",
    "probe.seed",
    "probe.target_label",
    "probe.holdout_fraction",
];

impl ProbeConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        use crate::config::{optional, value};
        match key {
            "probe.learning_rate" => self.learning_rate = value(key, raw)?,
            "probe.epochs" => self.epochs = value(key, raw)?,
            "probe.batch_size" => self.batch_size = value(key, raw)?,
            "probe.plateau_factor" => self.plateau_factor = value(key, raw)?,
            "probe.plateau_patience" => self.plateau_patience = value(key, raw)?,
            "probe.seed" => self.seed = value(key, raw)?,
            "probe.target_label" => self.target_label = optional(key, raw)?,
            "probe.holdout_fraction" => self.holdout_fraction = value(key, raw)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("probe.learning_rate", "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::config("probe.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("probe.batch_size", "must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("probe.plateau_factor", "must lie in (0, 1)"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config("probe.holdout_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub layer: Linear,
}

/// Frozen features and grid masks for a set of images.
#[derive(Debug, Clone)]
pub struct ProbeData {
    /// One `cells × D` matrix per image.
    pub features: Vec<Array2<f64>>,
    /// One `grid × grid` mask per image.
    pub masks: Vec<Array2<bool>>,
    pub image_size: (usize, usize),
}

impl ProbeData {
    /// Features come from the frozen image encoder and local projection;
    /// no gradient path to the model exists.
    pub fn from_samples(model: &Model, samples: &[&AlignedSample], target_label: Option<&str>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidInput("probe needs at least one image".into()))?;
        let image_size = (first.image.height(), first.image.width());
        let mut features = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for s in samples {
            let z = model.image_joint_locals(&s.image)?;
            let mask = s.finding_mask(target_label);
            if mask.len() != z.len() {
                return Err(Error::DimensionMismatch(format!(
                    "sample `{}`: {} mask cells for {} embeddings",
                    s.id,
                    mask.len(),
                    z.len()
                )));
            }
            features.push(z.into_vectors());
            masks.push(mask);
        }
        Ok(Self { features, masks, image_size })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary cross-entropy and its gradient for a batch of rows.
fn bce_and_grad(layer: &Linear, x: &Array2<f64>, y: &Array1<f64>) -> (f64, Vec<(String, Array2<f64>)>) {
    let logits = layer.apply(x).expect("probe input width").column(0).to_owned();
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut resid = Array1::zeros(y.len());
    for (i, (&l, &t)) in logits.iter().zip(y).enumerate() {
        // log(1 + e^l) - t·l, computed stably
        loss += l.max(0.0) + (-l.abs()).exp().ln_1p() - t * l;
        resid[i] = (sigmoid(l) - t) / n;
    }
    let gw = x.t().dot(&resid).insert_axis(Axis(1));
    let gb = Array2::from_elem((1, 1), resid.sum());
    (loss / n, vec![("weight".to_string(), gw), ("bias".to_string(), gb)])
}

/// Trains the probe with Adam and a reduce-on-plateau schedule on the
/// training loss. The model is only read.
pub fn linear_probe_train(model: &Model, samples: &[&AlignedSample], cfg: &ProbeConfig) -> Result<LinearProbe> {
    let data = ProbeData::from_samples(model, samples, cfg.target_label.as_deref())?;
    train_on_data(&data, cfg)
}

pub fn train_on_data(data: &ProbeData, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    let dim = data.features[0].ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layer = Linear::init(&mut rng, dim, 1, true);
    let mut adam = Adam::new(&layer);
    let mut lr = cfg.learning_rate;
    let (mut best, mut bad) = (f64::INFINITY, 0usize);
    let n = data.features.len();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<_> = chunk.iter().map(|&i| data.features[i].view()).collect();
            let x = concatenate(Axis(0), &xs).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
            let y: Array1<f64> =
                chunk.iter().flat_map(|&i| data.masks[i].iter().map(|&m| if m { 1.0 } else { 0.0 })).collect();
            let (loss, grads) = bce_and_grad(&layer, &x, &y);
            if !loss.is_finite() {
                return Err(Error::NonFinite("probe loss".into()));
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.update(&mut layer, &grads, lr)?;
        }
        epoch_loss /= n as f64;
        if epoch_loss < best {
            best = epoch_loss;
            bad = 0;
        } else {
            bad += 1;
            if bad > cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                bad = 0;
            }
        }
    }
    Ok(LinearProbe { layer })
}

impl LinearProbe {
    /// Foreground prediction per grid cell (`logit > 0`).
    pub fn predict_grid(&self, features: &Array2<f64>, grid: (usize, usize)) -> Result<Array2<bool>> {
        let logits = self.layer.apply(features)?;
        if logits.nrows() != grid.0 * grid.1 {
            return Err(Error::DimensionMismatch("probe features do not match grid".into()));
        }
        Ok(Array2::from_shape_fn(grid, |(r, c)| logits[[r * grid.1 + c, 0]] > 0.0))
    }
}

/// Nearest-neighbour upsampling of a grid mask to `size` pixels.
pub fn upsample_mask(mask: &Array2<bool>, size: (usize, usize)) -> Array2<bool> {
    let (g0, g1) = mask.dim();
    Array2::from_shape_fn(size, |(y, x)| mask[[y * g0 / size.0, x * g1 / size.1]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEvaluation {
    pub mean_dice: f64,
    pub per_image: Vec<f64>,
}

/// Mean per-image Dice at image resolution.
pub fn evaluate_probe(probe: &LinearProbe, data: &ProbeData) -> Result<ProbeEvaluation> {
    let mut per_image = Vec::with_capacity(data.features.len());
    for (f, m) in data.features.iter().zip(&data.masks) {
        let pred = probe.predict_grid(f, m.dim())?;
        let d = dice(&upsample_mask(&pred, data.image_size), &upsample_mask(m, data.image_size))?;
        per_image.push(d);
    }
    let mean_dice = per_image.iter().sum::<f64>() / per_image.len().max(1) as f64;
    Ok(ProbeEvaluation { mean_dice, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gradient_matches_finite_difference() {
        let layer = Linear { weight: array![[0.3], [-0.2]], bias: Some(array![[0.1]]) };
        let x = array![[1.0, 2.0], [-0.5, 0.25], [0.0, 1.0]];
        let y = array![1.0, 0.0, 1.0];
        let (_, g) = bce_and_grad(&layer, &x, &y);
        let h = 1e-6;
        for k in 0..2 {
            let mut p = layer.clone();
            p.weight[[k, 0]] += h;
            let mut m = layer.clone();
            m.weight[[k, 0]] -= h;
            let fd = (bce_and_grad(&p, &x, &y).0 - bce_and_grad(&m, &x, &y).0) / (2.0 * h);
            assert!((fd - g[0].1[[k, 0]]).abs() < 1e-8);
        }
    }

    #[test]
    fn all_background_labels_give_empty_predictions() {
        let features = (0..4).map(|i| Array2::from_shape_fn((4, 3), |(r, c)| ((r + c + i) % 3) as f64)).collect();
        let masks = vec![Array2::from_elem((2, 2), false); 4];
        let data = ProbeData { features, masks, image_size: (4, 4) };
        let probe = train_on_data(&data, &ProbeConfig { epochs: 100, ..Default::default() }).unwrap();
        let eval = evaluate_probe(&probe, &data).unwrap();
        assert_eq!(eval.mean_dice, 1.0);
    }

    #[test]
    fn nearest_upsampling_repeats_cells() {
        let m = array![[true, false], [false, true]];
        let up = upsample_mask(&m, (4, 4));
        assert!(up[[1, 1]] && !up[[1, 2]] && up[[3, 3]] && !up[[2, 0]]);
    }
}
