use serde::{Deserialize, Serialize};

use crate::config::{boolean, format_range, list, optional, range, value};
use crate::embeddings::CrossAttentionWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossConfig, Reduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation_degrees: (f64, f64),
    pub scaling: (f64, f64),
    /// Multiplicative brightness and contrast factors.
    pub color_jitter: (f64, f64),
    pub horizontal_flip_prob: f64,
    /// Fraction of the image area kept by the random crop.
    pub random_crop_scale: (f64, f64),
    pub gaussian_blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_degrees: (-20.0, 20.0),
            scaling: (0.95, 1.05),
            color_jitter: (0.6, 1.4),
            horizontal_flip_prob: 0.5,
            random_crop_scale: (0.6, 1.0),
            gaussian_blur_sigma: (0.1, 3.0),
        }
    }
}

impl AugmentConfig {
    /// Every transform collapsed to its identity value.
    pub fn identity() -> Self {
        Self {
            enabled: true,
            rotation_degrees: (0.0, 0.0),
            scaling: (1.0, 1.0),
            color_jitter: (1.0, 1.0),
            horizontal_flip_prob: 0.0,
            random_crop_scale: (1.0, 1.0),
            gaussian_blur_sigma: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |key: &str, r: (f64, f64)| {
            if r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 {
                Ok(())
            } else {
                Err(Error::config(format!("augment.{key}"), format!("range {r:?} is not ordered")))
            }
        };
        ordered("rotation_degrees", self.rotation_degrees)?;
        ordered("scaling", self.scaling)?;
        ordered("color_jitter", self.color_jitter)?;
        ordered("random_crop_scale", self.random_crop_scale)?;
        ordered("gaussian_blur_sigma", self.gaussian_blur_sigma)?;
        if self.scaling.0 <= 0.0 {
            return Err(Error::config("augment.scaling", "factors must be positive"));
        }
        if self.color_jitter.0 < 0.0 {
            return Err(Error::config("augment.color_jitter", "factors must be non-negative"));
        }
        if !(self.random_crop_scale.0 > 0.0 && self.random_crop_scale.1 <= 1.0) {
            return Err(Error::config("augment.random_crop_scale", "must lie in (0, 1]"));
        }
        if self.gaussian_blur_sigma.0 < 0.0 {
            return Err(Error::config("augment.gaussian_blur_sigma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::config("augment.horizontal_flip_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Plateau,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: ScheduleKind,
    /// Epochs at which the step schedule multiplies the rate by `step_gamma`.
    pub step_milestones: Vec<usize>,
    pub step_gamma: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    /// Micro-batches whose gradients are averaged into one update.
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    /// Held out by id hash when early stopping is enabled.
    pub validation_fraction: f64,
    pub augmentation: AugmentConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            schedule: ScheduleKind::Cosine,
            step_milestones: vec![30, 40],
            step_gamma: 0.1,
            plateau_factor: 0.1,
            plateau_patience: 10,
            batch_size: 32,
            grad_accum_steps: 1,
            seed: 0,
            early_stop_patience: None,
            validation_fraction: 0.1,
            augmentation: AugmentConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "train.epochs",
    "train.learning_rate",
    "train.schedule",
    "train.step_milestones",
    "train.step_gamma",
    "train.plateau_factor",
    "train.plateau_patience",
    "train.batch_size",
    "train.grad_accum_steps",
    "train.seed",
    "train.early_stop_patience",
    "train.validation_fraction",
    "augment.enabled",
    "augment.rotation_degrees",
    "augment.scaling",
    "augment.color_jitter",
    "augment.horizontal_flip_prob",
    "augment.random_crop_scale",
    "augment.gaussian_blur_sigma",
    "loss.tau_g",
    "loss.tau_l_src",
    "loss.tau_l_tgt",
    "loss.lambdas",
    "loss.target_gradient_blocked",
    "loss.reduction",
    "loss.mask_self_similarity_diagonal",
    "model.grid",
    "model.channels",
    "model.hash_buckets",
    "model.max_sentences",
    "model.hidden",
    "model.image_dim",
    "model.text_dim",
    "model.joint_dim",
    "model.cross_attention",
];

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let a = &mut self.augmentation;
        let l = &mut self.loss;
        let m = &mut self.model;
        match key {
            "train.epochs" => self.epochs = value(key, raw)?,
            "train.learning_rate" => self.learning_rate = value(key, raw)?,
            "train.schedule" => {
                self.schedule = match raw.trim().to_ascii_lowercase().as_str() {
                    "cosine" => ScheduleKind::Cosine,
                    "plateau" => ScheduleKind::Plateau,
                    "step" => ScheduleKind::Step,
                    _ => return Err(Error::config(key, format!("unknown schedule `{raw}` (cosine, plateau, step)"))),
                }
            }
            "train.step_milestones" => self.step_milestones = list(key, raw)?,
            "train.step_gamma" => self.step_gamma = value(key, raw)?,
            "train.plateau_factor" => self.plateau_factor = value(key, raw)?,
            "train.plateau_patience" => self.plateau_patience = value(key, raw)?,
            "train.batch_size" => self.batch_size = value(key, raw)?,
            "train.grad_accum_steps" => self.grad_accum_steps = value(key, raw)?,
            "train.seed" => self.seed = value(key, raw)?,
            "train.early_stop_patience" => self.early_stop_patience = optional(key, raw)?,
            "train.validation_fraction" => self.validation_fraction = value(key, raw)?,
            "augment.enabled" => a.enabled = boolean(key, raw)?,
            "augment.rotation_degrees" => a.rotation_degrees = range(key, raw)?,
            "augment.scaling" => a.scaling = range(key, raw)?,
            "augment.color_jitter" => a.color_jitter = range(key, raw)?,
            "augment.horizontal_flip_prob" => a.horizontal_flip_prob = value(key, raw)?,
            "augment.random_crop_scale" => a.random_crop_scale = range(key, raw)?,
            "augment.gaussian_blur_sigma" => a.gaussian_blur_sigma = range(key, raw)?,
            "loss.tau_g" => l.tau_g = value(key, raw)?,
            "loss.tau_l_src" => l.tau_l_src = value(key, raw)?,
            "loss.tau_l_tgt" => l.tau_l_tgt = value(key, raw)?,
            "loss.lambdas" => {
                let v: Vec<f64> = list(key, raw)?;
                l.lambdas = v.try_into().map_err(|_| Error::config(key, "expected four weights"))?;
            }
            "loss.target_gradient_blocked" => l.target_gradient_blocked = boolean(key, raw)?,
            "loss.reduction" => {
                l.reduction = match raw.trim().to_ascii_lowercase().as_str() {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(Error::config(key, format!("unknown reduction `{raw}` (sum, mean)"))),
                }
            }
            "loss.mask_self_similarity_diagonal" => l.mask_self_similarity_diagonal = boolean(key, raw)?,
            "model.grid" => m.grid = value(key, raw)?,
            "model.channels" => m.channels = value(key, raw)?,
            "model.hash_buckets" => m.hash_buckets = value(key, raw)?,
            "model.max_sentences" => m.max_sentences = value(key, raw)?,
            "model.hidden" => m.hidden = value(key, raw)?,
            "model.image_dim" => m.image_dim = value(key, raw)?,
            "model.text_dim" => m.text_dim = value(key, raw)?,
            "model.joint_dim" => m.joint_dim = value(key, raw)?,
            "model.cross_attention" => m.cross_attention = parse_cross_attention(key, raw)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies settings in order; later keys win.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::config("train.grad_accum_steps", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("train.validation_fraction", "must lie in [0, 1)"));
        }
        if !(self.step_gamma > 0.0) {
            return Err(Error::config("train.step_gamma", "must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("train.plateau_factor", "must lie in (0, 1)"));
        }
        self.augmentation.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// The configuration as flat key/value lines, parseable by [`Self::set`].
    pub fn to_flat(&self) -> String {
        let a = &self.augmentation;
        let l = &self.loss;
        let m = &self.model;
        let join = |v: &[String]| v.join(", ");
        let lines = [
            ("train.epochs", self.epochs.to_string()),
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.schedule", format!("{:?}", self.schedule).to_lowercase()),
            ("train.step_milestones", join(&self.step_milestones.iter().map(|v| v.to_string()).collect::<Vec<_>>())),
            ("train.step_gamma", self.step_gamma.to_string()),
            ("train.plateau_factor", self.plateau_factor.to_string()),
            ("train.plateau_patience", self.plateau_patience.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.grad_accum_steps", self.grad_accum_steps.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.early_stop_patience", self.early_stop_patience.map_or("none".into(), |p| p.to_string())),
            ("train.validation_fraction", self.validation_fraction.to_string()),
            ("augment.enabled", a.enabled.to_string()),
            ("augment.rotation_degrees", format_range(a.rotation_degrees)),
            ("augment.scaling", format_range(a.scaling)),
            ("augment.color_jitter", format_range(a.color_jitter)),
            ("augment.horizontal_flip_prob", a.horizontal_flip_prob.to_string()),
            ("augment.random_crop_scale", format_range(a.random_crop_scale)),
            ("augment.gaussian_blur_sigma", format_range(a.gaussian_blur_sigma)),
            ("loss.tau_g", l.tau_g.to_string()),
            ("loss.tau_l_src", l.tau_l_src.to_string()),
            ("loss.tau_l_tgt", l.tau_l_tgt.to_string()),
            ("loss.lambdas", join(&l.lambdas.iter().map(|v| v.to_string()).collect::<Vec<_>>())),
            ("loss.target_gradient_blocked", l.target_gradient_blocked.to_string()),
            ("loss.reduction", format!("{:?}", l.reduction).to_lowercase()),
            ("loss.mask_self_similarity_diagonal", l.mask_self_similarity_diagonal.to_string()),
            ("model.grid", m.grid.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.hash_buckets", m.hash_buckets.to_string()),
            ("model.max_sentences", m.max_sentences.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.image_dim", m.image_dim.to_string()),
            ("model.text_dim", m.text_dim.to_string()),
            ("model.joint_dim", m.joint_dim.to_string()),
            ("model.cross_attention", format_cross_attention(m.cross_attention)),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::data::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// `cosine` or `softmax:<temperature>`.
pub fn parse_cross_attention(key: &str, raw: &str) -> Result<CrossAttentionWeights> {
    let raw = raw.trim().to_ascii_lowercase();
    if raw == "cosine" {
        return Ok(CrossAttentionWeights::Cosine);
    }
    if let Some(t) = raw.strip_prefix("softmax:") {
        let temperature: f64 = value(key, t)?;
        if temperature > 0.0 {
            return Ok(CrossAttentionWeights::Softmax { temperature });
        }
    }
    Err(Error::config(key, format!("expected `cosine` or `softmax:<temperature>`, got `{raw}`")))
}

pub fn format_cross_attention(w: CrossAttentionWeights) -> String {
    match w {
        CrossAttentionWeights::Cosine => "cosine".into(),
        CrossAttentionWeights::Softmax { temperature } => format!("softmax:{temperature}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_table() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.schedule, ScheduleKind::Cosine);
        assert_eq!(c.augmentation.rotation_degrees, (-20.0, 20.0));
        assert_eq!(c.augmentation.scaling, (0.95, 1.05));
        assert_eq!(c.augmentation.color_jitter, (0.6, 1.4));
        assert_eq!(c.augmentation.horizontal_flip_prob, 0.5);
        assert_eq!(c.augmentation.random_crop_scale, (0.6, 1.0));
        assert_eq!(c.augmentation.gaussian_blur_sigma, (0.1, 3.0));
        assert_eq!(c.loss.lambdas, [0.25, 0.75, 0.375, 0.375]);
    }

    #[test]
    fn flat_form_round_trips() {
        let mut c = TrainConfig { seed: 9, early_stop_patience: Some(4), ..Default::default() };
        c.model.cross_attention = CrossAttentionWeights::Softmax { temperature: 0.25 };
        c.loss.reduction = Reduction::Mean;
        let mut back = TrainConfig::default();
        back.apply(&crate::config::parse_flat(&c.to_flat()).unwrap()).unwrap();
        assert_eq!(back, c);
        let keys: Vec<_> = crate::config::parse_flat(&c.to_flat()).unwrap().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, TRAIN_KEYS);
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = TrainConfig::default();
        let e = c.set("train.bogus", "1").unwrap_err().to_string();
        assert!(e.contains("train.bogus"));
        c.set("train.learning_rate", "-1").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("train.learning_rate"));
    }
}
