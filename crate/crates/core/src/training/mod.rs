//! Pre-training loop: batching, augmentation, Adam updates under a
//! learning-rate schedule, per-epoch metrics, checkpoints and resume.

mod augment;
mod checkpoint;
mod config;
mod optim;

pub use augment::{augment, crop_resize, flip_horizontal, gaussian_blur, rotate, scale};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{format_cross_attention, parse_cross_attention, AugmentConfig, ScheduleKind, TrainConfig, TRAIN_KEYS};
pub use optim::{cosine_lr, Adam, LrScheduler, ADAM_BETAS, ADAM_EPS};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{atomic_write, is_validation_id, AlignedSample, ExternalPair};
use crate::embeddings::LocalEmbeddings;
use crate::encoders::{ImageTensor, Report};
use crate::error::{Error, Result};
use crate::model::{Model, PairInput, ParamGrads};
use crate::objectives::{LossBundle, LossConfig};

/// A training pair by reference. Raw pairs are augmented; precomputed
/// features are used as is.
#[derive(Debug, Clone, Copy)]
pub enum TrainSample<'a> {
    Raw { id: &'a str, image: &'a ImageTensor, report: &'a Report },
    Features { id: &'a str, image: &'a LocalEmbeddings, text: &'a LocalEmbeddings },
}

impl<'a> TrainSample<'a> {
    pub fn id(&self) -> &'a str {
        match self {
            TrainSample::Raw { id, .. } | TrainSample::Features { id, .. } => id,
        }
    }

    pub fn from_aligned(s: &'a AlignedSample) -> Self {
        TrainSample::Raw { id: &s.id, image: &s.image, report: &s.report }
    }

    pub fn from_external(p: &'a ExternalPair) -> Self {
        TrainSample::Features { id: &p.id, image: &p.image, text: &p.text }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub global_it: f64,
    pub global_ti: f64,
    pub local_img: f64,
    pub local_txt: f64,
    pub total: f64,
    /// Rate at the first update of the epoch.
    pub lr: f64,
    pub validation_total: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,global_it,global_ti,local_img,local_txt,total,lr";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch, m.global_it, m.global_ti, m.local_img, m.local_txt, m.total, m.lr
        ));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `checkpoint.bin` and `metrics.csv` are written after each epoch.
    pub out_dir: Option<PathBuf>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after_epochs: Option<usize>,
    pub resume: Option<Checkpoint>,
    /// Initial parameters in place of a fresh seeded initialization.
    pub initial_model: Option<Model>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub stopped_early: bool,
}

/// Loss of one batch; the pipeline of encoders, pooling, projection,
/// cross-attention and all four objectives.
pub fn forward_batch(model: &Model, batch: &[PairInput<'_>], loss: &LossConfig) -> Result<LossBundle> {
    model.loss(batch, loss)
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = derived_rng(seed, 1 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

enum Owned<'a> {
    Raw(ImageTensor, &'a Report),
    Features(&'a LocalEmbeddings, &'a LocalEmbeddings),
}

fn prepare<'a>(samples: &[TrainSample<'a>], idx: &[usize], cfg: &TrainConfig, epoch: Option<usize>) -> Vec<Owned<'a>> {
    idx.par_iter()
        .map(|&i| match samples[i] {
            TrainSample::Raw { image, report, .. } => {
                let img = match epoch {
                    Some(e) => {
                        let stream = ((e as u64 + 1) << 32) | i as u64;
                        augment(image, &cfg.augmentation, &mut derived_rng(cfg.seed ^ 0x5eed_a06e, stream))
                    }
                    None => image.clone(),
                };
                Owned::Raw(img, report)
            }
            TrainSample::Features { image, text, .. } => Owned::Features(image, text),
        })
        .collect()
}

fn as_inputs<'b>(owned: &'b [Owned<'_>]) -> Vec<PairInput<'b>> {
    owned
        .iter()
        .map(|o| match o {
            Owned::Raw(img, report) => PairInput::Raw { image: img, report },
            Owned::Features(image, text) => PairInput::Features { image, text },
        })
        .collect()
}

/// Mean total loss over `idx` without augmentation or gradients.
pub fn evaluate_loss(model: &Model, samples: &[TrainSample<'_>], idx: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let mut weighted = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let owned = prepare(samples, chunk, cfg, None);
        let bundle = model.loss(&as_inputs(&owned), &cfg.loss)?;
        weighted += bundle.total * chunk.len() as f64;
    }
    Ok(weighted / idx.len().max(1) as f64)
}

fn grads_finite(g: &ParamGrads) -> bool {
    g.iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
}

fn write_outputs(dir: &Path, ck: &Checkpoint) -> Result<()> {
    ck.save(&dir.join("checkpoint.bin"))?;
    atomic_write(&dir.join("metrics.csv"), metrics_csv(&ck.history).as_bytes())
}

/// Trains on `samples`. Every random draw derives from `(cfg.seed, epoch,
/// sample index)`, so resuming from a checkpoint reproduces an
/// uninterrupted run exactly.
pub fn train(samples: &[TrainSample<'_>], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (mut train_idx, mut val_idx): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if cfg.early_stop_patience.is_some() && is_validation_id(s.id(), cfg.validation_fraction) {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        return Err(Error::Dataset("every sample fell into the validation split".into()));
    }
    if cfg.early_stop_patience.is_some() && val_idx.is_empty() {
        log::warn!("validation split is empty; early stopping disabled");
    }

    let micro_batches = train_idx.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_batches.div_ceil(cfg.grad_accum_steps) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;

    let mut ck = match &opts.resume {
        Some(prev) => {
            if prev.config.hash() != cfg.hash() {
                return Err(Error::Checkpoint("resume checkpoint was written with a different configuration".into()));
            }
            prev.clone()
        }
        None => {
            let model = match &opts.initial_model {
                Some(m) => m.clone(),
                None => Model::init(cfg.model.clone(), cfg.seed)?,
            };
            Checkpoint {
                adam: Adam::new(&model),
                model,
                scheduler: LrScheduler::new(cfg, total_steps),
                config: cfg.clone(),
                epoch: 0,
                history: Vec::new(),
                best_validation: None,
                epochs_without_improvement: 0,
            }
        }
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut stopped_early = false;
    while ck.epoch < cfg.epochs {
        if opts.stop_after_epochs.is_some_and(|k| ck.epoch >= k) {
            break;
        }
        let epoch = ck.epoch;
        let order: Vec<usize> = epoch_order(train_idx.len(), cfg.seed, epoch).into_iter().map(|k| train_idx[k]).collect();
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut sums = [0.0f64; 5];
        let mut seen = 0usize;
        let mut first_lr = None;

        for group in chunks.chunks(cfg.grad_accum_steps) {
            let step = ck.adam.step;
            let lr = ck.scheduler.lr(step, epoch);
            first_lr.get_or_insert(lr);
            let mut acc: Option<ParamGrads> = None;
            for chunk in group {
                let owned = prepare(samples, chunk, cfg, Some(epoch));
                let (bundle, grads) = ck
                    .model
                    .loss_and_grad(&as_inputs(&owned), &cfg.loss)
                    .map_err(|e| Error::Diverged { epoch: epoch + 1, step: step as usize, message: e.to_string() })?;
                if !grads_finite(&grads) {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        step: step as usize,
                        message: "non-finite gradient".into(),
                    });
                }
                let n = chunk.len() as f64;
                for (s, v) in sums.iter_mut().zip(bundle.components().iter().chain([bundle.total].iter())) {
                    *s += v * n;
                }
                seen += chunk.len();
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for ((_, x), (_, y)) in a.iter_mut().zip(&grads) {
                            *x += y;
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty group");
            if group.len() > 1 {
                let k = 1.0 / group.len() as f64;
                for (_, g) in grads.iter_mut() {
                    g.mapv_inplace(|v| v * k);
                }
            }
            ck.adam.update(&mut ck.model, &grads, lr)?;
        }

        let n = seen as f64;
        let validation_total = if val_idx.is_empty() { None } else { Some(evaluate_loss(&ck.model, samples, &val_idx, cfg)?) };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            global_it: sums[0] / n,
            global_ti: sums[1] / n,
            local_img: sums[2] / n,
            local_txt: sums[3] / n,
            total: sums[4] / n,
            lr: first_lr.unwrap_or(0.0),
            validation_total,
        };
        log::info!(
            "epoch {} total {:.5} (global {:.4}/{:.4}, local {:.4}/{:.4}) lr {:.3e}",
            metrics.epoch,
            metrics.total,
            metrics.global_it,
            metrics.global_ti,
            metrics.local_img,
            metrics.local_txt,
            metrics.lr
        );
        ck.scheduler.end_epoch(validation_total.unwrap_or(metrics.total));
        ck.history.push(metrics);
        ck.epoch += 1;

        if let (Some(patience), Some(v)) = (cfg.early_stop_patience, validation_total) {
            if ck.best_validation.is_none_or(|b| v < b) {
                ck.best_validation = Some(v);
                ck.epochs_without_improvement = 0;
            } else {
                ck.epochs_without_improvement += 1;
            }
            if ck.epochs_without_improvement >= patience {
                log::info!("early stop after epoch {}", ck.epoch);
                stopped_early = true;
            }
        }
        if let Some(dir) = &opts.out_dir {
            write_outputs(dir, &ck)?;
        }
        if stopped_early {
            break;
        }
    }
    Ok(TrainOutcome { checkpoint: ck, stopped_early })
}
