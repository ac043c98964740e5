//! The full two-tower model: encoders, attention pooling, projection heads
//! and cross-attention, with a batched loss-and-gradient pass.

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embeddings::{
    cross_attend_on_tape, AttentionPool, CrossAttentionWeights, GlobalEmbedding, LocalEmbeddings, Modality,
    ProjectionHead,
};
use crate::encoders::{ImageEncoder, ImageTensor, Report, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::{join, ParamRegistry, Parameterized};
use crate::objectives::{global_contrastive_on_tape, intra_modal_target_on_tape, local_contrastive_on_tape, LossBundle, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: usize,
    pub channels: usize,
    pub hash_buckets: usize,
    pub max_sentences: usize,
    pub hidden: usize,
    /// `D_I`
    pub image_dim: usize,
    /// `D_T`
    pub text_dim: usize,
    /// `D`
    pub joint_dim: usize,
    pub cross_attention: CrossAttentionWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 7,
            channels: 3,
            hash_buckets: 128,
            max_sentences: 8,
            hidden: 32,
            image_dim: 64,
            text_dim: 64,
            joint_dim: 32,
            cross_attention: CrossAttentionWeights::Cosine,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("grid", self.grid),
            ("channels", self.channels),
            ("hash_buckets", self.hash_buckets),
            ("max_sentences", self.max_sentences),
            ("hidden", self.hidden),
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("joint_dim", self.joint_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be at least 1"));
            }
        }
        if let CrossAttentionWeights::Softmax { temperature } = self.cross_attention {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::config("model.cross_attention_temperature", "must be positive"));
            }
        }
        Ok(())
    }
}

/// One training pair, either raw or as precomputed local features.
#[derive(Debug, Clone, Copy)]
pub enum PairInput<'a> {
    Raw { image: &'a ImageTensor, report: &'a Report },
    Features { image: &'a LocalEmbeddings, text: &'a LocalEmbeddings },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub image_pool: AttentionPool,
    pub text_pool: AttentionPool,
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
}

/// Everything the model computes for one pair, without gradients.
#[derive(Debug, Clone)]
pub struct PairEmbeddings {
    pub image_local: LocalEmbeddings,
    pub text_local: LocalEmbeddings,
    pub image_global: GlobalEmbedding,
    pub text_global: GlobalEmbedding,
    pub image_joint: LocalEmbeddings,
    pub text_joint: LocalEmbeddings,
    pub image_joint_global: GlobalEmbedding,
    pub text_joint_global: GlobalEmbedding,
}

/// Named parameter gradients, in [`Parameterized::visit`] order.
pub type ParamGrads = Vec<(String, Array2<f64>)>;

struct SampleGraph {
    tape: Tape,
    reg: ParamRegistry,
    zg_image: Var,
    zg_text: Var,
    local_image: Var,
    local_text: Var,
    y_image: Var,
    y_text: Var,
    z_image: Var,
    z_text: Var,
    yg_image: Var,
    yg_text: Var,
    image_mask: Vec<bool>,
    text_mask: Vec<bool>,
    grid: (usize, usize),
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let image_encoder = ImageEncoder::init(&mut rng, c.grid, c.channels, c.hidden, c.image_dim);
        let text_encoder = TextEncoder::init(&mut rng, c.hash_buckets, c.max_sentences, c.hidden, c.text_dim)?;
        let image_pool = AttentionPool::init(&mut rng, c.image_dim);
        let text_pool = AttentionPool::init(&mut rng, c.text_dim);
        let image_head = ProjectionHead::init(&mut rng, c.image_dim, c.joint_dim);
        let text_head = ProjectionHead::init(&mut rng, c.text_dim, c.joint_dim);
        Ok(Self { config, image_encoder, text_encoder, image_pool, text_pool, image_head, text_head })
    }

    fn build_graph(&self, input: PairInput<'_>, loss: &LossConfig, with_loss: bool) -> Result<SampleGraph> {
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();

        let (y_image, y_text, image_mask, text_mask, grid) = match input {
            PairInput::Raw { image, report } => {
                let img_feats = self.image_encoder.features(image)?;
                let (txt_feats, text_mask) = self.text_encoder.features(report)?;
                let img_mlp = self.image_encoder.mlp.bind(&mut tape, &mut reg, "image_encoder");
                let txt_mlp = self.text_encoder.mlp.bind(&mut tape, &mut reg, "text_encoder");
                let xi = tape.leaf(img_feats);
                let xt = tape.leaf(txt_feats);
                let yi = img_mlp.forward(&mut tape, xi);
                let yt = txt_mlp.forward(&mut tape, xt);
                let g = self.config.grid;
                (yi, yt, vec![true; g * g], text_mask, (g, g))
            }
            PairInput::Features { image, text } => {
                if image.dim() != self.config.image_dim || text.dim() != self.config.text_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "model expects ({}, {})-dim features, got ({}, {})",
                        self.config.image_dim,
                        self.config.text_dim,
                        image.dim(),
                        text.dim()
                    )));
                }
                let grid = image.grid_shape().unwrap_or((image.len(), 1));
                let yi = tape.leaf(image.vectors().clone());
                let yt = tape.leaf(text.vectors().clone());
                (yi, yt, image.mask().to_vec(), text.mask().to_vec(), grid)
            }
        };

        let img_pool = self.image_pool.bind(&mut tape, &mut reg, "image_pool");
        let txt_pool = self.text_pool.bind(&mut tape, &mut reg, "text_pool");
        let img_head = self.image_head.bind(&mut tape, &mut reg, "image_head");
        let txt_head = self.text_head.bind(&mut tape, &mut reg, "text_head");

        let (yg_image, _) = img_pool.forward(&mut tape, y_image, &image_mask);
        let (yg_text, _) = txt_pool.forward(&mut tape, y_text, &text_mask);
        let z_image = img_head.local.forward(&mut tape, y_image);
        let z_text = txt_head.local.forward(&mut tape, y_text);
        let zg_image = img_head.global.forward(&mut tape, yg_image);
        let zg_text = txt_head.global.forward(&mut tape, yg_text);

        let (local_image, local_text) = if with_loss {
            let weights = self.config.cross_attention;
            let cross_image = cross_attend_on_tape(&mut tape, z_image, z_text, &text_mask, txt_head.value, weights);
            let cross_text = cross_attend_on_tape(&mut tape, z_text, z_image, &image_mask, img_head.value, weights);
            let block = loss.target_gradient_blocked;
            let diag = loss.mask_self_similarity_diagonal;
            let (pi_row, pi_col) = intra_modal_target_on_tape(&mut tape, y_image, &image_mask, loss.tau_l_tgt, diag, block);
            let (pt_row, pt_col) = intra_modal_target_on_tape(&mut tape, y_text, &text_mask, loss.tau_l_tgt, diag, block);
            let li = local_contrastive_on_tape(
                &mut tape,
                z_image,
                cross_image,
                &image_mask,
                pi_row,
                pi_col,
                loss.tau_l_src,
                loss.reduction,
            );
            let lt = local_contrastive_on_tape(
                &mut tape,
                z_text,
                cross_text,
                &text_mask,
                pt_row,
                pt_col,
                loss.tau_l_src,
                loss.reduction,
            );
            (li, lt)
        } else {
            let zero = tape.scalar(0.0);
            (zero, zero)
        };

        Ok(SampleGraph {
            tape,
            reg,
            zg_image,
            zg_text,
            local_image,
            local_text,
            y_image,
            y_text,
            z_image,
            z_text,
            yg_image,
            yg_text,
            image_mask,
            text_mask,
            grid,
        })
    }

    /// Local and global embeddings of one pair, before and after projection.
    pub fn embed(&self, input: PairInput<'_>) -> Result<PairEmbeddings> {
        let g = self.build_graph(input, &LossConfig::default(), false)?;
        let t = &g.tape;
        let local = |v: Var, m: Modality, mask: &[bool]| match m {
            Modality::Image => LocalEmbeddings::image(t.value(v).clone(), g.grid),
            Modality::Text => LocalEmbeddings::text(t.value(v).clone(), mask.to_vec()),
        };
        let global = |v: Var, m: Modality| GlobalEmbedding::new(m, t.value(v).row(0).to_owned());
        Ok(PairEmbeddings {
            image_local: local(g.y_image, Modality::Image, &g.image_mask)?,
            text_local: local(g.y_text, Modality::Text, &g.text_mask)?,
            image_global: global(g.yg_image, Modality::Image)?,
            text_global: global(g.yg_text, Modality::Text)?,
            image_joint: local(g.z_image, Modality::Image, &g.image_mask)?,
            text_joint: local(g.z_text, Modality::Text, &g.text_mask)?,
            image_joint_global: global(g.zg_image, Modality::Image)?,
            text_joint_global: global(g.zg_text, Modality::Text)?,
        })
    }

    /// Projected image locals (`N_I × D`) for a raw image.
    pub fn image_joint_locals(&self, image: &ImageTensor) -> Result<LocalEmbeddings> {
        let y = self.image_encoder.encode(image)?;
        crate::embeddings::project_local(&y, &self.image_head)
    }

    /// Projected sentence locals for a report.
    pub fn text_joint_locals(&self, report: &Report) -> Result<LocalEmbeddings> {
        let y = self.text_encoder.encode(report)?;
        crate::embeddings::project_local(&y, &self.text_head)
    }

    /// Loss of a batch without gradients.
    pub fn loss(&self, batch: &[PairInput<'_>], cfg: &LossConfig) -> Result<LossBundle> {
        self.run_batch(batch, cfg, false).map(|(b, _)| b)
    }

    /// Loss of a batch and the gradient of its total with respect to every
    /// parameter. Per-sample graphs are built in parallel; gradients are
    /// summed in batch order so results do not depend on thread count.
    pub fn loss_and_grad(&self, batch: &[PairInput<'_>], cfg: &LossConfig) -> Result<(LossBundle, ParamGrads)> {
        let (bundle, grads) = self.run_batch(batch, cfg, true)?;
        Ok((bundle, grads.expect("requested")))
    }

    fn run_batch(&self, batch: &[PairInput<'_>], cfg: &LossConfig, want_grad: bool) -> Result<(LossBundle, Option<ParamGrads>)> {
        cfg.validate()?;
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let b = batch.len();
        let graphs: Vec<SampleGraph> = batch
            .par_iter()
            .enumerate()
            .map(|(i, input)| self.build_graph(*input, cfg, true).map_err(|e| e.context(format!("batch sample {i}"))))
            .collect::<Result<_>>()?;

        let rows = |pick: fn(&SampleGraph) -> Var| -> Array2<f64> {
            let views: Vec<_> = graphs.iter().map(|g| g.tape.value(pick(g)).view()).collect();
            concatenate(Axis(0), &views).expect("equal joint widths")
        };
        let mut gtape = Tape::new();
        let zi = gtape.leaf(rows(|g| g.zg_image));
        let zt = gtape.leaf(rows(|g| g.zg_text));
        let (l_it, l_ti) = global_contrastive_on_tape(&mut gtape, zi, zt, cfg.tau_g);

        let local_image = graphs.iter().map(|g| g.tape.scalar_value(g.local_image)).sum::<f64>() / b as f64;
        let local_text = graphs.iter().map(|g| g.tape.scalar_value(g.local_text)).sum::<f64>() / b as f64;
        let components = [gtape.scalar_value(l_it), gtape.scalar_value(l_ti), local_image, local_text];
        let bundle = LossBundle::from_components(components, &cfg.lambdas, b)?;
        if !want_grad {
            return Ok((bundle, None));
        }

        let [l1, l2, l3, l4] = cfg.lambdas;
        let w_it = gtape.scale(l_it, l1);
        let w_ti = gtape.scale(l_ti, l2);
        let gtotal = gtape.add_scalars(&[w_it, w_ti]);
        let gg = gtape.backward_scalar(gtotal);
        let (dzi, dzt) = (gg.wrt(zi), gg.wrt(zt));

        let per_sample: Vec<ParamGrads> = graphs
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let seeds = [
                    (g.local_image, Array2::from_elem((1, 1), l3 / b as f64)),
                    (g.local_text, Array2::from_elem((1, 1), l4 / b as f64)),
                    (g.zg_image, dzi.slice(ndarray::s![i..i + 1, ..]).to_owned()),
                    (g.zg_text, dzt.slice(ndarray::s![i..i + 1, ..]).to_owned()),
                ];
                g.reg.collect(&g.tape.backward(&seeds))
            })
            .collect();

        let mut total: ParamGrads = Vec::new();
        self.visit("", &mut |name, p| total.push((name, Array2::zeros(p.raw_dim()))));
        for grads in per_sample {
            for (name, g) in grads {
                let slot = total
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
                slot.1 += &g;
            }
        }
        Ok((bundle, Some(total)))
    }
}

impl Parameterized for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.image_encoder.visit(&join(prefix, "image_encoder"), f);
        self.text_encoder.visit(&join(prefix, "text_encoder"), f);
        self.image_pool.visit(&join(prefix, "image_pool"), f);
        self.text_pool.visit(&join(prefix, "text_pool"), f);
        self.image_head.visit(&join(prefix, "image_head"), f);
        self.text_head.visit(&join(prefix, "text_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.image_encoder.visit_mut(&join(prefix, "image_encoder"), f);
        self.text_encoder.visit_mut(&join(prefix, "text_encoder"), f);
        self.image_pool.visit_mut(&join(prefix, "image_pool"), f);
        self.text_pool.visit_mut(&join(prefix, "text_pool"), f);
        self.image_head.visit_mut(&join(prefix, "image_head"), f);
        self.text_head.visit_mut(&join(prefix, "text_head"), f);
    }
}

impl Model {
    /// Compares analytic gradients of the total loss on `batch` with central
    /// finite differences. Target blocking is switched off: a blocked target
    /// drops a path the loss value still depends on, so finite differences
    /// would not agree with it by design.
    pub fn gradient_check(
        &self,
        batch: &[PairInput<'_>],
        loss: &LossConfig,
        cfg: crate::objectives::GradCheckConfig,
    ) -> Result<crate::objectives::GradCheckReport> {
        let loss = LossConfig { target_gradient_blocked: false, ..loss.clone() };
        let (_, grads) = self.loss_and_grad(batch, &loss)?;
        crate::objectives::gradient_check(self, &grads, |m: &Model| Ok(m.loss(batch, &loss)?.total), cfg)
    }
}

/// A world matching [`tiny_config`]: 2×2 grid, 8-pixel images.
pub fn tiny_world() -> crate::data::SyntheticWorldConfig {
    crate::data::SyntheticWorldConfig {
        grid: 2,
        image_size: 8,
        roi_size_range: (1, 1),
        roi_count_range: (1, 1),
        max_sentences: 4,
        ..Default::default()
    }
}

/// A small configuration used for finite-difference checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid: 2,
        channels: 3,
        hash_buckets: 16,
        max_sentences: 4,
        hidden: 4,
        image_dim: 5,
        text_dim: 4,
        joint_dim: 3,
        cross_attention: CrossAttentionWeights::Cosine,
    }
}
