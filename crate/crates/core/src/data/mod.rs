//! Synthetic paired (image, report) samples with planted findings and
//! known sentence-to-cell alignment, plus the on-disk dataset layout.

mod external;
mod io;

pub use external::{load_external_features, ExternalFeatures, ExternalPair};
pub use io::{
    atomic_write, decode_f32_array, decode_matrix, encode_f32_array, encode_matrix, read_dataset, read_f32_array,
    sha256_hex, write_dataset, write_f32_array, Dataset, F32_MAGIC,
};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageTensor, Report};
use crate::error::{Error, Result};

/// A finding type: its name in reports and its per-channel appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub label: String,
    pub signature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub grid: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Inclusive range of planted findings per image.
    pub roi_count_range: (usize, usize),
    /// Inclusive range of rectangle side lengths, in grid cells.
    pub roi_size_range: (usize, usize),
    pub findings: Vec<FindingSpec>,
    pub duplicate_sentence_prob: f64,
    pub bilateral_prob: f64,
    /// Inclusive range of normal-anatomy sentences per report.
    pub filler_count_range: (usize, usize),
    pub max_sentences: usize,
    pub noise_max: f32,
    pub finding_intensity: (f32, f32),
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        let finding = |label: &str, signature: [f32; 3]| FindingSpec { label: label.into(), signature: signature.to_vec() };
        Self {
            grid: 7,
            image_size: 56,
            channels: 3,
            roi_count_range: (1, 2),
            roi_size_range: (1, 3),
            findings: vec![
                finding("opacity", [1.0, 0.0, 0.0]),
                finding("nodule", [0.0, 1.0, 0.0]),
                finding("effusion", [0.0, 0.0, 1.0]),
                finding("consolidation", [0.5, 0.5, 0.0]),
                finding("atelectasis", [0.0, 0.5, 0.5]),
                finding("edema", [0.5, 0.0, 0.5]),
            ],
            duplicate_sentence_prob: 0.3,
            bilateral_prob: 0.3,
            filler_count_range: (1, 2),
            max_sentences: 8,
            noise_max: 0.1,
            finding_intensity: (0.7, 1.0),
            seed: 0,
        }
    }
}

/// Every key accepted by [`SyntheticWorldConfig::set`]. Finding types are
/// fixed to the built-in list.
pub const WORLD_KEYS: &[&str] = &[
    "world.grid",
    "world.image_size",
    "world.roi_count_range",
    "world.roi_size_range",
    "world.duplicate_sentence_prob",
    "world.bilateral_prob",
    "world.filler_count_range",
    "world.max_sentences",
    "world.noise_max",
    "world.finding_intensity",
    "world.seed",
];

impl SyntheticWorldConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        use crate::config::{range, value};
        match key {
            "world.grid" => self.grid = value(key, raw)?,
            "world.image_size" => self.image_size = value(key, raw)?,
            "world.roi_count_range" => self.roi_count_range = range(key, raw)?,
            "world.roi_size_range" => self.roi_size_range = range(key, raw)?,
            "world.duplicate_sentence_prob" => self.duplicate_sentence_prob = value(key, raw)?,
            "world.bilateral_prob" => self.bilateral_prob = value(key, raw)?,
            "world.filler_count_range" => self.filler_count_range = range(key, raw)?,
            "world.max_sentences" => self.max_sentences = value(key, raw)?,
            "world.noise_max" => self.noise_max = value(key, raw)?,
            "world.finding_intensity" => self.finding_intensity = range(key, raw)?,
            "world.seed" => self.seed = value(key, raw)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }
}

pub const FILLER_SENTENCES: [&str; 6] = [
    "Heart size is normal.",
    "Mediastinal contours are unremarkable.",
    "No acute osseous abnormality.",
    "The trachea is midline.",
    "Pulmonary vasculature is within normal limits.",
    "Surgical clips are absent.",
];

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("world.{key}"), msg));
        if self.grid == 0 || self.image_size == 0 || self.image_size % self.grid != 0 {
            return bad("image_size", format!("{} is not a multiple of grid {}", self.image_size, self.grid));
        }
        for (key, p) in [("duplicate_sentence_prob", self.duplicate_sentence_prob), ("bilateral_prob", self.bilateral_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(key, format!("probability {p} outside [0, 1]"));
            }
        }
        let (lo, hi) = self.roi_size_range;
        if lo == 0 || lo > hi {
            return bad("roi_size_range", format!("invalid range ({lo}, {hi})"));
        }
        if hi > self.grid {
            return bad("roi_size_range", format!("ROI side {hi} larger than grid {}", self.grid));
        }
        if self.bilateral_prob > 0.0 && hi > self.grid / 2 {
            return bad("roi_size_range", format!("bilateral ROIs of width {hi} do not fit in half of grid {}", self.grid));
        }
        if self.roi_count_range.0 > self.roi_count_range.1 {
            return bad("roi_count_range", "min exceeds max".into());
        }
        if self.roi_count_range.1 > self.findings.len() {
            return bad("roi_count_range", "more findings per image than finding types".into());
        }
        if self.findings.iter().any(|f| f.signature.len() != self.channels) {
            return bad("findings", format!("every signature needs {} channels", self.channels));
        }
        let (f_lo, f_hi) = self.filler_count_range;
        if f_lo > f_hi || f_hi > FILLER_SENTENCES.len() {
            return bad("filler_count_range", format!("invalid range ({f_lo}, {f_hi})"));
        }
        let worst = self.roi_count_range.1 * 2 + f_hi;
        if worst > self.max_sentences || self.roi_count_range.1 + f_lo == 0 && f_hi == 0 {
            return bad("max_sentences", format!("reports may need {worst} sentences"));
        }
        if !(0.0..=1.0).contains(&self.noise_max) {
            return bad("noise_max", "must lie in [0, 1]".into());
        }
        let (i_lo, i_hi) = self.finding_intensity;
        if !(0.0 <= i_lo && i_lo <= i_hi && i_hi <= 1.0) {
            return bad("finding_intensity", "must be an ordered range inside [0, 1]".into());
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.grid
    }
}

/// Half-open rectangle in grid coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub label: String,
}

impl GridBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    /// True when the center of cell `(row, col)` lies inside the box.
    pub fn contains_center(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as f64 + 0.5, col as f64 + 0.5);
        r >= self.row0 as f64 && r < self.row1 as f64 && c >= self.col0 as f64 && c < self.col1 as f64
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    fn overlaps(&self, other: &GridBox) -> bool {
        self.row0 < other.row1 && other.row0 < self.row1 && self.col0 < other.col1 && other.col0 < self.col1
    }

    /// Left-right mirror image within a grid of width `grid`.
    pub fn mirrored(&self, grid: usize) -> GridBox {
        GridBox { col0: grid - self.col1, col1: grid - self.col0, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub id: String,
    pub image: ImageTensor,
    pub report: Report,
    /// `sentences × grid²`, true where a sentence describes the cell.
    pub gt_alignment: Array2<bool>,
    pub gt_boxes: Vec<GridBox>,
}

impl AlignedSample {
    pub fn grid(&self) -> usize {
        (self.gt_alignment.ncols() as f64).sqrt().round() as usize
    }

    /// The first sentence that describes a finding, with that finding's
    /// boxes. Used as the phrase-grounding query.
    pub fn grounding_query(&self) -> Option<(String, Vec<GridBox>)> {
        let row = (0..self.gt_alignment.nrows()).find(|&r| self.gt_alignment.row(r).iter().any(|&v| v))?;
        let sentence = self.report.sentences[row].clone();
        let label = label_in_phrase(&sentence, &self.gt_boxes)?;
        let boxes = self.gt_boxes.iter().filter(|b| b.label == label).cloned().collect();
        Some((sentence, boxes))
    }

    /// Cells covered by any box with the given label (or any box when
    /// `label` is `None`), as a row-major `grid × grid` mask.
    pub fn finding_mask(&self, label: Option<&str>) -> Array2<bool> {
        let g = self.grid();
        Array2::from_shape_fn((g, g), |(r, c)| {
            self.gt_boxes.iter().any(|b| label.is_none_or(|l| b.label == l) && b.contains(r, c))
        })
    }
}

/// The label of the first box whose label word appears in `phrase`.
pub fn label_in_phrase(phrase: &str, boxes: &[GridBox]) -> Option<String> {
    let tokens: Vec<String> = crate::encoders::tokenize(phrase).collect();
    boxes.iter().find(|b| tokens.iter().any(|t| *t == b.label.to_lowercase())).map(|b| b.label.clone())
}

fn side_word(b: &GridBox, grid: usize) -> &'static str {
    if (b.col0 + b.col1) < grid {
        "left"
    } else {
        "right"
    }
}

fn zone_word(b: &GridBox, grid: usize) -> &'static str {
    let center2 = b.row0 + b.row1;
    if center2 < grid * 2 / 3 {
        "upper"
    } else if center2 < grid * 4 / 3 {
        "mid"
    } else {
        "lower"
    }
}

const PARAPHRASES: [&str; 3] = ["Findings are consistent with {f}.", "{F} is again noted.", "Appearance suggests {f}."];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Deterministic sample `index` of the world described by `cfg`.
pub fn generate_sample(cfg: &SyntheticWorldConfig, index: u64) -> Result<AlignedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let g = cfg.grid;
    let s = cfg.image_size;
    let patch = cfg.patch_size();

    let mut pixels = Array3::from_shape_fn((cfg.channels, s, s), |_| rng.random_range(0.0..=cfg.noise_max));

    let n_roi = rng.random_range(cfg.roi_count_range.0..=cfg.roi_count_range.1);
    let mut type_order: Vec<usize> = (0..cfg.findings.len()).collect();
    for i in (1..type_order.len()).rev() {
        type_order.swap(i, rng.random_range(0..=i));
    }

    // (finding index, boxes, bilateral)
    let mut planted: Vec<(usize, Vec<GridBox>, bool)> = Vec::new();
    let mut occupied: Vec<GridBox> = Vec::new();
    for &ftype in type_order.iter().take(n_roi) {
        let label = cfg.findings[ftype].label.clone();
        let bilateral = rng.random_bool(cfg.bilateral_prob);
        let mut placed = None;
        for _attempt in 0..200 {
            let h = rng.random_range(cfg.roi_size_range.0..=cfg.roi_size_range.1);
            let w = rng.random_range(cfg.roi_size_range.0..=cfg.roi_size_range.1);
            let col_limit = if bilateral { g / 2 } else { g };
            if w > col_limit {
                continue;
            }
            let row0 = rng.random_range(0..=g - h);
            let col0 = rng.random_range(0..=col_limit - w);
            let b = GridBox { row0, col0, row1: row0 + h, col1: col0 + w, label: label.clone() };
            let mut boxes = vec![b.clone()];
            if bilateral {
                boxes.push(b.mirrored(g));
            }
            if boxes.iter().all(|nb| occupied.iter().all(|o| !o.overlaps(nb))) {
                placed = Some(boxes);
                break;
            }
        }
        let Some(boxes) = placed else {
            log::debug!("sample {index}: could not place a {label} ROI");
            continue;
        };
        let intensity = rng.random_range(cfg.finding_intensity.0..=cfg.finding_intensity.1);
        let sig = &cfg.findings[ftype].signature;
        for b in &boxes {
            for y in b.row0 * patch..b.row1 * patch {
                for x in b.col0 * patch..b.col1 * patch {
                    for (ch, &w) in sig.iter().enumerate() {
                        let v = &mut pixels[[ch, y, x]];
                        *v = v.max(intensity * w);
                    }
                }
            }
        }
        occupied.extend(boxes.iter().cloned());
        planted.push((ftype, boxes, bilateral));
    }

    // sentences with the cells they describe
    let mut sentences: Vec<(String, Option<usize>)> = Vec::new();
    for (k, (ftype, boxes, bilateral)) in planted.iter().enumerate() {
        let f = &cfg.findings[*ftype].label;
        let zone = zone_word(&boxes[0], g);
        let text = if *bilateral {
            format!("Bilateral {f} in the {zone} zones.")
        } else {
            format!("There is {f} in the {} {zone} zone.", side_word(&boxes[0], g))
        };
        sentences.push((text, Some(k)));
    }
    let n_fill = rng.random_range(cfg.filler_count_range.0..=cfg.filler_count_range.1);
    let mut fill_order: Vec<usize> = (0..FILLER_SENTENCES.len()).collect();
    for i in (1..fill_order.len()).rev() {
        fill_order.swap(i, rng.random_range(0..=i));
    }
    for &fi in fill_order.iter().take(n_fill) {
        sentences.push((FILLER_SENTENCES[fi].to_string(), None));
    }
    for (k, (ftype, _, _)) in planted.iter().enumerate() {
        if rng.random_bool(cfg.duplicate_sentence_prob) {
            let f = &cfg.findings[*ftype].label;
            let template = PARAPHRASES[rng.random_range(0..PARAPHRASES.len())];
            let text = template.replace("{f}", f).replace("{F}", &capitalize(f));
            sentences.push((text, Some(k)));
        }
    }
    if sentences.is_empty() {
        sentences.push((FILLER_SENTENCES[0].to_string(), None));
    }

    let raw = sentences.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(" ");
    let report = Report::parse(&raw, cfg.max_sentences)?;
    debug_assert_eq!(report.sentences.len(), sentences.len());

    let mut gt_alignment = Array2::from_elem((report.sentences.len(), g * g), false);
    for (row, (_, finding)) in sentences.iter().enumerate().take(report.sentences.len()) {
        if let Some(k) = finding {
            for b in &planted[*k].1 {
                for r in b.row0..b.row1 {
                    for c in b.col0..b.col1 {
                        gt_alignment[[row, r * g + c]] = true;
                    }
                }
            }
        }
    }

    Ok(AlignedSample {
        id: format!("s{index:06}"),
        image: ImageTensor::new(pixels)?,
        report,
        gt_alignment,
        gt_boxes: planted.into_iter().flat_map(|(_, boxes, _)| boxes).collect(),
    })
}

/// Samples `start..start + count`.
pub fn generate_samples(cfg: &SyntheticWorldConfig, start: u64, count: usize) -> Result<Vec<AlignedSample>> {
    (start..start + count as u64).map(|i| generate_sample(cfg, i)).collect()
}

/// True for roughly `fraction` of ids, chosen by a stable hash of the id.
pub fn is_validation_id(id: &str, fraction: f64) -> bool {
    let h = crate::encoders::fnv1a(id.as_bytes());
    (h % 10_000) as f64 / 10_000.0 < fraction
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_roi_means_background_and_filler() {
        let cfg = SyntheticWorldConfig { roi_count_range: (0, 0), ..Default::default() };
        let s = generate_sample(&cfg, 3).unwrap();
        assert!(s.gt_boxes.is_empty());
        assert!(s.gt_alignment.iter().all(|&v| !v));
        assert!(s.image.values().iter().all(|&v| v <= cfg.noise_max));
        assert!(s.report.sentences.iter().all(|t| FILLER_SENTENCES.contains(&t.as_str())));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticWorldConfig::default();
        assert_eq!(generate_sample(&cfg, 17).unwrap(), generate_sample(&cfg, 17).unwrap());
        assert_ne!(generate_sample(&cfg, 17).unwrap().image, generate_sample(&cfg, 18).unwrap().image);
    }

    #[test]
    fn bilateral_rows_mark_mirrored_cells() {
        let cfg = SyntheticWorldConfig { bilateral_prob: 1.0, roi_count_range: (1, 1), ..Default::default() };
        for idx in 0..20 {
            let s = generate_sample(&cfg, idx).unwrap();
            assert_eq!(s.gt_boxes.len(), 2);
            let g = cfg.grid;
            let row = s.gt_alignment.row(0);
            for r in 0..g {
                for c in 0..g {
                    // geometry oracle: a marked cell has its mirror marked too
                    assert_eq!(row[r * g + c], row[r * g + (g - 1 - c)], "sample {idx} cell ({r},{c})");
                    if row[r * g + c] {
                        assert!(c < g / 2 || c > g / 2);
                    }
                }
            }
        }
    }

    #[test]
    fn alignment_marginals_match_boxes() {
        let cfg = SyntheticWorldConfig::default();
        for idx in 0..50 {
            let s = generate_sample(&cfg, idx).unwrap();
            for (row, sentence) in s.report.sentences.iter().enumerate() {
                let count = s.gt_alignment.row(row).iter().filter(|&&v| v).count();
                match label_in_phrase(sentence, &s.gt_boxes) {
                    Some(label) => {
                        let area: usize = s.gt_boxes.iter().filter(|b| b.label == label).map(GridBox::area).sum();
                        assert!(count >= 1);
                        assert_eq!(count, area);
                    }
                    None => assert_eq!(count, 0, "filler sentence `{sentence}` is aligned"),
                }
            }
        }
    }

    #[test]
    fn oversized_roi_is_rejected() {
        let cfg = SyntheticWorldConfig { roi_size_range: (1, 8), bilateral_prob: 0.0, ..Default::default() };
        assert!(generate_sample(&cfg, 0).is_err());
    }

    #[test]
    fn validation_split_is_roughly_ten_percent() {
        let n = (0..2000).filter(|i| is_validation_id(&format!("s{i:06}"), 0.1)).count();
        assert!((150..250).contains(&n), "{n}");
    }
}
