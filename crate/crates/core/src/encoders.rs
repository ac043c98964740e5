//! Small deterministic encoders producing local embeddings: a patch encoder
//! for images (one row per grid cell) and a hashed bag-of-tokens encoder for
//! reports (one row per sentence).

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::embeddings::LocalEmbeddings;
use crate::error::{Error, Result};
use crate::nn::{Mlp2, ParamRegistry, Parameterized};

/// `channels × height × width` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    values: Array3<f32>,
}

impl ImageTensor {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!("empty image {c}x{h}x{w}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image intensity".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { values: Array3::zeros((channels, height, width)) }
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f32> {
        &mut self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    /// Per-channel mean of every cell of a `grid × grid` partition, as a
    /// `grid² × channels` matrix in row-major cell order.
    pub fn patch_means(&self, grid: usize) -> Result<Array2<f64>> {
        let (c, h, w) = self.values.dim();
        if grid == 0 || h % grid != 0 || w % grid != 0 {
            return Err(Error::InvalidInput(format!("{h}x{w} image does not divide into a {grid}x{grid} grid")));
        }
        let (ph, pw) = (h / grid, w / grid);
        let area = (ph * pw) as f64;
        let mut out = Array2::zeros((grid * grid, c));
        for gr in 0..grid {
            for gc in 0..grid {
                let cell = gr * grid + gc;
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for y in gr * ph..(gr + 1) * ph {
                        for x in gc * pw..(gc + 1) * pw {
                            acc += self.values[[ch, y, x]] as f64;
                        }
                    }
                    out[[cell, ch]] = acc / area;
                }
            }
        }
        Ok(out)
    }
}

/// Splits report text into sentences. A sentence ends at `.`, `!` or `?`
/// followed by whitespace or the end of the text; decimal points such as
/// `3.5` never end a sentence.
pub fn split_sentences(raw: &str) -> Result<Vec<String>> {
    let chars: Vec<char> = raw.chars().collect();
    let mut sentences = Vec::new();
    let mut current = String::new();
    for (i, &ch) in chars.iter().enumerate() {
        current.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let at_end = i + 1 == chars.len();
            if at_end || chars[i + 1].is_whitespace() {
                let s = current.trim();
                if !s.is_empty() && s.chars().any(|c| c.is_alphanumeric()) {
                    sentences.push(s.to_string());
                }
                current.clear();
            }
        }
    }
    let tail = current.trim();
    if !tail.is_empty() && tail.chars().any(|c| c.is_alphanumeric()) {
        sentences.push(tail.to_string());
    }
    if sentences.is_empty() {
        return Err(Error::InvalidInput("report yields no sentences".into()));
    }
    Ok(sentences)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub raw_text: String,
    pub sentences: Vec<String>,
}

impl Report {
    /// Splits `raw`, keeping at most `max_sentences` sentences.
    pub fn parse(raw: &str, max_sentences: usize) -> Result<Self> {
        let mut sentences = split_sentences(raw)?;
        if sentences.len() > max_sentences {
            log::debug!("report truncated from {} to {max_sentences} sentences", sentences.len());
            sentences.truncate(max_sentences);
        }
        Ok(Self { raw_text: raw.to_string(), sentences })
    }
}

/// Lower-cased alphanumeric tokens.
pub fn tokenize(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub grid: usize,
    pub channels: usize,
    pub mlp: Mlp2,
}

impl ImageEncoder {
    pub fn init(rng: &mut impl Rng, grid: usize, channels: usize, hidden: usize, output: usize) -> Self {
        Self { grid, channels, mlp: Mlp2::init(rng, channels, hidden, output) }
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Cell features fed to the learned map.
    pub fn features(&self, img: &ImageTensor) -> Result<Array2<f64>> {
        if img.channels() != self.channels {
            return Err(Error::DimensionMismatch(format!(
                "image encoder expects {} channels, got {}",
                self.channels,
                img.channels()
            )));
        }
        img.patch_means(self.grid)
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<LocalEmbeddings> {
        let feats = self.features(img)?;
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = self.mlp.bind(&mut tape, &mut reg, "");
        let x = tape.leaf(feats);
        let y = vars.forward(&mut tape, x);
        LocalEmbeddings::image(tape.value(y).clone(), (self.grid, self.grid))
    }
}

impl Parameterized for ImageEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.mlp.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.mlp.visit_mut(prefix, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub buckets: usize,
    pub max_sentences: usize,
    pub mlp: Mlp2,
}

impl TextEncoder {
    pub fn init(
        rng: &mut impl Rng,
        buckets: usize,
        max_sentences: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::InvalidInput("text encoder needs a non-empty hash range".into()));
        }
        if max_sentences == 0 {
            return Err(Error::InvalidInput("text encoder needs max_sentences >= 1".into()));
        }
        Ok(Self { buckets, max_sentences, mlp: Mlp2::init(rng, buckets, hidden, output) })
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Normalized hashed token counts, one row per sentence slot, plus the
    /// validity mask of the slots.
    pub fn features(&self, report: &Report) -> Result<(Array2<f64>, Vec<bool>)> {
        if self.buckets == 0 {
            return Err(Error::InvalidInput("text encoder needs a non-empty hash range".into()));
        }
        if report.sentences.is_empty() {
            return Err(Error::InvalidInput("report has no sentences".into()));
        }
        let n = self.max_sentences;
        let mut feats = Array2::zeros((n, self.buckets));
        let mut mask = vec![false; n];
        for (row, sentence) in report.sentences.iter().take(n).enumerate() {
            mask[row] = true;
            let tokens: Vec<String> = tokenize(sentence).collect();
            let weight = 1.0 / tokens.len().max(1) as f64;
            for t in &tokens {
                let bucket = (fnv1a(t.as_bytes()) % self.buckets as u64) as usize;
                feats[[row, bucket]] += weight;
            }
        }
        Ok((feats, mask))
    }

    pub fn encode(&self, report: &Report) -> Result<LocalEmbeddings> {
        let (feats, mask) = self.features(report)?;
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = self.mlp.bind(&mut tape, &mut reg, "");
        let x = tape.leaf(feats);
        let y = vars.forward(&mut tape, x);
        LocalEmbeddings::text(tape.value(y).clone(), mask)
    }
}

impl Parameterized for TextEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.mlp.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.mlp.visit_mut(prefix, f)
    }
}
