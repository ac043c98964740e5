use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AlignedSample, GridBox, SyntheticWorldConfig};
use crate::encoders::{ImageTensor, Report};
use crate::error::{Error, Result};

/// First four bytes of every array file.
pub const F32_MAGIC: [u8; 4] = *b"VLPF";
const HEADER_LEN: usize = 16;
const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes a 3-d array: magic, three little-endian `u32` dims, then the
/// values as little-endian `f32` in row-major order.
pub fn encode_f32_array(values: &Array3<f32>) -> Vec<u8> {
    let (a, b, c) = values.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(&F32_MAGIC);
    for d in [a, b, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32_array(bytes: &[u8]) -> Result<Array3<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Dataset(format!("array file has {} bytes, shorter than its header", bytes.len())));
    }
    if bytes[..4] != F32_MAGIC {
        return Err(Error::Dataset("array file has a bad magic number".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let dims = (dim(0), dim(1), dim(2));
    let count = dims.0.checked_mul(dims.1).and_then(|n| n.checked_mul(dims.2));
    let expected = count.and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::Dataset(format!(
            "array file with dims {dims:?} has {} payload bytes",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array3::from_shape_vec(dims, data).map_err(|e| Error::Dataset(e.to_string()))
}

pub fn write_f32_array(path: &Path, values: &Array3<f32>) -> Result<()> {
    atomic_write(path, &encode_f32_array(values))
}

pub fn read_f32_array(path: &Path) -> Result<Array3<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32_array(&bytes).map_err(|e| e.context(path.display().to_string()))
}

/// A 2-d matrix stored as dims `(rows, cols, 1)`.
pub fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    let (r, c) = m.dim();
    let a = Array3::from_shape_fn((r, c, 1), |(i, j, _)| m[[i, j]] as f32);
    encode_f32_array(&a)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    let a = decode_f32_array(bytes)?;
    let (r, c, depth) = a.dim();
    if depth != 1 {
        return Err(Error::Dataset(format!("expected a matrix, found dims ({r}, {c}, {depth})")));
    }
    Ok(Array2::from_shape_fn((r, c), |(i, j)| a[[i, j, 0]] as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ManifestSample {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<String>>,
    /// Relative path → sha256 of every file belonging to the sample.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Manifest {
    pub format_version: u32,
    pub max_sentences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<SyntheticWorldConfig>,
    pub samples: Vec<ManifestSample>,
}

pub(crate) fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!("unsupported manifest format_version {}", manifest.format_version)));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &manifest.samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            return Err(Error::Dataset(format!("invalid sample id `{}`", s.id)));
        }
        if !seen.insert(&s.id) {
            return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
        }
    }
    Ok(manifest)
}

/// Reads a file listed for `id`, verifying its checksum when one is recorded.
pub(crate) fn read_checked(dir: &Path, id: &str, rel: &str, checksums: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e).context(format!("sample `{id}`")))?;
    if let Some(expected) = checksums.get(rel) {
        if sha256_hex(&bytes) != *expected {
            return Err(Error::Dataset(format!("sample `{id}`: checksum mismatch for {rel}")));
        }
    }
    Ok(bytes)
}

/// A dataset in memory: samples plus optional grounding queries by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: Option<SyntheticWorldConfig>,
    pub max_sentences: usize,
    pub samples: Vec<AlignedSample>,
    pub queries: BTreeMap<String, String>,
}

impl Dataset {
    /// Wraps generated samples, deriving one grounding query per sample.
    pub fn from_samples(world: Option<SyntheticWorldConfig>, max_sentences: usize, samples: Vec<AlignedSample>) -> Self {
        let queries = samples.iter().filter_map(|s| s.grounding_query().map(|(q, _)| (s.id.clone(), q))).collect();
        Self { world, max_sentences, samples, queries }
    }

    pub fn generate(world: &SyntheticWorldConfig, count: usize) -> Result<Self> {
        let samples = super::generate_samples(world, 0, count)?;
        Ok(Self::from_samples(Some(world.clone()), world.max_sentences, samples))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits into (train, validation) by a stable hash of the sample id.
    pub fn split_validation(&self, fraction: f64) -> (Vec<&AlignedSample>, Vec<&AlignedSample>) {
        self.samples.iter().partition(|s| !super::is_validation_id(&s.id, fraction))
    }
}

fn boxes_csv(boxes: &[GridBox]) -> String {
    let mut out = String::from("row0,col0,row1,col1,label\n");
    for b in boxes {
        out.push_str(&format!("{},{},{},{},{}\n", b.row0, b.col0, b.row1, b.col1, b.label));
    }
    out
}

pub(crate) fn parse_boxes_csv(text: &str, id: &str) -> Result<Vec<GridBox>> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("row0,col0,row1,col1,label") => {}
        other => return Err(Error::Dataset(format!("sample `{id}`: bad boxes header {other:?}"))),
    }
    let mut boxes = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        let bad = || Error::Dataset(format!("sample `{id}`: malformed box on line {}", n + 2));
        if fields.len() != 5 {
            return Err(bad());
        }
        let num = |k: usize| fields[k].trim().parse::<usize>().map_err(|_| bad());
        let b = GridBox { row0: num(0)?, col0: num(1)?, row1: num(2)?, col1: num(3)?, label: fields[4].trim().to_string() };
        if b.row0 >= b.row1 || b.col0 >= b.col1 {
            return Err(bad());
        }
        boxes.push(b);
    }
    Ok(boxes)
}

fn alignment_bits(a: &Array2<bool>) -> Vec<String> {
    a.rows().into_iter().map(|r| r.iter().map(|&v| if v { '1' } else { '0' }).collect()).collect()
}

fn parse_alignment(rows: &[String], id: &str) -> Result<Array2<bool>> {
    let cols = rows.first().map_or(0, String::len);
    let mut out = Array2::from_elem((rows.len(), cols), false);
    for (r, bits) in rows.iter().enumerate() {
        if bits.len() != cols {
            return Err(Error::Dataset(format!("sample `{id}`: ragged alignment rows")));
        }
        for (c, ch) in bits.chars().enumerate() {
            out[[r, c]] = match ch {
                '1' => true,
                '0' => false,
                _ => return Err(Error::Dataset(format!("sample `{id}`: alignment contains `{ch}`"))),
            };
        }
    }
    Ok(out)
}

/// Writes `dataset` under `dir` (created if needed).
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut files = BTreeMap::new();
        let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
            atomic_write(&dir.join(&rel), &bytes)?;
            files.insert(rel, sha256_hex(&bytes));
            Ok(())
        };
        put(format!("images/{}.f32", s.id), encode_f32_array(s.image.values()))?;
        put(format!("reports/{}.txt", s.id), s.report.raw_text.clone().into_bytes())?;
        put(format!("boxes/{}.csv", s.id), boxes_csv(&s.gt_boxes).into_bytes())?;
        if let Some(q) = dataset.queries.get(&s.id) {
            put(format!("queries/{}.txt", s.id), format!("{q}\n").into_bytes())?;
        }
        entries.push(ManifestSample { id: s.id.clone(), alignment: Some(alignment_bits(&s.gt_alignment)), files });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        max_sentences: dataset.max_sentences,
        world: dataset.world.clone(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: dir.join("manifest.json"), source: e })?;
    atomic_write(&dir.join("manifest.json"), json.as_bytes())
}

fn count_files(dir: &Path, suffix: &str) -> Result<usize> {
    match fs::read_dir(dir) {
        Ok(rd) => {
            let mut n = 0;
            for entry in rd {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                if entry.file_name().to_string_lossy().ends_with(suffix) {
                    n += 1;
                }
            }
            Ok(n)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Reads a dataset written by [`write_dataset`] (or laid out by hand in
/// the same format), verifying checksums recorded in the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let on_disk = count_files(&dir.join("images"), ".f32")?;
    if on_disk != manifest.samples.len() {
        return Err(Error::Dataset(format!(
            "manifest lists {} samples but images/ holds {on_disk} files",
            manifest.samples.len()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut queries = BTreeMap::new();
    for entry in &manifest.samples {
        let id = entry.id.as_str();
        let image_bytes = read_checked(dir, id, &format!("images/{id}.f32"), &entry.files)?;
        let image = decode_f32_array(&image_bytes).map_err(|e| e.context(format!("sample `{id}`")))?;
        let image = ImageTensor::new(image).map_err(|e| e.context(format!("sample `{id}`")))?;
        let report_bytes = read_checked(dir, id, &format!("reports/{id}.txt"), &entry.files)?;
        let raw = String::from_utf8(report_bytes)
            .map_err(|_| Error::Dataset(format!("sample `{id}`: report is not UTF-8")))?;
        let report = Report::parse(&raw, manifest.max_sentences).map_err(|e| e.context(format!("sample `{id}`")))?;

        let boxes_rel = format!("boxes/{id}.csv");
        let gt_boxes = if dir.join(&boxes_rel).exists() {
            let bytes = read_checked(dir, id, &boxes_rel, &entry.files)?;
            parse_boxes_csv(&String::from_utf8_lossy(&bytes), id)?
        } else {
            Vec::new()
        };

        let query_rel = format!("queries/{id}.txt");
        if dir.join(&query_rel).exists() {
            let bytes = read_checked(dir, id, &query_rel, &entry.files)?;
            let q = String::from_utf8_lossy(&bytes).trim().to_string();
            if !q.is_empty() {
                queries.insert(id.to_string(), q);
            }
        }

        let gt_alignment = match &entry.alignment {
            Some(rows) => parse_alignment(rows, id)?,
            None => {
                let cells = manifest.world.as_ref().map_or(0, |w| w.grid * w.grid);
                Array2::from_elem((report.sentences.len(), cells), false)
            }
        };
        if gt_alignment.nrows() != report.sentences.len() {
            return Err(Error::Dataset(format!(
                "sample `{id}`: alignment has {} rows for {} sentences",
                gt_alignment.nrows(),
                report.sentences.len()
            )));
        }
        samples.push(AlignedSample { id: id.to_string(), image, report, gt_alignment, gt_boxes });
    }
    Ok(Dataset { world: manifest.world, max_sentences: manifest.max_sentences, samples, queries })
}
