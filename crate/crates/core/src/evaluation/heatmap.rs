use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::data::atomic_write;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeatmapOptions {
    /// Also write the raw values as CSV.
    pub csv: bool,
    /// Bilinear upsampling of the image to `(height, width)` for overlays.
    pub upsample_to: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSidecar {
    pub min: f64,
    pub max: f64,
    pub constant: bool,
}

impl HeatmapSidecar {
    fn render(&self) -> String {
        format!("min = {}\nmax = {}\nconstant = {}\n", self.min, self.max, self.constant)
    }
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.to_path_buf();
    p.set_extension(ext);
    p
}

fn bilinear_resize(map: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let (rows, cols) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * rows as f64 / h as f64 - 0.5).clamp(0.0, (rows - 1) as f64);
        let sx = ((x as f64 + 0.5) * cols as f64 / w as f64 - 0.5).clamp(0.0, (cols - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(rows - 1), (x0 + 1).min(cols - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        map[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + map[[y0, x1]] * (1.0 - fy) * fx
            + map[[y1, x0]] * fy * (1.0 - fx)
            + map[[y1, x1]] * fy * fx
    })
}

/// Writes `path` with extension `.pgm` (8-bit, min-max scaled), a `.txt`
/// sidecar with the original range, and optionally `.csv` raw values. A
/// constant map renders as mid-grey (128) and sets the sidecar flag.
pub fn export_heatmap(map: &Array2<f64>, path: &Path, options: &HeatmapOptions) -> Result<HeatmapSidecar> {
    if map.is_empty() {
        return Err(Error::InvalidInput("empty heatmap".into()));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap value".into()));
    }
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sidecar = HeatmapSidecar { min, max, constant: min == max };

    let image = match options.upsample_to {
        Some(size) => bilinear_resize(map, size),
        None => map.clone(),
    };
    let (h, w) = image.dim();
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(image.iter().map(|&v| {
        if sidecar.constant {
            128u8
        } else {
            (((v - min) / (max - min)) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    }));
    atomic_write(&with_extension(path, "pgm"), &pgm)?;
    atomic_write(&with_extension(path, "txt"), sidecar.render().as_bytes())?;
    if options.csv {
        let mut csv = String::new();
        for row in map.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        atomic_write(&with_extension(path, "csv"), csv.as_bytes())?;
    }
    Ok(sidecar)
}

/// Parses a CSV written by [`export_heatmap`].
pub fn read_heatmap_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<_, _>>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput(format!("{}: ragged rows", path.display())));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::InvalidInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pixels(path: &Path) -> Vec<u8> {
        let bytes = std::fs::read(with_extension(path, "pgm")).unwrap();
        // header is three newline-terminated lines
        let mut newlines = 0;
        let start = bytes.iter().position(|&b| {
            newlines += (b == b'\n') as usize;
            newlines == 3
        });
        bytes[start.unwrap() + 1..].to_vec()
    }

    #[test]
    fn checkerboard_scales_to_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        export_heatmap(&array![[0.0, 1.0], [1.0, 0.0]], &p, &HeatmapOptions::default()).unwrap();
        assert_eq!(pixels(&p), vec![0, 255, 255, 0]);
    }

    #[test]
    fn constant_map_is_mid_grey() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        let s = export_heatmap(&Array2::from_elem((3, 3), 0.7), &p, &HeatmapOptions::default()).unwrap();
        assert!(s.constant);
        assert!(pixels(&p).iter().all(|&v| v == 128));
        let side = std::fs::read_to_string(with_extension(&p, "txt")).unwrap();
        assert!(side.contains("constant = true"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r");
        let m = array![[0.1 + 0.2, -1e-17], [std::f64::consts::PI, 2.5e300]];
        export_heatmap(&m, &p, &HeatmapOptions { csv: true, upsample_to: Some((8, 8)) }).unwrap();
        assert_eq!(read_heatmap_csv(&with_extension(&p, "csv")).unwrap(), m);
        assert_eq!(pixels(&p).len(), 64);
    }
}
