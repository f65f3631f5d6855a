//! Image planes, labeled two-view datasets and file ingestion.
//!
//! Supported inputs are binary PGM (`P5`) images, normalized to `[0, 1]`,
//! and plain comma-separated matrices, which are taken verbatim. A dataset
//! is described by a manifest CSV whose lines list one or more input paths
//! followed by an integer label.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::views::{apply_recipe, ViewRecipe};

/// A single real-valued 2-D plane, `height x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    values: Array2<f64>,
}

impl ImagePlane {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(shape_err!("image plane must be at least 1x1, got {h}x{w}"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("image plane contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let values = Array2::from_shape_vec((height, width), data)
            .map_err(|e| shape_err!("cannot build {height}x{width} plane: {e}"))?;
        Self::new(values)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPairSample {
    pub view1: ImagePlane,
    pub view2: ImagePlane,
    pub label: usize,
}

/// Labeled two-view samples in manifest order.
///
/// Class ids are contiguous in `[0, class_count)`; `class_values` maps each
/// id back to the label written in the manifest.
#[derive(Debug, Clone)]
pub struct ViewPairDataset {
    samples: Vec<ViewPairSample>,
    class_values: Vec<u64>,
}

impl ViewPairDataset {
    /// Builds a dataset from samples carrying original label values,
    /// re-indexing labels by first appearance.
    pub fn from_labeled(pairs: Vec<(ImagePlane, ImagePlane, u64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no samples".into()));
        }
        let mut class_values: Vec<u64> = Vec::new();
        let mut samples = Vec::with_capacity(pairs.len());
        let dim = pairs[0].0.dim();
        for (idx, (view1, view2, value)) in pairs.into_iter().enumerate() {
            if view1.dim() != view2.dim() {
                return Err(shape_err!(
                    "sample {idx}: view sizes differ ({:?} vs {:?})",
                    view1.dim(),
                    view2.dim()
                ));
            }
            if view1.dim() != dim {
                return Err(shape_err!(
                    "sample {idx}: size {:?} differs from first sample {:?}",
                    view1.dim(),
                    dim
                ));
            }
            let label = match class_values.iter().position(|&v| v == value) {
                Some(i) => i,
                None => {
                    class_values.push(value);
                    class_values.len() - 1
                }
            };
            samples.push(ViewPairSample {
                view1,
                view2,
                label,
            });
        }
        Ok(Self {
            samples,
            class_values,
        })
    }

    pub fn samples(&self) -> &[ViewPairSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_values.len()
    }

    pub fn class_values(&self) -> &[u64] {
        &self.class_values
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Common `(height, width)` of every view in the dataset.
    pub fn image_dim(&self) -> (usize, usize) {
        self.samples[0].view1.dim()
    }
}

/// Reads a binary PGM (`P5`) image, dividing intensities by `maxval`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<ImagePlane> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Parse(format!(
            "unsupported PGM magic {:?}, expected P5",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_header_int(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_header_int(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_header_int(next_token(bytes, &mut pos)?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("PGM has zero size {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("PGM maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Parse("PGM header not terminated by whitespace".into())),
    }
    let bytes_per_px = if maxval > 255 { 2 } else { 1 };
    let needed = width * height * bytes_per_px;
    let payload = &bytes[pos..];
    if payload.len() < needed {
        return Err(Error::Parse(format!(
            "PGM payload truncated: expected {needed} bytes, found {}",
            payload.len()
        )));
    }
    let scale = maxval as f64;
    let data: Vec<f64> = if bytes_per_px == 1 {
        payload[..needed].iter().map(|&b| b as f64 / scale).collect()
    } else {
        payload[..needed]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    ImagePlane::from_vec(height, width, data)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Parse("unexpected end of PGM header".into())),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() || *b == b'#' {
            break;
        }
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_int(token: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| {
            Error::Parse(format!(
                "invalid PGM {what}: {:?}",
                String::from_utf8_lossy(token)
            ))
        })
}

/// Encodes a plane as an 8-bit `P5` image, clamping to `[0, 1]` and rounding.
pub fn encode_pgm(plane: &ImagePlane) -> Vec<u8> {
    let (h, w) = plane.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        plane
            .values()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn save_pgm(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(plane))
        .map_err(|e| Error::io(path, e))
}

/// Reads a rectangular numeric CSV as a plane, values verbatim.
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text)
}

pub fn parse_matrix_csv(text: &str) -> Result<ImagePlane> {
    let mut width = None;
    let mut data = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Parse(format!("line {}: non-numeric cell {cell:?}", lineno + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "line {}: non-finite cell {cell:?}",
                    lineno + 1
                )));
            }
            data.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(Error::Parse(format!(
                    "line {}: ragged row of {count} cells, expected {w}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        height += 1;
    }
    let width = width.ok_or_else(|| Error::Parse("empty matrix CSV".into()))?;
    ImagePlane::from_vec(height, width, data)
}

/// Loads a PGM or, for a `.csv` extension, a verbatim matrix.
pub fn load_plane(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        load_matrix_csv(path)
    } else {
        load_pgm(path)
    }
}

/// One manifest line: input paths (resolved) and the raw label value.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub paths: Vec<PathBuf>,
    pub label: u64,
}

/// Parses a manifest. Each non-empty line is `path[,path...],label`;
/// relative paths resolve against the manifest's directory.
pub fn read_manifest(manifest: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Parse(format!(
                "{}:{}: expected at least one path and a label",
                manifest.display(),
                lineno + 1
            )));
        }
        let (label, paths) = fields.split_last().unwrap();
        let label: u64 = label.parse().map_err(|_| {
            Error::Parse(format!(
                "{}:{}: label {label:?} is not a non-negative integer",
                manifest.display(),
                lineno + 1
            ))
        })?;
        let paths = paths
            .iter()
            .map(|p| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            })
            .collect();
        entries.push(ManifestEntry { paths, label });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "manifest {} lists no samples",
            manifest.display()
        )));
    }
    Ok(entries)
}

/// Loads every manifest entry and builds both views with `recipe`.
pub fn load_dataset(manifest: impl AsRef<Path>, recipe: &ViewRecipe) -> Result<ViewPairDataset> {
    let entries = read_manifest(manifest)?;
    let pairs = entries
        .par_iter()
        .map(|entry| {
            let planes = entry
                .paths
                .iter()
                .map(load_plane)
                .collect::<Result<Vec<_>>>()?;
            let (v1, v2) = apply_recipe(&planes, recipe)?;
            Ok((v1, v2, entry.label))
        })
        .collect::<Result<Vec<_>>>()?;
    ViewPairDataset::from_labeled(pairs)
}
