//! Patch vectorization (im2col) and batch partitioning.
//!
//! A [`PatchMatrix`] has one column per window position; each column is the
//! row-major scan of an `l1 x l2` window. Columns are stored contiguously
//! (column-major) so a batch of patches is a single dense buffer.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{ArrayView2, ShapeBuilder};

use crate::data::{ImagePlane, ViewPairDataset};
use crate::error::{config_err, shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Only windows that lie fully inside the image.
    None,
    /// Zero padding so each window anchor is a pixel; output size `ceil(p/stride) x ceil(q/stride)`.
    ZeroSame,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::None => "none",
            Padding::ZeroSame => "zero_same",
        })
    }
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Padding::None),
            "zero_same" => Ok(Padding::ZeroSame),
            other => Err(config_err!("unknown padding {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub l1: usize,
    pub l2: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl PatchGeometry {
    pub fn new(l1: usize, l2: usize, stride: usize, padding: Padding) -> Result<Self> {
        if l1 == 0 || l2 == 0 {
            return Err(config_err!("patch size must be positive, got {l1}x{l2}"));
        }
        if stride == 0 {
            return Err(config_err!("patch stride must be positive"));
        }
        Ok(Self {
            l1,
            l2,
            stride,
            padding,
        })
    }

    /// Square window, stride 1, zero-same padding.
    pub fn same(l1: usize, l2: usize) -> Self {
        Self {
            l1,
            l2,
            stride: 1,
            padding: Padding::ZeroSame,
        }
    }

    pub fn dim(&self) -> usize {
        self.l1 * self.l2
    }

    /// Rows and columns of zero padding before the image. For even sizes
    /// the window anchor is its top-left pixel of the central 2x2 block.
    pub fn pad_before(&self) -> (usize, usize) {
        match self.padding {
            Padding::None => (0, 0),
            Padding::ZeroSame => ((self.l1 - 1) / 2, (self.l2 - 1) / 2),
        }
    }

    /// Number of window positions along each axis for an `h x w` plane.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.l1 > h || self.l2 > w {
            return Err(shape_err!(
                "patch {}x{} exceeds image {h}x{w}",
                self.l1,
                self.l2
            ));
        }
        Ok(match self.padding {
            Padding::None => ((h - self.l1) / self.stride + 1, (w - self.l2) / self.stride + 1),
            Padding::ZeroSame => (h.div_ceil(self.stride), w.div_ceil(self.stride)),
        })
    }
}

/// Where a patch column came from: sample index and window grid position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    dim: usize,
    data: Vec<f64>,
    grid: (usize, usize),
    samples: Vec<usize>,
}

impl PatchMatrix {
    pub fn empty(dim: usize, grid: (usize, usize)) -> Self {
        Self {
            dim,
            data: Vec::new(),
            grid,
            samples: Vec::new(),
        }
    }

    /// Rows, `l1 * l2`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cols(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn per_sample(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.samples
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    /// `dim x cols` view over the column-major buffer.
    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.dim, self.cols()).f(), &self.data)
            .expect("buffer length is a multiple of dim")
    }

    pub fn origin(&self, c: usize) -> PatchOrigin {
        let per = self.per_sample();
        let local = c % per;
        PatchOrigin {
            sample: self.samples[c / per],
            row: local / self.grid.1,
            col: local % self.grid.1,
        }
    }

    /// Appends all windows of `plane`, tagged with sample id `sample`.
    pub fn push_plane(
        &mut self,
        plane: &ImagePlane,
        geom: &PatchGeometry,
        center: bool,
        sample: usize,
    ) -> Result<()> {
        self.push_map(&plane.values().view(), geom, center, sample)
    }

    /// [`push_plane`](Self::push_plane) for a raw feature map.
    pub fn push_map(
        &mut self,
        map: &ArrayView2<f64>,
        geom: &PatchGeometry,
        center: bool,
        sample: usize,
    ) -> Result<()> {
        if geom.dim() != self.dim {
            return Err(shape_err!(
                "patch geometry dim {} does not match matrix dim {}",
                geom.dim(),
                self.dim
            ));
        }
        let (h, w) = map.dim();
        let grid = geom.grid(h, w)?;
        if grid != self.grid {
            return Err(shape_err!(
                "plane yields a {grid:?} grid, matrix holds {:?}",
                self.grid
            ));
        }
        let start = self.data.len();
        self.data.resize(start + self.dim * grid.0 * grid.1, 0.0);
        fill_windows(map, geom, center, &mut self.data[start..]);
        self.samples.push(sample);
        Ok(())
    }

    /// Wraps an explicit `dim x n` matrix as the patches of one sample.
    pub fn from_columns(cols: &ArrayView2<f64>, sample: usize) -> PatchMatrix {
        let (dim, n) = cols.dim();
        let mut data = Vec::with_capacity(dim * n);
        for c in cols.columns() {
            data.extend(c.iter().copied());
        }
        PatchMatrix {
            dim,
            data,
            grid: (1, n),
            samples: vec![sample],
        }
    }

    /// Horizontal concatenation, preserving column order.
    pub fn hconcat(parts: &[PatchMatrix]) -> Result<PatchMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("cannot concatenate zero patch matrices"))?;
        let mut out = PatchMatrix::empty(first.dim, first.grid);
        for p in parts {
            if p.dim != out.dim || p.grid != out.grid {
                return Err(shape_err!("patch matrices differ in dim or grid"));
            }
            out.data.extend_from_slice(&p.data);
            out.samples.extend_from_slice(&p.samples);
        }
        Ok(out)
    }
}

/// Writes every window of `plane` into `out` (column-major, `dim` per column).
pub(crate) fn fill_windows(src: &ArrayView2<f64>, geom: &PatchGeometry, center: bool, out: &mut [f64]) {
    let (h, w) = src.dim();
    let (gr, gc) = geom.grid(h, w).expect("geometry validated by caller");
    let (pt, pl) = geom.pad_before();
    let dim = geom.dim();
    debug_assert_eq!(out.len(), dim * gr * gc);
    let mut col = 0;
    for i in 0..gr {
        let r0 = (i * geom.stride) as isize - pt as isize;
        for j in 0..gc {
            let c0 = (j * geom.stride) as isize - pl as isize;
            let dst = &mut out[col * dim..(col + 1) * dim];
            let mut k = 0;
            for a in 0..geom.l1 {
                let r = r0 + a as isize;
                let row_ok = r >= 0 && (r as usize) < h;
                for b in 0..geom.l2 {
                    let c = c0 + b as isize;
                    dst[k] = if row_ok && c >= 0 && (c as usize) < w {
                        src[[r as usize, c as usize]]
                    } else {
                        0.0
                    };
                    k += 1;
                }
            }
            if center {
                let mean = dst.iter().sum::<f64>() / dim as f64;
                dst.iter_mut().for_each(|v| *v -= mean);
            }
            col += 1;
        }
    }
}

/// All windows of one plane as a patch matrix (sample id 0).
pub fn extract_patches(plane: &ImagePlane, geom: &PatchGeometry, center: bool) -> Result<PatchMatrix> {
    let grid = geom.grid(plane.height(), plane.width())?;
    let mut m = PatchMatrix::empty(geom.dim(), grid);
    m.push_plane(plane, geom, center, 0)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { batch_size: 128 }
    }
}

impl BatchSpec {
    /// Contiguous ranges covering `0..len`; all but the last have `batch_size` items.
    pub fn partition(&self, len: usize) -> Result<Vec<Range<usize>>> {
        if self.batch_size < 1 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if len == 0 {
            return Err(Error::EmptyDataset("cannot partition zero samples".into()));
        }
        Ok((0..len)
            .step_by(self.batch_size)
            .map(|s| s..(s + self.batch_size).min(len))
            .collect())
    }
}

pub fn batch_partition(ds: &ViewPairDataset, spec: &BatchSpec) -> Result<Vec<Range<usize>>> {
    spec.partition(ds.len())
}
