//! Binary hashing of final-layer maps and block-histogram
//! self-information features.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{config_err, shape_err, Error, Result};
use crate::network::SampleMaps;

pub const MAX_HASH_BITS: usize = 30;

/// 1 where the response is strictly positive, else 0.
pub fn binarize(map: &Array2<f64>) -> Array2<u8> {
    map.mapv(|v| u8::from(v > 0.0))
}

/// Integer code map `Q = Σ_l 2^(l-1) · bit_l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashedMap {
    pub codes: Array2<u32>,
    pub bits: usize,
}

impl HashedMap {
    pub fn bins(&self) -> usize {
        1 << self.bits
    }
}

/// Combines bit maps with weights `1, 2, 4, ...` in list order.
pub fn hash_combine(bitmaps: &[Array2<u8>]) -> Result<HashedMap> {
    let bits = bitmaps.len();
    if bits == 0 || bits > MAX_HASH_BITS {
        return Err(config_err!(
            "hash pooling combines 1..={MAX_HASH_BITS} maps, got {bits}"
        ));
    }
    let dim = bitmaps[0].dim();
    let mut codes = Array2::<u32>::zeros(dim);
    for (l, b) in bitmaps.iter().enumerate() {
        if b.dim() != dim {
            return Err(shape_err!(
                "bit map {l} is {:?}, expected {:?}",
                b.dim(),
                dim
            ));
        }
        codes.zip_mut_with(b, |q, &bit| *q |= u32::from(bit & 1) << l);
    }
    Ok(HashedMap { codes, bits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroBinPolicy {
    /// Empty bins contribute 0.
    Zero,
    /// Empty bins use `p_min = 1 / (2 · block_pixels)`.
    Floor,
}

impl fmt::Display for ZeroBinPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZeroBinPolicy::Zero => "zero",
            ZeroBinPolicy::Floor => "floor",
        })
    }
}

impl FromStr for ZeroBinPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ZeroBinPolicy::Zero),
            "floor" => Ok(ZeroBinPolicy::Floor),
            other => Err(config_err!("unknown zero-bin policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub block_h: usize,
    pub block_w: usize,
    /// Fraction of a block shared with its neighbor, in `[0, 1)`.
    pub overlap: f64,
    pub zero_bin_policy: ZeroBinPolicy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            block_h: 8,
            block_w: 8,
            overlap: 0.0,
            zero_bin_policy: ZeroBinPolicy::Zero,
        }
    }
}

/// Top-left corners of the blocks tiling a map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub block_h: usize,
    pub block_w: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl BlockLayout {
    /// Block count `A`.
    pub fn count(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn block_pixels(&self) -> usize {
        self.block_h * self.block_w
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_h < 1 || self.block_w < 1 {
            return Err(config_err!("encoder block size must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(config_err!("encoder overlap must be in [0, 1), got {}", self.overlap));
        }
        Ok(())
    }

    /// Blocks step by `round(size · (1 − overlap))`; partial blocks at the
    /// far edges are dropped.
    pub fn layout(&self, h: usize, w: usize) -> Result<BlockLayout> {
        self.validate()?;
        if self.block_h > h || self.block_w > w {
            return Err(shape_err!(
                "block {}x{} larger than map {h}x{w}",
                self.block_h,
                self.block_w
            ));
        }
        let step = |size: usize| ((size as f64 * (1.0 - self.overlap)).round() as usize).max(1);
        let starts = |extent: usize, size: usize| (0..=extent - size).step_by(step(size)).collect();
        Ok(BlockLayout {
            block_h: self.block_h,
            block_w: self.block_w,
            rows: starts(h, self.block_h),
            cols: starts(w, self.block_w),
        })
    }
}

/// Per block, `−ln p(t)` for every code `t`, blocks in row-major scan order.
pub fn iq_block_features(q: &HashedMap, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let (h, w) = q.codes.dim();
    let layout = cfg.layout(h, w)?;
    let mut out = Vec::with_capacity(layout.count() * q.bins());
    push_iq_features(q, &layout, cfg.zero_bin_policy, &mut out);
    Ok(out)
}

fn push_iq_features(q: &HashedMap, layout: &BlockLayout, policy: ZeroBinPolicy, out: &mut Vec<f64>) {
    let bins = q.bins();
    let npix = layout.block_pixels() as f64;
    let empty_value = match policy {
        ZeroBinPolicy::Zero => 0.0,
        ZeroBinPolicy::Floor => (2.0 * npix).ln(),
    };
    let mut counts = vec![0u32; bins];
    for &r in &layout.rows {
        for &c in &layout.cols {
            counts.iter_mut().for_each(|n| *n = 0);
            for i in r..r + layout.block_h {
                for j in c..c + layout.block_w {
                    counts[q.codes[[i, j]] as usize] += 1;
                }
            }
            out.extend(counts.iter().map(|&n| {
                if n == 0 {
                    empty_value
                } else {
                    -(n as f64 / npix).ln()
                }
            }));
        }
    }
}

/// Concatenated two-view feature of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Index where view 2 starts.
    pub view_boundary: usize,
}

/// Feature length for a network whose final layer has `last_filters`
/// kernels and produces `maps_per_view` maps per view.
pub fn feature_len(maps_per_view: usize, last_filters: usize, blocks: usize) -> usize {
    2 * (maps_per_view / last_filters) * (1 << last_filters) * blocks
}

/// Hashes each run of `last_filters` consecutive maps (siblings sharing a
/// parent map) and encodes the codes per block, view 1 then view 2.
pub fn encode_sample(maps: &SampleMaps, last_filters: usize, cfg: &EncoderConfig) -> Result<FeatureVector> {
    if last_filters == 0 || last_filters > MAX_HASH_BITS {
        return Err(config_err!("cannot hash groups of {last_filters} maps"));
    }
    let mut values = Vec::new();
    let mut view_boundary = 0;
    for view in 0..2 {
        let ms = maps.maps(view);
        if ms.is_empty() || ms.len() % last_filters != 0 {
            return Err(shape_err!(
                "{} maps in view {} do not group into runs of {last_filters}",
                ms.len(),
                view + 1
            ));
        }
        let (h, w) = ms[0].dim();
        let layout = cfg.layout(h, w)?;
        values.reserve((ms.len() / last_filters * layout.count()) << last_filters);
        for group in ms.chunks(last_filters) {
            let bits: Vec<Array2<u8>> = group.iter().map(binarize).collect();
            let q = hash_combine(&bits)?;
            push_iq_features(&q, &layout, cfg.zero_bin_policy, &mut values);
        }
        if view == 0 {
            view_boundary = values.len();
        }
    }
    Ok(FeatureVector {
        values,
        view_boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn binarize_cases() {
        let b = binarize(&array![[2.5, 0.0, -1.3]]);
        assert_eq!(b, array![[1u8, 0, 0]]);
        assert!(binarize(&array![[-1.0, -2.0]]).iter().all(|&v| v == 0));
        let ones = array![[1.0, 0.0]];
        assert_eq!(binarize(&binarize(&ones).mapv(f64::from)), binarize(&ones));
    }

    #[test]
    fn hash_weights() {
        let one = Array2::<u8>::ones((1, 1));
        let zero = Array2::<u8>::zeros((1, 1));
        assert_eq!(hash_combine(&vec![one.clone(); 8]).unwrap().codes[[0, 0]], 255);
        assert_eq!(hash_combine(&vec![zero.clone(); 8]).unwrap().codes[[0, 0]], 0);
        let pattern: Vec<Array2<u8>> = [1, 0, 1, 0, 0, 0, 0, 0]
            .iter()
            .map(|&b| if b == 1 { one.clone() } else { zero.clone() })
            .collect();
        assert_eq!(hash_combine(&pattern).unwrap().codes[[0, 0]], 5);
        assert!(hash_combine(&[one, Array2::zeros((2, 1))]).is_err());
        assert!(hash_combine(&[]).is_err());
    }

    #[test]
    fn one_hot_and_split_blocks() {
        let cfg = EncoderConfig { block_h: 2, block_w: 2, ..Default::default() };
        let q = HashedMap { codes: Array2::from_elem((2, 2), 3), bits: 2 };
        assert_eq!(iq_block_features(&q, &cfg).unwrap(), vec![0.0; 4]);

        let q = HashedMap { codes: array![[0, 0], [2, 2]], bits: 2 };
        let f = iq_block_features(&q, &cfg).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(f, vec![ln2, 0.0, ln2, 0.0]);

        let floor = EncoderConfig { zero_bin_policy: ZeroBinPolicy::Floor, ..cfg };
        let f = iq_block_features(&q, &floor).unwrap();
        assert_eq!(f[1], 8f64.ln());
    }

    #[test]
    fn layout_rules() {
        let cfg = EncoderConfig { block_h: 4, block_w: 3, overlap: 0.0, zero_bin_policy: ZeroBinPolicy::Zero };
        let l = cfg.layout(9, 7).unwrap();
        assert_eq!(l.rows, vec![0, 4]);
        assert_eq!(l.cols, vec![0, 3]);
        let half = EncoderConfig { overlap: 0.5, ..cfg };
        let l = half.layout(8, 6).unwrap();
        assert_eq!(l.rows, vec![0, 2, 4]);
        assert_eq!(l.cols, vec![0, 2]);
        assert!(cfg.layout(3, 7).is_err());
        assert!(EncoderConfig { overlap: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn single_filter_single_block_length() {
        let maps = SampleMaps {
            view1: vec![array![[1.0, -1.0], [0.5, 0.0]]],
            view2: vec![array![[1.0, -1.0], [0.5, 0.0]]],
            label: 0,
        };
        let cfg = EncoderConfig { block_h: 2, block_w: 2, ..Default::default() };
        let f = encode_sample(&maps, 1, &cfg).unwrap();
        assert_eq!(f.values.len(), 2 * 2);
        assert_eq!(f.view_boundary, 2);
        assert_eq!(f.values[..2], f.values[2..]);
        assert_eq!(feature_len(1, 1, 1) , 4);
    }

    #[test]
    fn grouping_mismatch() {
        let maps = SampleMaps {
            view1: vec![Array2::zeros((2, 2)); 3],
            view2: vec![Array2::zeros((2, 2)); 3],
            label: 0,
        };
        let cfg = EncoderConfig { block_h: 2, block_w: 2, ..Default::default() };
        assert!(matches!(encode_sample(&maps, 2, &cfg), Err(Error::Shape(_))));
    }
}
