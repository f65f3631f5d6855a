//! Construction of the two views from raw input planes.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::data::ImagePlane;
use crate::error::{shape_err, Error, Result};

/// How the two views of a sample are derived from its input planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewRecipe {
    /// `(gray, lbp_map(gray))` from the first plane.
    LbpPlusGray,
    /// Two planes of a multi-channel source, e.g. R and G.
    ChannelSplit { c1: usize, c2: usize },
    /// Exactly two supplied planes used as-is.
    ExternalPair,
    /// The first plane duplicated; for debugging.
    IdentityPair,
}

impl ViewRecipe {
    pub fn name(&self) -> &'static str {
        match self {
            ViewRecipe::LbpPlusGray => "lbp_plus_gray",
            ViewRecipe::ChannelSplit { .. } => "channel_split",
            ViewRecipe::ExternalPair => "external_pair",
            ViewRecipe::IdentityPair => "identity_pair",
        }
    }
}

impl fmt::Display for ViewRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewRecipe {
    type Err = Error;

    /// Parses the recipe name; channel indices default to `(0, 1)`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbp_plus_gray" => Ok(ViewRecipe::LbpPlusGray),
            "channel_split" => Ok(ViewRecipe::ChannelSplit { c1: 0, c2: 1 }),
            "external_pair" => Ok(ViewRecipe::ExternalPair),
            "identity_pair" => Ok(ViewRecipe::IdentityPair),
            other => Err(Error::Recipe(format!("unknown view recipe {other:?}"))),
        }
    }
}

// clockwise from the top-left neighbor; bit n of the code is neighbor n
const LBP_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// 8-neighbor radius-1 local binary pattern map, scaled by 1/255.
///
/// A neighbor contributes its bit when strictly greater than the center.
/// Neighbors outside the image read as zero.
pub fn lbp_map(img: &ImagePlane) -> Result<ImagePlane> {
    let (h, w) = img.dim();
    if h < 3 || w < 3 {
        return Err(shape_err!("lbp_map needs at least 3x3, got {h}x{w}"));
    }
    let src = img.values();
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let center = src[[r, c]];
            let mut code = 0u32;
            for (bit, &(dr, dc)) in LBP_OFFSETS.iter().enumerate() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                let neighbor = if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    0.0
                } else {
                    src[[nr as usize, nc as usize]]
                };
                if neighbor > center {
                    code |= 1 << bit;
                }
            }
            out[[r, c]] = code as f64 / 255.0;
        }
    }
    ImagePlane::new(out)
}

/// Builds `(view1, view2)` from a sample's input planes.
pub fn apply_recipe(planes: &[ImagePlane], recipe: &ViewRecipe) -> Result<(ImagePlane, ImagePlane)> {
    let first = || {
        planes
            .first()
            .ok_or_else(|| Error::Recipe("sample has no input planes".into()))
    };
    let (v1, v2) = match *recipe {
        ViewRecipe::LbpPlusGray => {
            let gray = first()?;
            (gray.clone(), lbp_map(gray)?)
        }
        ViewRecipe::IdentityPair => {
            let gray = first()?;
            (gray.clone(), gray.clone())
        }
        ViewRecipe::ExternalPair => {
            if planes.len() != 2 {
                return Err(Error::Recipe(format!(
                    "external_pair needs exactly 2 planes, got {}",
                    planes.len()
                )));
            }
            (planes[0].clone(), planes[1].clone())
        }
        ViewRecipe::ChannelSplit { c1, c2 } => {
            let n = planes.len();
            if c1 >= n || c2 >= n {
                return Err(Error::Recipe(format!(
                    "channel_split({c1}, {c2}) needs more than {} channels, got {n}",
                    c1.max(c2)
                )));
            }
            (planes[c1].clone(), planes[c2].clone())
        }
    };
    if v1.dim() != v2.dim() {
        return Err(shape_err!(
            "views differ in size: {:?} vs {:?}",
            v1.dim(),
            v2.dim()
        ));
    }
    Ok((v1, v2))
}
