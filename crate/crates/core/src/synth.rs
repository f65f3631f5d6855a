//! Seeded two-class Gaussian-blob image corpus.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{save_pgm, ImagePlane};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Pixel noise standard deviation on the `[0, 1]` scale.
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            size: 16,
            train_per_class: 50,
            test_per_class: 50,
            seed: 0,
            noise: 0.05,
        }
    }
}

/// One blob image; class 0 sits in the upper-left quadrant, class 1 in the
/// lower-right, each with jittered center, width and brightness.
pub fn render_blob(size: usize, class: u64, rng: &mut ChaCha8Rng, noise: f64) -> Result<ImagePlane> {
    let s = size as f64;
    let anchor = if class == 0 { 0.3 * s } else { 0.7 * s };
    let cy = anchor + rng.random_range(-0.06..0.06) * s;
    let cx = anchor + rng.random_range(-0.06..0.06) * s;
    let sigma = s * rng.random_range(0.12..0.18);
    let amp = rng.random_range(0.7..0.95);
    let pix = Normal::new(0.0, noise).map_err(|e| config_err!("invalid noise level: {e}"))?;
    let img = Array2::from_shape_fn((size, size), |(i, j)| {
        let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
        let v = 0.05 + amp * (-d2 / (2.0 * sigma * sigma)).exp() + pix.sample(rng);
        v.clamp(0.0, 1.0)
    });
    ImagePlane::new(img)
}

/// `(train, test)` images with labels, classes interleaved.
pub fn generate_blobs(spec: &BlobSpec) -> Result<(Vec<(ImagePlane, u64)>, Vec<(ImagePlane, u64)>)> {
    if spec.size < 4 {
        return Err(config_err!("blob images need at least 4x4 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |per_class: usize| -> Result<Vec<(ImagePlane, u64)>> {
        let mut out = Vec::with_capacity(2 * per_class);
        for _ in 0..per_class {
            for class in 0..2 {
                out.push((render_blob(spec.size, class, &mut rng, spec.noise)?, class));
            }
        }
        Ok(out)
    };
    let train = split(spec.train_per_class)?;
    let test = split(spec.test_per_class)?;
    Ok((train, test))
}

/// Writes PGM files and `train.csv` / `test.csv` manifests under `dir`.
pub fn write_blob_corpus(dir: impl AsRef<Path>, spec: &BlobSpec) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (train, test) = generate_blobs(spec)?;
    let mut manifests = Vec::new();
    for (name, items) in [("train", train), ("test", test)] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut manifest = String::new();
        for (k, (img, label)) in items.iter().enumerate() {
            let file = format!("{k:05}.pgm");
            save_pgm(img, sub.join(&file))?;
            manifest.push_str(&format!("{name}/{file},{label}\n"));
        }
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        manifests.push(path);
    }
    let test = manifests.pop().unwrap();
    let train = manifests.pop().unwrap();
    Ok((train, test))
}
