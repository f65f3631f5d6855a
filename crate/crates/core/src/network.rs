//! Layer-wise filter learning and batched forward convolution.
//!
//! Each layer is trained on the outputs of the layers before it: the `g`-th
//! map of view 1 is paired with the `g`-th map of view 2 and both inherit the
//! sample's label. Maps are produced on the fly per batch, so training memory
//! does not grow with the dataset.

use ndarray::{Array2, ArrayView2, ShapeBuilder};
use rayon::prelude::*;

use crate::data::{ImagePlane, ViewPairDataset, ViewPairSample};
use crate::dcca::{reshape_filters, solve_dcca, CanonicalPairs, FilterBank, FilterLayer};
use crate::error::{config_err, shape_err, Result};
use crate::exec::ExecSettings;
use crate::moments::{reduce_batches, MomentAccumulator};
use crate::patches::{fill_windows, BatchSpec, Padding, PatchGeometry, PatchMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub filters: usize,
    pub geometry: PatchGeometry,
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub layers: Vec<LayerConfig>,
    pub batch: BatchSpec,
    /// Relative ridge applied to the auto-correlations.
    pub epsilon: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(config_err!("network needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.filters < 1 {
                return Err(config_err!("layer {} must have at least one filter", i + 1));
            }
            if l.filters > l.geometry.dim() {
                return Err(config_err!(
                    "layer {} asks for {} filters but patches have only {} entries",
                    i + 1,
                    l.filters,
                    l.geometry.dim()
                ));
            }
        }
        if self.batch.batch_size < 1 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(config_err!("ridge epsilon must be >= 0"));
        }
        Ok(())
    }
}

/// Feature maps of one sample after some number of layers.
///
/// Map `m` after a layer with `L` filters descends from input map `m / L`
/// through filter `m % L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMaps {
    pub view1: Vec<Array2<f64>>,
    pub view2: Vec<Array2<f64>>,
    pub label: usize,
}

impl SampleMaps {
    fn from_sample(s: &ViewPairSample) -> Self {
        Self {
            view1: vec![s.view1.values().clone()],
            view2: vec![s.view2.values().clone()],
            label: s.label,
        }
    }

    pub fn maps(&self, view: usize) -> &[Array2<f64>] {
        match view {
            0 => &self.view1,
            _ => &self.view2,
        }
    }
}

/// `(parent map, filter)` of output map `index` in a layer with `filters` kernels.
pub fn lineage(index: usize, filters: usize) -> (usize, usize) {
    (index / filters, index % filters)
}

/// Cross-correlation of `map` with `kernel` (no flip), optionally centering
/// each window first.
pub fn conv2d(map: &ImagePlane, kernel: &ArrayView2<f64>, padding: Padding, center: bool) -> Result<ImagePlane> {
    let (l1, l2) = kernel.dim();
    let geom = PatchGeometry::new(l1, l2, 1, padding)?;
    let kmat = kernel
        .to_shape((1, l1 * l2))
        .map_err(|e| shape_err!("kernel reshape failed: {e}"))?
        .to_owned();
    let mut out = filter_map(map.values(), &geom, center, &kmat)?;
    ImagePlane::new(out.pop().expect("one kernel"))
}

/// Applies every row of `kernels` (`L x dim`) to `map`; returns `L` maps.
fn filter_map(
    map: &Array2<f64>,
    geom: &PatchGeometry,
    center: bool,
    kernels: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let (h, w) = map.dim();
    let grid = geom.grid(h, w)?;
    let dim = geom.dim();
    if kernels.ncols() != dim {
        return Err(shape_err!(
            "kernels have {} taps, geometry has {dim}",
            kernels.ncols()
        ));
    }
    let mut buf = vec![0.0; dim * grid.0 * grid.1];
    fill_windows(&map.view(), geom, center, &mut buf);
    let patches = ArrayView2::from_shape((dim, grid.0 * grid.1).f(), &buf)
        .expect("buffer sized for grid");
    let responses = kernels.dot(&patches);
    Ok(responses
        .outer_iter()
        .map(|row| {
            Array2::from_shape_vec(grid, row.to_vec()).expect("row length equals grid size")
        })
        .collect())
}

/// Runs one layer on both views of a sample.
pub fn apply_layer(maps: &SampleMaps, layer: &FilterLayer) -> Result<SampleMaps> {
    let run = |view: usize| -> Result<Vec<Array2<f64>>> {
        let k = layer.kernel_matrix(view);
        let mut out = Vec::with_capacity(maps.maps(view).len() * layer.filters());
        for m in maps.maps(view) {
            out.extend(filter_map(m, &layer.geometry, layer.center, &k)?);
        }
        Ok(out)
    };
    Ok(SampleMaps {
        view1: run(0)?,
        view2: run(1)?,
        label: maps.label,
    })
}

/// Maps of `sample` after the given layers.
pub fn forward_sample(sample: &ViewPairSample, layers: &[FilterLayer]) -> Result<SampleMaps> {
    let mut maps = SampleMaps::from_sample(sample);
    for layer in layers {
        maps = apply_layer(&maps, layer)?;
    }
    Ok(maps)
}

/// Applies `f` to the final maps of every sample, batch by batch, keeping
/// only `f`'s results. Output order is sample order.
pub fn forward_map<T, F>(
    samples: &[ViewPairSample],
    bank: &FilterBank,
    batch: &BatchSpec,
    exec: &ExecSettings,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, SampleMaps) -> Result<T> + Sync,
{
    let ranges = batch.partition(samples.len())?;
    exec.install(|| {
        let mut out = Vec::with_capacity(samples.len());
        for r in ranges {
            let part = r
                .into_par_iter()
                .map(|k| f(k, forward_sample(&samples[k], &bank.layers)?))
                .collect::<Result<Vec<T>>>()?;
            out.extend(part);
        }
        Ok(out)
    })
}

/// Final-layer maps for every sample.
pub fn forward(ds: &ViewPairDataset, bank: &FilterBank, batch: &BatchSpec, exec: &ExecSettings) -> Result<Vec<SampleMaps>> {
    forward_map(ds.samples(), bank, batch, exec, |_, m| Ok(m))
}

/// Accumulates moments for layer `bank.layers.len()` over all samples.
pub fn accumulate_layer(
    ds: &ViewPairDataset,
    bank: &FilterBank,
    cfg: &LayerConfig,
    batch: &BatchSpec,
    exec: &ExecSettings,
) -> Result<MomentAccumulator> {
    let ranges = batch.partition(ds.len())?;
    let dim = cfg.geometry.dim();
    let (h, w) = ds.image_dim();
    // map sizes shrink only with stride or valid padding
    let mut size = (h, w);
    for l in &bank.layers {
        size = l.geometry.grid(size.0, size.1)?;
    }
    let grid = cfg.geometry.grid(size.0, size.1)?;
    reduce_batches(ranges.len(), dim, ds.class_count(), exec, |b, acc| {
        for k in ranges[b].clone() {
            let maps = forward_sample(&ds.samples()[k], &bank.layers)?;
            let mut p1 = PatchMatrix::empty(dim, grid);
            let mut p2 = PatchMatrix::empty(dim, grid);
            for (i, (m1, m2)) in maps.view1.iter().zip(&maps.view2).enumerate() {
                p1.push_map(&m1.view(), &cfg.geometry, cfg.center, i)?;
                p2.push_map(&m2.view(), &cfg.geometry, cfg.center, i)?;
            }
            let labels = vec![maps.label; maps.view1.len()];
            acc.accumulate_samples(&p1, &p2, &labels)?;
        }
        Ok(())
    })
}

/// Trains the next layer on top of `bank`.
pub fn train_layer(
    ds: &ViewPairDataset,
    bank: &FilterBank,
    cfg: &LayerConfig,
    batch: &BatchSpec,
    epsilon: f64,
    exec: &ExecSettings,
) -> Result<(FilterLayer, CanonicalPairs)> {
    let acc = accumulate_layer(ds, bank, cfg, batch, exec)?;
    let moments = acc.finalize(epsilon)?;
    let pairs = solve_dcca(&moments, cfg.filters)?;
    let layer = reshape_filters(&pairs, &cfg.geometry, cfg.center)?;
    Ok((layer, pairs))
}

/// Trains all layers in order.
pub fn train_network(ds: &ViewPairDataset, cfg: &NetworkConfig, exec: &ExecSettings) -> Result<FilterBank> {
    cfg.validate()?;
    let mut bank = FilterBank::default();
    for (i, layer_cfg) in cfg.layers.iter().enumerate() {
        let (layer, pairs) = train_layer(ds, &bank, layer_cfg, &cfg.batch, cfg.epsilon, exec)?;
        log::info!(
            "[train] layer {} learned {} filters per view, leading rho {:.6e}",
            i + 1,
            layer.filters(),
            pairs.rho[0]
        );
        bank.layers.push(layer);
    }
    Ok(bank)
}
