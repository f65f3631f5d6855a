//! Train / extract / eval / bench orchestration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use crate::classify::{self, ClassifierKind, ClassifierModel, EvalReport, Metric};
use crate::config::PipelineConfig;
use crate::data::{load_dataset, ViewPairDataset};
use crate::dcca::FilterBank;
use crate::encoder::{encode_sample, feature_len};
use crate::error::{config_err, Error, Result};
use crate::exec::ExecSettings;
use crate::model::ModelArtifact;
use crate::moments::MomentAccumulator;
use crate::network::{accumulate_layer, forward_map, train_network};

/// Wall-clock seconds per named stage, in execution order.
#[derive(Debug, Default, Clone)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| {
            log::error!("[{stage}] {e}");
            e
        })?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("[{stage}] done in {secs:.3} s");
        self.0.push((stage.to_string(), secs));
        Ok(out)
    }
}

/// Encoded features of every sample in `ds`, one row per sample.
pub fn extract_features(
    ds: &ViewPairDataset,
    bank: &FilterBank,
    cfg: &PipelineConfig,
    exec: &ExecSettings,
) -> Result<Array2<f64>> {
    let last = bank
        .layers
        .last()
        .ok_or_else(|| config_err!("filter bank has no layers"))?
        .filters();
    let encoder = cfg.encoder;
    let rows = forward_map(ds.samples(), bank, &cfg.network.batch, exec, |_, maps| {
        Ok(encode_sample(&maps, last, &encoder)?.values)
    })?;
    classify::stack_rows(&rows)
}

/// Expected feature length for images of size `h x w`.
pub fn expected_feature_len(cfg: &PipelineConfig, h: usize, w: usize) -> Result<usize> {
    let (mut rows, mut cols) = (h, w);
    let mut maps = 1;
    for l in &cfg.network.layers {
        (rows, cols) = l.geometry.grid(rows, cols)?;
        maps *= l.filters;
    }
    let blocks = cfg.encoder.layout(rows, cols)?.count();
    let last = cfg.network.layers.last().map_or(1, |l| l.filters);
    Ok(feature_len(maps, last, blocks))
}

pub struct TrainOutcome {
    pub artifact: ModelArtifact,
    pub train_features: Array2<f64>,
    pub report: EvalReport,
}

/// Layer-wise training, extraction, fitting and evaluation on the training
/// split itself.
pub fn train_on(ds: &ViewPairDataset, cfg: &PipelineConfig, mut timings: Timings) -> Result<TrainOutcome> {
    let exec = cfg.exec;
    let bank = timings.time("train", || train_network(ds, &cfg.network, &exec))?;
    let features = timings.time("extract", || extract_features(ds, &bank, cfg, &exec))?;
    let labels = ds.labels();
    let classifier = timings.time("fit", || {
        classify::fit(&features.view(), &labels, ds.class_count(), cfg.classifier)
    })?;
    let report_timings = timings.0.clone();
    let report = classify::evaluate(&classifier, &features.view(), &labels, report_timings, &exec)?;
    Ok(TrainOutcome {
        artifact: ModelArtifact {
            config: cfg.clone(),
            bank,
            classifier,
            class_values: ds.class_values().to_vec(),
        },
        train_features: features,
        report,
    })
}

/// Loads the training manifest, trains, and writes the model file.
pub fn cmd_train(cfg: &PipelineConfig, model_out: Option<&Path>) -> Result<TrainOutcome> {
    let manifest = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| config_err!("data.train is not set"))?;
    let model_path = model_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.model_path.clone())
        .ok_or_else(|| config_err!("no model path: set model.path or pass --model"))?;
    let mut timings = Timings::default();
    let ds = timings.time("views", || load_dataset(manifest, &cfg.recipe))?;
    log::info!(
        "[views] {} samples, {} classes, {:?} images, recipe {}",
        ds.len(),
        ds.class_count(),
        ds.image_dim(),
        cfg.recipe
    );
    let outcome = train_on(&ds, cfg, timings)?;
    outcome.artifact.save(&model_path)?;
    log::info!("[train] model written to {}", model_path.display());
    Ok(outcome)
}

/// Dataset for a trained model with labels mapped onto the model's class ids.
pub fn load_for_model(artifact: &ModelArtifact, manifest: &Path) -> Result<(ViewPairDataset, Vec<usize>)> {
    let ds = load_dataset(manifest, &artifact.config.recipe)?;
    let labels = ds
        .samples()
        .iter()
        .map(|s| {
            let raw = ds.class_values()[s.label];
            artifact
                .class_values
                .iter()
                .position(|&v| v == raw)
                .ok_or_else(|| config_err!("label {raw} does not occur in the training data"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ds, labels))
}

/// Rows `sample_id,f1,f2,...` with 17 significant digits.
pub fn features_csv(features: &ArrayView2<f64>) -> String {
    let mut out = String::with_capacity(features.len() * 24);
    for (i, row) in features.rows().into_iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

fn check_feature_len(model: &ClassifierModel, features: &Array2<f64>) -> Result<()> {
    if model.feature_len() != features.ncols() {
        return Err(Error::Shape(format!(
            "model expects {} features per sample but the manifest produces {} (image size differs from training?)",
            model.feature_len(),
            features.ncols()
        )));
    }
    Ok(())
}

pub fn cmd_extract(model: &Path, manifest: &Path, out: &Path, exec: &ExecSettings) -> Result<Array2<f64>> {
    let artifact = ModelArtifact::load(model)?;
    let ds = load_dataset(manifest, &artifact.config.recipe)?;
    let features = extract_features(&ds, &artifact.bank, &artifact.config, exec)?;
    check_feature_len(&artifact.classifier, &features)?;
    fs::write(out, features_csv(&features.view())).map_err(|e| Error::io(out, e))?;
    log::info!("[extract] {} x {} features written to {}", features.nrows(), features.ncols(), out.display());
    Ok(features)
}

pub fn cmd_eval(model: &Path, manifest: &Path, exec: &ExecSettings) -> Result<EvalReport> {
    let mut timings = Timings::default();
    let artifact = timings.time("load", || ModelArtifact::load(model))?;
    let (ds, labels) = timings.time("views", || load_for_model(&artifact, manifest))?;
    let features = timings.time("extract", || {
        let f = extract_features(&ds, &artifact.bank, &artifact.config, exec)?;
        check_feature_len(&artifact.classifier, &f)?;
        Ok(f)
    })?;
    let start = Instant::now();
    let mut report = classify::evaluate(&artifact.classifier, &features.view(), &labels, Vec::new(), exec)?;
    timings.0.push(("predict".into(), start.elapsed().as_secs_f64()));
    report.timings = timings.0;
    Ok(report)
}

/// Nearest-neighbor accuracy on flattened view-1 pixels.
pub fn raw_pixel_baseline(train: &ViewPairDataset, test: &ViewPairDataset, exec: &ExecSettings) -> Result<f64> {
    let flat = |ds: &ViewPairDataset| {
        let rows: Vec<Vec<f64>> = ds.samples().iter().map(|s| s.view1.values().iter().copied().collect()).collect();
        classify::stack_rows(&rows)
    };
    let model = classify::fit(
        &flat(train)?.view(),
        &train.labels(),
        train.class_count(),
        ClassifierKind::NearestNeighbor(Metric::Euclidean),
    )?;
    let test_labels = test
        .samples()
        .iter()
        .map(|s| {
            let raw = test.class_values()[s.label];
            train
                .class_values()
                .iter()
                .position(|&v| v == raw)
                .ok_or_else(|| config_err!("label {raw} does not occur in the training data"))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = classify::evaluate(&model, &flat(test)?.view(), &test_labels, Vec::new(), exec)?;
    Ok(report.accuracy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub stage: String,
    pub threads: usize,
    pub median_seconds: f64,
    pub speedup: f64,
    pub outputs_match: bool,
}

pub const BENCH_REPS: usize = 3;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn close(a: &[f64], b: &[f64], deterministic: bool) -> bool {
    if deterministic {
        return a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-10 * scale)
}

fn flatten_moments(accs: &[MomentAccumulator]) -> Vec<f64> {
    let mut out = Vec::new();
    for a in accs {
        out.extend(a.c11().iter());
        out.extend(a.c22().iter());
        let (s1, s2) = a.class_sums();
        out.extend(s1.iter());
        out.extend(s2.iter());
    }
    out
}

/// Times moment accumulation (every layer, on the trained bank's inputs) and
/// forward + encode at each thread count.
///
/// The filter bank is trained once sequentially; each stage then runs
/// `BENCH_REPS` times per thread count. Outputs are compared against the
/// first thread count in the list.
pub fn bench_on(ds: &ViewPairDataset, cfg: &PipelineConfig, threads: &[usize]) -> Result<Vec<BenchRow>> {
    if threads.is_empty() {
        return Err(config_err!("bench needs at least one thread count"));
    }
    let seq = ExecSettings { threads: 1, ..cfg.exec };
    log::info!("[bench] training reference filter bank on {} samples", ds.len());
    let bank = train_network(ds, &cfg.network, &seq)?;

    let accumulate = |exec: &ExecSettings| -> Result<Vec<MomentAccumulator>> {
        (0..cfg.network.layers.len())
            .map(|i| {
                let prefix = FilterBank {
                    layers: bank.layers[..i].to_vec(),
                };
                accumulate_layer(ds, &prefix, &cfg.network.layers[i], &cfg.network.batch, exec)
            })
            .collect()
    };
    let forward = |exec: &ExecSettings| -> Result<Vec<f64>> {
        Ok(extract_features(ds, &bank, cfg, exec)?.into_iter().collect())
    };

    let mut rows = Vec::new();
    let mut reference: [Option<(f64, Vec<f64>)>; 2] = [None, None];
    for &t in threads {
        let exec = ExecSettings { threads: t, ..cfg.exec };
        for (s, stage) in ["accumulate", "forward"].into_iter().enumerate() {
            let mut secs = Vec::with_capacity(BENCH_REPS);
            let mut output = Vec::new();
            for _ in 0..BENCH_REPS {
                let start = Instant::now();
                output = if s == 0 {
                    flatten_moments(&accumulate(&exec)?)
                } else {
                    forward(&exec)?
                };
                secs.push(start.elapsed().as_secs_f64());
            }
            let med = median(secs);
            let (base, matches) = match &reference[s] {
                None => {
                    reference[s] = Some((med, output));
                    (med, true)
                }
                Some((base, out)) => (*base, close(out, &output, cfg.exec.deterministic)),
            };
            log::info!("[bench] {stage} threads={t} median {med:.3} s speedup {:.2}", base / med);
            rows.push(BenchRow {
                stage: stage.into(),
                threads: t,
                median_seconds: med,
                speedup: base / med,
                outputs_match: matches,
            });
        }
    }
    // per-thread-count total of both stages
    let total = |t: usize| -> (f64, bool) {
        let sel = rows.iter().filter(|r| r.threads == t);
        (
            sel.clone().map(|r| r.median_seconds).sum(),
            sel.clone().all(|r| r.outputs_match),
        )
    };
    let base = total(threads[0]).0;
    let totals: Vec<BenchRow> = threads
        .iter()
        .map(|&t| {
            let (sum, ok) = total(t);
            BenchRow {
                stage: "total".into(),
                threads: t,
                median_seconds: sum,
                speedup: base / sum,
                outputs_match: ok,
            }
        })
        .collect();
    rows.extend(totals);
    Ok(rows)
}

pub fn cmd_bench(cfg: &PipelineConfig, threads: &[usize]) -> Result<Vec<BenchRow>> {
    let manifest = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| config_err!("data.train is not set"))?;
    let ds = load_dataset(manifest, &cfg.recipe)?;
    bench_on(&ds, cfg, threads)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("stage,threads,median_seconds,speedup,outputs_match\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.3},{}",
            r.stage, r.threads, r.median_seconds, r.speedup, r.outputs_match
        );
    }
    out
}

/// Config path plus the directory outputs default to.
pub fn default_output(config: &Path, name: &str) -> PathBuf {
    config.parent().unwrap_or_else(|| Path::new(".")).join(name)
}
