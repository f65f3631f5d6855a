//! Downstream classifiers and accuracy reports.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{config_err, shape_err, Error, Result};
use crate::exec::ExecSettings;
use crate::linalg::spd_solve;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(config_err!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassifierKind {
    NearestNeighbor(Metric),
    /// One-vs-all ridge regression; `None` picks `1e-3 · trace(XᵀX) / dim`.
    Ridge { lambda: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierModel {
    NearestNeighbor {
        metric: Metric,
        features: Array2<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
    Ridge {
        lambda: f64,
        /// `classes x (dim + 1)`; the last column is the bias.
        weights: Array2<f64>,
    },
}

impl ClassifierModel {
    pub fn classes(&self) -> usize {
        match self {
            ClassifierModel::NearestNeighbor { classes, .. } => *classes,
            ClassifierModel::Ridge { weights, .. } => weights.nrows(),
        }
    }

    pub fn feature_len(&self) -> usize {
        match self {
            ClassifierModel::NearestNeighbor { features, .. } => features.ncols(),
            ClassifierModel::Ridge { weights, .. } => weights.ncols() - 1,
        }
    }
}

/// Fits a classifier on `features` (one row per sample).
pub fn fit(features: &ArrayView2<f64>, labels: &[usize], classes: usize, kind: ClassifierKind) -> Result<ClassifierModel> {
    let (n, d) = features.dim();
    if n != labels.len() {
        return Err(shape_err!("{n} feature rows but {} labels", labels.len()));
    }
    if n == 0 || d == 0 {
        return Err(Error::EmptyDataset("no training features".into()));
    }
    let mut per_class = vec![0usize; classes];
    for &l in labels {
        *per_class
            .get_mut(l)
            .ok_or_else(|| shape_err!("label {l} out of range for {classes} classes"))? += 1;
    }
    if let Some(c) = per_class.iter().position(|&k| k == 0) {
        return Err(config_err!("class {c} has no training samples"));
    }
    match kind {
        ClassifierKind::NearestNeighbor(metric) => Ok(ClassifierModel::NearestNeighbor {
            metric,
            features: features.to_owned(),
            labels: labels.to_vec(),
            classes,
        }),
        ClassifierKind::Ridge { lambda } => fit_ridge(features, labels, classes, lambda),
    }
}

fn augment(x: &ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut a = Array2::ones((n, d + 1));
    a.slice_mut(ndarray::s![.., ..d]).assign(x);
    a
}

fn fit_ridge(x: &ArrayView2<f64>, labels: &[usize], classes: usize, lambda: Option<f64>) -> Result<ClassifierModel> {
    let xa = augment(x);
    let (n, da) = xa.dim();
    let lambda = match lambda {
        Some(l) if l > 0.0 && l.is_finite() => l,
        Some(l) => return Err(config_err!("ridge lambda must be > 0, got {l}")),
        None => {
            let trace: f64 = xa.iter().map(|v| v * v).sum();
            let l = 1e-3 * trace / da as f64;
            if !(l > 0.0) {
                return Err(Error::Numerical("features are all zero; ridge lambda is undefined".into()));
            }
            l
        }
    };
    let mut y = Array2::from_elem((n, classes), -1.0);
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    // solve in whichever of the primal (da x da) or dual (n x n) spaces is smaller
    let w = if da <= n {
        let mut g = xa.t().dot(&xa);
        g.diag_mut().iter_mut().for_each(|v| *v += lambda);
        spd_solve(&g.view(), &xa.t().dot(&y).view())?
    } else {
        let mut k = xa.dot(&xa.t());
        k.diag_mut().iter_mut().for_each(|v| *v += lambda);
        let alpha = spd_solve(&k.view(), &y.view())?;
        xa.t().dot(&alpha)
    };
    Ok(ClassifierModel::Ridge {
        lambda,
        weights: w.reversed_axes().as_standard_layout().to_owned(),
    })
}

fn distance(metric: Metric, a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Metric::Cosine => {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            if aa == 0.0 || bb == 0.0 {
                1.0
            } else {
                1.0 - ab / (aa.sqrt() * bb.sqrt())
            }
        }
    }
}

/// Class of one feature vector. Ties go to the lowest class id.
pub fn predict(model: &ClassifierModel, feature: &ArrayView1<f64>) -> Result<usize> {
    if feature.len() != model.feature_len() {
        return Err(shape_err!(
            "feature has length {}, model expects {}",
            feature.len(),
            model.feature_len()
        ));
    }
    Ok(match model {
        ClassifierModel::NearestNeighbor {
            metric,
            features,
            labels,
            ..
        } => {
            let mut best = (f64::INFINITY, usize::MAX);
            for (row, &label) in features.axis_iter(Axis(0)).zip(labels) {
                let d = distance(*metric, &row, feature);
                if d < best.0 || (d == best.0 && label < best.1) {
                    best = (d, label);
                }
            }
            best.1
        }
        ClassifierModel::Ridge { weights, .. } => {
            let d = feature.len();
            let mut best = (f64::NEG_INFINITY, 0);
            for (c, w) in weights.axis_iter(Axis(0)).enumerate() {
                let score = w.slice(ndarray::s![..d]).dot(feature) + w[d];
                if score > best.0 {
                    best = (score, c);
                }
            }
            best.1
        }
    })
}

pub fn predict_all(model: &ClassifierModel, features: &ArrayView2<f64>, exec: &ExecSettings) -> Result<Vec<usize>> {
    exec.install(|| {
        (0..features.nrows())
            .into_par_iter()
            .map(|i| predict(model, &features.row(i)))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// `(stage, seconds)` in execution order.
    pub timings: Vec<(String, f64)>,
    pub threads: usize,
    pub deterministic: bool,
}

impl EvalReport {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("accuracy,{:.6}\n", self.accuracy));
        out.push_str(&format!("test_samples,{}\n", self.total()));
        out.push_str(&format!("threads,{}\n", self.threads));
        out.push_str(&format!("deterministic,{}\n", self.deterministic));
        for (stage, secs) in &self.timings {
            out.push_str(&format!("time_{stage}_s,{secs:.6}\n"));
        }
        for (c, acc) in self.per_class_accuracy.iter().enumerate() {
            if let Some(a) = acc {
                out.push_str(&format!("class_{c}_accuracy,{a:.6}\n"));
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "accuracy: {:.2}% ({} test samples, {} threads, deterministic={})",
            100.0 * self.accuracy,
            self.total(),
            self.threads,
            self.deterministic
        )?;
        for (stage, secs) in &self.timings {
            writeln!(f, "  {stage:<12} {secs:>10.3} s")?;
        }
        Ok(())
    }
}

/// Scores `model` on labeled test features.
pub fn evaluate(
    model: &ClassifierModel,
    features: &ArrayView2<f64>,
    labels: &[usize],
    timings: Vec<(String, f64)>,
    exec: &ExecSettings,
) -> Result<EvalReport> {
    if features.nrows() == 0 {
        return Err(Error::EmptyDataset("no test samples".into()));
    }
    if features.nrows() != labels.len() {
        return Err(shape_err!("{} test rows but {} labels", features.nrows(), labels.len()));
    }
    let preds = predict_all(model, features, exec)?;
    let classes = model.classes().max(labels.iter().map(|&l| l + 1).max().unwrap_or(0));
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in labels.iter().zip(&preds) {
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class_accuracy,
        confusion,
        timings,
        threads: exec.effective_threads(),
        deterministic: exec.deterministic,
    })
}

/// Row-stacks equal-length vectors.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(shape_err!("feature vectors differ in length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| shape_err!("{e}"))
}
