//! Versioned text model file.
//!
//! ```text
//! DDCCANET v1
//! [config]
//! key = value
//! [classes]
//! <label values>
//! [filters]
//! layer <i> view <v> kernel <g> <rows> <cols>
//! <row-major values>
//! [classifier]
//! ...
//! [end]
//! checksum <crc32 hex of every preceding byte>
//! ```
//!
//! Floats are written with 17 significant digits so they load bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::classify::{ClassifierModel, Metric};
use crate::config::PipelineConfig;
use crate::dcca::{FilterBank, FilterLayer};
use crate::error::{Error, Result};

pub const MAGIC: &str = "DDCCANET v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub config: PipelineConfig,
    pub bank: FilterBank,
    pub classifier: ClassifierModel,
    /// Original label value of each class id.
    pub class_values: Vec<u64>,
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row(out: &mut String, row: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in row {
        if !first {
            out.push(' ');
        }
        first = false;
        out.push_str(&num(v));
    }
    out.push('\n');
}

fn push_matrix(out: &mut String, m: &Array2<f64>) {
    for row in m.rows() {
        push_row(out, row.iter().copied());
    }
}

impl ModelArtifact {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');

        out.push_str("[config]\n");
        for (k, v) in self.config.snapshot() {
            let _ = writeln!(out, "{k} = {v}");
        }

        out.push_str("[classes]\n");
        let labels: Vec<String> = self.class_values.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "{}", labels.join(" "));

        out.push_str("[filters]\n");
        for (i, layer) in self.bank.layers.iter().enumerate() {
            for view in 0..2 {
                for (g, k) in layer.kernels(view).iter().enumerate() {
                    let _ = writeln!(out, "layer {} view {} kernel {} {} {}", i + 1, view + 1, g + 1, k.nrows(), k.ncols());
                    push_matrix(&mut out, k);
                }
            }
        }

        out.push_str("[classifier]\n");
        match &self.classifier {
            ClassifierModel::Ridge { lambda, weights } => {
                let _ = writeln!(out, "ridge {} {} {}", num(*lambda), weights.nrows(), weights.ncols());
                push_matrix(&mut out, weights);
            }
            ClassifierModel::NearestNeighbor {
                metric,
                features,
                labels,
                classes,
            } => {
                let _ = writeln!(out, "nn {metric} {classes} {} {}", features.nrows(), features.ncols());
                let ls: Vec<String> = labels.iter().map(usize::to_string).collect();
                let _ = writeln!(out, "{}", ls.join(" "));
                push_matrix(&mut out, features);
            }
        }
        out.push_str("[end]\n");
        let crc = crc32fast::hash(out.as_bytes());
        let _ = writeln!(out, "checksum {crc:08x}");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| corrupt("model file is not UTF-8"))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body_end = text
            .rfind("[end]\n")
            .ok_or_else(|| corrupt("missing [end] marker"))?
            + "[end]\n".len();
        let (body, tail) = text.split_at(body_end);
        let stored = tail
            .trim_end()
            .strip_prefix("checksum ")
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or_else(|| corrupt("missing checksum line"))?;
        let actual = crc32fast::hash(body.as_bytes());
        if stored != actual {
            return Err(corrupt(&format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }

        let mut lines = body.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("unsupported model format header"));
        }
        expect(&mut lines, "[config]")?;
        let mut kv = BTreeMap::new();
        let classes_line = loop {
            let line = lines.next().ok_or_else(|| corrupt("truncated config section"))?;
            if line == "[classes]" {
                break line;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| corrupt("bad config line"))?;
            kv.insert(k.to_string(), v.to_string());
        };
        debug_assert_eq!(classes_line, "[classes]");
        let config = PipelineConfig::from_kv(kv)?;
        let class_values = parse_list::<u64>(lines.next().unwrap_or(""))?;
        expect(&mut lines, "[filters]")?;

        let mut bank = FilterBank::default();
        for (i, lc) in config.network.layers.iter().enumerate() {
            let mut views: [Vec<Array2<f64>>; 2] = [Vec::new(), Vec::new()];
            for (v, kernels) in views.iter_mut().enumerate() {
                for g in 0..lc.filters {
                    let head = lines.next().ok_or_else(|| corrupt("truncated filters"))?;
                    let want = format!("layer {} view {} kernel {} ", i + 1, v + 1, g + 1);
                    let dims = head
                        .strip_prefix(&want)
                        .ok_or_else(|| corrupt(&format!("expected `{want}...`, got `{head}`")))?;
                    let d = parse_list::<usize>(dims)?;
                    if d.len() != 2 || d[0] != lc.geometry.l1 || d[1] != lc.geometry.l2 {
                        return Err(corrupt("kernel size disagrees with config"));
                    }
                    kernels.push(read_matrix(&mut lines, d[0], d[1])?);
                }
            }
            let [view1, view2] = views;
            bank.layers.push(FilterLayer {
                geometry: lc.geometry,
                center: lc.center,
                view1,
                view2,
            });
        }

        expect(&mut lines, "[classifier]")?;
        let head = lines.next().ok_or_else(|| corrupt("truncated classifier"))?;
        let parts: Vec<&str> = head.split(' ').collect();
        let classifier = match parts.as_slice() {
            ["ridge", lambda, r, c] => {
                let lambda = parse_one::<f64>(lambda)?;
                let weights = read_matrix(&mut lines, parse_one(r)?, parse_one(c)?)?;
                ClassifierModel::Ridge { lambda, weights }
            }
            ["nn", metric, classes, r, c] => {
                let metric: Metric = metric.parse().map_err(|_| corrupt("bad metric"))?;
                let labels = parse_list::<usize>(lines.next().unwrap_or(""))?;
                let features = read_matrix(&mut lines, parse_one(r)?, parse_one(c)?)?;
                if labels.len() != features.nrows() {
                    return Err(corrupt("label count disagrees with stored features"));
                }
                ClassifierModel::NearestNeighbor {
                    metric,
                    features,
                    labels,
                    classes: parse_one(classes)?,
                }
            }
            _ => return Err(corrupt("unknown classifier block")),
        };
        expect(&mut lines, "[end]")?;
        if classifier.classes() != class_values.len() {
            return Err(corrupt("class table disagrees with classifier"));
        }
        Ok(Self {
            config,
            bank,
            classifier,
            class_values,
        })
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptModel(msg.to_string())
}

fn expect<'a>(lines: &mut impl Iterator<Item = &'a str>, marker: &str) -> Result<()> {
    match lines.next() {
        Some(l) if l == marker => Ok(()),
        other => Err(corrupt(&format!("expected {marker}, got {other:?}"))),
    }
}

fn parse_one<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| corrupt(&format!("bad number {s:?}")))
}

fn parse_list<T: std::str::FromStr>(line: &str) -> Result<Vec<T>> {
    line.split_whitespace().map(parse_one).collect()
}

fn read_matrix<'a>(lines: &mut impl Iterator<Item = &'a str>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row = parse_list::<f64>(lines.next().ok_or_else(|| corrupt("truncated matrix"))?)?;
        if row.len() != cols {
            return Err(corrupt("matrix row has wrong length"));
        }
        data.extend(row);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| corrupt(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::ClassifierKind;
    use crate::network::LayerConfig;
    use crate::patches::PatchGeometry;

    fn artifact(kind: ClassifierKind) -> ModelArtifact {
        let mut config = PipelineConfig::default();
        config.network.layers = vec![LayerConfig {
            filters: 2,
            geometry: PatchGeometry::same(3, 2),
            center: true,
        }];
        config.classifier = kind;
        let k = |s: f64| Array2::from_shape_fn((3, 2), |(i, j)| s * (i as f64 - 0.3 * j as f64) / 7.0);
        let bank = FilterBank {
            layers: vec![FilterLayer {
                geometry: config.network.layers[0].geometry,
                center: true,
                view1: vec![k(1.0), k(-0.1)],
                view2: vec![k(std::f64::consts::PI), k(1e-300)],
            }],
        };
        let classifier = match kind {
            ClassifierKind::Ridge { .. } => ClassifierModel::Ridge {
                lambda: 0.1 + 0.2,
                weights: Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64 / 3.0),
            },
            ClassifierKind::NearestNeighbor(metric) => ClassifierModel::NearestNeighbor {
                metric,
                features: Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.1),
                labels: vec![0, 1, 1],
                classes: 2,
            },
        };
        ModelArtifact {
            config,
            bank,
            classifier,
            class_values: vec![7, 3],
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        for kind in [
            ClassifierKind::Ridge { lambda: None },
            ClassifierKind::NearestNeighbor(Metric::Cosine),
        ] {
            let a = artifact(kind);
            let text = a.to_text();
            assert!(text.starts_with("DDCCANET v1\n"));
            let b = ModelArtifact::from_text(&text).unwrap();
            assert_eq!(a, b);
            assert_eq!(b.to_text(), text);
        }
    }

    #[test]
    fn detects_corruption() {
        let text = artifact(ClassifierKind::Ridge { lambda: None }).to_text();
        let flipped = text.replacen("e-1", "e-2", 1);
        assert!(matches!(ModelArtifact::from_text(&flipped), Err(Error::CorruptModel(_))));
        let truncated = &text[..text.len() / 2];
        assert!(matches!(ModelArtifact::from_text(truncated), Err(Error::CorruptModel(_))));
    }
}
