//! Flat `key = value` pipeline configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Unknown keys are
//! rejected. Per-layer patch settings fall back to the global `patch.*`
//! keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classify::{ClassifierKind, Metric};
use crate::encoder::{EncoderConfig, ZeroBinPolicy};
use crate::error::{config_err, Error, Result};
use crate::exec::ExecSettings;
use crate::network::{LayerConfig, NetworkConfig};
use crate::patches::{BatchSpec, Padding, PatchGeometry};
use crate::views::ViewRecipe;

const DEFAULT_FILTERS: usize = 8;
const DEFAULT_PATCH: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub recipe: ViewRecipe,
    pub network: NetworkConfig,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierKind,
    pub exec: ExecSettings,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let layer = LayerConfig {
            filters: DEFAULT_FILTERS,
            geometry: PatchGeometry::same(DEFAULT_PATCH, DEFAULT_PATCH),
            center: true,
        };
        Self {
            train_manifest: None,
            test_manifest: None,
            model_path: None,
            recipe: ViewRecipe::LbpPlusGray,
            network: NetworkConfig {
                layers: vec![layer; 2],
                batch: BatchSpec::default(),
                epsilon: 1e-4,
            },
            encoder: EncoderConfig::default(),
            classifier: ClassifierKind::Ridge { lambda: None },
            exec: ExecSettings::default(),
            seed: 0,
        }
    }
}

/// Raw key/value pairs in file order.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected `key = value`", lineno + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(config_err!("line {}: empty key", lineno + 1));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(config_err!("line {}: duplicate key {k}", lineno + 1));
        }
    }
    Ok(map)
}

struct Keys {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl Keys {
    fn get(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| config_err!("invalid value {v:?} for {key}")),
        }
    }

    fn parse_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.get(key).as_deref() {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(v) => Err(config_err!("invalid boolean {v:?} for {key}")),
        }
    }
}

impl PipelineConfig {
    /// Loads a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_kv(parse_kv(&text)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.train_manifest, &mut cfg.test_manifest, &mut cfg.model_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_kv(map: BTreeMap<String, String>) -> Result<Self> {
        let mut keys = Keys {
            map,
            used: Default::default(),
        };
        let d = Self::default();

        let train_manifest = keys.get("data.train").map(PathBuf::from);
        let test_manifest = keys.get("data.test").map(PathBuf::from);
        let model_path = keys.get("model.path").map(PathBuf::from);

        let recipe: ViewRecipe = keys.parse("view.recipe")?.unwrap_or(d.recipe);
        let c1 = keys.parse("view.c1")?;
        let c2 = keys.parse("view.c2")?;
        let recipe = match recipe {
            ViewRecipe::ChannelSplit { .. } => ViewRecipe::ChannelSplit {
                c1: c1.unwrap_or(0),
                c2: c2.unwrap_or(1),
            },
            r => r,
        };

        let n_layers: usize = keys.parse("net.layers")?.unwrap_or(2);
        if n_layers < 1 {
            return Err(config_err!("net.layers must be at least 1"));
        }
        let g_l1 = keys.parse("patch.l1")?.unwrap_or(DEFAULT_PATCH);
        let g_l2 = keys.parse("patch.l2")?.unwrap_or(g_l1);
        let g_stride = keys.parse("patch.stride")?.unwrap_or(1);
        let g_padding: Padding = keys.parse("patch.padding")?.unwrap_or(Padding::ZeroSame);
        let g_center = keys.parse_bool("patch.center")?.unwrap_or(true);
        let g_filters = keys.parse("net.filters")?.unwrap_or(DEFAULT_FILTERS);
        let mut layers = Vec::with_capacity(n_layers);
        for i in 1..=n_layers {
            let p = |k: &str| format!("layer{i}.{k}");
            let filters = keys.parse(&p("filters"))?.unwrap_or(g_filters);
            let l1 = keys.parse(&p("patch.l1"))?.unwrap_or(g_l1);
            let l2 = keys.parse(&p("patch.l2"))?.unwrap_or(g_l2);
            let stride = keys.parse(&p("patch.stride"))?.unwrap_or(g_stride);
            let padding = keys.parse(&p("patch.padding"))?.unwrap_or(g_padding);
            let center = keys.parse_bool(&p("patch.center"))?.unwrap_or(g_center);
            layers.push(LayerConfig {
                filters,
                geometry: PatchGeometry::new(l1, l2, stride, padding)?,
                center,
            });
        }
        let network = NetworkConfig {
            layers,
            batch: BatchSpec {
                batch_size: keys.parse("batch.size")?.unwrap_or(d.network.batch.batch_size),
            },
            epsilon: keys.parse("moments.epsilon")?.unwrap_or(d.network.epsilon),
        };
        network.validate()?;

        let encoder = EncoderConfig {
            block_h: keys.parse("encode.block_h")?.unwrap_or(d.encoder.block_h),
            block_w: keys.parse("encode.block_w")?.unwrap_or(d.encoder.block_w),
            overlap: keys.parse("encode.overlap")?.unwrap_or(d.encoder.overlap),
            zero_bin_policy: keys
                .parse::<ZeroBinPolicy>("encode.zero_bin_policy")?
                .unwrap_or(d.encoder.zero_bin_policy),
        };
        encoder.validate()?;
        let last = network.layers.last().expect("at least one layer").filters;
        if last > crate::encoder::MAX_HASH_BITS {
            return Err(config_err!("final layer has {last} filters; hashing supports at most 30"));
        }

        let kind = keys.get("clf.kind").unwrap_or_else(|| "ridge".into());
        let metric: Metric = keys.parse("clf.metric")?.unwrap_or(Metric::Euclidean);
        let lambda = match keys.get("clf.lambda").as_deref() {
            None | Some("auto") => None,
            Some(v) => Some(
                v.parse::<f64>()
                    .map_err(|_| config_err!("invalid clf.lambda {v:?}"))?,
            ),
        };
        if lambda.is_some_and(|l| !(l > 0.0)) {
            return Err(config_err!("clf.lambda must be > 0"));
        }
        let classifier = match kind.as_str() {
            "ridge" => ClassifierKind::Ridge { lambda },
            "nn" | "nearest_neighbor" => ClassifierKind::NearestNeighbor(metric),
            other => return Err(config_err!("unknown clf.kind {other:?}")),
        };

        let exec = ExecSettings {
            threads: keys.parse("exec.threads")?.unwrap_or(d.exec.threads),
            deterministic: keys.parse_bool("exec.deterministic")?.unwrap_or(true),
        };
        let seed = keys.parse("exec.seed")?.unwrap_or(0);

        let unknown: Vec<&String> = keys
            .map
            .keys()
            .filter(|k| !keys.used.contains(*k))
            .collect();
        if !unknown.is_empty() {
            return Err(config_err!("unknown config keys: {unknown:?}"));
        }

        Ok(Self {
            train_manifest,
            test_manifest,
            model_path,
            recipe,
            network,
            encoder,
            classifier,
            exec,
            seed,
        })
    }

    /// Canonical settings that determine extraction and classification.
    ///
    /// Paths and thread count are left out so that models trained from the
    /// same data with different worker counts serialize identically.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        put("view.recipe", self.recipe.name().into());
        if let ViewRecipe::ChannelSplit { c1, c2 } = self.recipe {
            put("view.c1", c1.to_string());
            put("view.c2", c2.to_string());
        }
        put("net.layers", self.network.layers.len().to_string());
        for (i, l) in self.network.layers.iter().enumerate() {
            let n = i + 1;
            put(&format!("layer{n}.filters"), l.filters.to_string());
            put(&format!("layer{n}.patch.l1"), l.geometry.l1.to_string());
            put(&format!("layer{n}.patch.l2"), l.geometry.l2.to_string());
            put(&format!("layer{n}.patch.stride"), l.geometry.stride.to_string());
            put(&format!("layer{n}.patch.padding"), l.geometry.padding.to_string());
            put(&format!("layer{n}.patch.center"), l.center.to_string());
        }
        put("batch.size", self.network.batch.batch_size.to_string());
        put("moments.epsilon", fmt_f64(self.network.epsilon));
        put("encode.block_h", self.encoder.block_h.to_string());
        put("encode.block_w", self.encoder.block_w.to_string());
        put("encode.overlap", fmt_f64(self.encoder.overlap));
        put("encode.zero_bin_policy", self.encoder.zero_bin_policy.to_string());
        match self.classifier {
            ClassifierKind::Ridge { lambda } => {
                put("clf.kind", "ridge".into());
                put("clf.lambda", lambda.map_or("auto".into(), fmt_f64));
            }
            ClassifierKind::NearestNeighbor(m) => {
                put("clf.kind", "nn".into());
                put("clf.metric", m.to_string());
            }
        }
        put("exec.deterministic", self.exec.deterministic.to_string());
        put("exec.seed", self.seed.to_string());
        kv
    }
}

/// Shortest decimal that round-trips.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
