//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comment
//! model.n = 8
//! model.block_units = 3, 4, 5, 6
//! train.epochs = 10
//! data.dir = ../data/mnist
//! ```
//!
//! Unknown or repeated keys are errors. Relative paths are resolved against
//! the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dsf_core::basis::FrequencySpec;
use dsf_core::model::{Head, ModelConfig, Widths};
use dsf_core::train::TrainConfig;
use dsf_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    /// Rotate every sample by a random angle (train and test sets draw from
    /// different streams of the same seed).
    pub rotate: bool,
    pub rotation_seed: u64,
    /// Side length fed to the network; images are padded or area-shrunk.
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    /// When false the `wall_seconds` column is written as 0 so repeated runs
    /// give byte-identical files.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportConfig {
    pub baseline_config: Option<PathBuf>,
    pub baseline_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub report: ReportConfig,
}

const KEYS: &[&str] = &[
    "model.n",
    "model.sigma",
    "model.spec7",
    "model.spec5",
    "model.block_units",
    "model.stem",
    "model.growth1",
    "model.growth2",
    "model.block_out",
    "model.head",
    "model.width_scale",
    "model.num_classes",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.decay_at",
    "train.decay_factor",
    "train.seed",
    "data.dir",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.train_size",
    "data.test_size",
    "data.rotate",
    "data.rotation_seed",
    "data.image_size",
    "output.dir",
    "output.metrics",
    "output.record_wall_time",
    "report.baseline_config",
    "report.baseline_checkpoint",
];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Splits the text into key/value pairs, rejecting malformed lines,
/// unknown keys and duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("line {}: expected key = value", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(cfg_err(format!("line {}: unknown key {key:?}", i + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(cfg_err(format!("line {}: {key} given twice", i + 1)));
        }
    }
    Ok(out)
}

struct Values {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Values {
    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| cfg_err(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| cfg_err(format!("{key}: cannot parse {s:?}"))))
                .collect(),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(cfg_err(format!("{key}: expected true or false, got {v:?}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.map.get(key).map(|v| self.base.join(v))
    }

    fn spec(&self, key: &str, default: FrequencySpec) -> Result<FrequencySpec> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => FrequencySpec::parse(v).map_err(|e| cfg_err(format!("{key}: {e}"))),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let v = Values { map: parse_pairs(text)?, base: base.to_path_buf() };

        let classes: usize = v.get("model.num_classes", 10)?;
        let defaults = ModelConfig::classifier(v.get("model.n", 8)?, classes);
        let toy = &defaults.widths;
        let widths = Widths {
            stem: v.get("model.stem", toy.stem)?,
            growth1: v.get("model.growth1", toy.growth1)?,
            growth2: v.get("model.growth2", toy.growth2)?,
            block_out: v.list("model.block_out", toy.block_out.clone())?,
            decoder_out: Vec::new(),
            head: v.list("model.head", toy.head.clone())?,
        };
        let scale: f64 = v.get("model.width_scale", 1.0)?;
        if !(scale > 0.0) {
            return Err(cfg_err("model.width_scale must be positive"));
        }
        let model = ModelConfig {
            sigma: v.get("model.sigma", defaults.sigma)?,
            spec7: v.spec("model.spec7", defaults.spec7.clone())?,
            spec5: v.spec("model.spec5", defaults.spec5.clone())?,
            block_units: v.list("model.block_units", defaults.block_units.clone())?,
            widths: if scale == 1.0 { widths } else { widths.scaled(scale) },
            head: Head::Classifier { num_classes: classes },
            ..defaults
        };
        model.validate()?;

        let train = TrainConfig {
            epochs: v.get("train.epochs", 10)?,
            batch_size: v.get("train.batch_size", 32)?,
            lr: v.get("train.lr", 1e-3)?,
            decay_at: v.get("train.decay_at", 0.75)?,
            decay_factor: v.get("train.decay_factor", 0.1)?,
            seed: v.get("train.seed", 0)?,
        };
        train.validate()?;

        let dir = v.path("data.dir").unwrap_or_else(|| base.join("data/mnist"));
        let in_dir = |key: &str, name: &str| v.path(key).unwrap_or_else(|| dir.join(name));
        let data = DataConfig {
            train_images: in_dir("data.train_images", "train-images-idx3-ubyte"),
            train_labels: in_dir("data.train_labels", "train-labels-idx1-ubyte"),
            test_images: in_dir("data.test_images", "t10k-images-idx3-ubyte"),
            test_labels: in_dir("data.test_labels", "t10k-labels-idx1-ubyte"),
            dir,
            train_size: v.get("data.train_size", 10_000)?,
            test_size: v.get("data.test_size", 2_000)?,
            rotate: v.bool("data.rotate", true)?,
            rotation_seed: v.get("data.rotation_seed", 0)?,
            image_size: v.get("data.image_size", 32)?,
        };
        model.check_input(data.image_size, data.image_size)?;

        let out_dir = v.path("output.dir").unwrap_or_else(|| base.join("run"));
        let output = OutputConfig {
            metrics: v.path("output.metrics").unwrap_or_else(|| out_dir.join("metrics.csv")),
            dir: out_dir,
            record_wall_time: v.bool("output.record_wall_time", true)?,
        };
        let report = ReportConfig {
            baseline_config: v.path("report.baseline_config"),
            baseline_checkpoint: v.path("report.baseline_checkpoint"),
        };
        Ok(Self { model, train, data, output, report })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        Self::parse(&text, &base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let text = "# toy run\nmodel.n = 4\nmodel.block_units = 1, 1, 1, 1 # short\n\ntrain.epochs=2\ndata.dir = d\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.model.n, 4);
        assert_eq!(c.model.block_units, vec![1, 1, 1, 1]);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.data.test_labels, PathBuf::from("/base/d/t10k-labels-idx1-ubyte"));
        assert_eq!(c.output.metrics, PathBuf::from("/base/run/metrics.csv"));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let base = Path::new(".");
        for bad in ["model.depth = 3", "model.n = 4\nmodel.n = 8", "model.n", "model.n = four", "data.rotate = maybe"] {
            assert!(matches!(RunConfig::parse(bad, base), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn rejects_indivisible_image_size() {
        assert!(matches!(RunConfig::parse("data.image_size = 28", Path::new(".")), Err(Error::Config(_))));
    }
}
