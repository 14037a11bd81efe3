//! Implementations of the `dsf` subcommands.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use dsf_core::autodiff::{AdamConfig, AdamState};
use dsf_core::basis::build_basis;
use dsf_core::checkpoint::Checkpoint;
use dsf_core::gconv::GConvLayer;
use dsf_core::gradcheck::{self, CheckResult};
use dsf_core::model::{Model, ModelConfig};
use dsf_core::pgm;
use dsf_core::tensor::Tensor4;
use dsf_core::train::{self, Dataset, EpochMetrics};
use dsf_core::{Error, Result};

use crate::config::{DataConfig, RunConfig};
use crate::idx::{load_idx, rotate_augment};
use crate::report::{self, ModelReport};

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,test_acc,wall_seconds";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

// Keeps the test-set rotations independent of the training-set ones.
const TEST_STREAM: u64 = 0x7E57;

/// Loads, rotates and resizes the configured train and test subsets.
pub fn load_data(data: &DataConfig) -> Result<(Dataset, Dataset)> {
    let prepare = |images: &Path, labels: &Path, size: usize, seed: u64| -> Result<Dataset> {
        let raw = load_idx(images, labels)?.take(size);
        let raw = if data.rotate { rotate_augment(&raw, seed) } else { raw };
        raw.to_dataset(data.image_size)
    };
    let train = prepare(&data.train_images, &data.train_labels, data.train_size, data.rotation_seed)?;
    let test = prepare(&data.test_images, &data.test_labels, data.test_size, data.rotation_seed ^ TEST_STREAM)?;
    Ok((train, test))
}

/// Builds the configured model and loads `checkpoint` into it.
pub fn load_model(config: &ModelConfig, checkpoint: &Path) -> Result<Model> {
    if !checkpoint.is_file() {
        return Err(Error::Consistency(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let mut model = Model::build(config, 0)?;
    Checkpoint::load(checkpoint)?.restore(&mut model)?;
    Ok(model)
}

fn metrics_row(m: &EpochMetrics, wall: bool) -> String {
    let seconds = if wall { m.wall_seconds } else { 0.0 };
    format!("{},{:.6},{:.6},{:.6},{:.3}", m.epoch, m.train_loss, m.train_acc, m.test_acc, seconds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochMetrics>,
    pub best_test_acc: Option<f64>,
    pub param_count: usize,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl TrainSummary {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.history.last().map(|m| m.test_acc)
    }
}

/// Trains the configured classifier, writing one CSV row and the latest
/// checkpoint after every epoch, and the best-by-test-accuracy checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let (train_set, test_set) = load_data(&cfg.data)?;
    let mut model = Model::build(&cfg.model, cfg.train.seed)?;
    let mut adam = AdamState::new(&model.params, AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() });
    log::info!(
        "training n={} model ({} parameters) on {} samples, testing on {}",
        cfg.model.n,
        model.param_count(),
        train_set.len(),
        test_set.len()
    );

    fs::create_dir_all(&cfg.output.dir)?;
    if let Some(parent) = cfg.output.metrics.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut csv = File::create(&cfg.output.metrics)?;
    writeln!(csv, "{CSV_HEADER}")?;
    csv.flush()?;

    let best_path = cfg.output.dir.join(BEST_CHECKPOINT);
    let last_path = cfg.output.dir.join(LAST_CHECKPOINT);
    Checkpoint::capture(&model, Some(&adam)).save(&best_path)?;
    let mut best: Option<f64> = None;
    let history = train::fit(&mut model, &mut adam, &train_set, &test_set, &cfg.train, |model, adam, m| {
        writeln!(csv, "{}", metrics_row(m, cfg.output.record_wall_time))?;
        csv.flush()?;
        let ck = Checkpoint::capture(model, Some(adam));
        ck.save(&last_path)?;
        if best.is_none_or(|b| m.test_acc > b) {
            best = Some(m.test_acc);
            ck.save(&best_path)?;
        }
        Ok(())
    })?;
    if history.is_empty() {
        Checkpoint::capture(&model, Some(&adam)).save(&last_path)?;
    }
    Ok(TrainSummary {
        history,
        best_test_acc: best,
        param_count: model.param_count(),
        best_checkpoint: best_path,
        metrics: cfg.output.metrics.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub samples: usize,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalSummary> {
    let model = load_model(&cfg.model, checkpoint)?;
    let (_, test) = load_data(&DataConfig { train_size: 0, ..cfg.data.clone() })?;
    let accuracy = train::accuracy(&model, &test, 64)?;
    Ok(EvalSummary { accuracy, samples: test.len() })
}

/// Gradient checks for one operator (see [`gradcheck::OPS`]) or all of them.
pub fn cmd_grad_check(op: Option<&str>, seed: u64) -> Result<Vec<CheckResult>> {
    let results = match op {
        Some(op) => vec![gradcheck::check(op, seed)?],
        None => gradcheck::check_all(seed)?,
    };
    Ok(results)
}

/// Where a baseline for the variance report comes from.
fn baseline_model(cfg: &RunConfig, test: &Dataset) -> Result<Model> {
    match (&cfg.report.baseline_config, &cfg.report.baseline_checkpoint) {
        (Some(config), Some(ckpt)) => load_model(&RunConfig::load(config)?.model, ckpt),
        (None, Some(ckpt)) => load_model(&report::baseline_config(&cfg.model), ckpt),
        (Some(_), None) => Err(Error::Config("report.baseline_config needs report.baseline_checkpoint".into())),
        (None, None) => {
            // Untrained baseline: calibrate batch-norm moments on test images.
            let mut model = Model::build(&report::baseline_config(&cfg.model), cfg.train.seed)?;
            let take: Vec<usize> = (0..test.len().min(64)).collect();
            let (x, _) = test.batch(&take);
            let mut bn = model.bn.clone();
            let mut tape = dsf_core::autodiff::Tape::new(&model.params);
            model.forward(&mut tape, &x, &mut bn, dsf_core::gconv::BnMode::Train)?;
            drop(tape);
            model.bn = bn;
            Ok(model)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivSummary {
    pub model: ModelReport,
    pub baseline: ModelReport,
    pub text: String,
}

/// Variance report for test image `image_index`, written to `out_dir`.
pub fn cmd_equiv_report(cfg: &RunConfig, checkpoint: &Path, image_index: usize, out_dir: &Path) -> Result<EquivSummary> {
    let model = load_model(&cfg.model, checkpoint)?;
    let (_, test) = load_data(&DataConfig { train_size: 0, test_size: cfg.data.test_size.max(image_index + 1), ..cfg.data.clone() })?;
    if image_index >= test.len() {
        return Err(Error::Config(format!("image {image_index} is outside the {}-sample test set", test.len())));
    }
    let baseline = baseline_model(cfg, &test)?;
    let (image, _) = test.batch(&[image_index]);
    equiv_report_for(&model, &baseline, &image, image_index, out_dir)
}

pub fn equiv_report_for(model: &Model, baseline: &Model, image: &Tensor4, image_index: usize, out_dir: &Path) -> Result<EquivSummary> {
    let m = report::analyse(model, image, "model")?;
    let b = report::analyse(baseline, image, "baseline")?;
    let text = report::write_report(out_dir, image_index, &[&m, &b])?;
    Ok(EquivSummary { model: m, baseline: b, text })
}

/// Writes the 7x7 and 5x5 basis filters and the input layer's synthesized
/// filters at every orientation (`input_o{o}_i{i}_r{s}.pgm`).
pub fn cmd_export_filters(cfg: &RunConfig, checkpoint: Option<&Path>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let model = match checkpoint {
        Some(p) => load_model(&cfg.model, p)?,
        None => Model::build(&cfg.model, cfg.train.seed)?,
    };
    let mc = &cfg.model;
    fs::create_dir_all(out_dir).map_err(|e| Error::Config(format!("{}: {e}", out_dir.display())))?;
    let basis7 = build_basis(&mc.spec7, 7, mc.sigma, true)?;
    let basis5 = build_basis(&mc.spec5, 5, mc.sigma, true)?;
    let mut written = basis7.export_pgm(&out_dir.join("basis7"))?;
    written.extend(basis5.export_pgm(&out_dir.join("basis5"))?);

    let id = model.params.find("stem.input.coef").ok_or_else(|| Error::State("model has no input layer".into()))?;
    let layer = GConvLayer::new(basis7, mc.in_channels, mc.widths.stem, mc.n, true, model.params.data(id).to_vec())?;
    let bank = layer.kernel_bank();
    let [rows, cin, k, _] = bank.shape();
    let dir = out_dir.join("filters");
    fs::create_dir_all(&dir)?;
    for row in 0..rows {
        let (o, s) = (row / mc.n, row % mc.n);
        for i in 0..cin {
            let start = (row * cin + i) * k * k;
            let path = dir.join(format!("input_o{o}_i{i}_r{s}.pgm"));
            pgm::write_scaled(&path, k, k, &bank.data()[start..start + k * k])?;
            written.push(path);
        }
    }
    Ok(written)
}
