//! Mini-batch training of classifiers with Adam and a step learning-rate
//! schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, AdamState, Tape};
use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::gconv::BnMode;
use crate::model::Model;
use crate::tensor::Tensor4;

/// Labelled images stored contiguously as `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, channels: usize, height: usize, width: usize) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(shape_err!(
                "{} values for {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            ));
        }
        Ok(Self { images, labels, channels, height, width })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }

    /// Stacks the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor4::new([indices.len(), self.channels, self.height, self.width], data).expect("sizes agree");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the epochs after which the rate is multiplied by
    /// `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 1e-3, decay_at: 0.75, decay_factor: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.decay_factor > 0.0) || !(0.0..=1.0).contains(&self.decay_at) {
            return Err(Error::Config("learning rate schedule out of range".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let boundary = (self.decay_at * self.epochs as f64).ceil() as usize;
        if epoch >= boundary && self.epochs > 0 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

/// Sample order for `epoch`; depends only on the seed and the epoch so runs
/// resume reproducibly.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// One optimisation step; returns the batch loss and the number of correct
/// predictions.
pub fn train_step(model: &mut Model, adam: &mut AdamState, images: &Tensor4, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
    let mut bn = model.bn.clone();
    let (loss, correct, grads) = {
        let mut tape = Tape::new(&model.params);
        let fwd = model.forward(&mut tape, images, &mut bn, BnMode::Train)?;
        let loss = tape.softmax_cross_entropy(fwd.output, labels)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        let correct = count_correct(tape.value(fwd.output), labels);
        (value, correct, tape.backward(loss)?)
    };
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    model.bn = bn;
    adam_step(&mut model.params, &grads, adam, lr)?;
    Ok((loss, correct))
}

fn count_correct(logits: &Tensor4, labels: &[usize]) -> usize {
    let classes = logits.channels();
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every sample (batch-norm in eval mode).
pub fn predict_classes(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(invalid_arg!("batch size must be positive"));
    }
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, _) = data.batch(chunk);
        let logits = model.predict(&x)?;
        out.extend(logits.data().chunks(logits.channels()).map(argmax));
    }
    Ok(out)
}

/// Fraction of correctly classified samples.
pub fn accuracy(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let predicted = predict_classes(model, data, batch_size)?;
    let correct = predicted.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one
/// (e.g. to checkpoint or log).
pub fn fit(
    model: &mut Model,
    adam: &mut AdamState,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &AdamState, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train.is_empty() && config.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.lr_at(epoch);
        let order = epoch_order(train.len(), config.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = train.batch(chunk);
            let (loss, c) = train_step(model, adam, &x, &labels, lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        let test_acc = accuracy(model, test, config.batch_size.max(64))?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} train acc {:.4} test acc {:.4} ({:.1}s)",
            metrics.epoch,
            metrics.train_loss,
            metrics.train_acc,
            metrics.test_acc,
            metrics.wall_seconds
        );
        on_epoch(model, adam, &metrics)?;
        history.push(metrics);
    }
    Ok(history)
}
