//! Densely connected steerable G-CNNs: the classifier, the segmentation
//! network and the parameter-budget arithmetic used to match baselines.
//!
//! Every G-convolution is followed by group batch norm and ReLU
//! (post-activation). Each dense unit is a 7x7 G-conv producing `growth1`
//! channels and a 5x5 G-conv producing `growth2`; a unit sees the block input
//! concatenated with the outputs of all earlier units, and the block ends
//! with a 5x5 G-conv over that full concatenation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{GConvSpec, ParamId, ParamStore, Tape, Var};
use crate::basis::{build_basis, param_count, FrequencySpec, SteerableBasis};
use crate::error::{invalid_arg, Error, Result};
use crate::gconv::{BatchNormState, BnMode};
use crate::tensor::{self, Padding, Tensor4};

/// Relative output deviation tolerated by the construction-time check.
pub const SMOKE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Head {
    Classifier { num_classes: usize },
    Segmenter { num_maps: usize },
}

/// Channel counts (per orientation) of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths {
    /// Output of the input G-conv and the following hidden G-conv.
    pub stem: usize,
    /// Output of the 7x7 conv in every dense unit.
    pub growth1: usize,
    /// Output of the 5x5 conv in every dense unit.
    pub growth2: usize,
    /// Final conv output of each encoder block.
    pub block_out: Vec<usize>,
    /// Final conv output of each decoder block (segmenter only).
    pub decoder_out: Vec<usize>,
    /// Hidden widths of the 1x1 head (two for the classifier, one for the
    /// segmenter).
    pub head: Vec<usize>,
}

impl Widths {
    /// Small default used by the tests and the rotated-digit benchmark.
    pub fn toy() -> Self {
        Self {
            stem: 2,
            growth1: 4,
            growth2: 2,
            block_out: vec![4, 4, 4, 8],
            decoder_out: vec![4, 4, 4],
            head: vec![16, 16],
        }
    }

    /// Multiplies every width, rounding half up with a floor of 1.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: usize| round_half_up(v as f64 * factor).max(1);
        Self {
            stem: s(self.stem),
            growth1: s(self.growth1),
            growth2: s(self.growth2),
            block_out: self.block_out.iter().map(|&v| s(v)).collect(),
            decoder_out: self.decoder_out.iter().map(|&v| s(v)).collect(),
            head: self.head.iter().map(|&v| s(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n: usize,
    pub sigma: f64,
    pub spec7: FrequencySpec,
    pub spec5: FrequencySpec,
    pub in_channels: usize,
    pub block_units: Vec<usize>,
    pub decoder_units: Vec<usize>,
    pub widths: Widths,
    pub head: Head,
}

impl ModelConfig {
    pub fn classifier(n: usize, num_classes: usize) -> Self {
        Self {
            n,
            sigma: 0.6,
            spec7: FrequencySpec::default_7x7(),
            spec5: FrequencySpec::default_5x5(),
            in_channels: 1,
            block_units: vec![3, 4, 5, 6],
            decoder_units: vec![4, 3, 2],
            widths: Widths::toy(),
            head: Head::Classifier { num_classes },
        }
    }

    pub fn segmenter(n: usize) -> Self {
        let mut config = Self { head: Head::Segmenter { num_maps: 2 }, ..Self::classifier(n, 2) };
        config.widths.head.truncate(1);
        config
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("group order must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("input channel count must be positive".into());
        }
        if self.block_units.is_empty() || self.block_units.contains(&0) {
            return bad("every encoder block needs at least one unit".into());
        }
        if self.widths.block_out.len() != self.block_units.len() {
            return bad(format!(
                "{} block widths for {} blocks",
                self.widths.block_out.len(),
                self.block_units.len()
            ));
        }
        let w = &self.widths;
        if w.stem == 0 || w.growth1 == 0 || w.growth2 == 0 || w.block_out.contains(&0) || w.head.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if 2 * self.spec7.max_ring() + 1 > 7 || 2 * self.spec5.max_ring() + 1 > 5 {
            return bad("frequency spec rings do not fit the filter grid".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        match self.head {
            Head::Classifier { num_classes } => {
                if num_classes == 0 {
                    return bad("classifier needs at least one class".into());
                }
                if w.head.len() != 2 {
                    return bad("classifier head takes two hidden widths".into());
                }
            }
            Head::Segmenter { num_maps } => {
                if num_maps == 0 {
                    return bad("segmenter needs at least one output map".into());
                }
                if w.head.len() != 1 {
                    return bad("segmenter head takes one hidden width".into());
                }
                if self.decoder_units.len() + 1 != self.block_units.len() {
                    return bad(format!(
                        "{} decoder blocks cannot mirror {} encoder blocks",
                        self.decoder_units.len(),
                        self.block_units.len()
                    ));
                }
                if self.decoder_units.contains(&0) || w.decoder_out.len() != self.decoder_units.len() || w.decoder_out.contains(&0) {
                    return bad("decoder units and widths must be positive and match".into());
                }
            }
        }
        Ok(())
    }

    /// Spatial sizes must survive one 2x2 pool per block.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.block_units.len();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    /// Trainable scalars implied by the configuration, counted independently
    /// of any built model.
    pub fn analytic_param_count(&self) -> usize {
        let n = self.n;
        let p7 = param_count(&self.spec7, n, true);
        let p5 = param_count(&self.spec5, n, true);
        let w = &self.widths;
        // Each G-conv brings its coefficients plus BN scale and shift.
        let gconv = |per_pair: usize, cin: usize, cout: usize| per_pair * cin * cout + 2 * cout;
        let block = |cin: usize, units: usize, out: usize| -> usize {
            let mut total = 0;
            for u in 0..units {
                let c = cin + u * w.growth2;
                total += gconv(p7, c, w.growth1) + gconv(p5, w.growth1, w.growth2);
            }
            total + gconv(p5, cin + units * w.growth2, out)
        };
        let mut total = gconv(param_count(&self.spec7, n, false), self.in_channels, w.stem) + gconv(p7, w.stem, w.stem);
        let mut c = w.stem;
        let mut skips = vec![w.stem];
        for (&units, &out) in self.block_units.iter().zip(&w.block_out) {
            total += block(c, units, out);
            c = out;
            skips.push(out);
        }
        let dense = |cin: usize, cout: usize| cin * cout + cout;
        match self.head {
            Head::Classifier { num_classes } => {
                total += dense(c, w.head[0]) + dense(w.head[0], w.head[1]) + dense(w.head[1], num_classes);
            }
            Head::Segmenter { num_maps } => {
                skips.pop();
                for (&units, &out) in self.decoder_units.iter().zip(&w.decoder_out) {
                    let skip = skips.pop().expect("validated decoder depth");
                    total += block(c + skip, units, out);
                    c = out;
                }
                let skip = skips.pop().expect("stem skip");
                total += gconv(p7, c + skip, w.stem);
                total += dense(w.stem, w.head[0]) + dense(w.head[0], num_maps);
            }
        }
        total
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterFamily {
    Plain,
    Standard,
    Steerable,
}

/// Filters per layer that keep a G-CNN's parameter count level with a plain
/// CNN of `base` filters: `base / sqrt(n)` for standard G-CNNs and
/// `base * K^2 / (k_params * sqrt(n))` for steerable ones, rounded half up
/// with a floor of 1.
pub fn budget_filters(base: usize, n: usize, k_params: usize, size: usize, family: FilterFamily) -> usize {
    let root = (n as f64).sqrt();
    let v = match family {
        FilterFamily::Plain => base as f64,
        FilterFamily::Standard => base as f64 / root,
        FilterFamily::Steerable => base as f64 * (size * size) as f64 / (k_params as f64 * root),
    };
    round_half_up(v).max(1)
}

/// A G-conv with its batch norm.
#[derive(Debug, Clone)]
struct ConvBn {
    spec: GConvSpec,
    coef: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

#[derive(Debug, Clone)]
struct DenseUnit {
    conv1: ConvBn,
    conv2: ConvBn,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    units: Vec<DenseUnit>,
    last: ConvBn,
}

impl DenseBlock {
    fn conv_count(&self) -> usize {
        2 * self.units.len() + 1
    }
}

#[derive(Debug, Clone)]
struct Dense1x1 {
    kernel: ParamId,
    bias: ParamId,
}

/// Values captured during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Classifier: logits `(B, classes, 1, 1)`; segmenter: `(B, maps, H, W)`.
    pub output: Var,
    /// G-feature map after the second G-conv (stem).
    pub probe_a: Var,
    /// G-feature map after the last G-conv before the head.
    pub probe_b: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    pub bn: Vec<BatchNormState>,
    stem_in: ConvBn,
    stem_hidden: ConvBn,
    encoder: Vec<DenseBlock>,
    decoder: Vec<DenseBlock>,
    fuse: Option<ConvBn>,
    head: Vec<Dense1x1>,
}

struct Builder<'a> {
    config: &'a ModelConfig,
    basis7: SteerableBasis,
    basis5: SteerableBasis,
    params: ParamStore,
    bn: Vec<BatchNormState>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn gconv(&mut self, name: &str, size: usize, cin: usize, cout: usize, input: bool) -> Result<ConvBn> {
        let basis = match size {
            7 => self.basis7.clone(),
            5 => self.basis5.clone(),
            _ => return Err(invalid_arg!("no basis for {size}x{size} filters")),
        };
        let n = self.config.n;
        let spec = GConvSpec { basis, in_channels: cin, out_channels: cout, n, is_input_layer: input };
        let len = spec.coefficient_count();
        let pairs = spec.basis.len();
        let fan_in = if input { cin } else { cin * n };
        let std = (2.0 / (fan_in * pairs) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut self.rng)).collect();
        let frozen = spec.layer(&data)?.masked();
        let slots = if input { 1 } else { n };
        let coef = self.params.add_masked(format!("{name}.coef"), vec![cout, cin, slots, pairs, 2], data, frozen)?;
        let gamma = self.params.add(format!("{name}.bn.gamma"), vec![cout], vec![1.0; cout])?;
        let beta = self.params.add(format!("{name}.bn.beta"), vec![cout], vec![0.0; cout])?;
        self.bn.push(BatchNormState::new(cout));
        Ok(ConvBn { spec, coef, gamma, beta, bn: self.bn.len() - 1 })
    }

    fn dense_block(&mut self, name: &str, cin: usize, units: usize, out: usize) -> Result<DenseBlock> {
        let w = &self.config.widths;
        let (g1, g2) = (w.growth1, w.growth2);
        let mut list = Vec::with_capacity(units);
        for u in 0..units {
            let c = cin + u * g2;
            list.push(DenseUnit {
                conv1: self.gconv(&format!("{name}.unit{u}.conv7"), 7, c, g1, false)?,
                conv2: self.gconv(&format!("{name}.unit{u}.conv5"), 5, g1, g2, false)?,
            });
        }
        let last = self.gconv(&format!("{name}.final"), 5, cin + units * g2, out, false)?;
        Ok(DenseBlock { units: list, last })
    }

    fn dense1x1(&mut self, name: &str, cin: usize, cout: usize) -> Result<Dense1x1> {
        let normal = Normal::new(0.0, (2.0 / cin as f64).sqrt()).expect("positive std");
        let data: Vec<f64> = (0..cin * cout).map(|_| normal.sample(&mut self.rng)).collect();
        let kernel = self.params.add(format!("{name}.kernel"), vec![cout, cin, 1, 1], data)?;
        let bias = self.params.add(format!("{name}.bias"), vec![cout], vec![0.0; cout])?;
        Ok(Dense1x1 { kernel, bias })
    }
}

impl Model {
    /// Builds either network kind from `config`, drawing initial weights from
    /// a generator seeded with `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let sigma = config.sigma;
        let mut b = Builder {
            config,
            basis7: build_basis(&config.spec7, 7, sigma, true)?,
            basis5: build_basis(&config.spec5, 5, sigma, true)?,
            params: ParamStore::new(),
            bn: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let w = config.widths.clone();
        let stem_in = b.gconv("stem.input", 7, config.in_channels, w.stem, true)?;
        let stem_hidden = b.gconv("stem.hidden", 7, w.stem, w.stem, false)?;
        let mut encoder = Vec::new();
        let mut c = w.stem;
        let mut skips = vec![w.stem];
        for (i, (&units, &out)) in config.block_units.iter().zip(&w.block_out).enumerate() {
            encoder.push(b.dense_block(&format!("enc{i}"), c, units, out)?);
            c = out;
            skips.push(out);
        }
        let mut decoder = Vec::new();
        let mut fuse = None;
        let head = match config.head {
            Head::Classifier { num_classes } => vec![
                b.dense1x1("head0", c, w.head[0])?,
                b.dense1x1("head1", w.head[0], w.head[1])?,
                b.dense1x1("head2", w.head[1], num_classes)?,
            ],
            Head::Segmenter { num_maps } => {
                skips.pop();
                for (i, (&units, &out)) in config.decoder_units.iter().zip(&w.decoder_out).enumerate() {
                    let skip = skips.pop().expect("validated decoder depth");
                    decoder.push(b.dense_block(&format!("dec{i}"), c + skip, units, out)?);
                    c = out;
                }
                let skip = skips.pop().expect("stem skip");
                fuse = Some(b.gconv("fuse", 7, c + skip, w.stem, false)?);
                vec![b.dense1x1("head0", w.stem, w.head[0])?, b.dense1x1("head1", w.head[0], num_maps)?]
            }
        };
        let model = Self { config: config.clone(), params: b.params, bn: b.bn, stem_in, stem_hidden, encoder, decoder, fuse, head };
        if config.n % 4 == 0 {
            let size = (1usize << config.block_units.len()).max(16);
            let deviation = model.rotation_deviation(size, seed)?;
            if !(deviation <= SMOKE_TOLERANCE) {
                return Err(Error::Consistency(format!("freshly built model is not rotation equivariant (deviation {deviation:e})")));
            }
        }
        Ok(model)
    }

    /// Largest deviation, relative to the output magnitude, between the
    /// output for a quarter-turned batch of random `size x size` inputs and the
    /// correspondingly transformed output for the original (logits must be
    /// unchanged; segmentation maps must turn with the input). Batch-norm
    /// runs in train mode on private copies of the moments; the batch holds
    /// several samples so that it does not normalize 1x1 maps to constants.
    pub fn rotation_deviation(&self, size: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let x = Tensor4::from_fn([4, self.config.in_channels, size, size], |_, _, _, _| normal.sample(&mut rng));
        let run = |input: &Tensor4| -> Result<Tensor4> {
            let mut tape = Tape::new(&self.params);
            let mut bn = self.bn.clone();
            let fwd = self.forward(&mut tape, input, &mut bn, BnMode::Train)?;
            Ok(tape.value(fwd.output).clone())
        };
        let base = run(&x)?;
        let expected = match self.config.head {
            Head::Classifier { .. } => base.clone(),
            Head::Segmenter { .. } => tensor::rot90(&base, 1),
        };
        let turned = run(&tensor::rot90(&x, 1))?;
        Ok(turned.max_abs_diff(&expected) / base.max_abs().max(f64::MIN_POSITIVE))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// G-convolutions per encoder and decoder block.
    pub fn block_conv_counts(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.encoder.iter().map(DenseBlock::conv_count).collect(),
            self.decoder.iter().map(DenseBlock::conv_count).collect(),
        )
    }

    /// Units per decoder block.
    pub fn decoder_units(&self) -> Vec<usize> {
        self.decoder.iter().map(|b| b.units.len()).collect()
    }

    /// Records the forward pass of `images` on `tape`. In train mode the
    /// batch-norm running moments are updated.
    pub fn forward(&self, tape: &mut Tape<'_>, images: &Tensor4, bn: &mut [BatchNormState], mode: BnMode) -> Result<Forward> {
        if images.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                images.channels()
            )));
        }
        self.config.check_input(images.height(), images.width())?;
        if bn.len() != self.bn.len() {
            return Err(Error::Shape(format!("{} batch-norm states for {} layers", bn.len(), self.bn.len())));
        }
        let x = tape.input(images.clone());
        let h = conv_bn_relu(tape, x, &self.stem_in, bn, mode)?;
        let probe_a = conv_bn_relu(tape, h, &self.stem_hidden, bn, mode)?;
        let mut skips = vec![probe_a];
        let mut cur = probe_a;
        for block in &self.encoder {
            let pooled = tape.max_pool2(cur)?;
            cur = dense_block(tape, pooled, block, bn, mode)?;
            skips.push(cur);
        }
        match self.config.head {
            Head::Classifier { .. } => {
                let probe_b = cur;
                let mut y = tape.g_pool(cur);
                for (i, layer) in self.head.iter().enumerate() {
                    y = tape.conv2d(y, layer.kernel, Padding::Same)?;
                    y = tape.add_bias(y, layer.bias)?;
                    if i + 1 < self.head.len() {
                        y = tape.relu(y);
                    }
                }
                let output = tape.global_avg_pool(y);
                Ok(Forward { output, probe_a, probe_b })
            }
            Head::Segmenter { .. } => {
                skips.pop();
                for block in &self.decoder {
                    let up = tape.bilinear_up2(cur);
                    let skip = skips.pop().expect("validated decoder depth");
                    let joined = tape.concat(&[up, skip])?;
                    cur = dense_block(tape, joined, block, bn, mode)?;
                }
                let up = tape.bilinear_up2(cur);
                let skip = skips.pop().expect("stem skip");
                let joined = tape.concat(&[up, skip])?;
                let fuse = self.fuse.as_ref().expect("segmenter has a fuse conv");
                let probe_b = conv_bn_relu(tape, joined, fuse, bn, mode)?;
                let mut y = tape.g_pool(probe_b);
                for (i, layer) in self.head.iter().enumerate() {
                    y = tape.conv2d(y, layer.kernel, Padding::Same)?;
                    y = tape.add_bias(y, layer.bias)?;
                    if i + 1 < self.head.len() {
                        y = tape.relu(y);
                    }
                }
                Ok(Forward { output: y, probe_a, probe_b })
            }
        }
    }

    /// Inference with frozen batch-norm moments; returns the output tensor.
    pub fn predict(&self, images: &Tensor4) -> Result<Tensor4> {
        let mut tape = Tape::new(&self.params);
        let mut bn = self.bn.clone();
        let fwd = self.forward(&mut tape, images, &mut bn, BnMode::Eval)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Runs the forward pass with the given batch-norm mode without touching
    /// the model's stored moments; returns output and both probes.
    pub fn inspect(&self, images: &Tensor4, mode: BnMode) -> Result<(Tensor4, crate::gconv::GFeatureMap, crate::gconv::GFeatureMap)> {
        let mut tape = Tape::new(&self.params);
        let mut bn = self.bn.clone();
        let fwd = self.forward(&mut tape, images, &mut bn, mode)?;
        Ok((tape.value(fwd.output).clone(), tape.gmap(fwd.probe_a), tape.gmap(fwd.probe_b)))
    }
}

fn conv_bn_relu(tape: &mut Tape<'_>, x: Var, layer: &ConvBn, bn: &mut [BatchNormState], mode: BnMode) -> Result<Var> {
    let y = tape.g_conv(x, &layer.spec, layer.coef)?;
    let y = tape.batch_norm(y, layer.gamma, layer.beta, &mut bn[layer.bn], mode)?;
    Ok(tape.relu(y))
}

fn dense_block(tape: &mut Tape<'_>, x: Var, block: &DenseBlock, bn: &mut [BatchNormState], mode: BnMode) -> Result<Var> {
    let mut features = vec![x];
    for unit in &block.units {
        let joined = if features.len() == 1 { x } else { tape.concat(&features)? };
        let h = conv_bn_relu(tape, joined, &unit.conv1, bn, mode)?;
        features.push(conv_bn_relu(tape, h, &unit.conv2, bn, mode)?);
    }
    let joined = if features.len() == 1 { x } else { tape.concat(&features)? };
    conv_bn_relu(tape, joined, &block.last, bn, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(budget_filters(64, 4, 18, 7, FilterFamily::Standard), 32);
        for fam in [FilterFamily::Plain, FilterFamily::Standard, FilterFamily::Steerable] {
            assert_eq!(budget_filters(64, 1, 49, 7, fam), 64);
        }
        assert_eq!(budget_filters(18, 4, 18, 7, FilterFamily::Steerable), 25);
        assert_eq!(budget_filters(1, 64, 18, 7, FilterFamily::Standard), 1);
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = ModelConfig::classifier(4, 10);
        assert!(matches!(cfg.check_input(28, 28), Err(Error::Config(_))));
        assert!(cfg.check_input(32, 32).is_ok());
    }

    #[test]
    fn width_scaling_rounds_half_up() {
        let w = Widths { stem: 16, growth1: 14, growth2: 6, block_out: vec![10], decoder_out: vec![], head: vec![1] };
        let q = w.scaled(0.25);
        assert_eq!((q.stem, q.growth1, q.growth2, q.block_out[0], q.head[0]), (4, 4, 2, 3, 1));
    }
}
