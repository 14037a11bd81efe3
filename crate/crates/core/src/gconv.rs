//! Group convolutions over `C_n`, the discrete rotation group of order `n`.
//!
//! A [`GFeatureMap`] holds one planar map per (channel, orientation). It is
//! stored as a plain [`Tensor4`] with `C * n` channels, channel-major: plane
//! `c * n + s` is channel `c` at orientation `theta_s = 2 pi s / n`. Every
//! per-plane tensor op therefore lifts to G-feature maps unchanged.
//!
//! Both G-convolutions first synthesize a full bank of planar kernels from
//! the steerable coefficients and then run one ordinary convolution:
//!
//! * input layer: `h_theta = corr(f, Re sum_p w_p e^{-i k_p theta} psi_p)`
//! * hidden layer: `h_theta = sum_phi corr(f_phi, Re sum_p w_{p,(theta-phi) mod n} e^{-i k_p phi} psi_p)`
//!
//! With these conventions rotating the input by `2 pi s / n` rotates every
//! output plane by the same angle and moves orientation `theta` to
//! `theta + 2 pi s / n` (see [`ORIENTATION_SHIFT`]).

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::basis::{synthesize_filter, SteerableBasis, SteerableWeights};
use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::tensor::{self, KernelStack, Padding, Tensor4};

/// Direction in which an input rotation by `+2 pi / n` moves the
/// orientation axis of every G-convolution output.
pub const ORIENTATION_SHIFT: i64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupConfig {
    n: usize,
    angles: Vec<f64>,
}

impl GroupConfig {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid_arg!("group order must be positive"));
        }
        Ok(Self { n, angles: crate::basis::group_angles(n) })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Number of orientation steps making up a quarter turn, if integral.
    pub fn quarter_turn_steps(&self) -> Option<usize> {
        (self.n % 4 == 0).then_some(self.n / 4)
    }
}

/// Feature map on the group: `(B, C, n, H, W)` stored as `(B, C*n, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GFeatureMap {
    tensor: Tensor4,
    channels: usize,
    n: usize,
}

impl GFeatureMap {
    pub fn new(tensor: Tensor4, n: usize) -> Result<Self> {
        if n == 0 || tensor.channels() % n != 0 {
            return Err(shape_err!(
                "{} planes cannot be split into orientation groups of {n}",
                tensor.channels()
            ));
        }
        Ok(Self { channels: tensor.channels() / n, tensor, n })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        let [b, c, n, h, w] = shape;
        Self { tensor: Tensor4::zeros([b, c * n, h, w]), channels: c, n }
    }

    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut(usize, usize, usize, usize, usize) -> f64) -> Self {
        let [b, c, n, h, w] = shape;
        let tensor = Tensor4::from_fn([b, c * n, h, w], |bi, p, y, x| f(bi, p / n, p % n, y, x));
        Self { tensor, channels: c, n }
    }

    /// `(B, C, n, H, W)`.
    pub fn shape(&self) -> [usize; 5] {
        let [b, _, h, w] = self.tensor.shape();
        [b, self.channels, self.n, h, w]
    }

    pub fn batch(&self) -> usize {
        self.tensor.batch()
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn orientations(&self) -> usize {
        self.n
    }
    pub fn height(&self) -> usize {
        self.tensor.height()
    }
    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    pub fn get(&self, b: usize, c: usize, s: usize, y: usize, x: usize) -> f64 {
        self.tensor.get(b, c * self.n + s, y, x)
    }

    pub fn plane(&self, b: usize, c: usize, s: usize) -> &[f64] {
        self.tensor.plane(b, c * self.n + s)
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.tensor
    }

    pub fn crop(&self, border: usize) -> GFeatureMap {
        Self { tensor: self.tensor.crop(border), channels: self.channels, n: self.n }
    }

    pub fn max_abs_diff(&self, other: &GFeatureMap) -> f64 {
        assert_eq!(self.n, other.n, "orientation counts differ");
        self.tensor.max_abs_diff(&other.tensor)
    }

    fn lift(&self, tensor: Tensor4) -> GFeatureMap {
        Self { channels: tensor.channels() / self.n, tensor, n: self.n }
    }
}

/// Steerable coefficients of one G-convolution layer.
///
/// Coefficients are stored flat as interleaved `(re, im)` pairs with layout
/// `(out, in, slot, pair, 2)`; input layers have one slot, hidden layers one
/// per orientation `lambda`. The imaginary part of zero-frequency pairs is
/// always zero.
#[derive(Debug, Clone)]
pub struct GConvLayer {
    basis: SteerableBasis,
    in_channels: usize,
    out_channels: usize,
    n: usize,
    is_input_layer: bool,
    coefficients: Vec<f64>,
}

impl GConvLayer {
    pub fn new(
        basis: SteerableBasis,
        in_channels: usize,
        out_channels: usize,
        n: usize,
        is_input_layer: bool,
        coefficients: Vec<f64>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || n == 0 {
            return Err(invalid_arg!("channel counts and group order must be positive"));
        }
        let slots = if is_input_layer { 1 } else { n };
        let expected = out_channels * in_channels * slots * basis.len() * 2;
        if coefficients.len() != expected {
            return Err(shape_err!("expected {expected} coefficient values, got {}", coefficients.len()));
        }
        let mut layer = Self { basis, in_channels, out_channels, n, is_input_layer, coefficients };
        layer.clear_masked();
        Ok(layer)
    }

    pub fn zeros(basis: SteerableBasis, in_channels: usize, out_channels: usize, n: usize, is_input_layer: bool) -> Result<Self> {
        let slots = if is_input_layer { 1 } else { n };
        let len = out_channels * in_channels * slots * basis.len() * 2;
        Self::new(basis, in_channels, out_channels, n, is_input_layer, vec![0.0; len])
    }

    pub fn basis(&self) -> &SteerableBasis {
        &self.basis
    }
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn group_order(&self) -> usize {
        self.n
    }
    pub fn is_input_layer(&self) -> bool {
        self.is_input_layer
    }
    pub fn slots(&self) -> usize {
        if self.is_input_layer {
            1
        } else {
            self.n
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn set_coefficients(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.coefficients.len() {
            return Err(shape_err!("expected {} coefficient values, got {}", self.coefficients.len(), values.len()));
        }
        self.coefficients.copy_from_slice(values);
        self.clear_masked();
        Ok(())
    }

    /// `true` for every stored value that is a fixed zero (the imaginary part
    /// of a zero-frequency coefficient).
    pub fn masked(&self) -> Vec<bool> {
        coefficient_mask(&self.basis, self.coefficients.len())
    }

    fn clear_masked(&mut self) {
        let mask = coefficient_mask(&self.basis, self.coefficients.len());
        for (v, m) in self.coefficients.iter_mut().zip(mask) {
            if m {
                *v = 0.0;
            }
        }
    }

    /// Coefficients of one (out, in) filter pair.
    pub fn weights(&self, out: usize, inp: usize) -> SteerableWeights {
        let per = self.slots() * self.basis.len();
        let start = (out * self.in_channels + inp) * per * 2;
        let values = self.coefficients[start..start + per * 2]
            .chunks(2)
            .map(|z| Complex64::new(z[0], z[1]))
            .collect();
        SteerableWeights::new(self.basis.spec(), self.slots(), values).expect("layer layout matches basis")
    }

    pub fn set_weights(&mut self, out: usize, inp: usize, weights: &SteerableWeights) -> Result<()> {
        let per = self.slots() * self.basis.len();
        if weights.coefficients().len() != per {
            return Err(invalid_arg!("weights have {} coefficients, layer pair expects {per}", weights.coefficients().len()));
        }
        let start = (out * self.in_channels + inp) * per * 2;
        for (i, z) in weights.coefficients().iter().enumerate() {
            self.coefficients[start + 2 * i] = z.re;
            self.coefficients[start + 2 * i + 1] = z.im;
        }
        self.clear_masked();
        Ok(())
    }

    /// Shape of the synthesized kernel bank.
    pub fn bank_shape(&self) -> [usize; 4] {
        let k = self.basis.size();
        let cin = if self.is_input_layer { self.in_channels } else { self.in_channels * self.n };
        [self.out_channels * self.n, cin, k, k]
    }

    /// All planar kernels of the layer; see the module docs for the indexing.
    pub fn kernel_bank(&self) -> KernelStack {
        synthesize_bank(&self.basis, &self.coefficients, self.bank_shape(), self.n, self.is_input_layer)
    }

    /// Projects a gradient with respect to the kernel bank onto the
    /// coefficients (same layout as [`GConvLayer::coefficients`]).
    pub fn bank_gradient(&self, grad_bank: &KernelStack) -> Result<Vec<f64>> {
        if grad_bank.shape() != self.bank_shape() {
            return Err(shape_err!("bank gradient shape {:?}, expected {:?}", grad_bank.shape(), self.bank_shape()));
        }
        Ok(project_bank_gradient(
            &self.basis,
            grad_bank.data(),
            self.bank_shape(),
            self.n,
            self.is_input_layer,
            self.coefficients.len(),
        ))
    }
}

fn coefficient_mask(basis: &SteerableBasis, len: usize) -> Vec<bool> {
    let freqs = basis.frequencies();
    let p = freqs.len();
    (0..len).map(|i| i % 2 == 1 && freqs[(i / 2) % p] == 0).collect()
}

/// For every bank row: which coefficient block feeds it and at which angle.
/// Returns `(block_start_in_pairs, angle)` per row, rows ordered as the bank's
/// `(out * n + theta, in_plane)`.
fn bank_rows(shape: [usize; 4], n: usize, pairs: usize, is_input: bool) -> Vec<(usize, f64)> {
    let [rows_out, cols_in, _, _] = shape;
    let out_channels = rows_out / n;
    let (in_channels, slots) = if is_input { (cols_in, 1) } else { (cols_in / n, n) };
    let mut rows = Vec::with_capacity(rows_out * cols_in);
    for o in 0..out_channels {
        for theta in 0..n {
            for i in 0..in_channels {
                let pair_base = (o * in_channels + i) * slots;
                if is_input {
                    rows.push((pair_base * pairs, 2.0 * PI * theta as f64 / n as f64));
                } else {
                    for phi in 0..n {
                        let lambda = (theta + n - phi) % n;
                        rows.push(((pair_base + lambda) * pairs, 2.0 * PI * phi as f64 / n as f64));
                    }
                }
            }
        }
    }
    rows
}

/// `cos(k alpha), sin(k alpha)` for every frequency at every group angle,
/// computed once per call and reused across rows.
fn phase_table(freqs: &[usize], n: usize) -> Vec<(f64, f64)> {
    let mut table = Vec::with_capacity(n * freqs.len());
    for s in 0..n {
        let alpha = 2.0 * PI * s as f64 / n as f64;
        for &k in freqs {
            let (sin, cos) = (k as f64 * alpha).sin_cos();
            table.push((cos, sin));
        }
    }
    table
}

fn angle_index(angle: f64, n: usize) -> usize {
    ((angle * n as f64 / (2.0 * PI)).round() as usize) % n
}

fn synthesize_bank(basis: &SteerableBasis, coefficients: &[f64], shape: [usize; 4], n: usize, is_input: bool) -> KernelStack {
    let freqs = basis.frequencies();
    let p = freqs.len();
    let area = basis.size() * basis.size();
    let rows = bank_rows(shape, n, p, is_input);
    let phases = phase_table(&freqs, n);
    // Row-major (rows x 2P) coefficient matrix against the (2P x K^2) planes.
    let mut m = vec![0.0; rows.len() * 2 * p];
    for (r, &(block, angle)) in rows.iter().enumerate() {
        let s = angle_index(angle, n);
        let dst = &mut m[r * 2 * p..(r + 1) * 2 * p];
        for q in 0..p {
            let (wr, wi) = (coefficients[2 * (block + q)], coefficients[2 * (block + q) + 1]);
            let (cos, sin) = phases[s * p + q];
            // Re((wr + i wi) e^{-i k a} psi) = (wr cos + wi sin) Re psi + (wr sin - wi cos) Im psi
            dst[2 * q] = wr * cos + wi * sin;
            dst[2 * q + 1] = wr * sin - wi * cos;
        }
    }
    let planes = basis.real_planes();
    let mut data = vec![0.0; rows.len() * area];
    tensor::gemm(rows.len(), 2 * p, area, &m, (2 * p as isize, 1), &planes, (area as isize, 1), 0.0, &mut data);
    KernelStack::new(shape, data).expect("odd basis size")
}

fn project_bank_gradient(
    basis: &SteerableBasis,
    grad_bank: &[f64],
    shape: [usize; 4],
    n: usize,
    is_input: bool,
    len: usize,
) -> Vec<f64> {
    let freqs = basis.frequencies();
    let p = freqs.len();
    let area = basis.size() * basis.size();
    let rows = bank_rows(shape, n, p, is_input);
    let planes = basis.real_planes();
    // dM = dK * planes^T
    let mut dm = vec![0.0; rows.len() * 2 * p];
    tensor::gemm(rows.len(), area, 2 * p, grad_bank, (area as isize, 1), &planes, (1, area as isize), 0.0, &mut dm);
    let phases = phase_table(&freqs, n);
    let mut grad = vec![0.0; len];
    for (r, &(block, angle)) in rows.iter().enumerate() {
        let s = angle_index(angle, n);
        for q in 0..p {
            let (d_re, d_negim) = (dm[r * 2 * p + 2 * q], dm[r * 2 * p + 2 * q + 1]);
            let (cos, sin) = phases[s * p + q];
            grad[2 * (block + q)] += d_re * cos + d_negim * sin;
            if freqs[q] != 0 {
                grad[2 * (block + q) + 1] += d_re * sin - d_negim * cos;
            }
        }
    }
    grad
}

fn check_input_layer(image: &Tensor4, layer: &GConvLayer) -> Result<()> {
    if !layer.is_input_layer {
        return Err(invalid_arg!("input_g_conv needs an input layer"));
    }
    if image.channels() != layer.in_channels {
        return Err(shape_err!("image has {} channels, layer expects {}", image.channels(), layer.in_channels));
    }
    Ok(())
}

fn check_hidden_layer(f: &GFeatureMap, layer: &GConvLayer) -> Result<()> {
    if layer.is_input_layer {
        return Err(invalid_arg!("hidden_g_conv needs a hidden layer"));
    }
    if f.n != layer.n {
        return Err(shape_err!("feature map has {} orientations, layer weights have {}", f.n, layer.n));
    }
    if f.channels != layer.in_channels {
        return Err(shape_err!("feature map has {} channels, layer expects {}", f.channels, layer.in_channels));
    }
    Ok(())
}

/// Lifts a planar image to the group with one rotated copy of each filter
/// per orientation.
pub fn input_g_conv(image: &Tensor4, layer: &GConvLayer) -> Result<GFeatureMap> {
    check_input_layer(image, layer)?;
    let out = tensor::conv2d(image, &layer.kernel_bank(), Padding::Same)?;
    GFeatureMap::new(out, layer.n)
}

/// G-convolution between feature maps on the group.
pub fn hidden_g_conv(f: &GFeatureMap, layer: &GConvLayer) -> Result<GFeatureMap> {
    check_hidden_layer(f, layer)?;
    let out = tensor::conv2d(&f.tensor, &layer.kernel_bank(), Padding::Same)?;
    GFeatureMap::new(out, layer.n)
}

/// Gradients of a G-convolution with respect to its input and coefficients.
pub struct GConvGrad {
    pub input: Option<Tensor4>,
    pub coefficients: Vec<f64>,
}

/// Backward pass shared by both layer kinds; `input` is the planar image for
/// input layers and the G-feature map's tensor for hidden layers.
pub fn g_conv_backward(input: &Tensor4, grad_out: &Tensor4, layer: &GConvLayer, need_input: bool) -> Result<GConvGrad> {
    let bank = layer.kernel_bank();
    let grad_bank = tensor::conv2d_backward_kernel(input, grad_out, bank.shape(), Padding::Same)?;
    let coefficients = layer.bank_gradient(&grad_bank)?;
    let input = if need_input {
        Some(tensor::conv2d_backward_input(grad_out, &bank, input.shape(), Padding::Same)?)
    } else {
        None
    };
    Ok(GConvGrad { input, coefficients })
}

/// Plane-by-plane evaluation straight from the defining sum, one synthesized
/// filter and one single-channel convolution at a time. Slow; kept as an
/// independent check of the fused kernel bank.
pub fn g_conv_reference(input: &Tensor4, layer: &GConvLayer) -> Result<GFeatureMap> {
    let n = layer.n;
    let size = layer.basis.size();
    let [b, _, h, w] = input.shape();
    let angles = crate::basis::group_angles(n);
    let mut out = Tensor4::zeros([b, layer.out_channels * n, h, w]);
    let single = |t: &Tensor4, plane: usize| -> Tensor4 {
        Tensor4::from_fn([b, 1, h, w], |bi, _, y, x| t.get(bi, plane, y, x))
    };
    for o in 0..layer.out_channels {
        for theta in 0..n {
            let mut acc = Tensor4::zeros([b, 1, h, w]);
            for i in 0..layer.in_channels {
                let weights = layer.weights(o, i);
                let terms: Vec<(usize, usize, f64)> = if layer.is_input_layer {
                    vec![(i, 0, angles[theta])]
                } else {
                    (0..n).map(|phi| (i * n + phi, (theta + n - phi) % n, angles[phi])).collect()
                };
                for (plane, lambda, angle) in terms {
                    let filter = synthesize_filter(weights.slice(lambda), &layer.basis, angle)?;
                    let k = KernelStack::new([1, 1, size, size], filter)?;
                    let part = tensor::conv2d(&single(input, plane), &k, Padding::Same)?;
                    for (a, v) in acc.data_mut().iter_mut().zip(part.data()) {
                        *a += v;
                    }
                }
            }
            let data = out.data_mut();
            for bi in 0..b {
                let dst = ((bi * layer.out_channels * n) + o * n + theta) * h * w;
                data[dst..dst + h * w].copy_from_slice(acc.plane(bi, 0));
            }
        }
    }
    GFeatureMap::new(out, n)
}

/// Rotates every plane by `2 pi s / n` and shifts the orientation axis by
/// `s`, i.e. the action of a group rotation on a G-feature map. Exact when
/// the angle is a multiple of 90 degrees, bilinear otherwise.
pub fn gshift_rot(f: &GFeatureMap, s: i64) -> GFeatureMap {
    let n = f.n as i64;
    let [b, c, _, _, _] = f.shape();
    let s = s.rem_euclid(n);
    let rotated = if (4 * s) % n == 0 {
        tensor::rot90(&f.tensor, 4 * s / n)
    } else {
        tensor::rotate_interp(&f.tensor, 2.0 * PI * s as f64 / n as f64)
    };
    let shift = (ORIENTATION_SHIFT * s).rem_euclid(n) as usize;
    let (oh, ow) = (rotated.height(), rotated.width());
    let tensor = Tensor4::from_fn([b, c * f.n, oh, ow], |bi, p, y, x| {
        let (ci, theta) = (p / f.n, p % f.n);
        rotated.get(bi, ci * f.n + (theta + f.n - shift) % f.n, y, x)
    });
    f.lift(tensor)
}

/// Pointwise maximum over orientations, with the winning orientation of each
/// output value (first index wins ties).
pub fn g_pool_with_indices(f: &GFeatureMap) -> (Tensor4, Vec<u32>) {
    let [b, c, n, h, w] = f.shape();
    let area = h * w;
    let src = f.tensor.data();
    let mut out = vec![0.0; b * c * area];
    let mut idx = vec![0u32; b * c * area];
    for bc in 0..b * c {
        let dst = &mut out[bc * area..(bc + 1) * area];
        let arg = &mut idx[bc * area..(bc + 1) * area];
        dst.copy_from_slice(&src[bc * n * area..bc * n * area + area]);
        for s in 1..n {
            let plane = &src[(bc * n + s) * area..(bc * n + s + 1) * area];
            for ((d, a), &v) in dst.iter_mut().zip(arg.iter_mut()).zip(plane) {
                if v > *d {
                    *d = v;
                    *a = s as u32;
                }
            }
        }
    }
    (Tensor4::new([b, c, h, w], out).expect("sizes agree"), idx)
}

pub fn g_pool(f: &GFeatureMap) -> Tensor4 {
    g_pool_with_indices(f).0
}

pub fn g_pool_backward(grad_out: &Tensor4, indices: &[u32], shape: [usize; 5]) -> GFeatureMap {
    let [b, c, n, h, w] = shape;
    let area = h * w;
    let mut g = GFeatureMap::zeros(shape);
    let data = g.tensor.data_mut();
    for bc in 0..b * c {
        for i in 0..area {
            let s = indices[bc * area + i] as usize;
            data[(bc * n + s) * area + i] += grad_out.data()[bc * area + i];
        }
    }
    g
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running moments of one G-batch-norm layer, one entry per channel (shared
/// by all orientations of that channel).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![0.0; channels], running_var: vec![1.0; channels], initialized: false }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// What the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Tensor4,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

/// Batch norm with moments pooled over batch, orientation and space, so the
/// statistics are unchanged by any rotation of the input.
///
/// In train mode the running moments move as `m <- 0.9 m + 0.1 batch`
/// (biased variance); the first train step copies the batch moments.
pub fn g_batch_norm(
    f: &GFeatureMap,
    state: &mut BatchNormState,
    gamma: &[f64],
    beta: &[f64],
    mode: BnMode,
) -> Result<(GFeatureMap, BatchNormCache)> {
    let [b, c, n, h, w] = f.shape();
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(shape_err!(
            "batch norm over {c} channels given {} gammas, {} betas, {} running moments",
            gamma.len(),
            beta.len(),
            state.channels()
        ));
    }
    let group = n * h * w;
    let count = (b * group) as f64;
    let src = f.tensor.data();
    let (mean, var) = match mode {
        BnMode::Train => {
            if b * group == 0 {
                return Err(invalid_arg!("batch norm over an empty batch"));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let start = (bi * c + ci) * group;
                    mean[ci] += src[start..start + group].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for bi in 0..b {
                for ci in 0..c {
                    let start = (bi * c + ci) * group;
                    var[ci] += src[start..start + group].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            if state.initialized {
                for ci in 0..c {
                    state.running_mean[ci] = BN_MOMENTUM * state.running_mean[ci] + (1.0 - BN_MOMENTUM) * mean[ci];
                    state.running_var[ci] = BN_MOMENTUM * state.running_var[ci] + (1.0 - BN_MOMENTUM) * var[ci];
                }
            } else {
                state.running_mean.copy_from_slice(&mean);
                state.running_var.copy_from_slice(&var);
                state.initialized = true;
            }
            (mean, var)
        }
        BnMode::Eval => {
            if !state.initialized {
                return Err(Error::State("batch norm evaluated before any training step".into()));
            }
            (state.running_mean.clone(), state.running_var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut normalized = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            let start = (bi * c + ci) * group;
            for i in start..start + group {
                let z = (src[i] - mean[ci]) * inv_std[ci];
                normalized[i] = z;
                out[i] = gamma[ci] * z + beta[ci];
            }
        }
    }
    let shape4 = f.tensor.shape();
    Ok((
        f.lift(Tensor4::new(shape4, out)?),
        BatchNormCache { normalized: Tensor4::new(shape4, normalized)?, inv_std, mode },
    ))
}

pub struct BatchNormGrad {
    pub input: Tensor4,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn g_batch_norm_backward(grad_out: &Tensor4, cache: &BatchNormCache, gamma: &[f64], n: usize) -> BatchNormGrad {
    let [b, planes, h, w] = grad_out.shape();
    let c = planes / n;
    let group = n * h * w;
    let count = (b * group) as f64;
    let dy = grad_out.data();
    let xhat = cache.normalized.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let start = (bi * c + ci) * group;
            for i in start..start + group {
                dbeta[ci] += dy[i];
                dgamma[ci] += dy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for bi in 0..b {
        for ci in 0..c {
            let start = (bi * c + ci) * group;
            let scale = gamma[ci] * cache.inv_std[ci];
            for i in start..start + group {
                dx[i] = match cache.mode {
                    BnMode::Train => scale * (dy[i] - dbeta[ci] / count - xhat[i] * dgamma[ci] / count),
                    BnMode::Eval => scale * dy[i],
                };
            }
        }
    }
    BatchNormGrad { input: Tensor4::new(grad_out.shape(), dx).expect("sizes agree"), gamma: dgamma, beta: dbeta }
}

pub fn g_relu(f: &GFeatureMap) -> GFeatureMap {
    f.lift(tensor::relu(&f.tensor))
}

pub fn g_spatial_pool(f: &GFeatureMap) -> Result<GFeatureMap> {
    Ok(f.lift(tensor::max_pool2(&f.tensor)?))
}

pub fn g_bilinear_up2(f: &GFeatureMap) -> GFeatureMap {
    f.lift(tensor::bilinear_up2(&f.tensor))
}

pub fn g_concat(parts: &[&GFeatureMap]) -> Result<GFeatureMap> {
    let first = parts.first().ok_or_else(|| invalid_arg!("nothing to concatenate"))?;
    if parts.iter().any(|p| p.n != first.n) {
        return Err(shape_err!("concatenated feature maps have different group orders"));
    }
    let tensors: Vec<&Tensor4> = parts.iter().map(|p| &p.tensor).collect();
    Ok(first.lift(tensor::concat_channels(&tensors)?))
}
