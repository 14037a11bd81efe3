//! Reverse-mode differentiation over the fixed set of operators the networks
//! use, plus Adam and a central-difference oracle.
//!
//! A [`Tape`] borrows the parameter store read-only while the forward pass is
//! recorded; [`Tape::backward`] returns gradients for every parameter, after
//! which the store can be updated with [`adam_step`].

use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::gconv::{
    self, BatchNormCache, BatchNormState, BnMode, GConvLayer, GFeatureMap,
};
use crate::basis::SteerableBasis;
use crate::tensor::{self, KernelStack, Padding, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One named trainable array. `frozen[i]` marks entries pinned at zero (the
/// imaginary parts of zero-frequency steerable coefficients).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: Vec<bool>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Entries the optimizer may change.
    pub fn trainable_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| !f).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamId> {
        let frozen = vec![false; data.len()];
        self.add_masked(name, shape, data, frozen)
    }

    pub fn add_masked(&mut self, name: impl Into<String>, shape: Vec<usize>, mut data: Vec<f64>, frozen: Vec<bool>) -> Result<ParamId> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() || frozen.len() != data.len() {
            return Err(shape_err!("parameter {name}: shape {shape:?} holds {} values", data.len()));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(invalid_arg!("duplicate parameter name {name}"));
        }
        for (v, &f) in data.iter_mut().zip(&frozen) {
            if f {
                *v = 0.0;
            }
        }
        self.params.push(Param { name, shape, data, frozen });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    /// Overwrites a parameter; frozen entries stay zero.
    pub fn set(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if values.len() != p.data.len() {
            return Err(shape_err!("parameter {} holds {} values, got {}", p.name, p.data.len(), values.len()));
        }
        for ((d, &v), &f) in p.data.iter_mut().zip(values).zip(&p.frozen) {
            *d = if f { 0.0 } else { v };
        }
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total count of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(Param::trainable_count).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Static description of a G-convolution; the coefficients come from the
/// parameter store at record time.
#[derive(Debug, Clone)]
pub struct GConvSpec {
    pub basis: SteerableBasis,
    pub in_channels: usize,
    pub out_channels: usize,
    pub n: usize,
    pub is_input_layer: bool,
}

impl GConvSpec {
    pub fn coefficient_count(&self) -> usize {
        let slots = if self.is_input_layer { 1 } else { self.n };
        self.out_channels * self.in_channels * slots * self.basis.len() * 2
    }

    pub fn layer(&self, coefficients: &[f64]) -> Result<GConvLayer> {
        GConvLayer::new(
            self.basis.clone(),
            self.in_channels,
            self.out_channels,
            self.n,
            self.is_input_layer,
            coefficients.to_vec(),
        )
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, kernel: ParamId, shape: [usize; 4], padding: Padding },
    AddBias { x: Var, bias: ParamId },
    GConv { x: Var, param: ParamId, layer: Box<GConvLayer> },
    Relu { x: Var },
    MaxPool2 { x: Var, indices: Vec<usize> },
    GPool { x: Var, indices: Vec<u32> },
    BatchNorm { x: Var, gamma: ParamId, beta: ParamId, cache: BatchNormCache },
    Up2 { x: Var },
    Concat { xs: Vec<Var> },
    GlobalAvgPool { x: Var },
    SoftmaxCrossEntropy { x: Var, labels: Vec<usize>, probs: Vec<f64> },
    Dot { x: Var, weights: Tensor4 },
}

struct Node {
    value: Tensor4,
    /// Orientation count of a G-feature map; 1 for planar values.
    n: usize,
    needs_grad: bool,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    inputs: Vec<(Var, Tensor4)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id.0]
    }

    /// Gradient of a leaf recorded with [`Tape::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor4> {
        self.inputs.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }

    pub fn max_abs(&self) -> f64 {
        self.params.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    /// The value viewed as a G-feature map.
    pub fn gmap(&self, v: Var) -> GFeatureMap {
        GFeatureMap::new(self.nodes[v.0].value.clone(), self.nodes[v.0].n).expect("recorded with consistent orientation count")
    }

    pub fn orientations(&self, v: Var) -> usize {
        self.nodes[v.0].n
    }

    /// Scalar value of a `1x1x1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor4, n: usize, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, n, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor4) -> Var {
        self.push(value, 1, false, Op::Leaf)
    }

    pub fn input_with_grad(&mut self, value: Tensor4) -> Var {
        self.push(value, 1, true, Op::Leaf)
    }

    pub fn g_input(&mut self, value: GFeatureMap, with_grad: bool) -> Var {
        let n = value.orientations();
        self.push(value.into_tensor(), n, with_grad, Op::Leaf)
    }

    /// Plain convolution with a kernel parameter of shape `(out, in, k, k)`.
    pub fn conv2d(&mut self, x: Var, kernel: ParamId, padding: Padding) -> Result<Var> {
        let p = self.params.get(kernel);
        if p.shape.len() != 4 {
            return Err(shape_err!("kernel {} must have rank 4", p.name));
        }
        let shape = [p.shape[0], p.shape[1], p.shape[2], p.shape[3]];
        let k = KernelStack::new(shape, p.data.clone())?;
        let out = tensor::conv2d(self.value(x), &k, padding)?;
        Ok(self.push(out, 1, true, Op::Conv2d { x, kernel, shape, padding }))
    }

    pub fn add_bias(&mut self, x: Var, bias: ParamId) -> Result<Var> {
        let out = tensor::add_channel_bias(self.value(x), self.params.data(bias))?;
        let n = self.nodes[x.0].n;
        Ok(self.push(out, n, true, Op::AddBias { x, bias }))
    }

    /// Input- or hidden-layer G-convolution depending on `spec`.
    pub fn g_conv(&mut self, x: Var, spec: &GConvSpec, param: ParamId) -> Result<Var> {
        let layer = spec.layer(self.params.data(param))?;
        let out = if spec.is_input_layer {
            if self.nodes[x.0].n != 1 {
                return Err(shape_err!("input G-convolution expects a planar input"));
            }
            gconv::input_g_conv(self.value(x), &layer)?
        } else {
            gconv::hidden_g_conv(&self.gmap(x), &layer)?
        };
        Ok(self.push(out.into_tensor(), spec.n, true, Op::GConv { x, param, layer: Box::new(layer) }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let (n, needs) = (self.nodes[x.0].n, self.needs(x));
        self.push(out, n, needs, Op::Relu { x })
    }

    /// 2x2 spatial max pooling, applied per plane.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, indices) = tensor::max_pool2_with_indices(self.value(x))?;
        let (n, needs) = (self.nodes[x.0].n, self.needs(x));
        Ok(self.push(out, n, needs, Op::MaxPool2 { x, indices }))
    }

    /// Orientation max pooling: G-feature map to planar map.
    pub fn g_pool(&mut self, x: Var) -> Var {
        let (out, indices) = gconv::g_pool_with_indices(&self.gmap(x));
        let needs = self.needs(x);
        self.push(out, 1, needs, Op::GPool { x, indices })
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<Var> {
        let (out, cache) = gconv::g_batch_norm(&self.gmap(x), state, self.params.data(gamma), self.params.data(beta), mode)?;
        let n = self.nodes[x.0].n;
        Ok(self.push(out.into_tensor(), n, true, Op::BatchNorm { x, gamma, beta, cache }))
    }

    pub fn bilinear_up2(&mut self, x: Var) -> Var {
        let out = tensor::bilinear_up2(self.value(x));
        let (n, needs) = (self.nodes[x.0].n, self.needs(x));
        self.push(out, n, needs, Op::Up2 { x })
    }

    /// Channel concatenation; all parts must share the orientation count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid_arg!("nothing to concatenate"))?;
        let n = self.nodes[first.0].n;
        if xs.iter().any(|v| self.nodes[v.0].n != n) {
            return Err(shape_err!("concatenated values have different orientation counts"));
        }
        let parts: Vec<&Tensor4> = xs.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_channels(&parts)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, n, needs, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = tensor::global_avg_pool(self.value(x));
        let needs = self.needs(x);
        self.push(out, 1, needs, Op::GlobalAvgPool { x })
    }

    /// Mean cross-entropy; returns a scalar node and keeps the probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor4::new([1, 1, 1, 1], vec![loss])?,
            1,
            needs,
            Op::SoftmaxCrossEntropy { x: logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Softmax probabilities recorded by a cross-entropy node.
    pub fn probabilities(&self, loss: Var) -> Option<&[f64]> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `sum(x * weights)` as a scalar node.
    pub fn dot(&mut self, x: Var, weights: Tensor4) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(shape_err!("dot weights {:?} vs value {:?}", weights.shape(), self.value(x).shape()));
        }
        let s: f64 = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor4::new([1, 1, 1, 1], vec![s])?, 1, needs, Op::Dot { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor4::filled(self.value(x).shape(), 1.0);
        self.dot(x, ones)
    }

    /// Gradients of the scalar `loss` with respect to every parameter and
    /// every leaf recorded with gradients enabled.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() || self.nodes[loss.0].value.data().len() != 1 {
            return Err(Error::State("backward needs a scalar node recorded on this tape".into()));
        }
        let mut params: Vec<Vec<f64>> = self.params.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut inputs = Vec::new();
        grads[loss.0] = Some(Tensor4::filled([1, 1, 1, 1], 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Tensor4, grads: &mut Vec<Option<Tensor4>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => inputs.push((Var(i), g)),
                Op::Conv2d { x, kernel, shape, padding } => {
                    let xv = self.value(*x);
                    let dk = tensor::conv2d_backward_kernel(xv, &g, *shape, *padding)?;
                    accumulate(&mut params[kernel.0], dk.data());
                    if self.needs(*x) {
                        let k = KernelStack::new(*shape, self.params.data(*kernel).to_vec())?;
                        send(*x, tensor::conv2d_backward_input(&g, &k, xv.shape(), *padding)?, &mut grads);
                    }
                }
                Op::AddBias { x, bias } => {
                    accumulate(&mut params[bias.0], &tensor::channel_sums(&g));
                    send(*x, g, &mut grads);
                }
                Op::GConv { x, param, layer } => {
                    let gg = gconv::g_conv_backward(self.value(*x), &g, layer, self.needs(*x))?;
                    accumulate(&mut params[param.0], &gg.coefficients);
                    if let Some(dx) = gg.input {
                        send(*x, dx, &mut grads);
                    }
                }
                Op::Relu { x } => send(*x, tensor::relu_backward(&g, self.value(*x)), &mut grads),
                Op::MaxPool2 { x, indices } => {
                    send(*x, tensor::max_pool2_backward(&g, indices, self.value(*x).shape()), &mut grads)
                }
                Op::GPool { x, indices } => {
                    let shape = self.gmap(*x).shape();
                    send(*x, gconv::g_pool_backward(&g, indices, shape).into_tensor(), &mut grads)
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let bg = gconv::g_batch_norm_backward(&g, cache, self.params.data(*gamma), self.nodes[x.0].n);
                    accumulate(&mut params[gamma.0], &bg.gamma);
                    accumulate(&mut params[beta.0], &bg.beta);
                    send(*x, bg.input, &mut grads);
                }
                Op::Up2 { x } => send(*x, tensor::bilinear_up2_backward(&g, self.value(*x).shape()), &mut grads),
                Op::Concat { xs } => {
                    let channels: Vec<usize> = xs.iter().map(|v| self.value(*v).channels()).collect();
                    for (v, part) in xs.iter().zip(tensor::split_channels(&g, &channels)) {
                        send(*v, part, &mut grads);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    send(*x, tensor::global_avg_pool_backward(&g, self.value(*x).shape()), &mut grads)
                }
                Op::SoftmaxCrossEntropy { x, labels, probs } => {
                    let classes = self.value(*x).channels();
                    let mut d = tensor::softmax_cross_entropy_backward(probs, labels, classes);
                    let scale = g.data()[0];
                    d.data_mut().iter_mut().for_each(|v| *v *= scale);
                    send(*x, d, &mut grads);
                }
                Op::Dot { x, weights } => {
                    let scale = g.data()[0];
                    let mut d = weights.clone();
                    d.data_mut().iter_mut().for_each(|v| *v *= scale);
                    send(*x, d, &mut grads);
                }
            }
        }
        for (grad, p) in params.iter_mut().zip(self.params.params()) {
            for (v, &f) in grad.iter_mut().zip(&p.frozen) {
                if f {
                    *v = 0.0;
                }
            }
        }
        inputs.reverse();
        Ok(Gradients { params, inputs })
    }
}

fn accumulate(acc: &mut [f64], values: &[f64]) {
    acc.iter_mut().zip(values).for_each(|(a, v)| *a += v);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update at learning rate `lr` (the configured
/// rate is used by schedules as the base value).
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.params.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err!("gradient/optimizer state does not match the parameter store"));
    }
    for (i, p) in params.params.iter().enumerate() {
        if grads.params[i].len() != p.len() || state.m[i].len() != p.len() {
            return Err(shape_err!("gradient for {} has the wrong length", p.name));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps, .. } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads.params[i]);
        for j in 0..p.data.len() {
            if p.frozen[j] {
                continue;
            }
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Central differences `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, p: &[f64], eps: f64) -> Vec<f64> {
    let mut x = p.to_vec();
    (0..p.len())
        .map(|i| {
            x[i] = p[i] + eps;
            let plus = f(&x);
            x[i] = p[i] - eps;
            let minus = f(&x);
            x[i] = p[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `max |a - b| / max(|a|_inf, |b|_inf)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tests::random_tensor;

    #[test]
    fn relu_sum_gradient_is_ones_for_positive_input() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = random_tensor([2, 3, 4, 4], 1);
        let positive = Tensor4::new(x.shape(), x.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        let v = tape.input_with_grad(positive);
        let r = tape.relu(v);
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.input(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn conv_sum_gradient_interior_is_kernel_sum() {
        let mut store = ParamStore::new();
        let k = store.add("k", vec![1, 1, 3, 3], vec![0.5; 9]).unwrap();
        let mut tape = Tape::new(&store);
        let v = tape.input_with_grad(random_tensor([1, 1, 6, 6], 2));
        let c = tape.conv2d(v, k, Padding::Same).unwrap();
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.input(v).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert!((gx.get(0, 0, y, x) - 4.5).abs() < 1e-12);
            }
        }
        // Corners only see 4 kernel taps.
        assert!((gx.get(0, 0, 0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_errors() {
        let store = ParamStore::new();
        let tape = Tape::new(&store);
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
        let mut tape = Tape::new(&store);
        let v = tape.input(Tensor4::zeros([1, 2, 2, 2]));
        assert!(matches!(tape.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let unused = store.add("unused", vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new(&store);
        let v = tape.input(Tensor4::filled([1, 1, 2, 2], 1.0));
        let c = tape.conv2d(v, used, Padding::Same).unwrap();
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(used), &[4.0]);
        assert_eq!(g.param(unused), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn param_store_rules() {
        let mut store = ParamStore::new();
        let id = store.add_masked("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], vec![false, true, false, true]).unwrap();
        assert_eq!(store.data(id), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(store.trainable_count(), 2);
        assert!(store.add("w", vec![1], vec![0.0]).is_err());
        assert!(store.add("x", vec![2], vec![0.0]).is_err());
        store.set(id, &[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(store.data(id), &[5.0, 0.0, 7.0, 0.0]);
        assert_eq!(store.find("w"), Some(id));
    }

    #[test]
    fn finite_diff_examples() {
        let p = [0.3, -1.2, 2.5];
        let g = finite_diff(|x| x.iter().map(|v| v * v).sum(), &p, 1e-6);
        for (a, b) in g.iter().zip(&p) {
            assert!((a - 2.0 * b).abs() < 1e-7);
        }
        let g = finite_diff(|x| x.iter().sum(), &[0.0, 0.0, 0.0], 0.5);
        assert_eq!(g, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::new();
        let id = store.add_masked("p", vec![3], vec![1.0, -2.0, 0.5], vec![false, false, true]).unwrap();
        let mut state = AdamState::new(&store, AdamConfig::default());
        let zero = Gradients { params: vec![vec![0.0; 3]], inputs: vec![] };
        adam_step(&mut store, &zero, &mut state, 1e-3).unwrap();
        assert_eq!(store.data(id), &[1.0, -2.0, 0.0]);
        assert_eq!(state.step, 1);

        let mut store2 = ParamStore::new();
        let id2 = store2.add("p", vec![2], vec![1.0, 1.0]).unwrap();
        let mut state2 = AdamState::new(&store2, AdamConfig::default());
        let g = Gradients { params: vec![vec![0.3, -7.0]], inputs: vec![] };
        adam_step(&mut store2, &g, &mut state2, 1e-3).unwrap();
        let d = store2.data(id2);
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((d[1] - (1.0 + 1e-3)).abs() < 1e-10);

        let mut last = 1.0;
        for _ in 0..50 {
            adam_step(&mut store2, &g, &mut state2, 1e-2).unwrap();
            assert!(store2.data(id2)[0] < last);
            last = store2.data(id2)[0];
        }
        let bad = Gradients { params: vec![vec![0.0]], inputs: vec![] };
        assert!(adam_step(&mut store2, &bad, &mut state2, 1e-3).is_err());
    }

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.1]) - 0.1 / 2.1).abs() < 1e-15);
    }
}
