//! Analytic gradients of every tape operator checked against central
//! differences on small random instances.
//!
//! Inputs are built so no ReLU input or max-pool candidate sits within a
//! finite-difference step of a kink or tie.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff, relative_error, GConvSpec, ParamId, ParamStore, Tape, Var};
use crate::basis::{build_basis, FrequencySpec};
use crate::error::{invalid_arg, Result};
use crate::gconv::{BatchNormState, BnMode, GConvLayer};
use crate::model::{Model, ModelConfig, Widths};
use crate::tensor::{Padding, Tensor4};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// Names accepted by [`check`].
pub const OPS: &[&str] = &[
    "conv2d",
    "add_bias",
    "input_g_conv",
    "hidden_g_conv",
    "relu",
    "max_pool2",
    "g_pool",
    "g_batch_norm",
    "bilinear_up2",
    "concat",
    "global_avg_pool",
    "softmax_cross_entropy",
    "two_layer_g_model",
    "toy_classifier",
];

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: String,
    pub relative_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.relative_error <= TOLERANCE
    }
}

/// Random values with pairwise gaps and a clearance from zero much larger
/// than the finite-difference step.
fn spaced(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..len).collect();
    ranks.shuffle(rng);
    ranks
        .into_iter()
        .map(|r| {
            let v = (r as f64 - len as f64 / 2.0 + 0.5) / len as f64 * 2.0;
            v + rng.random_range(-0.2..0.2) / len as f64
        })
        .collect()
}

fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A scalar objective recorded on a fresh tape for the given parameter
/// values and input; returns the loss node and the input node.
type Objective<'a> = dyn Fn(&mut Tape<'_>, &Tensor4) -> Result<(Var, Var)> + 'a;

/// Compares tape gradients with central differences for the input tensor and
/// for `coords` (param, index) pairs (all coordinates when `None`).
fn compare(
    name: &str,
    store: &ParamStore,
    input: &Tensor4,
    objective: &Objective<'_>,
    coords: Option<Vec<(ParamId, usize)>>,
    check_input: bool,
) -> Result<CheckResult> {
    let mut tape = Tape::new(store);
    let (loss, x) = objective(&mut tape, input)?;
    let grads = tape.backward(loss)?;
    let eval = |s: &ParamStore, t: &Tensor4| -> f64 {
        let mut tape = Tape::new(s);
        let (loss, _) = objective(&mut tape, t).expect("objective evaluated once already");
        tape.scalar(loss)
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    if check_input {
        let gx = grads.input(x).cloned().unwrap_or_else(|| Tensor4::zeros(input.shape()));
        analytic.extend_from_slice(gx.data());
        numeric.extend(finite_diff(
            |v| eval(store, &Tensor4::new(input.shape(), v.to_vec()).expect("same shape")),
            input.data(),
            FD_STEP,
        ));
    }
    let coords = coords.unwrap_or_else(|| {
        store
            .ids()
            .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
            .collect()
    });
    let mut probe = store.clone();
    for (id, i) in coords {
        if store.get(id).frozen[i] {
            continue;
        }
        let base = store.data(id).to_vec();
        let mut at = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            probe.set(id, &v).expect("same length");
            let r = eval(&probe, input);
            probe.set(id, &base).expect("same length");
            r
        };
        let plus = at(FD_STEP);
        let minus = at(-FD_STEP);
        numeric.push((plus - minus) / (2.0 * FD_STEP));
        analytic.push(grads.param(id)[i]);
    }
    Ok(CheckResult { op: name.to_string(), relative_error: relative_error(&analytic, &numeric), coordinates: analytic.len() })
}

fn probe_weights(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::new(shape, random(shape.iter().product(), rng)).expect("sizes agree")
}

fn gconv_spec(size: usize, cin: usize, cout: usize, n: usize, input: bool) -> Result<GConvSpec> {
    let spec = FrequencySpec::default_for_size(size)?;
    Ok(GConvSpec { basis: build_basis(&spec, size, 0.6, true)?, in_channels: cin, out_channels: cout, n, is_input_layer: input })
}

fn add_gconv(store: &mut ParamStore, name: &str, spec: &GConvSpec, rng: &mut ChaCha8Rng) -> Result<ParamId> {
    let data = random(spec.coefficient_count(), rng);
    let frozen = GConvLayer::new(spec.basis.clone(), spec.in_channels, spec.out_channels, spec.n, spec.is_input_layer, data.clone())?.masked();
    store.add_masked(name, vec![data.len()], data, frozen)
}

/// Runs the check for one operator (see [`OPS`]).
pub fn check(op: &str, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match op {
        "conv2d" => {
            let k = store.add("k", vec![3, 2, 3, 3], random(54, &mut rng))?;
            let x = probe_weights([2, 2, 5, 5], &mut rng);
            let w = probe_weights([2, 3, 5, 5], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.input_with_grad(x.clone());
                let y = t.conv2d(v, k, Padding::Same)?;
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "add_bias" => {
            let b = store.add("b", vec![3], random(3, &mut rng))?;
            let x = probe_weights([2, 3, 3, 3], &mut rng);
            let w = probe_weights([2, 3, 3, 3], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.input_with_grad(x.clone());
                let y = t.add_bias(v, b)?;
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "input_g_conv" => {
            let spec = gconv_spec(7, 2, 2, 4, true)?;
            let p = add_gconv(&mut store, "w", &spec, &mut rng)?;
            let x = probe_weights([2, 2, 8, 8], &mut rng);
            let w = probe_weights([2, 8, 8, 8], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.input_with_grad(x.clone());
                let y = t.g_conv(v, &spec, p)?;
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "hidden_g_conv" => {
            let spec = gconv_spec(5, 2, 2, 4, false)?;
            let p = add_gconv(&mut store, "w", &spec, &mut rng)?;
            let x = probe_weights([2, 8, 6, 6], &mut rng);
            let w = probe_weights([2, 8, 6, 6], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.g_input(crate::gconv::GFeatureMap::new(x.clone(), 4)?, true);
                let y = t.g_conv(v, &spec, p)?;
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "relu" | "max_pool2" | "bilinear_up2" | "global_avg_pool" => {
            let shape = [2, 3, 4, 4];
            let x = Tensor4::new(shape, spaced(96, &mut rng))?;
            let out_shape = match op {
                "max_pool2" => [2, 3, 2, 2],
                "bilinear_up2" => [2, 3, 8, 8],
                "global_avg_pool" => [2, 3, 1, 1],
                _ => shape,
            };
            let w = probe_weights(out_shape, &mut rng);
            let name = op.to_string();
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.input_with_grad(x.clone());
                let y = match name.as_str() {
                    "relu" => t.relu(v),
                    "max_pool2" => t.max_pool2(v)?,
                    "bilinear_up2" => t.bilinear_up2(v),
                    _ => t.global_avg_pool(v),
                };
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "g_pool" => {
            let x = Tensor4::new([2, 8, 3, 3], spaced(144, &mut rng))?;
            let w = probe_weights([2, 2, 3, 3], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.g_input(crate::gconv::GFeatureMap::new(x.clone(), 4)?, true);
                let y = t.g_pool(v);
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "g_batch_norm" => {
            let gamma = store.add("gamma", vec![2], random(2, &mut rng))?;
            let beta = store.add("beta", vec![2], random(2, &mut rng))?;
            let x = probe_weights([3, 8, 3, 3], &mut rng);
            let w = probe_weights([3, 8, 3, 3], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let mut state = BatchNormState::new(2);
                let v = t.g_input(crate::gconv::GFeatureMap::new(x.clone(), 4)?, true);
                let y = t.batch_norm(v, gamma, beta, &mut state, BnMode::Train)?;
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "concat" => {
            let x = probe_weights([2, 3, 3, 3], &mut rng);
            let other = probe_weights([2, 2, 3, 3], &mut rng);
            let w = probe_weights([2, 8, 3, 3], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.input_with_grad(x.clone());
                let o = t.input(other.clone());
                let y = t.concat(&[v, o, v])?;
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "softmax_cross_entropy" => {
            let x = probe_weights([4, 5, 1, 1], &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.input_with_grad(x.clone());
                Ok((t.softmax_cross_entropy(v, &labels)?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "two_layer_g_model" => {
            let first = gconv_spec(7, 1, 2, 4, true)?;
            let second = gconv_spec(5, 2, 2, 4, false)?;
            let p1 = add_gconv(&mut store, "w1", &first, &mut rng)?;
            let p2 = add_gconv(&mut store, "w2", &second, &mut rng)?;
            let x = probe_weights([1, 1, 9, 9], &mut rng);
            let w = probe_weights([1, 2, 9, 9], &mut rng);
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let v = t.input_with_grad(x.clone());
                let h = t.g_conv(v, &first, p1)?;
                let h = t.g_conv(h, &second, p2)?;
                let y = t.g_pool(h);
                Ok((t.dot(y, w.clone())?, v))
            };
            compare(op, &store, &x, &obj, None, true)
        }
        "toy_classifier" => {
            let cfg = toy_classifier_config();
            let model = Model::build(&cfg, seed)?;
            let x = probe_weights([2, 1, 8, 8], &mut rng);
            let labels = vec![1usize, 3];
            // A sample of coordinates from every parameter keeps the check fast.
            let mut coords = Vec::new();
            for id in model.params.ids() {
                let len = model.params.get(id).len();
                for _ in 0..3 {
                    coords.push((id, rng.random_range(0..len)));
                }
            }
            let bn = model.bn.clone();
            let m = &model;
            let obj = move |t: &mut Tape<'_>, x: &Tensor4| {
                let mut states = bn.clone();
                let f = m.forward(t, x, &mut states, BnMode::Train)?;
                Ok((t.softmax_cross_entropy(f.output, &labels)?, f.output))
            };
            compare(op, &model.params, &x, &obj, Some(coords), false)
        }
        _ => Err(invalid_arg!("unknown operator {op}; expected one of {}", OPS.join(", "))),
    }
}

/// Two dense blocks of one unit each, four orientations.
pub fn toy_classifier_config() -> ModelConfig {
    ModelConfig {
        block_units: vec![1, 1],
        widths: Widths { stem: 2, growth1: 2, growth2: 1, block_out: vec![2, 2], decoder_out: vec![], head: vec![3, 3] },
        ..ModelConfig::classifier(4, 4)
    }
}

pub fn check_all(seed: u64) -> Result<Vec<CheckResult>> {
    OPS.iter().map(|op| check(op, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes() {
        for op in OPS {
            let r = check(op, 7).unwrap();
            assert!(r.passed(), "{op}: relative error {}", r.relative_error);
            assert!(r.coordinates > 0, "{op}");
        }
    }

    #[test]
    fn unknown_operator_is_rejected() {
        assert!(check("fft", 0).is_err());
    }
}
