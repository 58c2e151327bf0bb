//! Neural building blocks: parameters, 3x3 convolutions, instance
//! normalization, pooling, the gate bias initializer, and SGD with momentum
//! and weight decay.
//!
//! A [`Parameter`] carries a process-unique id. Binding it to a tape with
//! [`Tape::param`] is memoized per tape, so a layer used at several places in
//! one graph (the gate module and detection head are shared across pyramid
//! levels) contributes a single leaf whose gradient accumulates across all
//! uses.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable array with a stable identity.
#[derive(Debug)]
pub struct Parameter {
    id: u64,
    pub value: Array,
}

impl Parameter {
    pub fn new(value: Array) -> Self {
        Parameter { id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed), value }
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

impl Clone for Parameter {
    /// Cloning allocates a fresh identity: two layers never silently share
    /// storage.
    fn clone(&self) -> Self {
        Parameter::new(self.value.clone())
    }
}

impl Tape {
    /// Bind a parameter as a differentiable leaf. Repeat binds of the same
    /// parameter return the same tensor.
    pub fn param(&mut self, p: &Parameter) -> Tensor {
        if let Some(&i) = self.param_index.get(&p.id) {
            return self.param_binds[i].1;
        }
        let t = self.leaf(p.value.clone());
        self.param_index.insert(p.id, self.param_binds.len());
        self.param_binds.push((p.id, t));
        t
    }

    /// The tensor a parameter id was bound to on this tape, if any.
    pub fn param_tensor(&self, id: u64) -> Option<Tensor> {
        self.param_index.get(&id).map(|&i| self.param_binds[i].1)
    }

    /// All (parameter id, tensor) bindings in bind order.
    pub fn bound_params(&self) -> &[(u64, Tensor)] {
        &self.param_binds
    }
}

/// 2-D convolution layer; weights `[C_out, C_in, k, k]`, bias `[C_out]`.
///
/// Weights start uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] with
/// fan_in = C_in * k * k; biases start at zero (the gate module overrides its
/// final bias separately).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // He-uniform: keeps variance roughly constant through conv+ReLU
        // stacks. Narrower bounds shrink activations ~0.4x per layer, and
        // the five-layer domain heads then lose the input signal entirely:
        // only their bias gradients survive, which optimize to the uniform
        // predictor no matter how separable the features are.
        let fan_in = (c_in * k * k) as f64;
        let a = (6.0 / fan_in).sqrt();
        Conv2d {
            weight: Parameter::new(Array::rand_uniform(&[c_out, c_in, k, k], -a, a, rng)),
            bias: Parameter::new(Array::zeros(&[c_out])),
            stride,
            padding,
        }
    }

    /// Near-zero weights with a fixed bias, for prediction layers whose
    /// initial output should sit at a chosen prior (e.g. focal-loss heads)
    /// instead of at whatever scale the random stack produces.
    pub fn new_pred(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            weight: Parameter::new(Array::rand_uniform(&[c_out, c_in, k, k], -0.01, 0.01, rng)),
            bias: Parameter::new(Array::filled(&[c_out], bias)),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Instance normalization with learnable per-channel affine.
///
/// Statistics are taken over H x W separately for every (sample, channel).
/// Built from tape primitives, so its backward needs no bespoke code.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub epsilon: f64,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Parameter::new(Array::filled(&[channels], 1.0)),
            beta: Parameter::new(Array::zeros(&[channels])),
            epsilon: INSTANCE_NORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let normed = instance_norm_raw(tape, x, self.epsilon)?;
        let shape = tape.value(x).shape().to_vec();
        let c = shape[1];
        let g = tape.param(&self.gamma);
        let g = tape.reshape(g, &[1, c, 1, 1])?;
        let g = tape.broadcast_to(g, &shape)?;
        let b = tape.param(&self.beta);
        let b = tape.reshape(b, &[1, c, 1, 1])?;
        let b = tape.broadcast_to(b, &shape)?;
        let scaled = tape.mul(normed, g)?;
        tape.add(scaled, b)
    }
}

/// (x - mean) / sqrt(var + eps) without the affine part.
pub fn instance_norm_raw(tape: &mut Tape, x: Tensor, epsilon: f64) -> Result<Tensor> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("instance_norm", format!("want NCHW, got {:?}", shape)));
    }
    let (n, c) = (shape[0], shape[1]);
    let mean = tape.mean_axes(x, &[2, 3])?; // [N, C]
    let mean = tape.reshape(mean, &[n, c, 1, 1])?;
    let mean = tape.broadcast_to(mean, &shape)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axes(sq, &[2, 3])?;
    let var = tape.add_scalar(var, epsilon);
    let rstd = tape.pow_const(var, -0.5);
    let rstd = tape.reshape(rstd, &[n, c, 1, 1])?;
    let rstd = tape.broadcast_to(rstd, &shape)?;
    tape.mul(centered, rstd)
}

/// Spatial mean per (sample, channel): `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Tensor) -> Result<Tensor> {
    if tape.value(x).ndim() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("want NCHW, got {:?}", tape.value(x).shape()),
        ));
    }
    tape.mean_axes(x, &[2, 3])
}

/// Bias that makes a zero-weight sigmoid layer open at `s_init`:
/// b = -ln((1 - s) / s), so sigmoid(b) = s exactly.
pub fn special_bias_init(s_init: f64) -> Result<f64> {
    if !(s_init > 0.0 && s_init < 1.0) {
        return Err(Error::invalid(format!("s_init must lie in (0,1), got {s_init}")));
    }
    Ok(-((1.0 - s_init) / s_init).ln())
}

/// SGD with momentum and decoupled-from-nothing weight decay folded into the
/// gradient: v <- momentum*v + (grad + weight_decay*w); w <- w - lr*v.
#[derive(Debug)]
pub struct SgdOptimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<u64, Array>,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdOptimizer { learning_rate, momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Update one parameter from an explicit gradient.
    pub fn apply(&mut self, param: &mut Parameter, grad: &Array) -> Result<()> {
        if grad.shape() != param.value.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("grad {:?} vs param {:?}", grad.shape(), param.value.shape()),
            ));
        }
        let v = self
            .velocity
            .entry(param.id)
            .or_insert_with(|| Array::zeros(param.value.shape()));
        let w = param.value.data_mut();
        let vd = v.data_mut();
        for i in 0..w.len() {
            vd[i] = self.momentum * vd[i] + grad.data()[i] + self.weight_decay * w[i];
            w[i] -= self.learning_rate * vd[i];
        }
        Ok(())
    }

    /// Update every parameter that was bound to `tape`, in the caller's
    /// parameter order. A bound parameter without a gradient is an error; a
    /// parameter absent from the tape is skipped (its branch was not run).
    /// Returns how many parameters were updated.
    pub fn step(&mut self, params: &mut [&mut Parameter], tape: &Tape) -> Result<usize> {
        let mut updated = 0;
        for p in params.iter_mut() {
            let Some(t) = tape.param_tensor(p.id()) else { continue };
            let Some(grad) = tape.grad(t) else {
                return Err(Error::MissingGradient { name: format!("param #{}", p.id()) });
            };
            let grad = grad.clone();
            self.apply(p, &grad)?;
            updated += 1;
        }
        Ok(updated)
    }
}
