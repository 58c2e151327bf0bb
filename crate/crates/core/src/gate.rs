//! Channel gating: predict a per-channel signal in (0,1), split a backbone
//! feature map into a gated part and its complement, and penalize gates that
//! sit between 0 and 1.
//!
//! The gate network runs four 3x3 convolutions at constant width; the first
//! three carry instance norm + ReLU, the last feeds a sigmoid directly (no
//! norm there, since re-centering the logits would undo the opening bias) and
//! its bias starts at [`special_bias_init`] so every gate begins almost fully
//! open. Each pixel predicts its own gate vector; global average pooling then
//! merges those votes into one signal per sample.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, special_bias_init, Conv2d, InstanceNorm, Parameter};
use crate::tape::{Tape, Tensor};

/// The two halves of a gated split: `f_di` carries `f_b * s` (broadcast over
/// H, W), `f_ds` its complement, and the halves reassemble `f_b` bit-exactly
/// (see [`split`] for how the rounding is arranged).
#[derive(Clone, Copy, Debug)]
pub struct DisentangledPair {
    pub f_di: Tensor,
    pub f_ds: Tensor,
}

/// Four-layer convolutional gate predictor over C-channel maps.
#[derive(Debug)]
pub struct ChannelGateModule {
    pub convs: [Conv2d; 4],
    pub norms: [InstanceNorm; 3],
    pub channels: usize,
    pub s_init: f64,
}

impl ChannelGateModule {
    /// `special_init = false` leaves the final bias at zero (gates start at
    /// 0.5), used by the ablation that switches the opening bias off.
    pub fn new(
        channels: usize,
        s_init: f64,
        special_init: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let convs = [
            Conv2d::new(channels, channels, 3, 1, 1, rng),
            Conv2d::new(channels, channels, 3, 1, 1, rng),
            Conv2d::new(channels, channels, 3, 1, 1, rng),
            Conv2d::new(channels, channels, 3, 1, 1, rng),
        ];
        let norms = [
            InstanceNorm::new(channels),
            InstanceNorm::new(channels),
            InstanceNorm::new(channels),
        ];
        let mut module = ChannelGateModule { convs, norms, channels, s_init };
        if special_init {
            let b = special_bias_init(s_init)?;
            for v in module.convs[3].bias.value.data_mut() {
                *v = b;
            }
        }
        Ok(module)
    }

    /// Per-pixel gate map `[N, C, H, W]`, every entry in (0,1).
    pub fn per_pixel_gates(&self, tape: &mut Tape, f_b: Tensor) -> Result<Tensor> {
        let shape = tape.value(f_b).shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "cgm_forward",
                format!("want [N,{},H,W], got {:?}", self.channels, shape),
            ));
        }
        let mut h = f_b;
        for i in 0..3 {
            h = self.convs[i].forward(tape, h)?;
            h = self.norms[i].forward(tape, h)?;
            h = tape.relu(h);
        }
        h = self.convs[3].forward(tape, h)?;
        Ok(tape.sigmoid(h))
    }

    /// The pooled gate signal `[N, C]`: every feature location votes, the
    /// spatial mean decides.
    pub fn forward(&self, tape: &mut Tape, f_b: Tensor) -> Result<Tensor> {
        let gates = self.per_pixel_gates(tape, f_b)?;
        global_avg_pool(tape, gates)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for n in &mut self.norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.weight"), &c.weight));
            out.push((format!("{prefix}.conv{i}.bias"), &c.bias));
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("{prefix}.norm{i}.gamma"), &n.gamma));
            out.push((format!("{prefix}.norm{i}.beta"), &n.beta));
        }
        out
    }
}

/// Split `f_b` `[N,C,H,W]` by a gate signal `s_di` `[N,C]`.
///
/// Computed as `f_ds = f_b - f_b*s`, then `f_di = f_b - f_ds`. The extra
/// complement pass is what makes the reconstruction `f_di + f_ds = f_b`
/// bit-exact: rounding `f_b - fl(f_b*s)` can land half an ulp away from a
/// representable complement, and naively adding the raw product back then
/// misses `f_b` by one ulp (about 2% of random inputs). Re-deriving `f_di`
/// from the rounded `f_ds` absorbs that error while keeping `f_di` within
/// half an ulp of `f_b` of the true product. Gradients are the same as for
/// the textbook definition: `d f_di/d f_b = s`, `d f_di/d s = f_b`, and the
/// complements for `f_ds`.
pub fn split(tape: &mut Tape, f_b: Tensor, s_di: Tensor) -> Result<DisentangledPair> {
    let fs = tape.value(f_b).shape().to_vec();
    let ss = tape.value(s_di).shape().to_vec();
    if fs.len() != 4 || ss.len() != 2 || fs[0] != ss[0] || fs[1] != ss[1] {
        return Err(Error::shape(
            "split",
            format!("feature {:?} incompatible with gate signal {:?}", fs, ss),
        ));
    }
    let s = tape.reshape(s_di, &[ss[0], ss[1], 1, 1])?;
    let s = tape.broadcast_to(s, &fs)?;
    let gated = tape.mul(f_b, s)?;
    let f_ds = tape.sub(f_b, gated)?;
    let f_di = tape.sub(f_b, f_ds)?;
    Ok(DisentangledPair { f_di, f_ds })
}

pub const GATE_MARGIN: f64 = 0.01;

/// Gate loss: `max(s . (1 - s) - margin, 0)` per sample, averaged over the
/// batch. Zero once every channel is within the margin of binary.
pub fn gate_loss(tape: &mut Tape, s_di: Tensor, margin: f64) -> Result<Tensor> {
    let shape = tape.value(s_di).shape();
    if shape.len() != 2 {
        return Err(Error::shape("gate_loss", format!("want [N,C], got {:?}", shape)));
    }
    let ones_minus = tape.one_minus(s_di);
    let per_channel = tape.mul(s_di, ones_minus)?;
    let per_sample = tape.sum_axes(per_channel, &[1])?;
    let shifted = tape.add_scalar(per_sample, -margin);
    let hinged = tape.max_const(shifted, 0.0);
    tape.mean_axes(hinged, &[0])
}
