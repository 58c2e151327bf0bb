//! Domain alignment heads: a per-pixel domain classifier trained on the
//! domain-specific half of the features, and a discriminator of the same
//! shape behind a gradient reversal layer on the domain-invariant half.
//!
//! Both losses are the same per-pixel cross-entropy against the source-domain
//! one-hot label; the only difference is whether the feature first passes
//! through GRL. Minimizing the plain loss makes F_ds carry domain identity;
//! minimizing the reversed one trains the discriminator while pushing the
//! extractor toward domain confusion on F_di.

use rand::Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Parameter};
use crate::tape::{Tape, Tensor};

pub const LAMBDA_GRL: f64 = 0.01;
/// Probabilities are clamped here before the log inside the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Which of M source domains a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainLabel {
    pub index: usize,
    pub num_domains: usize,
}

impl DomainLabel {
    pub fn new(index: usize, num_domains: usize) -> Result<Self> {
        if index >= num_domains {
            return Err(Error::invalid(format!(
                "domain index {index} out of range for {num_domains} domains"
            )));
        }
        Ok(DomainLabel { index, num_domains })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_domains];
        v[self.index] = 1.0;
        v
    }
}

/// Five-layer fully convolutional domain predictor: four 3x3 convs at the
/// feature width with ReLU, then a 3x3 conv down to M channels and a per-pixel
/// softmax.
#[derive(Debug)]
pub struct DomainClassifier {
    pub convs: [Conv2d; 5],
    pub in_channels: usize,
    pub num_domains: usize,
}

impl DomainClassifier {
    pub fn new(in_channels: usize, num_domains: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_domains < 2 {
            return Err(Error::invalid(format!(
                "domain recognition needs at least 2 domains, got {num_domains}"
            )));
        }
        let c = in_channels;
        Ok(DomainClassifier {
            convs: [
                Conv2d::new_he(c, c, 3, 1, 1, rng),
                Conv2d::new_he(c, c, 3, 1, 1, rng),
                Conv2d::new_he(c, c, 3, 1, 1, rng),
                Conv2d::new_he(c, c, 3, 1, 1, rng),
                Conv2d::new_he(c, num_domains, 3, 1, 1, rng),
            ],
            in_channels,
            num_domains,
        })
    }

    /// Per-pixel domain probabilities `[N, M, H, W]`.
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let mut h = x;
        for conv in &self.convs[..4] {
            h = conv.forward(tape, h)?;
            h = tape.relu(h);
        }
        h = self.convs[4].forward(tape, h)?;
        tape.softmax_channels(h)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.weight"), &c.weight));
            out.push((format!("{prefix}.conv{i}.bias"), &c.bias));
        }
        out
    }
}

/// A domain classifier whose input gradient is reversed and scaled by
/// `lambda_grl`; the forward pass is unchanged.
#[derive(Debug)]
pub struct GrlDiscriminator {
    pub net: DomainClassifier,
    pub lambda_grl: f64,
}

impl GrlDiscriminator {
    pub fn new(
        in_channels: usize,
        num_domains: usize,
        lambda_grl: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GrlDiscriminator { net: DomainClassifier::new(in_channels, num_domains, rng)?, lambda_grl })
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let reversed = tape.grl(x, self.lambda_grl)?;
        self.net.forward(tape, reversed)
    }
}

/// Mean over batch and pixels of -log p(true domain), with the probability
/// clamped at [`LOG_CLAMP`]. `probs` is `[N, M, H, W]` summing to 1 per pixel.
pub fn per_pixel_cross_entropy(
    tape: &mut Tape,
    probs: Tensor,
    label: DomainLabel,
) -> Result<Tensor> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("cross_entropy", format!("want [N,M,H,W], got {:?}", shape)));
    }
    if shape[1] != label.num_domains {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} prediction channels vs {} domains", shape[1], label.num_domains),
        ));
    }
    if label.num_domains < 2 {
        return Err(Error::invalid("cross_entropy needs at least 2 domains"));
    }
    let (n, _m, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    // One-hot selection mask over the channel axis.
    let mut mask = Array::zeros(&shape);
    for img in 0..n {
        for p in 0..h * w {
            let idx = ((img * shape[1] + label.index) * h + p / w) * w + p % w;
            mask.data_mut()[idx] = 1.0;
        }
    }
    let mask = tape.constant(mask);
    let clamped = tape.max_const(probs, LOG_CLAMP);
    let ll = tape.log(clamped);
    let picked = tape.mul(ll, mask)?;
    let total = tape.sum_all(picked)?;
    Ok(tape.scale(total, -1.0 / (n as f64 * h as f64 * w as f64)))
}

/// Domain classification loss on the domain-specific features.
pub fn domain_cls_loss(
    tape: &mut Tape,
    f_ds: Tensor,
    label: DomainLabel,
    clf: &DomainClassifier,
) -> Result<Tensor> {
    let probs = clf.forward(tape, f_ds)?;
    per_pixel_cross_entropy(tape, probs, label)
}

/// Adversarial loss on the domain-invariant features, computed through GRL.
pub fn domain_adv_loss(
    tape: &mut Tape,
    f_di: Tensor,
    label: DomainLabel,
    disc: &GrlDiscriminator,
) -> Result<Tensor> {
    let probs = disc.forward(tape, f_di)?;
    per_pixel_cross_entropy(tape, probs, label)
}
