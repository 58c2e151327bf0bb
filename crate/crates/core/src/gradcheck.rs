//! Finite-difference gradient verification.
//!
//! The oracle is the central difference (f(x+h) - f(x-h)) / 2h in double
//! precision with h = 1e-5. A coordinate passes when
//!
//!   |analytic - fd| <= tol * max(|analytic|, |fd|, 0.01)
//!
//! i.e. relative error with a floor that keeps FD roundoff noise from failing
//! near-zero gradients. [`run_gradient_suite`] draws seeded random instances
//! for every differentiable op and composite block and checks each one;
//! instance generators keep inputs away from kinks (relu, max, min inside the
//! IoU) so the two-sided difference stays valid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{IouTarget, Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-2;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Array) -> Result<f64>,
    x: &Array,
    step: f64,
) -> Result<Array> {
    let mut grad = Array::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare tape gradients against the finite-difference oracle.
///
/// `build` must append a scalar root to the tape. `coords` limits the check
/// to a subset of input coordinates (useful for large composites); `None`
/// checks all of them. A missing tape gradient is treated as zero.
pub fn check_gradient(
    x: &Array,
    step: f64,
    coords: Option<&[usize]>,
    build: &dyn Fn(&mut Tape, Tensor) -> Result<Tensor>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let t = tape.leaf(x.clone());
    let root = build(&mut tape, t)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient check root must be scalar, got {:?}",
            tape.value(root).shape()
        )));
    }
    tape.backward(root)?;
    let analytic: Vec<f64> = match tape.grad(t) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: &Array| -> Result<f64> {
        let mut tape = Tape::new();
        let t = tape.leaf(probe.clone());
        let root = build(&mut tape, t)?;
        Ok(tape.value(root).item())
    };

    let all: Vec<usize>;
    let coords: &[usize] = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };

    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * step);
        max_rel = max_rel.max(rel_err(analytic[i], fd));
    }
    Ok(GradCheck { max_rel_err: max_rel, coords_checked: coords.len() })
}

/// Result of checking one op across its random instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<OpCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

/// One random problem instance: an input to differentiate with respect to, a
/// graph builder ending in a scalar, and optionally a coordinate subset.
struct Instance {
    x: Array,
    coords: Option<Vec<usize>>,
    build: Box<dyn Fn(&mut Tape, Tensor) -> Result<Tensor>>,
}

enum Entry {
    /// Finite-difference checked.
    Fd(fn(&mut ChaCha8Rng) -> Instance),
    /// Ops whose backward deliberately disagrees with their forward (GRL);
    /// verified analytically instead. Returns max relative error.
    Custom(fn(&mut ChaCha8Rng) -> Result<f64>),
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array {
    Array::rand_uniform(shape, lo, hi, rng)
}

/// Values in [-1.5, -0.5] or [0.5, 1.5]; keeps elementwise kinks at distance
/// >= 0.5 from zero.
fn signed_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let mut a = uniform(shape, 0.5, 1.5, rng);
    for v in a.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    a
}

fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let ndim = rng.gen_range(1..=4);
    (0..ndim).map(|_| rng.gen_range(1..=4)).collect()
}

/// Scalar root: sum(w * y) with fixed random weights, so every output
/// coordinate influences the root with a distinct coefficient.
fn weighted_root(tape: &mut Tape, y: Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let w = Array::rand_uniform(tape.value(y).shape(), -1.0, 1.0, rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

/// `weighted_root` with weights drawn inside the closure's captured rng seed.
macro_rules! rooted {
    ($rng:expr, |$tape:ident, $t:ident| $body:expr) => {{
        let seed: u64 = $rng.gen();
        Box::new(move |$tape: &mut Tape, $t: Tensor| -> Result<Tensor> {
            #[allow(unused_mut)]
            let mut root_rng = ChaCha8Rng::seed_from_u64(seed);
            let y = $body?;
            weighted_root($tape, y, &mut root_rng)
        })
    }};
}

fn sample_coords(numel: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= n {
        return (0..numel).collect();
    }
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let c = rng.gen_range(0..numel);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

fn gen_add(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, -2.0, 2.0, rng);
    let other = uniform(&shape, -2.0, 2.0, rng);
    let check_first = rng.gen_bool(0.5);
    let build = rooted!(rng, |tape, t| {
        let o = tape.constant(other.clone());
        if check_first {
            tape.add(t, o)
        } else {
            tape.add(o, t)
        }
    });
    Instance { x, coords: None, build }
}

fn gen_sub(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, -2.0, 2.0, rng);
    let other = uniform(&shape, -2.0, 2.0, rng);
    let check_first = rng.gen_bool(0.5);
    let build = rooted!(rng, |tape, t| {
        let o = tape.constant(other.clone());
        if check_first {
            tape.sub(t, o)
        } else {
            tape.sub(o, t)
        }
    });
    Instance { x, coords: None, build }
}

fn gen_mul(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, -2.0, 2.0, rng);
    let other = uniform(&shape, -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| {
        let o = tape.constant(other.clone());
        tape.mul(t, o)
    });
    Instance { x, coords: None, build }
}

fn gen_mul_square(rng: &mut ChaCha8Rng) -> Instance {
    // Same tensor on both sides exercises fan-out accumulation.
    let shape = rand_shape(rng);
    let x = uniform(&shape, -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| tape.mul(t, t));
    Instance { x, coords: None, build }
}

fn gen_affine(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, -2.0, 2.0, rng);
    let scale = rng.gen_range(-3.0..3.0);
    let shift = rng.gen_range(-1.0..1.0);
    let build = rooted!(rng, |tape, t| Ok::<_, Error>(tape.affine(t, scale, shift)));
    Instance { x, coords: None, build }
}

fn gen_max_const(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let c = rng.gen_range(-0.5..0.5);
    // Offset the samples so no coordinate sits within 0.1 of the kink.
    let mut x = uniform(&shape, 0.1, 1.0, rng);
    for v in x.data_mut() {
        if rand::Rng::gen_bool(rng, 0.5) {
            *v = -*v;
        }
        *v += c;
    }
    let build = rooted!(rng, |tape, t| Ok::<_, Error>(tape.max_const(t, c)));
    Instance { x, coords: None, build }
}

fn gen_log(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, 0.2, 3.0, rng);
    let build = rooted!(rng, |tape, t| Ok::<_, Error>(tape.log(t)));
    Instance { x, coords: None, build }
}

fn gen_exp(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| Ok::<_, Error>(tape.exp(t)));
    Instance { x, coords: None, build }
}

fn gen_pow_const(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, 0.3, 2.0, rng);
    let e = [2.0, 0.5, -0.5, 3.0][rng.gen_range(0..4)];
    let build = rooted!(rng, |tape, t| Ok::<_, Error>(tape.pow_const(t, e)));
    Instance { x, coords: None, build }
}

fn gen_relu(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = signed_away_from_zero(&shape, rng);
    let build = rooted!(rng, |tape, t| Ok::<_, Error>(tape.relu(t)));
    Instance { x, coords: None, build }
}

fn gen_sigmoid(rng: &mut ChaCha8Rng) -> Instance {
    let shape = rand_shape(rng);
    let x = uniform(&shape, -4.0, 4.0, rng);
    let build = rooted!(rng, |tape, t| Ok::<_, Error>(tape.sigmoid(t)));
    Instance { x, coords: None, build }
}

fn gen_softmax_channels(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let m = rng.gen_range(2..=4);
    let h = rng.gen_range(1..=3);
    let w = rng.gen_range(1..=3);
    let x = uniform(&[n, m, h, w], -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| tape.softmax_channels(t));
    Instance { x, coords: None, build }
}

fn gen_reshape(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(&[2, 6], -2.0, 2.0, rng);
    let target: Vec<usize> = [vec![12], vec![3, 4], vec![2, 3, 2]][rng.gen_range(0..3)].clone();
    let build = rooted!(rng, |tape, t| tape.reshape(t, &target));
    Instance { x, coords: None, build }
}

fn gen_broadcast(rng: &mut ChaCha8Rng) -> Instance {
    let c = rng.gen_range(2..=4);
    let x = uniform(&[c, 1, 1], -2.0, 2.0, rng);
    let n = rng.gen_range(1..=2);
    let h = rng.gen_range(2..=3);
    let build = rooted!(rng, |tape, t| tape.broadcast_to(t, &[n, c, h, h]));
    Instance { x, coords: None, build }
}

fn gen_concat(rng: &mut ChaCha8Rng) -> Instance {
    let rows = rng.gen_range(1..=3);
    let a = rng.gen_range(1..=3);
    let b = rng.gen_range(1..=3);
    let x = uniform(&[rows, a], -2.0, 2.0, rng);
    let other = uniform(&[rows, b], -2.0, 2.0, rng);
    let first = rng.gen_bool(0.5);
    let build = rooted!(rng, |tape, t| {
        let o = tape.constant(other.clone());
        if first {
            tape.concat(&[t, o], 1)
        } else {
            tape.concat(&[o, t], 1)
        }
    });
    Instance { x, coords: None, build }
}

fn gen_sum_axes(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(&[2, 3, 4], -2.0, 2.0, rng);
    let axes: Vec<usize> = [vec![0], vec![1], vec![2], vec![0, 2], vec![0, 1, 2]]
        [rng.gen_range(0..5)]
    .clone();
    let build = rooted!(rng, |tape, t| tape.sum_axes(t, &axes));
    Instance { x, coords: None, build }
}

fn gen_mean_axes(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(&[2, 3, 2, 2], -2.0, 2.0, rng);
    let axes: Vec<usize> = [vec![2, 3], vec![0], vec![1, 2]][rng.gen_range(0..3)].clone();
    let build = rooted!(rng, |tape, t| tape.mean_axes(t, &axes));
    Instance { x, coords: None, build }
}

fn gen_conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let ci = rng.gen_range(1..=3);
    let co = rng.gen_range(1..=3);
    let k = [1, 3][rng.gen_range(0..2)];
    let stride = rng.gen_range(1..=2);
    let padding = if k == 3 { rng.gen_range(0..=1) } else { 0 };
    let h = rng.gen_range(k + 1..=6);
    let w = rng.gen_range(k + 1..=6);
    let xv = uniform(&[n, ci, h, w], -1.0, 1.0, rng);
    let wv = uniform(&[co, ci, k, k], -1.0, 1.0, rng);
    let bv = uniform(&[co], -0.5, 0.5, rng);
    // Rotate which argument is differentiated.
    let role = rng.gen_range(0..3);
    let (x, build): (Array, Box<dyn Fn(&mut Tape, Tensor) -> Result<Tensor>>) = match role {
        0 => {
            let (wv, bv) = (wv.clone(), bv.clone());
            (
                xv,
                rooted!(rng, |tape, t| {
                    let w = tape.constant(wv.clone());
                    let b = tape.constant(bv.clone());
                    tape.conv2d(t, w, b, stride, padding)
                }),
            )
        }
        1 => {
            let (xv, bv) = (xv.clone(), bv.clone());
            (
                wv,
                rooted!(rng, |tape, t| {
                    let x = tape.constant(xv.clone());
                    let b = tape.constant(bv.clone());
                    tape.conv2d(x, t, b, stride, padding)
                }),
            )
        }
        _ => {
            let (xv, wv) = (xv.clone(), wv.clone());
            (
                bv,
                rooted!(rng, |tape, t| {
                    let x = tape.constant(xv.clone());
                    let w = tape.constant(wv.clone());
                    tape.conv2d(x, w, t, stride, padding)
                }),
            )
        }
    };
    Instance { x, coords: None, build }
}

fn gen_upsample2x(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(1..=3);
    let x = uniform(&[n, c, h, h], -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| tape.upsample2x(t));
    Instance { x, coords: None, build }
}

fn gen_iou_loss(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let h = rng.gen_range(2..=4);
    let w = rng.gen_range(2..=4);
    // Strictly positive distances, bounded away from pred/target ties so the
    // min() kinks cannot flip inside the FD step.
    let x = uniform(&[n, 4, h, w], 1.0, 4.0, rng);
    let mut targets = Vec::new();
    for img in 0..n {
        let count = rng.gen_range(1..=3);
        for _ in 0..count {
            let y = rng.gen_range(0..h);
            let xx = rng.gen_range(0..w);
            let mut ltrb = [0.0; 4];
            for (ch, side) in ltrb.iter_mut().enumerate() {
                let pred = x.at4(img, ch, y, xx);
                // Offset by at least 0.05 on a random side of the prediction.
                let delta = rng.gen_range(0.05..0.8);
                *side = if rng.gen_bool(0.5) { pred + delta } else { (pred - delta).max(0.1) };
            }
            targets.push(IouTarget { n: img, y, x: xx, ltrb });
        }
    }
    let build: Box<dyn Fn(&mut Tape, Tensor) -> Result<Tensor>> = {
        let targets = targets.clone();
        Box::new(move |tape: &mut Tape, t: Tensor| tape.iou_loss(t, targets.clone()))
    };
    Instance { x, coords: None, build }
}

/// GRL cannot be finite-difference checked (its backward is deliberately not
/// the derivative of its forward). Verify the contract instead: the gradient
/// with GRL equals -lambda times the gradient without it, exactly.
fn check_grl(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = rand_shape(rng);
    let x = uniform(&shape, -2.0, 2.0, rng);
    let w = uniform(&shape, -1.0, 1.0, rng);
    let lambda = rng.gen_range(0.001..0.5);

    let run = |with_grl: bool| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let t = tape.leaf(x.clone());
        let h = if with_grl { tape.grl(t, lambda)? } else { t };
        let wv = tape.constant(w.clone());
        let p = tape.mul(h, wv)?;
        let root = tape.sum_all(p)?;
        tape.backward(root)?;
        Ok(tape.grad(t).unwrap().data().to_vec())
    };

    let with = run(true)?;
    let without = run(false)?;
    let mut max_rel = 0.0f64;
    for (a, b) in with.iter().zip(&without) {
        max_rel = max_rel.max(rel_err(*a, -lambda * b));
    }
    Ok(max_rel)
}

fn primitive_entries() -> Vec<(&'static str, Entry)> {
    vec![
        ("add", Entry::Fd(gen_add)),
        ("sub", Entry::Fd(gen_sub)),
        ("mul", Entry::Fd(gen_mul)),
        ("mul_fanout", Entry::Fd(gen_mul_square)),
        ("affine", Entry::Fd(gen_affine)),
        ("max_const", Entry::Fd(gen_max_const)),
        ("log", Entry::Fd(gen_log)),
        ("exp", Entry::Fd(gen_exp)),
        ("pow_const", Entry::Fd(gen_pow_const)),
        ("relu", Entry::Fd(gen_relu)),
        ("sigmoid", Entry::Fd(gen_sigmoid)),
        ("softmax_channels", Entry::Fd(gen_softmax_channels)),
        ("reshape", Entry::Fd(gen_reshape)),
        ("broadcast_to", Entry::Fd(gen_broadcast)),
        ("concat", Entry::Fd(gen_concat)),
        ("sum_axes", Entry::Fd(gen_sum_axes)),
        ("mean_axes", Entry::Fd(gen_mean_axes)),
        ("conv2d", Entry::Fd(gen_conv2d)),
        ("upsample2x", Entry::Fd(gen_upsample2x)),
        ("iou_loss", Entry::Fd(gen_iou_loss)),
        ("grl", Entry::Custom(check_grl)),
    ]
}

fn run_entries(
    entries: Vec<(&'static str, Entry)>,
    instances: usize,
    tol: f64,
    seed: u64,
) -> Result<SuiteReport> {
    let mut report = SuiteReport { entries: Vec::new() };
    for (idx, (name, entry)) in entries.into_iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut coords = 0usize;
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (inst as u64) << 32,
            );
            match &entry {
                Entry::Fd(gen) => {
                    let instance = gen(&mut rng);
                    let check = check_gradient(
                        &instance.x,
                        DEFAULT_STEP,
                        instance.coords.as_deref(),
                        instance.build.as_ref(),
                    )?;
                    max_rel = max_rel.max(check.max_rel_err);
                    coords += check.coords_checked;
                }
                Entry::Custom(f) => {
                    max_rel = max_rel.max(f(&mut rng)?);
                    coords += 1;
                }
            }
        }
        report.entries.push(OpCheck {
            name,
            instances,
            coords_checked: coords,
            max_rel_err: max_rel,
            tol,
            passed: max_rel <= tol,
        });
    }
    Ok(report)
}

/// Check every primitive op over seeded random instances.
pub fn run_primitive_suite(instances: usize, tol: f64, seed: u64) -> Result<SuiteReport> {
    run_entries(primitive_entries(), instances, tol, seed)
}

/// The full suite: primitives plus composite blocks (normalization, gating,
/// alignment heads, detector losses). This is what the CLI and the acceptance
/// check run.
pub fn run_gradient_suite(instances: usize, tol: f64, seed: u64) -> Result<SuiteReport> {
    let mut entries = primitive_entries();
    entries.extend(composite_entries());
    run_entries(entries, instances, tol, seed)
}

fn gen_instance_norm(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=4);
    let x = uniform(&[n, c, h, h], -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| crate::nn::instance_norm_raw(tape, t, 1e-5));
    Instance { x, coords: None, build }
}

fn gen_global_avg_pool(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=4);
    let h = rng.gen_range(1..=4);
    let x = uniform(&[n, c, h, h], -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| crate::nn::global_avg_pool(tape, t));
    Instance { x, coords: None, build }
}

/// Gate module with s_init = 0.8: gates land near 0.8, clear of the 0.5 kink
/// of the downstream losses and of sigmoid saturation.
fn gen_cgm_gates(rng: &mut ChaCha8Rng) -> Instance {
    let c = 3;
    let x = uniform(&[1, c, 6, 6], -1.0, 1.0, rng);
    let seed: u64 = rng.gen();
    let coords = sample_coords(x.numel(), 24, rng);
    let build = rooted!(rng, |tape, t| {
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        let cgm = crate::gate::ChannelGateModule::new(c, 0.8, true, &mut block_rng)?;
        cgm.forward(tape, t)
    });
    Instance { x, coords: Some(coords), build }
}

/// The channel split, differentiated through either input.
fn gen_split(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=3);
    let f_b = uniform(&[n, c, h, h], -2.0, 2.0, rng);
    let gate_logits = uniform(&[n, c], -2.0, 2.0, rng);
    let wrt_base = rng.gen_bool(0.5);
    let (x, build): (Array, Box<dyn Fn(&mut Tape, Tensor) -> Result<Tensor>>) = if wrt_base {
        let gl = gate_logits.clone();
        (
            f_b,
            rooted!(rng, |tape, t| {
                let logits = tape.constant(gl.clone());
                let s = tape.sigmoid(logits);
                let pair = crate::gate::split(tape, t, s)?;
                let di = tape.sum_all(pair.f_di)?;
                let ds_sq = tape.mul(pair.f_ds, pair.f_ds)?;
                let ds = tape.sum_all(ds_sq)?;
                tape.add(di, ds)
            }),
        )
    } else {
        let fb = f_b.clone();
        (
            gate_logits,
            rooted!(rng, |tape, t| {
                let base = tape.constant(fb.clone());
                let s = tape.sigmoid(t);
                let pair = crate::gate::split(tape, base, s)?;
                let di_sq = tape.mul(pair.f_di, pair.f_di)?;
                let di = tape.sum_all(di_sq)?;
                let ds = tape.sum_all(pair.f_ds)?;
                tape.add(di, ds)
            }),
        )
    };
    Instance { x, coords: None, build }
}

/// Gate logits in [-2, 2]: every per-sample sum of s(1-s) terms is at least
/// 0.1, an order of magnitude above the hinge at the margin, so the loss is
/// smooth over the whole finite-difference window.
fn gen_gate_loss(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=4);
    let logits = uniform(&[n, c], -2.0, 2.0, rng);
    let build = rooted!(rng, |tape, t| {
        let s = tape.sigmoid(t);
        crate::gate::gate_loss(tape, s, crate::gate::GATE_MARGIN)
    });
    Instance { x: logits, coords: None, build }
}

/// The full gating chain as the model uses it: CGM gates, split, gate loss
/// plus quadratic read-outs of both halves.
fn gen_cgm_split_chain(rng: &mut ChaCha8Rng) -> Instance {
    let c = 3;
    let x = uniform(&[1, c, 6, 6], -1.0, 1.0, rng);
    let seed: u64 = rng.gen();
    let coords = sample_coords(x.numel(), 20, rng);
    let build = rooted!(rng, |tape, t| {
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        let cgm = crate::gate::ChannelGateModule::new(c, 0.8, true, &mut block_rng)?;
        let s = cgm.forward(tape, t)?;
        let gl = crate::gate::gate_loss(tape, s, crate::gate::GATE_MARGIN)?;
        let pair = crate::gate::split(tape, t, s)?;
        let di_sq = tape.mul(pair.f_di, pair.f_di)?;
        let ds_sq = tape.mul(pair.f_ds, pair.f_ds)?;
        let di = tape.sum_all(di_sq)?;
        let ds = tape.sum_all(ds_sq)?;
        let parts = tape.add(di, ds)?;
        tape.add(parts, gl)
    });
    Instance { x, coords: Some(coords), build }
}

fn gen_domain_cls(rng: &mut ChaCha8Rng) -> Instance {
    let c = 3;
    let m = rng.gen_range(2..=3);
    let x = uniform(&[1, c, 6, 6], -1.0, 1.0, rng);
    let label = crate::align::DomainLabel::new(rng.gen_range(0..m), m).unwrap();
    let seed: u64 = rng.gen();
    let coords = sample_coords(x.numel(), 24, rng);
    let build = rooted!(rng, |tape, t| {
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        let clf = crate::align::DomainClassifier::new(c, m, &mut block_rng)?;
        crate::align::domain_cls_loss(tape, t, label, &clf)
    });
    Instance { x, coords: Some(coords), build }
}

/// The adversarial loss cannot be finite-difference checked with respect to
/// its features (GRL's backward is not the derivative of its forward), so
/// verify the contract: its feature gradient equals -lambda times the
/// gradient of the same loss with the GRL removed.
fn check_domain_adv_grl_contract(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = 3;
    let m = rng.gen_range(2..=3);
    let x = uniform(&[1, c, 5, 5], -1.0, 1.0, rng);
    let label = crate::align::DomainLabel::new(rng.gen_range(0..m), m)?;
    let lambda = rng.gen_range(0.001..0.5);
    let mut block_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let disc = crate::align::GrlDiscriminator::new(c, m, lambda, &mut block_rng)?;

    let mut tape = Tape::new();
    let t = tape.leaf(x.clone());
    let loss = crate::align::domain_adv_loss(&mut tape, t, label, &disc)?;
    tape.backward(loss)?;
    let with_grl = tape.grad(t).unwrap().data().to_vec();

    let mut tape = Tape::new();
    let t = tape.leaf(x.clone());
    let probs = disc.net.forward(&mut tape, t)?;
    let loss = crate::align::per_pixel_cross_entropy(&mut tape, probs, label)?;
    tape.backward(loss)?;
    let without = tape.grad(t).unwrap().data().to_vec();

    let mut max_rel = 0.0f64;
    for (a, b) in with_grl.iter().zip(&without) {
        max_rel = max_rel.max(rel_err(*a, -lambda * b));
    }
    Ok(max_rel)
}

/// Finite differences on the discriminator's own weights: the GRL sits below
/// them, so their gradients are ordinary and must match FD.
fn check_domain_adv_disc_params(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = 2;
    let m = 2;
    let x = uniform(&[1, c, 4, 4], -1.0, 1.0, rng);
    let label = crate::align::DomainLabel::new(rng.gen_range(0..m), m)?;
    let lambda = rng.gen_range(0.001..0.5);
    let seed: u64 = rng.gen();
    let make = || -> Result<crate::align::GrlDiscriminator> {
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        crate::align::GrlDiscriminator::new(c, m, lambda, &mut block_rng)
    };

    let mut disc = make()?;
    let mut tape = Tape::new();
    let xt = tape.constant(x.clone());
    let loss = crate::align::domain_adv_loss(&mut tape, xt, label, &disc)?;
    tape.backward(loss)?;
    let first = disc.net.parameters_mut().into_iter().next().unwrap();
    let pt = tape.param_tensor(first.id()).expect("first weight bound");
    let analytic = tape.grad(pt).expect("first weight gradient").data().to_vec();
    let base_weight = first.value.clone();

    let eval = |wv: &Array| -> Result<f64> {
        let mut disc = make()?;
        {
            let mut params = disc.net.parameters_mut();
            params[0].value = wv.clone();
        }
        let mut tape = Tape::new();
        let xt = tape.constant(x.clone());
        let loss = crate::align::domain_adv_loss(&mut tape, xt, label, &disc)?;
        Ok(tape.value(loss).item())
    };

    let coords = sample_coords(base_weight.numel(), 12, rng);
    let mut probe = base_weight.clone();
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + DEFAULT_STEP;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - DEFAULT_STEP;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * DEFAULT_STEP);
        max_rel = max_rel.max(rel_err(analytic[i], fd));
    }
    Ok(max_rel)
}

/// Random sparse targets for the dense losses: a few positive pixels with
/// well-conditioned box geometry.
fn random_targets(h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> crate::detector::LevelTargets {
    let mut t = crate::detector::LevelTargets {
        h,
        w,
        labels: vec![None; h * w],
        ltrb: vec![[0.0; 4]; h * w],
        centerness: vec![0.0; h * w],
    };
    let pos = rng.gen_range(1..=3);
    for _ in 0..pos {
        let p = rng.gen_range(0..h * w);
        t.labels[p] = Some(rng.gen_range(0..classes));
        for side in t.ltrb[p].iter_mut() {
            *side = rng.gen_range(1.0..8.0);
        }
        t.centerness[p] = rng.gen_range(0.1..0.9);
    }
    t
}

fn gen_focal_loss(rng: &mut ChaCha8Rng) -> Instance {
    let (h, w, k) = (3, 4, 3);
    let logits = uniform(&[1, k, h, w], -3.0, 3.0, rng);
    let targets = vec![random_targets(h, w, k, rng)];
    let build: Box<dyn Fn(&mut Tape, Tensor) -> Result<Tensor>> = Box::new(move |tape, t| {
        let p = tape.sigmoid(t);
        crate::detector::focal_loss(tape, p, &targets, 0.25, 2.0)
    });
    Instance { x: logits, coords: None, build }
}

fn gen_centerness_bce(rng: &mut ChaCha8Rng) -> Instance {
    let (h, w) = (3, 4);
    let logits = uniform(&[1, 1, h, w], -3.0, 3.0, rng);
    let targets = vec![random_targets(h, w, 3, rng)];
    let build: Box<dyn Fn(&mut Tape, Tensor) -> Result<Tensor>> = Box::new(move |tape, t| {
        let p = tape.sigmoid(t);
        crate::detector::centerness_bce(tape, p, &targets)
    });
    Instance { x: logits, coords: None, build }
}

fn gen_head(rng: &mut ChaCha8Rng) -> Instance {
    let c = 3;
    let x = uniform(&[1, c, 5, 5], -1.0, 1.0, rng);
    let seed: u64 = rng.gen();
    let coords = sample_coords(x.numel(), 20, rng);
    let build = rooted!(rng, |tape, t| {
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        let head = crate::detector::FcosHead::new(c, 3, &mut block_rng)?;
        let out = head.forward(tape, t, 8)?;
        let cls = tape.sum_all(out.cls_map)?;
        let ctr_sq = tape.mul(out.ctr_map, out.ctr_map)?;
        let ctr = tape.sum_all(ctr_sq)?;
        let reg = tape.mean_all(out.reg_map)?;
        let a = tape.add(cls, ctr)?;
        tape.add(a, reg)
    });
    Instance { x, coords: Some(coords), build }
}

fn gen_backbone_fpn(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(&[1, 3, 128, 128], 0.0, 1.0, rng);
    let seed: u64 = rng.gen();
    let coords = sample_coords(x.numel(), 8, rng);
    let build = rooted!(rng, |tape, t| {
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = crate::detector::BackboneFpn::new(2, &mut block_rng);
        let set = backbone.forward(tape, t)?;
        let mut acc: Option<Tensor> = None;
        for lv in &set.levels {
            let sq = tape.mul(lv.feat, lv.feat)?;
            let s = tape.sum_all(sq)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        Ok::<_, Error>(acc.unwrap())
    });
    Instance { x, coords: Some(coords), build }
}

// Composite blocks: every nn/gate/align/detector builder with a backward
// path, checked end to end.
fn composite_entries() -> Vec<(&'static str, Entry)> {
    vec![
        ("instance_norm", Entry::Fd(gen_instance_norm)),
        ("global_avg_pool", Entry::Fd(gen_global_avg_pool)),
        ("cgm_gates", Entry::Fd(gen_cgm_gates)),
        ("split", Entry::Fd(gen_split)),
        ("gate_loss", Entry::Fd(gen_gate_loss)),
        ("cgm_split_gate_chain", Entry::Fd(gen_cgm_split_chain)),
        ("domain_cls_loss", Entry::Fd(gen_domain_cls)),
        ("domain_adv_grl_contract", Entry::Custom(check_domain_adv_grl_contract)),
        ("domain_adv_disc_params", Entry::Custom(check_domain_adv_disc_params)),
        ("focal_loss", Entry::Fd(gen_focal_loss)),
        ("centerness_bce", Entry::Fd(gen_centerness_bce)),
        ("fcos_head", Entry::Fd(gen_head)),
        ("backbone_fpn", Entry::Fd(gen_backbone_fpn)),
    ]
}
