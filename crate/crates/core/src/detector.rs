//! A small anchor-free detector: strided conv backbone, FPN producing levels
//! 3..7, a head shared across levels predicting class scores, centerness and
//! box distances, plus target assignment, the detection losses, and score
//! decoding with per-class NMS.
//!
//! Scale conventions: input images are `[N,3,H,W]` with H and W divisible by
//! 128, level l has stride 2^l, and a feature pixel (x, y) sits at image
//! point ((x + 0.5) * stride, (y + 0.5) * stride). Boxes are (x1, y1, x2, y2)
//! in image pixels.

use rand::Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Parameter};
use crate::tape::{IouTarget, Tape, Tensor};

pub const LEVELS: [usize; 5] = [3, 4, 5, 6, 7];

/// Object size routing per level: a pixel is assigned to a level when its
/// largest ltrb distance falls in (lo, hi].
pub const LEVEL_RANGES: [(f64, f64); 5] =
    [(0.0, 8.0), (8.0, 16.0), (16.0, 32.0), (32.0, 64.0), (64.0, f64::INFINITY)];

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Axis-aligned ground truth for one image.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    pub fn validate(&self, num_classes: usize, img_w: f64, img_h: f64) -> Result<()> {
        if self.boxes.len() != self.classes.len() {
            return Err(Error::invalid(format!(
                "{} boxes but {} classes",
                self.boxes.len(),
                self.classes.len()
            )));
        }
        for (b, &c) in self.boxes.iter().zip(&self.classes) {
            if c >= num_classes {
                return Err(Error::invalid(format!("class {c} out of range")));
            }
            if !(b[2] > b[0] && b[3] > b[1]) {
                return Err(Error::invalid(format!("degenerate box {:?}", b)));
            }
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > img_w || b[3] > img_h {
                return Err(Error::invalid(format!("box {:?} outside {img_w}x{img_h}", b)));
            }
        }
        Ok(())
    }
}

/// One pyramid level's feature map handle.
#[derive(Clone, Copy, Debug)]
pub struct LevelFeature {
    pub level: usize,
    pub stride: usize,
    pub feat: Tensor,
}

/// Features for levels 3..7, uniform channel count.
#[derive(Clone, Debug)]
pub struct ScaleFeatureSet {
    pub levels: Vec<LevelFeature>,
}

/// Four stride-2 conv stages followed by an FPN. Levels 3 and 4 come from
/// laterals on the last two stages (with a top-down 2x merge into level 3);
/// levels 5..7 extend downward with stride-2 convs.
#[derive(Debug)]
pub struct BackboneFpn {
    stages: [Conv2d; 4],
    lateral3: Conv2d,
    lateral4: Conv2d,
    down5: Conv2d,
    down6: Conv2d,
    down7: Conv2d,
    pub channels: usize,
}

impl BackboneFpn {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        BackboneFpn {
            stages: [
                Conv2d::new(3, c, 3, 2, 1, rng),
                Conv2d::new(c, c, 3, 2, 1, rng),
                Conv2d::new(c, c, 3, 2, 1, rng),
                Conv2d::new(c, c, 3, 2, 1, rng),
            ],
            lateral3: Conv2d::new(c, c, 1, 1, 0, rng),
            lateral4: Conv2d::new(c, c, 1, 1, 0, rng),
            down5: Conv2d::new(c, c, 3, 2, 1, rng),
            down6: Conv2d::new(c, c, 3, 2, 1, rng),
            down7: Conv2d::new(c, c, 3, 2, 1, rng),
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, images: Tensor) -> Result<ScaleFeatureSet> {
        let shape = tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("backbone_fpn", format!("want [N,3,H,W], got {:?}", shape)));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 128 != 0 || w % 128 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} must be a multiple of 128 so level 7 stays at least 1x1"
            )));
        }
        let mut x = images;
        let mut stage_outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(tape, x)?;
            x = tape.relu(x);
            stage_outs.push(x);
        }
        let c3 = stage_outs[2]; // H/8
        let c4 = stage_outs[3]; // H/16

        let p4 = self.lateral4.forward(tape, c4)?;
        let lat3 = self.lateral3.forward(tape, c3)?;
        let up4 = tape.upsample2x(p4)?;
        let p3 = tape.add(lat3, up4)?;
        let p5 = self.down5.forward(tape, c4)?;
        let p6 = self.down6.forward(tape, p5)?;
        let p7 = self.down7.forward(tape, p6)?;

        let feats = [p3, p4, p5, p6, p7];
        Ok(ScaleFeatureSet {
            levels: LEVELS
                .iter()
                .zip(feats)
                .map(|(&level, feat)| LevelFeature { level, stride: 1 << level, feat })
                .collect(),
        })
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for c in self
            .stages
            .iter_mut()
            .chain([&mut self.lateral3, &mut self.lateral4, &mut self.down5, &mut self.down6, &mut self.down7])
        {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, &Parameter)> {
        let named = [
            ("stage0", &self.stages[0]),
            ("stage1", &self.stages[1]),
            ("stage2", &self.stages[2]),
            ("stage3", &self.stages[3]),
            ("lateral3", &self.lateral3),
            ("lateral4", &self.lateral4),
            ("down5", &self.down5),
            ("down6", &self.down6),
            ("down7", &self.down7),
        ];
        let mut out = Vec::new();
        for (name, c) in named {
            out.push((format!("{prefix}.{name}.weight"), &c.weight));
            out.push((format!("{prefix}.{name}.bias"), &c.bias));
        }
        out
    }
}

/// Per-level head outputs (all differentiable).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[N,K,H,W]` sigmoid class scores.
    pub cls_map: Tensor,
    /// `[N,1,H,W]` sigmoid centerness.
    pub ctr_map: Tensor,
    /// `[N,4,H,W]` positive ltrb distances in image pixels.
    pub reg_map: Tensor,
}

/// Anchor-free head shared across pyramid levels: one 3x3 tower conv per
/// branch, then 3x3 predictors. Regression outputs pass through exp and are
/// scaled by the level stride, keeping them positive.
#[derive(Debug)]
pub struct FcosHead {
    cls_tower: Conv2d,
    reg_tower: Conv2d,
    cls_pred: Conv2d,
    ctr_pred: Conv2d,
    reg_pred: Conv2d,
    pub num_classes: usize,
}

impl FcosHead {
    pub fn new(channels: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("head needs at least one class"));
        }
        let c = channels;
        Ok(FcosHead {
            cls_tower: Conv2d::new(c, c, 3, 1, 1, rng),
            reg_tower: Conv2d::new(c, c, 3, 1, 1, rng),
            cls_pred: Conv2d::new(c, num_classes, 3, 1, 1, rng),
            ctr_pred: Conv2d::new(c, 1, 3, 1, 1, rng),
            reg_pred: Conv2d::new(c, 4, 3, 1, 1, rng),
            num_classes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, feat: Tensor, stride: usize) -> Result<HeadOutputs> {
        let ct = self.cls_tower.forward(tape, feat)?;
        let ct = tape.relu(ct);
        let rt = self.reg_tower.forward(tape, feat)?;
        let rt = tape.relu(rt);

        let cls_raw = self.cls_pred.forward(tape, ct)?;
        let cls_map = tape.sigmoid(cls_raw);
        let ctr_raw = self.ctr_pred.forward(tape, ct)?;
        let ctr_map = tape.sigmoid(ctr_raw);
        let reg_raw = self.reg_pred.forward(tape, rt)?;
        let reg_exp = tape.exp(reg_raw);
        let reg_map = tape.scale(reg_exp, stride as f64);
        Ok(HeadOutputs { cls_map, ctr_map, reg_map })
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for c in [
            &mut self.cls_tower,
            &mut self.reg_tower,
            &mut self.cls_pred,
            &mut self.ctr_pred,
            &mut self.reg_pred,
        ] {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, &Parameter)> {
        let named = [
            ("cls_tower", &self.cls_tower),
            ("reg_tower", &self.reg_tower),
            ("cls_pred", &self.cls_pred),
            ("ctr_pred", &self.ctr_pred),
            ("reg_pred", &self.reg_pred),
        ];
        let mut out = Vec::new();
        for (name, c) in named {
            out.push((format!("{prefix}.{name}.weight"), &c.weight));
            out.push((format!("{prefix}.{name}.bias"), &c.bias));
        }
        out
    }
}

/// Per-pixel assignment for one image at one level, row-major over H x W.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<Option<usize>>,
    pub ltrb: Vec<[f64; 4]>,
    pub centerness: Vec<f64>,
}

impl LevelTargets {
    pub fn num_pos(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Assign ground truth to feature pixels for a given stride and size range.
///
/// A pixel is positive for a box when it lies strictly inside it and the
/// largest of its four distances falls within (lo, hi]. Overlaps resolve to
/// the smallest-area box. Centerness is
/// sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)).
pub fn assign_targets(
    gt: &GroundTruth,
    stride: usize,
    size_range: (f64, f64),
    h: usize,
    w: usize,
) -> LevelTargets {
    let mut out = LevelTargets {
        h,
        w,
        labels: vec![None; h * w],
        ltrb: vec![[0.0; 4]; h * w],
        centerness: vec![0.0; h * w],
    };
    let (lo, hi) = size_range;
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5) * stride as f64;
            let py = (y as f64 + 0.5) * stride as f64;
            let mut best: Option<(f64, usize, [f64; 4])> = None; // (area, box idx, ltrb)
            for (i, b) in gt.boxes.iter().enumerate() {
                let l = px - b[0];
                let t = py - b[1];
                let r = b[2] - px;
                let bt = b[3] - py;
                if l <= 0.0 || t <= 0.0 || r <= 0.0 || bt <= 0.0 {
                    continue;
                }
                let m = l.max(t).max(r).max(bt);
                if m <= lo || m > hi {
                    continue;
                }
                let area = (b[2] - b[0]) * (b[3] - b[1]);
                if best.map_or(true, |(a, _, _)| area < a) {
                    best = Some((area, i, [l, t, r, bt]));
                }
            }
            if let Some((_, i, d)) = best {
                let idx = y * w + x;
                out.labels[idx] = Some(gt.classes[i]);
                out.ltrb[idx] = d;
                let cx = d[0].min(d[2]) / d[0].max(d[2]);
                let cy = d[1].min(d[3]) / d[1].max(d[3]);
                out.centerness[idx] = (cx * cy).sqrt();
            }
        }
    }
    out
}

/// [`assign_targets`] with the stride and size range of pyramid level `level`.
pub fn assign_targets_level(gt: &GroundTruth, level: usize, h: usize, w: usize) -> Result<LevelTargets> {
    let idx = LEVELS
        .iter()
        .position(|&l| l == level)
        .ok_or_else(|| Error::invalid(format!("level {level} outside 3..=7")))?;
    Ok(assign_targets(gt, 1 << level, LEVEL_RANGES[idx], h, w))
}

fn check_map(
    op: &'static str,
    shape: &[usize],
    channels: usize,
    targets: &[LevelTargets],
) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::shape(op, format!("want [N,{channels},H,W], got {:?}", shape)));
    }
    if targets.len() != shape[0] {
        return Err(Error::shape(
            op,
            format!("{} target sets for batch of {}", targets.len(), shape[0]),
        ));
    }
    for t in targets {
        if t.h != shape[2] || t.w != shape[3] {
            return Err(Error::shape(
                op,
                format!("targets {}x{} vs map {}x{}", t.h, t.w, shape[2], shape[3]),
            ));
        }
    }
    Ok((shape[0], shape[2], shape[3]))
}

fn total_pos(targets: &[LevelTargets]) -> usize {
    targets.iter().map(|t| t.num_pos()).sum()
}

/// Focal loss over all pixels and classes, normalized by the number of
/// positive pixels in the batch (at least 1):
/// positives contribute -alpha (1-p)^gamma ln p, everything else
/// -(1-alpha) p^gamma ln(1-p).
pub fn focal_loss(
    tape: &mut Tape,
    cls_map: Tensor,
    targets: &[LevelTargets],
    alpha: f64,
    gamma: f64,
) -> Result<Tensor> {
    let shape = tape.value(cls_map).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("focal_loss", format!("want [N,K,H,W], got {:?}", shape)));
    }
    let k = shape[1];
    let (_, h, w) = check_map("focal_loss", &shape, k, targets)?;
    let n_pos = total_pos(targets).max(1) as f64;

    // Class-conditional masks with the alpha balance folded in.
    let mut pos = Array::zeros(&shape);
    let mut neg = Array::filled(&shape, 1.0 - alpha);
    for (img, t) in targets.iter().enumerate() {
        for (pix, label) in t.labels.iter().enumerate() {
            if let Some(c) = label {
                let idx = ((img * k + c) * h + pix / w) * w + pix % w;
                pos.data_mut()[idx] = alpha;
                neg.data_mut()[idx] = 0.0;
            }
        }
    }
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);

    let p_clamped = tape.max_const(cls_map, 1e-12);
    let log_p = tape.log(p_clamped);
    let one_m_p = tape.one_minus(cls_map);
    let omp_clamped = tape.max_const(one_m_p, 1e-12);
    let log_omp = tape.log(omp_clamped);

    let focus_pos = tape.pow_const(one_m_p, gamma);
    let focus_neg = tape.pow_const(cls_map, gamma);

    let term_pos = tape.mul(focus_pos, log_p)?;
    let term_pos = tape.mul(term_pos, pos)?;
    let term_neg = tape.mul(focus_neg, log_omp)?;
    let term_neg = tape.mul(term_neg, neg)?;

    let total = tape.add(term_pos, term_neg)?;
    let total = tape.sum_all(total)?;
    Ok(tape.scale(total, -1.0 / n_pos))
}

/// Binary cross-entropy between predicted and target centerness on positive
/// pixels only, mean over positives; 0 when there are none.
pub fn centerness_bce(tape: &mut Tape, ctr_map: Tensor, targets: &[LevelTargets]) -> Result<Tensor> {
    let shape = tape.value(ctr_map).shape().to_vec();
    let (_, h, w) = check_map("centerness_bce", &shape, 1, targets)?;
    let n_pos = total_pos(targets).max(1) as f64;

    let mut tgt = Array::zeros(&shape);
    let mut inv = Array::zeros(&shape);
    for (img, t) in targets.iter().enumerate() {
        for (pix, label) in t.labels.iter().enumerate() {
            if label.is_some() {
                let idx = (img * h + pix / w) * w + pix % w;
                tgt.data_mut()[idx] = t.centerness[pix];
                inv.data_mut()[idx] = 1.0 - t.centerness[pix];
            }
        }
    }
    let tgt = tape.constant(tgt);
    let inv = tape.constant(inv);

    let p_clamped = tape.max_const(ctr_map, 1e-12);
    let log_p = tape.log(p_clamped);
    let one_m_p = tape.one_minus(ctr_map);
    let omp_clamped = tape.max_const(one_m_p, 1e-12);
    let log_omp = tape.log(omp_clamped);

    let a = tape.mul(tgt, log_p)?;
    let b = tape.mul(inv, log_omp)?;
    let sum = tape.add(a, b)?;
    let total = tape.sum_all(sum)?;
    Ok(tape.scale(total, -1.0 / n_pos))
}

/// Mean -ln IoU between predicted and target boxes at positive pixels.
pub fn reg_iou_loss(tape: &mut Tape, reg_map: Tensor, targets: &[LevelTargets]) -> Result<Tensor> {
    let shape = tape.value(reg_map).shape().to_vec();
    check_map("reg_iou_loss", &shape, 4, targets)?;
    let mut list = Vec::new();
    for (img, t) in targets.iter().enumerate() {
        for (pix, label) in t.labels.iter().enumerate() {
            if label.is_some() {
                list.push(IouTarget { n: img, y: pix / t.w, x: pix % t.w, ltrb: t.ltrb[pix] });
            }
        }
    }
    tape.iou_loss(reg_map, list)
}

/// The three detection loss terms for one level.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub cls: Tensor,
    pub ctr: Tensor,
    pub reg: Tensor,
}

pub fn detection_loss(
    tape: &mut Tape,
    outputs: &HeadOutputs,
    targets: &[LevelTargets],
) -> Result<DetectionLoss> {
    Ok(DetectionLoss {
        cls: focal_loss(tape, outputs.cls_map, targets, FOCAL_ALPHA, FOCAL_GAMMA)?,
        ctr: centerness_bce(tape, outputs.ctr_map, targets)?,
        reg: reg_iou_loss(tape, outputs.reg_map, targets)?,
    })
}

/// One decoded detection.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class: usize,
    pub score: f64,
}

/// Plain-value head maps for one level, used after the forward pass.
pub struct LevelMaps<'a> {
    pub stride: usize,
    pub cls: &'a Array,
    pub ctr: &'a Array,
    pub reg: &'a Array,
}

pub fn box_iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Decode one image's detections across levels: score = cls * ctr per pixel,
/// boxes from ltrb distances, then greedy per-class NMS. Deterministic: ties
/// keep candidate insertion order (levels low to high, row-major pixels).
pub fn detect(
    levels: &[LevelMaps<'_>],
    image_index: usize,
    score_thresh: f64,
    nms_iou: f64,
    img_w: f64,
    img_h: f64,
) -> Vec<Detection> {
    let mut candidates: Vec<Detection> = Vec::new();
    for lm in levels {
        let (k, h, w) = (lm.cls.shape()[1], lm.cls.shape()[2], lm.cls.shape()[3]);
        for y in 0..h {
            for x in 0..w {
                let ctr = lm.ctr.at4(image_index, 0, y, x);
                for c in 0..k {
                    let score = lm.cls.at4(image_index, c, y, x) * ctr;
                    if score < score_thresh {
                        continue;
                    }
                    let px = (x as f64 + 0.5) * lm.stride as f64;
                    let py = (y as f64 + 0.5) * lm.stride as f64;
                    let bbox = [
                        (px - lm.reg.at4(image_index, 0, y, x)).max(0.0),
                        (py - lm.reg.at4(image_index, 1, y, x)).max(0.0),
                        (px + lm.reg.at4(image_index, 2, y, x)).min(img_w),
                        (py + lm.reg.at4(image_index, 3, y, x)).min(img_h),
                    ];
                    if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
                        continue;
                    }
                    candidates.push(Detection { bbox, class: c, score });
                }
            }
        }
    }
    nms(candidates, nms_iou)
}

/// Greedy class-wise NMS: keep the highest-scoring candidate, drop others of
/// the same class with IoU above the threshold, repeat.
pub fn nms(mut candidates: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep: Vec<Detection> = Vec::new();
    'outer: for c in candidates {
        for k in &keep {
            if k.class == c.class && box_iou_xyxy(&k.bbox, &c.bbox) > nms_iou {
                continue 'outer;
            }
        }
        keep.push(c);
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn backbone_produces_expected_pyramid() {
        let mut tape = Tape::new();
        let bb = BackboneFpn::new(16, &mut rng(0));
        let images = tape.leaf(Array::zeros(&[2, 3, 128, 128]));
        let feats = bb.forward(&mut tape, images).unwrap();
        let sizes: Vec<(usize, usize)> = feats
            .levels
            .iter()
            .map(|lf| {
                let s = tape.value(lf.feat).shape();
                assert_eq!(s[1], 16, "channel contract");
                (s[2], s[3])
            })
            .collect();
        assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]);
        assert_eq!(
            feats.levels.iter().map(|l| l.stride).collect::<Vec<_>>(),
            vec![8, 16, 32, 64, 128]
        );
    }

    #[test]
    fn backbone_rejects_indivisible_sizes() {
        let mut tape = Tape::new();
        let bb = BackboneFpn::new(8, &mut rng(1));
        let images = tape.leaf(Array::zeros(&[1, 3, 100, 128]));
        let err = bb.forward(&mut tape, images).unwrap_err();
        assert!(err.to_string().contains("128"), "{err}");
    }

    #[test]
    fn head_output_shapes_and_positivity() {
        let mut tape = Tape::new();
        let head = FcosHead::new(16, 3, &mut rng(2)).unwrap();
        let feat = tape.leaf(Array::rand_uniform(&[2, 16, 4, 4], -1.0, 1.0, &mut rng(3)));
        let out = head.forward(&mut tape, feat, 32).unwrap();
        assert_eq!(tape.value(out.cls_map).shape(), &[2, 3, 4, 4]);
        assert_eq!(tape.value(out.ctr_map).shape(), &[2, 1, 4, 4]);
        assert_eq!(tape.value(out.reg_map).shape(), &[2, 4, 4, 4]);
        assert!(tape.value(out.reg_map).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zeroed_head_regression_equals_stride() {
        let mut tape = Tape::new();
        let mut head = FcosHead::new(4, 2, &mut rng(4)).unwrap();
        for p in head.parameters_mut() {
            p.value = Array::zeros(p.value.shape());
        }
        let feat = tape.leaf(Array::rand_uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rng(5)));
        let out = head.forward(&mut tape, feat, 16).unwrap();
        // exp(0) * stride
        assert!(tape.value(out.reg_map).data().iter().all(|&v| v == 16.0));
    }

    #[test]
    fn center_pixel_has_centerness_one() {
        // Box centered on the pixel at (4.5, 4.5) * stride 1.
        let gt = GroundTruth { boxes: vec![[2.5, 2.5, 6.5, 6.5]], classes: vec![0] };
        let t = assign_targets(&gt, 1, (0.0, f64::INFINITY), 8, 8);
        let idx = 4 * 8 + 4;
        assert_eq!(t.labels[idx], Some(0));
        assert!((t.centerness[idx] - 1.0).abs() < 1e-12);
        assert_eq!(t.ltrb[idx], [2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn outside_pixels_are_negative() {
        let gt = GroundTruth { boxes: vec![[1.0, 1.0, 3.0, 3.0]], classes: vec![1] };
        let t = assign_targets(&gt, 1, (0.0, f64::INFINITY), 8, 8);
        assert_eq!(t.labels[0 * 8 + 7], None);
        assert_eq!(t.centerness[7], 0.0);
        let empty = assign_targets(&GroundTruth::default(), 1, (0.0, f64::INFINITY), 4, 4);
        assert_eq!(empty.num_pos(), 0);
    }

    #[test]
    fn overlap_resolves_to_smaller_box() {
        let gt = GroundTruth {
            boxes: vec![[0.0, 0.0, 12.0, 12.0], [4.0, 4.0, 8.0, 8.0]],
            classes: vec![0, 1],
        };
        let t = assign_targets(&gt, 1, (0.0, f64::INFINITY), 16, 16);
        // (6,6) sits inside both; the 4x4 box wins.
        assert_eq!(t.labels[6 * 16 + 6], Some(1));
        // (2,2) only inside the large box.
        assert_eq!(t.labels[2 * 16 + 2], Some(0));
    }

    #[test]
    fn assignment_matches_brute_force_on_all_single_boxes() {
        // Every box on an 8x8 grid with 0.5-offset corners, oracle written
        // independently per pixel.
        for x1 in 0..7 {
            for y1 in 0..7 {
                for x2 in (x1 + 1)..8 {
                    for y2 in (y1 + 1)..8 {
                        let b = [x1 as f64, y1 as f64, x2 as f64, y2 as f64];
                        let gt = GroundTruth { boxes: vec![b], classes: vec![0] };
                        let t = assign_targets(&gt, 1, (0.0, f64::INFINITY), 8, 8);
                        for y in 0..8 {
                            for x in 0..8 {
                                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                                let inside = px > b[0] && px < b[2] && py > b[1] && py < b[3];
                                let idx = y * 8 + x;
                                assert_eq!(t.labels[idx].is_some(), inside, "box {b:?} at ({x},{y})");
                                if inside {
                                    let (l, tt, r, bb) = (px - b[0], py - b[1], b[2] - px, b[3] - py);
                                    assert_eq!(t.ltrb[idx], [l, tt, r, bb]);
                                    let expected = ((l.min(r) / l.max(r)) * (tt.min(bb) / tt.max(bb))).sqrt();
                                    assert!((t.centerness[idx] - expected).abs() < 1e-12);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn size_ranges_route_boxes_across_levels() {
        // 24x24 box centered on the level-4 pixel center (56, 56): its max
        // ltrb there is 12, inside (8, 16], so level 4 owns it. Level 3
        // pixel centers inside the box all see max ltrb 16 and stay negative.
        let gt = GroundTruth { boxes: vec![[44.0, 44.0, 68.0, 68.0]], classes: vec![0] };
        let l3 = assign_targets_level(&gt, 3, 16, 16).unwrap();
        let l4 = assign_targets_level(&gt, 4, 8, 8).unwrap();
        // Level 3 can only take pixels whose max distance <= 8 (off-center).
        assert!(l4.num_pos() >= 1, "level 4 should own the box center");
        for (i, lab) in l3.labels.iter().enumerate() {
            if lab.is_some() {
                let m = l3.ltrb[i].iter().cloned().fold(0.0, f64::max);
                assert!(m <= 8.0);
            }
        }
        for (i, lab) in l4.labels.iter().enumerate() {
            if lab.is_some() {
                let m = l4.ltrb[i].iter().cloned().fold(0.0, f64::max);
                assert!(m > 8.0 && m <= 16.0);
            }
        }
    }

    #[test]
    fn level7_on_small_images_has_no_positives() {
        // At 128x128 no in-bounds box can put a distance above 64.
        let gt = GroundTruth { boxes: vec![[0.0, 0.0, 128.0, 128.0]], classes: vec![0] };
        let t = assign_targets_level(&gt, 7, 1, 1).unwrap();
        assert_eq!(t.num_pos(), 0);
    }

    fn const_targets(h: usize, w: usize, spec: &[(usize, usize, usize, [f64; 4], f64)]) -> LevelTargets {
        // spec entries: (y, x, class, ltrb, centerness)
        let mut t = LevelTargets {
            h,
            w,
            labels: vec![None; h * w],
            ltrb: vec![[0.0; 4]; h * w],
            centerness: vec![0.0; h * w],
        };
        for &(y, x, c, d, ctr) in spec {
            t.labels[y * w + x] = Some(c);
            t.ltrb[y * w + x] = d;
            t.centerness[y * w + x] = ctr;
        }
        t
    }

    #[test]
    fn focal_loss_perfect_predictions_is_zero() {
        let mut tape = Tape::new();
        let mut cls = Array::zeros(&[1, 2, 2, 2]);
        // positive at (0,0) class 0 predicted 1; everything else 0.
        cls.data_mut()[0] = 1.0;
        let t = const_targets(2, 2, &[(0, 0, 0, [1.0; 4], 1.0)]);
        let ct = tape.leaf(cls);
        let loss = focal_loss(&mut tape, ct, &[t], FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn focal_gamma_zero_is_weighted_bce() {
        let mut tape = Tape::new();
        let vals = vec![0.7, 0.2, 0.4, 0.9, 0.1, 0.6, 0.3, 0.8];
        let cls = Array::from_vec(&[1, 2, 2, 2], vals.clone()).unwrap();
        let t = const_targets(2, 2, &[(0, 1, 0, [1.0; 4], 1.0), (1, 0, 1, [1.0; 4], 1.0)]);
        let ct = tape.leaf(cls);
        let loss = focal_loss(&mut tape, ct, &[t.clone()], 0.25, 0.0).unwrap();
        // Oracle: plain alpha-weighted BCE over each (class, pixel).
        let mut expect = 0.0;
        for c in 0..2 {
            for pix in 0..4 {
                let p = vals[c * 4 + pix];
                let positive = t.labels[pix] == Some(c);
                expect += if positive { -0.25 * p.ln() } else { -0.75 * (1.0 - p).ln() };
            }
        }
        expect /= 2.0; // two positives
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_matches_loop_oracle() {
        let mut tape = Tape::new();
        let cls = Array::rand_uniform(&[2, 3, 3, 3], 0.05, 0.95, &mut rng(6));
        let t0 = const_targets(3, 3, &[(0, 0, 2, [1.0; 4], 0.8), (2, 1, 0, [1.0; 4], 0.5)]);
        let t1 = const_targets(3, 3, &[(1, 1, 1, [1.0; 4], 1.0)]);
        let ct = tape.leaf(cls.clone());
        let loss = focal_loss(&mut tape, ct, &[t0.clone(), t1.clone()], 0.25, 2.0).unwrap();

        let mut expect = 0.0;
        for (img, t) in [&t0, &t1].iter().enumerate() {
            for c in 0..3 {
                for pix in 0..9 {
                    let p = cls.at4(img, c, pix / 3, pix % 3);
                    if t.labels[pix] == Some(c) {
                        expect += -0.25 * (1.0 - p).powi(2) * p.ln();
                    } else {
                        expect += -0.75 * p.powi(2) * (1.0 - p).ln();
                    }
                }
            }
        }
        expect /= 3.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn centerness_bce_hand_values() {
        let mut tape = Tape::new();
        // Prediction 0.5 vs target 1 at the single positive -> ln 2.
        let ctr = Array::filled(&[1, 1, 2, 2], 0.5);
        let t = const_targets(2, 2, &[(0, 0, 0, [1.0; 4], 1.0)]);
        let ct = tape.leaf(ctr);
        let loss = centerness_bce(&mut tape, ct, &[t]).unwrap();
        assert!((tape.value(loss).item() - 2.0_f64.ln()).abs() < 1e-12);

        // Prediction equals target -> binary entropy of the target itself;
        // for target 1 that is 0.
        let ctr = Array::filled(&[1, 1, 2, 2], 1.0);
        let t = const_targets(2, 2, &[(1, 1, 0, [1.0; 4], 1.0)]);
        let ct = tape.leaf(ctr);
        let loss = centerness_bce(&mut tape, ct, &[t]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // No positives -> exactly zero.
        let ctr = Array::filled(&[1, 1, 2, 2], 0.3);
        let t = const_targets(2, 2, &[]);
        let ct = tape.leaf(ctr);
        let loss = centerness_bce(&mut tape, ct, &[t]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn centerness_bce_matches_loop_oracle() {
        let mut tape = Tape::new();
        let ctr = Array::rand_uniform(&[1, 1, 3, 3], 0.05, 0.95, &mut rng(7));
        let t = const_targets(3, 3, &[(0, 1, 0, [1.0; 4], 0.7), (2, 2, 0, [1.0; 4], 0.4)]);
        let ct = tape.leaf(ctr.clone());
        let loss = centerness_bce(&mut tape, ct, &[t.clone()]).unwrap();
        let mut expect = 0.0;
        for pix in [1, 8] {
            let p = ctr.at4(0, 0, pix / 3, pix % 3);
            let tv = t.centerness[pix];
            expect += -(tv * p.ln() + (1.0 - tv) * (1.0 - p).ln());
        }
        expect /= 2.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_zero_at_exact_boxes_and_ln3_at_half_overlap() {
        let mut tape = Tape::new();
        let mut reg = Array::zeros(&[1, 4, 2, 2]);
        for c in 0..4 {
            reg.data_mut()[c * 4] = 1.0; // pixel (0,0): ltrb (1,1,1,1)
        }
        let rt = tape.leaf(reg);
        let exact = const_targets(2, 2, &[(0, 0, 0, [1.0, 1.0, 1.0, 1.0], 1.0)]);
        let loss = reg_iou_loss(&mut tape, rt, &[exact]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        // Equal areas overlapping half: IoU = (A/2) / (3A/2) = 1/3.
        let half = const_targets(2, 2, &[(0, 0, 0, [2.0, 1.0, 0.0, 1.0], 1.0)]);
        let loss = reg_iou_loss(&mut tape, rt, &[half]).unwrap();
        assert!((tape.value(loss).item() - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_matches_loop_oracle() {
        let mut tape = Tape::new();
        let reg = Array::rand_uniform(&[1, 4, 3, 3], 1.0, 5.0, &mut rng(8));
        let t = const_targets(
            3,
            3,
            &[(0, 0, 0, [2.0, 3.0, 1.5, 2.5], 1.0), (1, 2, 0, [4.0, 1.0, 2.0, 3.0], 0.6)],
        );
        let rt = tape.leaf(reg.clone());
        let loss = reg_iou_loss(&mut tape, rt, &[t.clone()]).unwrap();
        let mut expect = 0.0;
        for pix in [0, 5] {
            let p = [
                reg.at4(0, 0, pix / 3, pix % 3),
                reg.at4(0, 1, pix / 3, pix % 3),
                reg.at4(0, 2, pix / 3, pix % 3),
                reg.at4(0, 3, pix / 3, pix % 3),
            ];
            let q = t.ltrb[pix];
            let iw = p[0].min(q[0]) + p[2].min(q[2]);
            let ih = p[1].min(q[1]) + p[3].min(q[3]);
            let inter = iw * ih;
            let union = (p[0] + p[2]) * (p[1] + p[3]) + (q[0] + q[2]) * (q[1] + q[3]) - inter;
            expect += -(inter / union).ln();
        }
        expect /= 2.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-10);
    }

    fn maps_from(
        stride: usize,
        k: usize,
        h: usize,
        w: usize,
        entries: &[(usize, usize, usize, f64, f64, [f64; 4])],
    ) -> (Array, Array, Array) {
        // entries: (y, x, class, cls_score, ctr_score, ltrb)
        let mut cls = Array::zeros(&[1, k, h, w]);
        let mut ctr = Array::zeros(&[1, 1, h, w]);
        let mut reg = Array::filled(&[1, 4, h, w], stride as f64);
        for &(y, x, c, s, cv, d) in entries {
            let ci = ((c * h) + y) * w + x;
            cls.data_mut()[ci] = s;
            ctr.data_mut()[y * w + x] = cv;
            for ch in 0..4 {
                let ri = ((ch * h) + y) * w + x;
                reg.data_mut()[ri] = d[ch];
            }
        }
        (cls, ctr, reg)
    }

    #[test]
    fn detect_single_pixel() {
        let (cls, ctr, reg) = maps_from(8, 2, 4, 4, &[(1, 2, 1, 0.9, 1.0, [5.0, 5.0, 5.0, 5.0])]);
        let levels = [LevelMaps { stride: 8, cls: &cls, ctr: &ctr, reg: &reg }];
        let dets = detect(&levels, 0, 0.5, 0.5, 32.0, 32.0);
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.class, 1);
        assert!((d.score - 0.9).abs() < 1e-12);
        // Pixel center (2.5*8, 1.5*8) = (20, 12); ltrb 5 -> box [15,7,25,17].
        assert_eq!(d.bbox, [15.0, 7.0, 25.0, 17.0]);
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let a = Detection { bbox: [0.0, 0.0, 10.0, 10.0], class: 0, score: 0.9 };
        let b = Detection { bbox: [0.0, 0.0, 10.0, 10.0], class: 0, score: 0.8 };
        let out = nms(vec![a.clone(), b], 0.5);
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn nms_keeps_identical_boxes_of_different_classes() {
        let a = Detection { bbox: [0.0, 0.0, 10.0, 10.0], class: 0, score: 0.9 };
        let b = Detection { bbox: [0.0, 0.0, 10.0, 10.0], class: 1, score: 0.8 };
        assert_eq!(nms(vec![a, b], 0.5).len(), 2);
    }

    #[test]
    fn nms_matches_brute_force_oracle() {
        let mut r = rng(9);
        for trial in 0..20 {
            let mut cands = Vec::new();
            for _ in 0..20 {
                let x1: f64 = r.gen_range(0.0..20.0);
                let y1: f64 = r.gen_range(0.0..20.0);
                let bbox = [x1, y1, x1 + r.gen_range(2.0..10.0), y1 + r.gen_range(2.0..10.0)];
                cands.push(Detection {
                    bbox,
                    class: r.gen_range(0..2),
                    score: r.gen_range(0.1..1.0),
                });
            }
            // Independent reference: sort, then O(n^2) keep/suppress flags.
            let mut sorted = cands.clone();
            sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut suppressed = vec![false; sorted.len()];
            let mut expect = Vec::new();
            for i in 0..sorted.len() {
                if suppressed[i] {
                    continue;
                }
                expect.push(sorted[i].clone());
                for j in (i + 1)..sorted.len() {
                    if !suppressed[j]
                        && sorted[j].class == sorted[i].class
                        && box_iou_xyxy(&sorted[j].bbox, &sorted[i].bbox) > 0.45
                    {
                        suppressed[j] = true;
                    }
                }
            }
            let got = nms(cands, 0.45);
            assert_eq!(got, expect, "trial {trial}");
        }
    }

    #[test]
    fn detect_is_pure() {
        let (cls, ctr, reg) = maps_from(8, 2, 4, 4, &[(0, 0, 0, 0.7, 0.9, [4.0; 4])]);
        let levels = [LevelMaps { stride: 8, cls: &cls, ctr: &ctr, reg: &reg }];
        let a = detect(&levels, 0, 0.3, 0.5, 32.0, 32.0);
        let b = detect(&levels, 0, 0.3, 0.5, 32.0, 32.0);
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_validation() {
        let bad = GroundTruth { boxes: vec![[5.0, 5.0, 4.0, 9.0]], classes: vec![0] };
        assert!(bad.validate(2, 128.0, 128.0).is_err());
        let oob = GroundTruth { boxes: vec![[5.0, 5.0, 200.0, 9.0]], classes: vec![0] };
        assert!(oob.validate(2, 128.0, 128.0).is_err());
        let ok = GroundTruth { boxes: vec![[5.0, 5.0, 40.0, 9.0]], classes: vec![1] };
        assert!(ok.validate(2, 128.0, 128.0).is_ok());
        assert!(ok.validate(1, 128.0, 128.0).is_err());
    }
}
