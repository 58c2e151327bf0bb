//! Detection quality scoring: per-class average precision at IoU 0.5 and its
//! mean over classes.

use crate::detector::{box_iou_xyxy, Detection, GroundTruth};

pub const MAP_IOU_THRESH: f64 = 0.5;

/// Detections and ground truth for one evaluated image.
#[derive(Clone, Debug, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub gt: GroundTruth,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct MapReport {
    /// (class, AP) for every class that appears in the ground truth.
    pub per_class: Vec<(usize, f64)>,
    pub map: f64,
}

/// Mean average precision at IoU >= 0.5.
///
/// Detections are ranked by score per class across all images. Each ground
/// truth box can match at most one detection; a detection matches the
/// unmatched box of its class with the highest IoU, provided that IoU is at
/// least 0.5. AP integrates the exact precision envelope over recall.
/// Classes with no ground truth are left out of the mean; with no ground
/// truth at all the mAP is 0.
pub fn map_at_05(images: &[ImageEval]) -> MapReport {
    let num_classes = images
        .iter()
        .flat_map(|im| im.gt.classes.iter().chain(im.detections.iter().map(|d| &d.class)))
        .map(|&c| c + 1)
        .max()
        .unwrap_or(0);

    let mut per_class = Vec::new();
    for class in 0..num_classes {
        let total_gt: usize =
            images.iter().map(|im| im.gt.classes.iter().filter(|&&c| c == class).count()).sum();
        if total_gt == 0 {
            continue;
        }

        // (score, image, bbox), stable-sorted by descending score so ties
        // keep image order and per-image insertion order.
        let mut dets: Vec<(f64, usize, [f64; 4])> = Vec::new();
        for (i, im) in images.iter().enumerate() {
            for d in &im.detections {
                if d.class == class {
                    dets.push((d.score, i, d.bbox));
                }
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

        let mut matched: Vec<Vec<bool>> =
            images.iter().map(|im| vec![false; im.gt.boxes.len()]).collect();
        let mut tp = Vec::with_capacity(dets.len());
        for (_, img, bbox) in &dets {
            let gt = &images[*img].gt;
            let mut best: Option<(f64, usize)> = None;
            for (j, gb) in gt.boxes.iter().enumerate() {
                if gt.classes[j] != class || matched[*img][j] {
                    continue;
                }
                let iou = box_iou_xyxy(bbox, gb);
                if iou >= MAP_IOU_THRESH && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    matched[*img][j] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }
        per_class.push((class, average_precision(&tp, total_gt)));
    }

    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    MapReport { per_class, map }
}

/// Exact area under the monotone precision envelope, given per-rank
/// true-positive flags (already sorted by descending score).
fn average_precision(tp: &[bool], total_gt: usize) -> f64 {
    if tp.is_empty() || total_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / total_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_rec = 0.0;
    for i in 0..prec.len() {
        if rec[i] > prev_rec {
            ap += (rec[i] - prev_rec) * prec[i];
            prev_rec = rec[i];
        }
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(bbox: [f64; 4], class: usize, score: f64) -> Detection {
        Detection { bbox, class, score }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gt = GroundTruth {
            boxes: vec![[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]],
            classes: vec![0, 1],
        };
        let images = vec![ImageEval {
            detections: vec![det([0.0, 0.0, 10.0, 10.0], 0, 0.9), det([20.0, 20.0, 30.0, 30.0], 1, 0.8)],
            gt,
        }];
        let r = map_at_05(&images);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class, vec![(0, 1.0), (1, 1.0)]);
    }

    #[test]
    fn no_detections_score_zero() {
        let gt = GroundTruth { boxes: vec![[0.0, 0.0, 10.0, 10.0]], classes: vec![0] };
        let r = map_at_05(&[ImageEval { detections: vec![], gt }]);
        assert_eq!(r.map, 0.0);
        assert_eq!(r.per_class, vec![(0, 0.0)]);
    }

    #[test]
    fn hand_computed_pr_table() {
        // Two ground truths, three ranked detections: TP, FP, TP.
        // Precision points (1, 1/2, 2/3), envelope (1, 2/3, 2/3),
        // AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
        let gt = GroundTruth {
            boxes: vec![[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0]],
            classes: vec![0, 0],
        };
        let images = vec![ImageEval {
            detections: vec![
                det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
                det([100.0, 100.0, 110.0, 110.0], 0, 0.8),
                det([50.0, 50.0, 60.0, 60.0], 0, 0.7),
            ],
            gt,
        }];
        let r = map_at_05(&images);
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn each_gt_matches_at_most_once() {
        // Two detections on the same box: second one is a false positive,
        // so precision at rank 2 drops and AP = 1.0 * recall step 1 only.
        let gt = GroundTruth { boxes: vec![[0.0, 0.0, 10.0, 10.0]], classes: vec![0] };
        let images = vec![ImageEval {
            detections: vec![det([0.0, 0.0, 10.0, 10.0], 0, 0.9), det([0.5, 0.5, 10.0, 10.0], 0, 0.8)],
            gt,
        }];
        let r = map_at_05(&images);
        assert_eq!(r.map, 1.0); // the duplicate FP comes after full recall
        // With the duplicate ranked first and a miss after, AP reflects it:
        let gt = GroundTruth {
            boxes: vec![[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0]],
            classes: vec![0, 0],
        };
        let images = vec![ImageEval {
            detections: vec![
                det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
                det([0.5, 0.5, 10.0, 10.0], 0, 0.8),
            ],
            gt,
        }];
        let r = map_at_05(&images);
        // One TP out of two gts: envelope precision 1 up to recall 0.5.
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classes_absent_from_gt_are_excluded() {
        let gt = GroundTruth { boxes: vec![[0.0, 0.0, 10.0, 10.0]], classes: vec![0] };
        let images = vec![ImageEval {
            detections: vec![
                det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
                det([30.0, 30.0, 40.0, 40.0], 2, 0.95), // spurious class
            ],
            gt,
        }];
        let r = map_at_05(&images);
        assert_eq!(r.per_class, vec![(0, 1.0)]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn detection_prefers_highest_iou_gt() {
        // One detection overlapping two boxes; it should claim the closer
        // one, leaving the other to the later, lower-scored detection.
        let gt = GroundTruth {
            boxes: vec![[0.0, 0.0, 10.0, 10.0], [4.0, 0.0, 14.0, 10.0]],
            classes: vec![0, 0],
        };
        let images = vec![ImageEval {
            detections: vec![
                det([3.0, 0.0, 13.0, 10.0], 0, 0.9), // IoU 0.54 with both? closer to second
                det([0.0, 0.0, 10.0, 10.0], 0, 0.8),
            ],
            gt,
        }];
        let r = map_at_05(&images);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn iou_exactly_half_counts() {
        // Pred covers exactly half-overlapping region with IoU = 0.5:
        // pred [0,0,10,5] vs gt [0,0,10,10]: inter 50, union 100.
        let gt = GroundTruth { boxes: vec![[0.0, 0.0, 10.0, 10.0]], classes: vec![0] };
        let images = vec![ImageEval {
            detections: vec![det([0.0, 0.0, 10.0, 5.0], 0, 0.9)],
            gt,
        }];
        assert_eq!(map_at_05(&images).map, 1.0);
    }

    #[test]
    fn empty_everything_is_zero() {
        assert_eq!(map_at_05(&[]).map, 0.0);
        let images = vec![ImageEval::default()];
        assert_eq!(map_at_05(&images).map, 0.0);
    }

    #[test]
    fn multi_image_ranking_pools_scores() {
        // FP in image 0 outranks the TP in image 1.
        let images = vec![
            ImageEval {
                detections: vec![det([80.0, 80.0, 90.0, 90.0], 0, 0.95)],
                gt: GroundTruth { boxes: vec![[0.0, 0.0, 10.0, 10.0]], classes: vec![0] },
            },
            ImageEval {
                detections: vec![det([0.0, 0.0, 10.0, 10.0], 0, 0.5)],
                gt: GroundTruth { boxes: vec![[0.0, 0.0, 10.0, 10.0]], classes: vec![0] },
            },
        ];
        let r = map_at_05(&images);
        // Ranks: FP then TP -> precision (0, 1/2), envelope (1/2, 1/2),
        // recall reaches 1/2 -> AP = 1/2 * 1/2 = 1/4.
        assert!((r.map - 0.25).abs() < 1e-12);
    }
}
