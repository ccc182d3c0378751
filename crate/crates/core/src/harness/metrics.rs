//! COCO-style mean average precision.

use serde::Serialize;

use crate::detector::{Detection, GroundTruth};
use crate::geometry::iou_unchecked;

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < 32.0 * 32.0,
            AreaRange::Medium => (32.0 * 32.0..96.0 * 96.0).contains(&area),
            AreaRange::Large => area >= 96.0 * 96.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    /// Class-mean AP at each threshold; `None` when no class has ground truth.
    pub per_threshold: Vec<Option<f64>>,
    /// Threshold-mean AP of each class.
    pub per_class: Vec<Option<f64>>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

impl MapTable {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .and_then(|i| self.per_threshold[i])
    }
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// 101-point interpolated AP from score-sorted true/false positive flags.
pub fn interpolated_ap(flags: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one threshold and area range.
fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class: usize,
    threshold: f64,
    range: AreaRange,
) -> Option<f64> {
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let g: Vec<_> = g.iter().filter(|g| g.class == class).collect();
        let ignored: Vec<bool> = g.iter().map(|g| !range.contains(g.bbox.area())).collect();
        num_gt += ignored.iter().filter(|i| !**i).count();
        let mut d: Vec<&Detection> = d.iter().filter(|d| d.class == class).collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; g.len()];
        for det in d {
            let mut best: Option<(usize, f64)> = None;
            // unignored ground truth first, then ignored
            for pass_ignored in [false, true] {
                for (j, gt) in g.iter().enumerate() {
                    if taken[j] || ignored[j] != pass_ignored {
                        continue;
                    }
                    let v = iou_unchecked(&det.bbox, &gt.bbox);
                    if v >= threshold.min(1.0 - 1e-10) && best.map_or(true, |b| v > b.1) {
                        best = Some((j, v));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    if !ignored[j] {
                        scored.push((det.score, img, true));
                    }
                }
                None => {
                    if range.contains(det.bbox.area()) {
                        scored.push((det.score, img, false));
                    }
                }
            }
        }
    }
    if num_gt == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<bool> = scored.iter().map(|s| s.2).collect();
    Some(interpolated_ap(&flags, num_gt))
}

/// Mean AP over classes for every threshold, plus size-bucketed AP over
/// the COCO threshold range. Classes without ground truth are left out.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    thresholds: &[f64],
) -> MapTable {
    assert_eq!(detections.len(), gts.len(), "one detection list per image");
    let table: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| {
            thresholds
                .iter()
                .map(|&t| class_ap(detections, gts, c, t, AreaRange::All))
                .collect()
        })
        .collect();
    let per_threshold: Vec<Option<f64>> = (0..thresholds.len())
        .map(|i| mean(table.iter().map(|row| row[i])))
        .collect();
    let per_class: Vec<Option<f64>> = table.iter().map(|row| mean(row.iter().cloned())).collect();
    let bucket = |range| {
        mean((0..num_classes).map(|c| {
            mean(
                thresholds
                    .iter()
                    .map(|&t| class_ap(detections, gts, c, t, range)),
            )
        }))
    };
    let at = |t: f64| {
        thresholds
            .iter()
            .position(|x| (x - t).abs() < 1e-9)
            .and_then(|i| per_threshold[i])
    };
    MapTable {
        thresholds: thresholds.to_vec(),
        ap: mean(per_threshold.iter().cloned()),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: bucket(AreaRange::Small),
        ap_medium: bucket(AreaRange::Medium),
        ap_large: bucket(AreaRange::Large),
        per_threshold,
        per_class,
    }
}
