//! Multi-level anchor tiling, IoU matching, the score-gated ignore rule and
//! the positive/negative census.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};

/// Default IoU at or above which an anchor is positive.
pub const POSITIVE_IOU: f64 = 0.5;
/// Default IoU below which an anchor is negative.
pub const NEGATIVE_IOU: f64 = 0.3;
/// Default positivity score below which a negative anchor is ignored.
pub const GATE_THETA: f64 = 0.01;

/// Lower edges of the positive-IoU histogram bins; the last bin is closed.
pub const IOU_BIN_EDGES: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub stride: usize,
    pub base_scale: f64,
    /// Scale of the second ratio-1 anchor.
    pub second_scale: f64,
    pub aspect_ratios: Vec<f64>,
    pub fam_enabled: bool,
}

impl LevelConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len()
    }
}

/// Stride of every decoder level for `input_size`: five power-of-two levels
/// followed by the extra level obtained by downsampling the fifth.
pub fn level_strides(input_size: usize) -> Vec<usize> {
    let mut strides = vec![8, 16, 32, 64, 128];
    let last = extra_level_size(input_size / 128);
    strides.push(input_size / last.max(1));
    strides
}

/// Spatial size of the extra level given the size of the fifth level.
pub fn extra_level_size(fifth: usize) -> usize {
    if fifth == 3 {
        1
    } else {
        fifth.div_ceil(2)
    }
}

/// Six levels with ratios `{1, 1, 2, 3, 1/2, 1/3}` on the first four and
/// `{1, 1, 2, 1/2}` on the last two. Scales are `4 * stride`, and the
/// second ratio-1 anchor uses the geometric mean with the next level's scale.
pub fn default_levels(input_size: usize) -> Vec<LevelConfig> {
    let strides = level_strides(input_size);
    let scales: Vec<f64> = strides.iter().map(|s| 4.0 * *s as f64).collect();
    strides
        .iter()
        .enumerate()
        .map(|(i, &stride)| {
            let next = match scales.get(i + 1) {
                Some(s) => *s,
                // extrapolate the last ratio between levels
                None => scales[i] * scales[i] / scales[i - 1],
            };
            let aspect_ratios = if i < 4 {
                vec![1.0, 1.0, 2.0, 3.0, 0.5, 1.0 / 3.0]
            } else {
                vec![1.0, 1.0, 2.0, 0.5]
            };
            LevelConfig {
                stride,
                base_scale: scales[i],
                second_scale: (scales[i] * next).sqrt(),
                aspect_ratios,
                fam_enabled: i < 4,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub stride: usize,
    /// Feature map side length.
    pub size: usize,
    pub anchors_per_location: usize,
    /// Index of the level's first anchor in the flat array.
    pub offset: usize,
    pub count: usize,
}

/// All anchors, flattened level by level; within a level, location-major
/// (row, then column) and ratio order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub level_of: Vec<usize>,
    pub levels: Vec<LevelInfo>,
    pub input_size: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level_boxes(&self, level: usize) -> &[BBox] {
        let l = &self.levels[level];
        &self.boxes[l.offset..l.offset + l.count]
    }

    /// Flat index of anchor `a` at cell `(y, x)` of `level`.
    #[inline]
    pub fn flat_index(&self, level: usize, y: usize, x: usize, a: usize) -> usize {
        let l = &self.levels[level];
        l.offset + (y * l.size + x) * l.anchors_per_location + a
    }
}

pub fn generate_anchors(input_size: usize, levels: &[LevelConfig]) -> Result<AnchorSet> {
    if levels.is_empty() {
        return Err(Error::config("levels", "at least one level is required"));
    }
    let mut boxes = Vec::new();
    let mut level_of = Vec::new();
    let mut infos = Vec::with_capacity(levels.len());
    for (li, level) in levels.iter().enumerate() {
        if level.stride == 0 || input_size % level.stride != 0 {
            return Err(Error::config(
                format!("levels[{li}].stride"),
                format!("stride {} does not divide input {input_size}", level.stride),
            ));
        }
        if level.aspect_ratios.is_empty() || level.aspect_ratios.iter().any(|r| *r <= 0.0) {
            return Err(Error::config(
                format!("levels[{li}].aspect_ratios"),
                "ratios must be non-empty and positive",
            ));
        }
        let size = input_size / level.stride;
        // (w, h) per ratio; the second ratio-1 entry takes the second scale
        let mut seen_unit = false;
        let shapes: Vec<(f64, f64)> = level
            .aspect_ratios
            .iter()
            .map(|&r| {
                let scale = if r == 1.0 && seen_unit {
                    level.second_scale
                } else {
                    if r == 1.0 {
                        seen_unit = true;
                    }
                    level.base_scale
                };
                (scale * r.sqrt(), scale / r.sqrt())
            })
            .collect();
        let offset = boxes.len();
        let stride = level.stride as f64;
        for y in 0..size {
            for x in 0..size {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                for &(w, h) in &shapes {
                    boxes.push(BBox::from_center(cx, cy, w, h));
                    level_of.push(li);
                }
            }
        }
        infos.push(LevelInfo {
            stride: level.stride,
            size,
            anchors_per_location: shapes.len(),
            offset,
            count: boxes.len() - offset,
        });
    }
    Ok(AnchorSet {
        boxes,
        level_of,
        levels: infos,
        input_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<Label>,
    pub matched_gt: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Two-step matching.
///
/// Each ground truth first claims its best-IoU anchor (lowest index on ties,
/// one anchor per ground truth, processed in ground-truth order). Every
/// other anchor is then positive to its best ground truth when its IoU
/// reaches `pos_thr`, negative below `neg_thr`, and ignored in between.
pub fn match_anchors(
    anchors: &[BBox],
    gts: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<MatchResult> {
    if !(pos_thr > neg_thr) {
        return Err(Error::config(
            "match.pos_thr",
            format!("positive threshold {pos_thr} must exceed negative threshold {neg_thr}"),
        ));
    }
    for g in gts {
        g.validate()?;
    }
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut max_iou = vec![0.0; n];
    if gts.is_empty() {
        return Ok(MatchResult {
            labels,
            matched_gt,
            max_iou,
        });
    }

    let g_count = gts.len();
    // anchor-major IoU table
    let mut table = vec![0.0; n * g_count];
    for (a, anchor) in anchors.iter().enumerate() {
        let row = &mut table[a * g_count..(a + 1) * g_count];
        for (g, gt) in gts.iter().enumerate() {
            row[g] = iou_unchecked(anchor, gt);
        }
    }

    let mut claimed = vec![false; n];
    for g in 0..g_count {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..n {
            if claimed[a] {
                continue;
            }
            let v = table[a * g_count + g];
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            claimed[a] = true;
            labels[a] = Label::Positive;
            matched_gt[a] = Some(g);
        }
    }

    for a in 0..n {
        let row = &table[a * g_count..(a + 1) * g_count];
        let (mut arg, mut best) = (0, row[0]);
        for (g, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                arg = g;
                best = v;
            }
        }
        max_iou[a] = best;
        if claimed[a] {
            continue;
        }
        if best >= pos_thr {
            labels[a] = Label::Positive;
            matched_gt[a] = Some(arg);
        } else if best < neg_thr {
            labels[a] = Label::Negative;
        } else {
            labels[a] = Label::Ignore;
        }
    }
    Ok(MatchResult {
        labels,
        matched_gt,
        max_iou,
    })
}

/// Ignores negative anchors whose positivity score is below `theta`.
pub fn gate_negatives(m: &MatchResult, scores: &[f64], theta: f64) -> Result<MatchResult> {
    if scores.len() != m.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} anchors",
            scores.len(),
            m.len()
        )));
    }
    let mut out = m.clone();
    for (label, &s) in out.labels.iter_mut().zip(scores) {
        if *label == Label::Negative && s < theta {
            *label = Label::Ignore;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub positive_count: usize,
    pub negative_count: usize,
    pub ignored_count: usize,
    /// Positives by IoU with their ground truth, bins starting at
    /// [`IOU_BIN_EDGES`].
    pub iou_histogram: [usize; 5],
}

impl ImbalanceStats {
    /// Census of one match. Positives are binned by IoU with their matched
    /// ground truth; forced positives below 0.5 are counted but not binned.
    pub fn from_match(m: &MatchResult, anchors: &[BBox], gts: &[BBox]) -> Self {
        let mut s = ImbalanceStats::default();
        for (a, label) in m.labels.iter().enumerate() {
            match label {
                Label::Positive => {
                    s.positive_count += 1;
                    if let Some(g) = m.matched_gt[a] {
                        let v = iou_unchecked(&anchors[a], &gts[g]);
                        if let Some(bin) = iou_bin(v) {
                            s.iou_histogram[bin] += 1;
                        }
                    }
                }
                Label::Negative => s.negative_count += 1,
                Label::Ignore => s.ignored_count += 1,
            }
        }
        s
    }

    pub fn accumulate(&mut self, other: &ImbalanceStats) {
        self.positive_count += other.positive_count;
        self.negative_count += other.negative_count;
        self.ignored_count += other.ignored_count;
        for (a, b) in self.iou_histogram.iter_mut().zip(&other.iou_histogram) {
            *a += b;
        }
    }

    /// Negatives per positive; infinite when there are no positives.
    pub fn negatives_per_positive(&self) -> f64 {
        if self.positive_count == 0 {
            f64::INFINITY
        } else {
            self.negative_count as f64 / self.positive_count as f64
        }
    }
}

pub fn iou_bin(v: f64) -> Option<usize> {
    if !(0.5..=1.0).contains(&v) {
        return None;
    }
    Some((((v - 0.5) * 10.0).floor() as usize).min(4))
}

/// Census of the initial and promoted anchor sets under the same matching
/// rule.
pub fn census<F>(
    before: &[BBox],
    after: &[BBox],
    gts: &[BBox],
    match_fn: F,
) -> Result<(ImbalanceStats, ImbalanceStats)>
where
    F: Fn(&[BBox], &[BBox]) -> Result<MatchResult>,
{
    if before.len() != after.len() {
        return Err(Error::Shape(format!(
            "{} initial anchors vs {} promoted",
            before.len(),
            after.len()
        )));
    }
    let m0 = match_fn(before, gts)?;
    let m1 = match_fn(after, gts)?;
    Ok((
        ImbalanceStats::from_match(&m0, before, gts),
        ImbalanceStats::from_match(&m1, after, gts),
    ))
}
