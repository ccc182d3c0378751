//! Detection head, composite training loss, the full model and the
//! inference pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{
    default_levels, gate_negatives, generate_anchors, match_anchors, AnchorSet, Label, MatchResult,
    GATE_THETA, NEGATIVE_IOU, POSITIVE_IOU,
};
use crate::apm::{
    decode_clamped, gather_anchor_values, prediction_conv, promote_flat, scatter_anchor_values,
    sigmoid, Apm, ApmConfig, ApmOutput, PromotedAnchors,
};
use crate::backbone::{Backbone, BackboneConfig, PyramidFeatures, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::fam::{
    check_level_mode, merge_adjustment, split_adjustment, DeformConv, OffsetHead, OffsetMode,
    ALIGNED_LEVELS,
};
use crate::geometry::{encode, soft_nms_linear, BBox, BoxDeltas};
use crate::nn::{join, relu, relu_backward, Cbr, Conv2d, Mode, Param, Tensor, Visit};

/// Ground-truth box with a zero-based foreground class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Per-level head predictions.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// `(C + 1) * A` channels, anchor-major, background first.
    pub cls: Vec<Tensor>,
    /// `4 * A` channels, anchor-major.
    pub bbox: Vec<Tensor>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

enum Align {
    Plain(Conv2d),
    Deform { offsets: OffsetHead, conv: DeformConv },
}

struct HeadLevel {
    cbr: Cbr,
    align: Align,
    cls: Conv2d,
    bbox: Conv2d,
    aligned: Option<Tensor>,
    cbr_out_c: usize,
}

/// Detection head over all pyramid levels.
pub struct DetectionHead {
    pub num_classes: usize,
    pub modes: Vec<OffsetMode>,
    levels: Vec<HeadLevel>,
}

impl DetectionHead {
    pub fn new<R: rand::Rng>(
        rng: &mut R,
        num_classes: usize,
        channels: usize,
        anchors_per_level: &[usize],
        modes: &[OffsetMode],
    ) -> Result<Self> {
        if modes.len() != anchors_per_level.len() {
            return Err(Error::config(
                "fam",
                format!("{} offset modes for {} levels", modes.len(), anchors_per_level.len()),
            ));
        }
        if num_classes == 0 {
            return Err(Error::config("num_classes", "need at least one class"));
        }
        let mut levels = Vec::with_capacity(modes.len());
        for (l, (&a, &mode)) in anchors_per_level.iter().zip(modes).enumerate() {
            check_level_mode(l, mode)?;
            let cbr = Cbr::new(rng, channels, channels, 3, 1)?;
            let align = if mode == OffsetMode::None {
                Align::Plain(Conv2d::same(rng, channels, channels, 3))
            } else {
                Align::Deform {
                    offsets: OffsetHead::new(mode, channels, a),
                    conv: DeformConv::new(rng, channels, channels),
                }
            };
            levels.push(HeadLevel {
                cbr,
                align,
                cls: prediction_conv(rng, channels, (num_classes + 1) * a, 0.0),
                bbox: prediction_conv(rng, channels, 4 * a, 0.0),
                aligned: None,
                cbr_out_c: channels,
            });
        }
        Ok(Self {
            num_classes,
            modes: modes.to_vec(),
            levels,
        })
    }

    /// Zeroes both sibling layers.
    pub fn zero_predictions(&mut self) {
        for l in &mut self.levels {
            for c in [&mut l.cls, &mut l.bbox] {
                c.weight.value.iter_mut().for_each(|v| *v = 0.0);
                c.bias.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Copies every weight shared by both heads from `other`, keyed by name.
    pub fn copy_shared_from(&mut self, other: &mut DetectionHead) {
        let mut store = std::collections::HashMap::new();
        other.visit_head("", &mut |k, p| {
            store.insert(k.to_string(), p.value.clone());
        });
        self.visit_head("", &mut |k, p| {
            if let Some(v) = store.get(k) {
                if v.len() == p.value.len() {
                    p.value.clone_from(v);
                }
            }
        });
    }

    fn adjustment<'a>(
        mode: OffsetMode,
        level: usize,
        adjust: Option<&'a [Tensor]>,
    ) -> Result<Option<&'a Tensor>> {
        if !mode.uses_adjustment() {
            return Ok(None);
        }
        adjust
            .and_then(|a| a.get(level))
            .map(Some)
            .ok_or_else(|| {
                Error::config(
                    format!("fam.level{}.mode", level + 1),
                    format!("mode {mode} needs the APM adjustment branch"),
                )
            })
    }

    fn check(&self, pyramid: &PyramidFeatures) -> Result<()> {
        if pyramid.levels.len() != self.levels.len() {
            return Err(Error::Shape(format!(
                "{} pyramid levels for {} head levels",
                pyramid.levels.len(),
                self.levels.len()
            )));
        }
        Ok(())
    }

    /// `adjust` holds the APM delta maps, or `None` when that branch is off.
    pub fn forward(
        &mut self,
        pyramid: &PyramidFeatures,
        adjust: Option<&[Tensor]>,
        mode: Mode,
    ) -> Result<DetectionOutput> {
        self.check(pyramid)?;
        let mut cls = Vec::with_capacity(self.levels.len());
        let mut bbox = Vec::with_capacity(self.levels.len());
        for (l, lvl) in self.levels.iter_mut().enumerate() {
            let x = lvl.cbr.forward(&pyramid.levels[l], mode)?;
            let y = match &mut lvl.align {
                Align::Plain(conv) => conv.forward(&x)?,
                Align::Deform { offsets, conv } => {
                    let split = Self::adjustment(offsets.mode, l, adjust)?
                        .map(split_adjustment)
                        .transpose()?;
                    let field = offsets.forward(&x, split.as_ref())?;
                    conv.forward(&x, &field.composed)?
                }
            };
            let r = relu(&y);
            cls.push(lvl.cls.forward(&r)?);
            bbox.push(lvl.bbox.forward(&r)?);
            lvl.aligned = Some(r);
        }
        Ok(DetectionOutput { cls, bbox })
    }

    pub fn eval(&self, pyramid: &PyramidFeatures, adjust: Option<&[Tensor]>) -> Result<DetectionOutput> {
        self.check(pyramid)?;
        let mut cls = Vec::with_capacity(self.levels.len());
        let mut bbox = Vec::with_capacity(self.levels.len());
        for (l, lvl) in self.levels.iter().enumerate() {
            let x = lvl.cbr.eval(&pyramid.levels[l])?;
            let y = match &lvl.align {
                Align::Plain(conv) => conv.eval(&x)?,
                Align::Deform { offsets, conv } => {
                    let split = Self::adjustment(offsets.mode, l, adjust)?
                        .map(split_adjustment)
                        .transpose()?;
                    let field = offsets.eval(&x, split.as_ref())?;
                    conv.eval(&x, &field.composed)?
                }
            };
            let r = relu(&y);
            cls.push(lvl.cls.eval(&r)?);
            bbox.push(lvl.bbox.eval(&r)?);
        }
        Ok(DetectionOutput { cls, bbox })
    }

    /// Returns pyramid gradients and, per level, the gradient reaching the
    /// APM delta map through the offset convolutions.
    pub fn backward(
        &mut self,
        d_cls: &[Tensor],
        d_bbox: &[Tensor],
    ) -> Result<(Vec<Tensor>, Vec<Option<Tensor>>)> {
        let mut d_pyr = Vec::with_capacity(self.levels.len());
        let mut d_adj = Vec::with_capacity(self.levels.len());
        for (l, lvl) in self.levels.iter_mut().enumerate() {
            let r = lvl
                .aligned
                .take()
                .ok_or_else(|| Error::Shape("head backward without forward".into()))?;
            let mut dr = lvl.cls.backward(&d_cls[l])?;
            dr.add_assign(&lvl.bbox.backward(&d_bbox[l])?);
            let dy = relu_backward(&r, &dr);
            let (dx, adj) = match &mut lvl.align {
                Align::Plain(conv) => (conv.backward(&dy)?, None),
                Align::Deform { offsets, conv } => {
                    let (mut dx, doff) = conv.backward(&dy)?;
                    let (dfeat, dsplit) = offsets.backward(&doff)?;
                    if let Some(df) = dfeat {
                        dx.add_assign(&df);
                    }
                    (dx, dsplit.map(|s| merge_adjustment(&s)).transpose()?)
                }
            };
            debug_assert_eq!(dx.c, lvl.cbr_out_c);
            d_pyr.push(lvl.cbr.backward(&dx)?);
            d_adj.push(adj);
        }
        Ok((d_pyr, d_adj))
    }

    fn visit_head(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (l, lvl) in self.levels.iter_mut().enumerate() {
            let p = join(prefix, &format!("detector.level{}", l + 1));
            lvl.cbr.visit(&join(&p, "cbr"), f);
            match &mut lvl.align {
                Align::Plain(conv) => conv.visit(&join(&p, "align"), f),
                Align::Deform { offsets, conv } => {
                    conv.visit(&join(&p, "align"), f);
                    offsets.visit(&join(prefix, &format!("fam.level{}", l + 1)), f);
                }
            }
            lvl.cls.visit(&join(&p, "cls"), f);
            lvl.bbox.visit(&join(&p, "box"), f);
        }
    }

    /// Mutable access to a level's offset head, if it has one.
    pub fn offset_head_mut(&mut self, level: usize) -> Option<&mut OffsetHead> {
        match &mut self.levels.get_mut(level)?.align {
            Align::Deform { offsets, .. } => Some(offsets),
            Align::Plain(_) => None,
        }
    }
}

impl Visit for DetectionHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.visit_head(prefix, f);
    }
}

/// Smooth L1 summed over the four coordinates.
pub fn smooth_l1(pred: &BoxDeltas, target: &BoxDeltas) -> Result<f64> {
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("smooth L1 input".into()));
    }
    Ok(pred
        .to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1_scalar(p - t).0)
        .sum())
}

/// Value and derivative of the scalar smooth L1.
fn smooth_l1_scalar(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_b: f64,
    pub l_r_apm: f64,
    pub l_cls: f64,
    pub l_r_det: f64,
    pub n_apm: usize,
    pub n_d: usize,
}

impl LossReport {
    pub fn combine(&mut self, other: &LossReport) {
        self.l_b += other.l_b;
        self.l_r_apm += other.l_r_apm;
        self.l_cls += other.l_cls;
        self.l_r_det += other.l_r_det;
        self.n_apm += other.n_apm;
        self.n_d += other.n_d;
    }

    pub fn apm_norm(&self) -> f64 {
        1.0 / self.n_apm.max(1) as f64
    }

    pub fn det_norm(&self) -> f64 {
        1.0 / self.n_d.max(1) as f64
    }

    pub fn total(&self) -> f64 {
        (self.l_b + self.l_r_apm) * self.apm_norm() + (self.l_cls + self.l_r_det) * self.det_norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub theta: f64,
    /// Keep only the hardest `ohem_ratio` negatives per positive in `L_cls`.
    pub ohem: bool,
    pub ohem_ratio: usize,
    /// Optional cap on APM negatives, hardest first.
    pub apm_negative_cap: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            positive_iou: POSITIVE_IOU,
            negative_iou: NEGATIVE_IOU,
            theta: GATE_THETA,
            ohem: false,
            ohem_ratio: 3,
            apm_negative_cap: None,
        }
    }
}

/// Flat per-anchor predictions of one image, in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub num_classes: usize,
    /// APM score logits, absent when scoring is off.
    pub apm_logits: Option<Vec<f64>>,
    /// APM deltas, four per anchor.
    pub apm_deltas: Vec<f64>,
    /// `C + 1` logits per anchor.
    pub cls_logits: Vec<f64>,
    /// Four per anchor.
    pub box_deltas: Vec<f64>,
}

impl HeadValues {
    pub fn zeros_like(&self) -> Self {
        Self {
            num_classes: self.num_classes,
            apm_logits: self.apm_logits.as_ref().map(|v| vec![0.0; v.len()]),
            apm_deltas: vec![0.0; self.apm_deltas.len()],
            cls_logits: vec![0.0; self.cls_logits.len()],
            box_deltas: vec![0.0; self.box_deltas.len()],
        }
    }

    pub fn anchors(&self) -> usize {
        self.box_deltas.len() / 4
    }

    pub fn apm_scores(&self) -> Vec<f64> {
        match &self.apm_logits {
            Some(l) => l.iter().map(|z| sigmoid(*z)).collect(),
            None => vec![1.0; self.anchors()],
        }
    }

    fn check(&self, anchors: usize) -> Result<()> {
        let k = self.num_classes + 1;
        let ok = self.apm_deltas.len() == 4 * anchors
            && self.box_deltas.len() == 4 * anchors
            && self.cls_logits.len() == k * anchors
            && self.apm_logits.as_ref().map_or(true, |l| l.len() == anchors);
        if !ok {
            return Err(Error::Shape(format!("head values do not cover {anchors} anchors")));
        }
        Ok(())
    }
}

/// Everything the loss derived for one image.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    /// Unnormalized sums and positive counts.
    pub report: LossReport,
    /// Gradients of the unnormalized sums; APM entries must be scaled by
    /// the APM normalizer and detection entries by the detection one.
    pub grads: HeadValues,
    pub apm_match: MatchResult,
    pub det_match: MatchResult,
    pub promoted: PromotedAnchors,
}

/// Indices of the `keep` largest losses; ties resolved by lower index.
fn hardest(mut cand: Vec<(usize, f64)>, keep: usize) -> Vec<usize> {
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(keep);
    cand.into_iter().map(|c| c.0).collect()
}

/// Loss terms for one image. Promoted anchors are derived from the APM
/// deltas and treated as constants.
pub fn total_loss(
    values: &HeadValues,
    anchors: &[BBox],
    gts: &[GroundTruth],
    apm: &ApmConfig,
    cfg: &LossConfig,
) -> Result<ImageLoss> {
    values.check(anchors.len())?;
    let k = values.num_classes + 1;
    if let Some(g) = gts.iter().find(|g| g.class >= values.num_classes) {
        return Err(Error::Dataset(format!("class {} out of range", g.class)));
    }
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let scores = values.apm_scores();
    let promoted = if apm.deltas_active() {
        promote_flat(anchors, &values.apm_deltas, scores.clone())?
    } else {
        promote_flat(anchors, &vec![0.0; 4 * anchors.len()], scores.clone())?
    };
    let apm_match = match_anchors(anchors, &gt_boxes, cfg.positive_iou, cfg.negative_iou)?;
    let mut det_match = match_anchors(&promoted.boxes, &gt_boxes, cfg.positive_iou, cfg.negative_iou)?;
    if apm.scores_active() {
        det_match = gate_negatives(&det_match, &scores, cfg.theta)?;
    }

    let mut report = LossReport::default();
    let mut grads = values.zeros_like();

    if apm.enabled {
        report.n_apm = apm_match.count(Label::Positive);
    }
    if let (true, Some(logits)) = (apm.scores_active(), &values.apm_logits) {
        let g = grads.apm_logits.as_mut().expect("same shape as logits");
        let mut negatives = Vec::new();
        for (i, label) in apm_match.labels.iter().enumerate() {
            match label {
                Label::Positive => {
                    report.l_b += softplus(-logits[i]);
                    g[i] += sigmoid(logits[i]) - 1.0;
                }
                Label::Negative => negatives.push((i, softplus(logits[i]))),
                Label::Ignore => {}
            }
        }
        let chosen: Vec<usize> = match cfg.apm_negative_cap {
            Some(cap) => hardest(negatives, cap),
            None => negatives.into_iter().map(|c| c.0).collect(),
        };
        for i in chosen {
            report.l_b += softplus(logits[i]);
            g[i] += sigmoid(logits[i]);
        }
    }
    if apm.deltas_active() {
        for (i, m) in apm_match.matched_gt.iter().enumerate() {
            if apm_match.labels[i] != Label::Positive {
                continue;
            }
            let gi = m.expect("positive anchors are matched");
            let target = encode(&anchors[i], &gt_boxes[gi])?.to_array();
            for j in 0..4 {
                let (l, d) = smooth_l1_scalar(values.apm_deltas[4 * i + j] - target[j]);
                report.l_r_apm += l;
                grads.apm_deltas[4 * i + j] += d;
            }
        }
    }

    report.n_d = det_match.count(Label::Positive);
    let mut negatives = Vec::new();
    for (i, label) in det_match.labels.iter().enumerate() {
        let z = &values.cls_logits[k * i..k * (i + 1)];
        match label {
            Label::Positive => {
                let gi = det_match.matched_gt[i].expect("positive anchors are matched");
                let target = gts[gi].class + 1;
                let ls = log_softmax(z);
                report.l_cls -= ls[target];
                let g = &mut grads.cls_logits[k * i..k * (i + 1)];
                for (c, v) in g.iter_mut().enumerate() {
                    *v += ls[c].exp() - (c == target) as u8 as f64;
                }
                let t = encode(&promoted.boxes[i], &gt_boxes[gi])?.to_array();
                for j in 0..4 {
                    let (l, d) = smooth_l1_scalar(values.box_deltas[4 * i + j] - t[j]);
                    report.l_r_det += l;
                    grads.box_deltas[4 * i + j] += d;
                }
            }
            Label::Negative => negatives.push((i, -log_softmax(z)[0])),
            Label::Ignore => {}
        }
    }
    let chosen: Vec<usize> = if cfg.ohem {
        hardest(negatives, cfg.ohem_ratio * report.n_d.max(1))
    } else {
        negatives.into_iter().map(|c| c.0).collect()
    };
    for i in chosen {
        let z = &values.cls_logits[k * i..k * (i + 1)];
        let ls = log_softmax(z);
        report.l_cls -= ls[0];
        let g = &mut grads.cls_logits[k * i..k * (i + 1)];
        for (c, v) in g.iter_mut().enumerate() {
            *v += ls[c].exp() - (c == 0) as u8 as f64;
        }
    }

    for v in [report.l_b, report.l_r_apm, report.l_cls, report.l_r_det] {
        if !v.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
    }
    Ok(ImageLoss {
        report,
        grads,
        apm_match,
        det_match,
        promoted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub theta: f64,
    pub confidence: f64,
    pub nms_iou: f64,
    /// Gaussian soft-NMS width; unused by the linear kernel.
    pub nms_sigma: f64,
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            theta: GATE_THETA,
            confidence: 0.01,
            nms_iou: 0.3,
            nms_sigma: 0.5,
            top_k: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Zero-based foreground class.
    pub class: usize,
    pub score: f64,
}

/// Per-class soft-NMS, global top-k and clipping. The result does not
/// depend on the order of `candidates`.
pub fn postprocess(
    mut candidates: Vec<Detection>,
    cfg: &InferenceConfig,
    width: f64,
    height: f64,
) -> Result<Vec<Detection>> {
    candidates.retain(|d| d.score >= cfg.confidence);
    let key = |d: &Detection| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2];
    let order = |a: &Detection, b: &Detection| {
        a.class
            .cmp(&b.class)
            .then(b.score.total_cmp(&a.score))
            .then_with(|| {
                key(a)
                    .iter()
                    .zip(key(b))
                    .map(|(x, y)| x.total_cmp(&y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    };
    candidates.sort_by(order);
    let mut kept = Vec::new();
    let mut start = 0;
    while start < candidates.len() {
        let class = candidates[start].class;
        let end = start + candidates[start..].iter().take_while(|d| d.class == class).count();
        let boxes: Vec<BBox> = candidates[start..end]
            .iter()
            .map(|d| d.bbox.with_score(d.score))
            .collect();
        for b in soft_nms_linear(&boxes, cfg.nms_iou, cfg.confidence)? {
            let score = b.score.unwrap_or(0.0);
            kept.push(Detection {
                bbox: BBox { score: None, ..b },
                class,
                score,
            });
        }
        start = end;
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| order(a, b)));
    kept.truncate(cfg.top_k);
    Ok(kept
        .into_iter()
        .filter_map(|d| {
            let bbox = d.bbox.clip(width, height);
            (bbox.width() > 0.0 && bbox.height() > 0.0).then_some(Detection { bbox, ..d })
        })
        .collect())
}

/// Candidate detections of one image before soft-NMS: θ gate on the APM
/// score, then per-class confidence filtering of decoded boxes.
pub fn candidates(
    values: &HeadValues,
    anchors: &[BBox],
    apm: &ApmConfig,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    values.check(anchors.len())?;
    let k = values.num_classes + 1;
    let scores = values.apm_scores();
    let promoted = if apm.deltas_active() {
        promote_flat(anchors, &values.apm_deltas, scores.clone())?
    } else {
        promote_flat(anchors, &vec![0.0; 4 * anchors.len()], scores.clone())?
    };
    let mut out = Vec::new();
    for i in 0..anchors.len() {
        if apm.scores_active() && scores[i] < cfg.theta {
            continue;
        }
        let probs = softmax(&values.cls_logits[k * i..k * (i + 1)]);
        if probs[1..].iter().all(|p| *p < cfg.confidence) {
            continue;
        }
        let d = BoxDeltas::from_slice(&values.box_deltas[4 * i..4 * i + 4]);
        let (bbox, _) = decode_clamped(&promoted.boxes[i], &d)?;
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p >= cfg.confidence {
                out.push(Detection {
                    bbox,
                    class: c - 1,
                    score: p,
                });
            }
        }
    }
    Ok(out)
}

/// COCO results record; `bbox` is `[x, y, width, height]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl CocoDetection {
    pub fn new(image_id: u64, category_id: u64, d: &Detection) -> Self {
        Self {
            image_id,
            category_id,
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.width(), d.bbox.height()],
            score: d.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub apm: ApmConfig,
    pub fam_modes: Vec<OffsetMode>,
    /// Block the offset-path gradient into the APM delta map.
    pub detach_adjustment: bool,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let mut fam_modes = vec![OffsetMode::Disentangled; ALIGNED_LEVELS];
        fam_modes.resize(PYRAMID_LEVELS, OffsetMode::None);
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 3,
            apm: ApmConfig::default(),
            fam_modes,
            detach_adjustment: false,
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.apm.validate()?;
        if self.fam_modes.len() != PYRAMID_LEVELS {
            return Err(Error::config("fam", format!("need {PYRAMID_LEVELS} level modes")));
        }
        for (l, m) in self.fam_modes.iter().enumerate() {
            check_level_mode(l, *m)?;
            if m.uses_adjustment() && !self.apm.deltas_active() {
                return Err(Error::config(
                    format!("fam.level{}.mode", l + 1),
                    format!("mode {m} needs apm.adjustment"),
                ));
            }
        }
        if self.loss.positive_iou <= self.loss.negative_iou {
            return Err(Error::config("match.positive_iou", "must exceed match.negative_iou"));
        }
        Ok(())
    }
}

/// Per-step training summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub apm_positives: usize,
    pub apm_negatives: usize,
    pub det_positives: usize,
    pub det_negatives: usize,
    pub clamped: usize,
}

pub struct Detector {
    pub config: DetectorConfig,
    pub anchors: AnchorSet,
    pub backbone: Backbone,
    pub apm: Apm,
    pub head: DetectionHead,
}

/// Raw network outputs for a batch.
pub struct RawOutputs {
    pub apm: ApmOutput,
    pub det: DetectionOutput,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = config.backbone.input_size;
        let anchors = generate_anchors(input, &default_levels(input))?;
        let per_level: Vec<usize> = anchors.levels.iter().map(|l| l.anchors_per_location).collect();
        let channels = config.backbone.decoder_channels;
        let backbone = Backbone::new(&mut rng, config.backbone.clone())?;
        let apm = Apm::new(&mut rng, config.apm, channels, &per_level)?;
        let head = DetectionHead::new(&mut rng, config.num_classes, channels, &per_level, &config.fam_modes)?;
        Ok(Self {
            config,
            anchors,
            backbone,
            apm,
            head,
        })
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.config.backbone.input_size;
        if images.c != 3 || images.h != s || images.w != s {
            return Err(Error::Shape(format!(
                "expected Nx3x{s}x{s} images, got {:?}",
                images.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<RawOutputs> {
        self.check_images(images)?;
        let pyr = self.backbone.forward(images, mode)?;
        let apm = self.apm.forward(&pyr, mode)?;
        let adjust = self.config.apm.deltas_active().then_some(apm.deltas.as_slice());
        let det = self.head.forward(&pyr, adjust, mode)?;
        Ok(RawOutputs { apm, det })
    }

    pub fn eval_raw(&self, images: &Tensor) -> Result<RawOutputs> {
        self.check_images(images)?;
        let pyr = self.backbone.eval(images)?;
        let apm = self.apm.eval(&pyr)?;
        let adjust = self.config.apm.deltas_active().then_some(apm.deltas.as_slice());
        let det = self.head.eval(&pyr, adjust)?;
        Ok(RawOutputs { apm, det })
    }

    /// Flattens the outputs of batch item `n` into anchor order.
    pub fn head_values(&self, raw: &RawOutputs, n: usize) -> Result<HeadValues> {
        let a = &self.anchors;
        Ok(HeadValues {
            num_classes: self.config.num_classes,
            apm_logits: raw
                .apm
                .logits
                .as_ref()
                .map(|l| gather_anchor_values(l, a, n, 1))
                .transpose()?,
            apm_deltas: gather_anchor_values(&raw.apm.deltas, a, n, 4)?,
            cls_logits: gather_anchor_values(&raw.det.cls, a, n, self.config.num_classes + 1)?,
            box_deltas: gather_anchor_values(&raw.det.bbox, a, n, 4)?,
        })
    }

    /// Forward, loss and backward for a batch; gradients are accumulated
    /// into the parameters and the batch-normalized loss is reported.
    pub fn forward_backward(
        &mut self,
        images: &Tensor,
        targets: &[Vec<GroundTruth>],
        mode: Mode,
    ) -> Result<StepReport> {
        if targets.len() != images.n {
            return Err(Error::Shape(format!(
                "{} targets for {} images",
                targets.len(),
                images.n
            )));
        }
        let raw = self.forward(images, mode)?;
        let mut step = StepReport::default();
        let mut per_image = Vec::with_capacity(images.n);
        for (n, gts) in targets.iter().enumerate() {
            let values = self.head_values(&raw, n)?;
            let loss = total_loss(&values, &self.anchors.boxes, gts, &self.config.apm, &self.config.loss)?;
            step.loss.combine(&loss.report);
            step.apm_positives += loss.apm_match.count(Label::Positive);
            step.apm_negatives += loss.apm_match.count(Label::Negative);
            step.det_positives += loss.det_match.count(Label::Positive);
            step.det_negatives += loss.det_match.count(Label::Negative);
            step.clamped += loss.promoted.clamped;
            per_image.push(loss.grads);
        }
        let (an, dn) = (step.loss.apm_norm(), step.loss.det_norm());
        let zeros = |maps: &[Tensor]| maps.iter().map(|m| m.zeros_like()).collect::<Vec<_>>();
        let mut d_logits = raw.apm.logits.as_deref().map(zeros);
        let mut d_apm = zeros(&raw.apm.deltas);
        let mut d_cls = zeros(&raw.det.cls);
        let mut d_box = zeros(&raw.det.bbox);
        let k = self.config.num_classes + 1;
        for (n, g) in per_image.iter_mut().enumerate() {
            let scale = |v: &mut Vec<f64>, s: f64| v.iter_mut().for_each(|x| *x *= s);
            if let (Some(gl), Some(dl)) = (g.apm_logits.as_mut(), d_logits.as_mut()) {
                scale(gl, an);
                scatter_anchor_values(gl, &self.anchors, n, 1, dl);
            }
            scale(&mut g.apm_deltas, an);
            scale(&mut g.cls_logits, dn);
            scale(&mut g.box_deltas, dn);
            scatter_anchor_values(&g.apm_deltas, &self.anchors, n, 4, &mut d_apm);
            scatter_anchor_values(&g.cls_logits, &self.anchors, n, k, &mut d_cls);
            scatter_anchor_values(&g.box_deltas, &self.anchors, n, 4, &mut d_box);
        }
        let (mut d_pyr, d_adj) = self.head.backward(&d_cls, &d_box)?;
        if !self.config.detach_adjustment {
            for (l, adj) in d_adj.into_iter().enumerate() {
                if let Some(adj) = adj {
                    d_apm[l].add_assign(&adj);
                }
            }
        }
        let d_from_apm = self.apm.backward(d_logits.as_deref(), &d_apm)?;
        for (d, a) in d_pyr.iter_mut().zip(&d_from_apm) {
            d.add_assign(a);
        }
        self.backbone.backward(&d_pyr)?;
        Ok(step)
    }

    /// Detections for every image of a preprocessed batch, in input pixel
    /// coordinates.
    pub fn infer(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let raw = self.eval_raw(images)?;
        let s = self.config.backbone.input_size as f64;
        (0..images.n)
            .map(|n| {
                let values = self.head_values(&raw, n)?;
                let cands = candidates(&values, &self.anchors.boxes, &self.config.apm, &self.config.inference)?;
                postprocess(cands, &self.config.inference, s, s)
            })
            .collect()
    }
}

impl Visit for Detector {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.apm.visit(&join(prefix, "apm"), f);
        self.head.visit(prefix, f);
    }
}
