//! Anchor promotion: per-level heads scoring each anchor's chance of being
//! positive and regressing coarse `(dx, dy, dw, dh)` adjustments, and the
//! decode of initial anchors into promoted anchors.
//!
//! Delta maps are anchor-major: channel `4a + j` holds coordinate `j` of
//! anchor `a`. Score maps hold one channel per anchor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::backbone::PyramidFeatures;
use crate::error::{Error, Result};
use crate::geometry::{decode, BBox, BoxDeltas, MAX_LOG_SCALE};
use crate::nn::{join, Cbr, Conv2d, Mode, Param, Tensor, Visit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApmConfig {
    pub enabled: bool,
    pub scoring: bool,
    pub adjustment: bool,
    /// 3x3 CBR blocks shared by both branches before the prediction convs.
    pub head_depth: usize,
    /// Initial positivity probability set through the score bias.
    pub score_prior: f64,
}

impl Default for ApmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scoring: true,
            adjustment: true,
            head_depth: 0,
            score_prior: 0.01,
        }
    }
}

impl ApmConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            scoring: false,
            adjustment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !self.scoring && !self.adjustment {
            return Err(Error::config(
                "apm",
                "APM is enabled but both scoring and adjustment are disabled",
            ));
        }
        if !(self.score_prior > 0.0 && self.score_prior < 1.0) {
            return Err(Error::config("apm.score_prior", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn scores_active(&self) -> bool {
        self.enabled && self.scoring
    }

    pub fn deltas_active(&self) -> bool {
        self.enabled && self.adjustment
    }
}

/// Per-level APM predictions for a batch.
#[derive(Debug, Clone)]
pub struct ApmOutput {
    /// Score logits, `A` channels per level; `None` when scoring is off.
    pub logits: Option<Vec<Tensor>>,
    /// Positivity probabilities; constant 1 when scoring is off.
    pub scores: Vec<Tensor>,
    /// Adjustment deltas, `4A` channels; zero when adjustment is off.
    pub deltas: Vec<Tensor>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normal initialization with a small fixed deviation for prediction convs.
pub(crate) fn prediction_conv<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, bias: f64) -> Conv2d {
    let mut conv = Conv2d::zeros(in_c, out_c, 3, 1, 1);
    let normal = Normal::new(0.0, 0.01).expect("positive std");
    conv.weight.value.iter_mut().for_each(|v| *v = normal.sample(rng));
    conv.bias.value.iter_mut().for_each(|v| *v = bias);
    conv
}

pub struct ApmLevel {
    pub tower: Vec<Cbr>,
    pub score: Option<Conv2d>,
    pub delta: Option<Conv2d>,
    tower_out: Option<Tensor>,
}

pub struct Apm {
    pub config: ApmConfig,
    pub levels: Vec<ApmLevel>,
    anchors_per_level: Vec<usize>,
}

impl Apm {
    pub fn new<R: Rng>(
        rng: &mut R,
        config: ApmConfig,
        channels: usize,
        anchors_per_level: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        let prior_logit = (config.score_prior / (1.0 - config.score_prior)).ln();
        let mut levels = Vec::with_capacity(anchors_per_level.len());
        for &a in anchors_per_level {
            let tower = if config.enabled {
                (0..config.head_depth)
                    .map(|_| Cbr::new(rng, channels, channels, 3, 1))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            levels.push(ApmLevel {
                tower,
                score: config
                    .scores_active()
                    .then(|| prediction_conv(rng, channels, a, prior_logit)),
                delta: config
                    .deltas_active()
                    .then(|| prediction_conv(rng, channels, 4 * a, 0.0)),
                tower_out: None,
            });
        }
        Ok(Self {
            config,
            levels,
            anchors_per_level: anchors_per_level.to_vec(),
        })
    }

    fn assemble(
        &self,
        level: usize,
        feat: &Tensor,
        logits: Option<Tensor>,
        deltas: Option<Tensor>,
    ) -> (Option<Tensor>, Tensor, Tensor) {
        let a = self.anchors_per_level[level];
        let scores = match &logits {
            Some(l) => {
                let mut s = l.clone();
                s.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                s
            }
            None => {
                let mut s = Tensor::zeros(feat.n, a, feat.h, feat.w);
                s.data.iter_mut().for_each(|v| *v = 1.0);
                s
            }
        };
        let deltas = deltas.unwrap_or_else(|| Tensor::zeros(feat.n, 4 * a, feat.h, feat.w));
        (logits, scores, deltas)
    }

    fn collect(parts: Vec<(Option<Tensor>, Tensor, Tensor)>) -> ApmOutput {
        let has_logits = parts.iter().all(|p| p.0.is_some());
        let mut logits = Vec::new();
        let mut scores = Vec::new();
        let mut deltas = Vec::new();
        for (l, s, d) in parts {
            if let Some(l) = l {
                logits.push(l);
            }
            scores.push(s);
            deltas.push(d);
        }
        ApmOutput {
            logits: has_logits.then_some(logits),
            scores,
            deltas,
        }
    }

    fn check_pyramid(&self, pyramid: &PyramidFeatures) -> Result<()> {
        if pyramid.levels.len() != self.levels.len() {
            return Err(Error::Shape(format!(
                "{} pyramid levels for {} APM levels",
                pyramid.levels.len(),
                self.levels.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, pyramid: &PyramidFeatures, mode: Mode) -> Result<ApmOutput> {
        self.check_pyramid(pyramid)?;
        let mut parts = Vec::with_capacity(self.levels.len());
        for (i, feat) in pyramid.levels.iter().enumerate() {
            let lvl = &mut self.levels[i];
            let mut x = feat.clone();
            for b in lvl.tower.iter_mut() {
                x = b.forward(&x, mode)?;
            }
            let logits = lvl.score.as_mut().map(|c| c.forward(&x)).transpose()?;
            let deltas = lvl.delta.as_mut().map(|c| c.forward(&x)).transpose()?;
            lvl.tower_out = Some(x);
            parts.push(self.assemble(i, feat, logits, deltas));
        }
        Ok(Self::collect(parts))
    }

    pub fn eval(&self, pyramid: &PyramidFeatures) -> Result<ApmOutput> {
        self.check_pyramid(pyramid)?;
        let mut parts = Vec::with_capacity(self.levels.len());
        for (i, feat) in pyramid.levels.iter().enumerate() {
            let lvl = &self.levels[i];
            let mut x = feat.clone();
            for b in &lvl.tower {
                x = b.eval(&x)?;
            }
            let logits = lvl.score.as_ref().map(|c| c.eval(&x)).transpose()?;
            let deltas = lvl.delta.as_ref().map(|c| c.eval(&x)).transpose()?;
            parts.push(self.assemble(i, feat, logits, deltas));
        }
        Ok(Self::collect(parts))
    }

    /// Gradients w.r.t. score logits and deltas per level; returns the
    /// gradient for each pyramid level.
    pub fn backward(
        &mut self,
        d_logits: Option<&[Tensor]>,
        d_deltas: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, lvl) in self.levels.iter_mut().enumerate() {
            let x = lvl
                .tower_out
                .take()
                .ok_or_else(|| Error::Shape("APM backward without forward".into()))?;
            let mut dx = x.zeros_like();
            if let (Some(conv), Some(dl)) = (lvl.score.as_mut(), d_logits) {
                dx.add_assign(&conv.backward(&dl[i])?);
            }
            if let Some(conv) = lvl.delta.as_mut() {
                dx.add_assign(&conv.backward(&d_deltas[i])?);
            }
            for b in lvl.tower.iter_mut().rev() {
                dx = b.backward(&dx)?;
            }
            out.push(dx);
        }
        Ok(out)
    }
}

impl Visit for Apm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, lvl) in self.levels.iter_mut().enumerate() {
            let p = join(prefix, &format!("level{}", i + 1));
            for (k, b) in lvl.tower.iter_mut().enumerate() {
                b.visit(&join(&p, &format!("tower{k}")), f);
            }
            if let Some(c) = lvl.score.as_mut() {
                c.visit(&join(&p, "score"), f);
            }
            if let Some(c) = lvl.delta.as_mut() {
                c.visit(&join(&p, "delta"), f);
            }
        }
    }
}

/// Reads `per_anchor` consecutive channels per anchor from level maps into
/// a flat anchor-ordered vector for batch item `n`.
pub fn gather_anchor_values(
    maps: &[Tensor],
    anchors: &AnchorSet,
    n: usize,
    per_anchor: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; anchors.len() * per_anchor];
    for (l, info) in anchors.levels.iter().enumerate() {
        let m = maps
            .get(l)
            .ok_or_else(|| Error::Shape(format!("missing map for level {}", l + 1)))?;
        let a_count = info.anchors_per_location;
        if m.h != info.size || m.w != info.size || m.c != a_count * per_anchor {
            return Err(Error::Shape(format!(
                "level {} map {:?} does not match {} anchors x {} values on a {}x{} grid",
                l + 1,
                m.shape(),
                a_count,
                per_anchor,
                info.size,
                info.size
            )));
        }
        let hw = m.h * m.w;
        let item = m.item(n);
        for p in 0..hw {
            for a in 0..a_count {
                let dst = (info.offset + p * a_count + a) * per_anchor;
                for j in 0..per_anchor {
                    out[dst + j] = item[(a * per_anchor + j) * hw + p];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`gather_anchor_values`]: writes flat values for item `n`
/// into level maps.
pub fn scatter_anchor_values(
    values: &[f64],
    anchors: &AnchorSet,
    n: usize,
    per_anchor: usize,
    maps: &mut [Tensor],
) {
    for (l, info) in anchors.levels.iter().enumerate() {
        let m = &mut maps[l];
        let a_count = info.anchors_per_location;
        let hw = m.h * m.w;
        let item = m.item_mut(n);
        for p in 0..hw {
            for a in 0..a_count {
                let src = (info.offset + p * a_count + a) * per_anchor;
                for j in 0..per_anchor {
                    item[(a * per_anchor + j) * hw + p] = values[src + j];
                }
            }
        }
    }
}

/// Promoted anchors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PromotedAnchors {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// Anchors whose decoded size was clamped.
    pub clamped: usize,
}

/// Decodes with `dw, dh` limited to [`MAX_LOG_SCALE`] and sizes floored at
/// one pixel. Returns the box and whether anything was clamped.
pub fn decode_clamped(anchor: &BBox, d: &BoxDeltas) -> Result<(BBox, bool)> {
    let dw = d.dw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let dh = d.dh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let mut clamped = dw != d.dw || dh != d.dh;
    let b = decode(anchor, &BoxDeltas::new(d.dx, d.dy, dw, dh))?;
    let (cx, cy, w, h) = b.center_form();
    if w < 1.0 || h < 1.0 {
        clamped = true;
        return Ok((BBox::from_center(cx, cy, w.max(1.0), h.max(1.0)), clamped));
    }
    Ok((b, clamped))
}

/// Promotes every initial anchor with its predicted deltas. Nothing is
/// clipped or filtered.
pub fn promote(anchors: &AnchorSet, out: &ApmOutput, n: usize) -> Result<PromotedAnchors> {
    let deltas = gather_anchor_values(&out.deltas, anchors, n, 4)?;
    let scores = gather_anchor_values(&out.scores, anchors, n, 1)?;
    promote_flat(&anchors.boxes, &deltas, scores)
}

/// [`promote`] over flat per-anchor deltas.
pub fn promote_flat(anchors: &[BBox], deltas: &[f64], scores: Vec<f64>) -> Result<PromotedAnchors> {
    if deltas.len() != 4 * anchors.len() || scores.len() != anchors.len() {
        return Err(Error::Shape("promotion inputs are not aligned with anchors".into()));
    }
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut clamped = 0;
    for (i, a) in anchors.iter().enumerate() {
        let d = BoxDeltas::from_slice(&deltas[4 * i..4 * i + 4]);
        let (b, c) = if d == BoxDeltas::ZERO {
            (*a, false)
        } else {
            decode_clamped(a, &d)?
        };
        clamped += c as usize;
        boxes.push(b);
    }
    Ok(PromotedAnchors {
        boxes,
        scores,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{default_levels, generate_anchors, match_anchors, Label};
    use crate::nn::tests::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pyramid(rng: &mut ChaCha8Rng, input: usize, c: usize) -> PyramidFeatures {
        let set = generate_anchors(input, &default_levels(input)).unwrap();
        PyramidFeatures {
            levels: set
                .levels
                .iter()
                .map(|l| random_tensor(rng, 1, c, l.size, l.size))
                .collect(),
        }
    }

    #[test]
    fn head_shapes_at_384() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pyr = pyramid(&mut rng, 384, 4);
        let apm = Apm::new(&mut rng, ApmConfig::default(), 4, &[6, 6, 6, 6, 4, 4]).unwrap();
        let out = apm.eval(&pyr).unwrap();
        assert_eq!(out.scores[0].shape(), [1, 6, 48, 48]);
        assert_eq!(out.deltas[0].shape(), [1, 24, 48, 48]);
        assert_eq!(out.deltas[5].shape(), [1, 16, 1, 1]);
        assert!(out.scores.iter().all(|s| s.data.iter().all(|v| *v > 0.0 && *v < 1.0)));
    }

    #[test]
    fn toggles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pyr = pyramid(&mut rng, 256, 4);
        let set = generate_anchors(256, &default_levels(256)).unwrap();
        let cfg = ApmConfig {
            adjustment: false,
            ..ApmConfig::default()
        };
        let apm = Apm::new(&mut rng, cfg, 4, &[6, 6, 6, 6, 4, 4]).unwrap();
        let p = promote(&set, &apm.eval(&pyr).unwrap(), 0).unwrap();
        assert_eq!(p.boxes, set.boxes);

        let cfg = ApmConfig {
            scoring: false,
            ..ApmConfig::default()
        };
        let apm = Apm::new(&mut rng, cfg, 4, &[6, 6, 6, 6, 4, 4]).unwrap();
        let out = apm.eval(&pyr).unwrap();
        assert!(out.logits.is_none());
        assert!(out.scores.iter().all(|s| s.data.iter().all(|v| *v == 1.0)));

        let bad = ApmConfig {
            scoring: false,
            adjustment: false,
            ..ApmConfig::default()
        };
        assert!(Apm::new(&mut rng, bad, 4, &[6]).is_err());
        assert!(Apm::new(&mut rng, ApmConfig::disabled(), 4, &[6]).is_ok());
    }

    #[test]
    fn promote_single_delta() {
        let a = BBox::from_center(10.0, 10.0, 4.0, 4.0);
        let p = promote_flat(&[a], &[0.5, 0.0, 2f64.ln(), 0.0], vec![0.3]).unwrap();
        let (cx, cy, w, h) = p.boxes[0].center_form();
        assert!((cx - 12.0).abs() < 1e-12 && (cy - 10.0).abs() < 1e-12);
        assert!((w - 8.0).abs() < 1e-12 && (h - 4.0).abs() < 1e-12);
        assert_eq!(p.clamped, 0);
    }

    #[test]
    fn tiny_boxes_are_clamped() {
        let a = BBox::from_center(10.0, 10.0, 4.0, 4.0);
        let p = promote_flat(&[a], &[0.0, 0.0, -3.0, 0.0], vec![0.5]).unwrap();
        assert_eq!(p.clamped, 1);
        assert!((p.boxes[0].width() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn promotion_turns_negative_into_positive() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let best = BBox::new(0.0, 0.0, 10.0, 9.0);
        // IoU 0.4 before promotion
        let anchor = BBox::new(0.0, 0.0, 4.0, 10.0);
        let m0 = match_anchors(&[best, anchor], &[gt], 0.5, 0.3).unwrap();
        assert_eq!(m0.labels[1], Label::Ignore);
        // widen from 4 to 5.5 around a shifted centre: IoU 0.55
        let (ax, _, aw, _) = anchor.center_form();
        let dx = (2.75 - ax) / aw;
        let dw = (5.5f64 / 4.0).ln();
        let p = promote_flat(&[best, anchor], &[0.0, 0.0, 0.0, 0.0, dx, 0.0, dw, 0.0], vec![1.0; 2]).unwrap();
        let m1 = match_anchors(&p.boxes, &[gt], 0.5, 0.3).unwrap();
        assert!((m1.max_iou[1] - 0.55).abs() < 1e-12);
        assert_eq!(m1.labels[1], Label::Positive);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = generate_anchors(256, &default_levels(256)).unwrap();
        let maps: Vec<Tensor> = set
            .levels
            .iter()
            .map(|l| random_tensor(&mut rng, 2, 4 * l.anchors_per_location, l.size, l.size))
            .collect();
        let flat = gather_anchor_values(&maps, &set, 1, 4).unwrap();
        assert_eq!(flat.len(), 4 * set.len());
        let mut back: Vec<Tensor> = maps.iter().map(|m| m.zeros_like()).collect();
        scatter_anchor_values(&flat, &set, 1, 4, &mut back);
        for (a, b) in maps.iter().zip(&back) {
            assert_eq!(a.item(1), b.item(1));
        }
        // anchor 7 of level 0 is cell (0, 1), ratio 1
        assert_eq!(flat[7 * 4 + 2], maps[0].at(1, 4 + 2, 0, 1));
    }
}
