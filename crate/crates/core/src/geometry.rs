//! Box arithmetic: IoU, center/log-size delta encoding and linear soft-NMS.
//!
//! Coordinates are continuous image pixels in corner form with half-open
//! semantics, so `area = (x2 - x1) * (y2 - y1)` with no `+1` correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `dw`/`dh` accepted when promoting anchors, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Axis-aligned box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            score: None,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// `(cx, cy, w, h)`
    pub fn center_form(&self) -> (f64, f64, f64, f64) {
        (
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.x2 - self.x1,
            self.y2 - self.y1,
        )
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidGeometry(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )))
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            score: self.score,
        }
    }

    pub fn same_coords(&self, other: &BBox) -> bool {
        self.x1 == other.x1 && self.y1 == other.y1 && self.x2 == other.x2 && self.y2 == other.y2
    }
}

/// Regression deltas of a target box relative to a reference anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub const ZERO: BoxDeltas = BoxDeltas {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub const fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection area of two boxes, without validation.
#[inline]
pub(crate) fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// IoU of two boxes already known to be valid.
#[inline]
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub fn encode(anchor: &BBox, target: &BBox) -> Result<BoxDeltas> {
    anchor.validate()?;
    if !(target.width() > 0.0 && target.height() > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "target has non-positive size {}x{}",
            target.width(),
            target.height()
        )));
    }
    let (ax, ay, aw, ah) = anchor.center_form();
    let (gx, gy, gw, gh) = target.center_form();
    Ok(BoxDeltas {
        dx: (gx - ax) / aw,
        dy: (gy - ay) / ah,
        dw: (gw / aw).ln(),
        dh: (gh / ah).ln(),
    })
}

/// Inverse of [`encode`]. The result is never clipped here.
pub fn decode(anchor: &BBox, deltas: &BoxDeltas) -> Result<BBox> {
    anchor.validate()?;
    if !deltas.is_finite() {
        return Err(Error::NonFinite(format!("deltas {deltas:?}")));
    }
    let (ax, ay, aw, ah) = anchor.center_form();
    let w = aw * deltas.dw.exp();
    let h = ah * deltas.dh.exp();
    // sizes must stay representable in single precision
    if !(w < f32::MAX as f64) || !(h < f32::MAX as f64) {
        return Err(Error::NonFinite(format!(
            "decoded size overflows for deltas {deltas:?}"
        )));
    }
    Ok(BBox::from_center(ax + deltas.dx * aw, ay + deltas.dy * ah, w, h))
}

/// Soft-NMS with the linear decay kernel.
///
/// Repeatedly selects the highest-scoring surviving box, decays every other
/// survivor overlapping it by more than `iou_threshold` with `s * (1 - iou)`,
/// and drops boxes whose score falls below `score_floor`. Box coordinates are
/// never modified. Boxes without a score are treated as score 0.
pub fn soft_nms_linear(boxes: &[BBox], iou_threshold: f64, score_floor: f64) -> Result<Vec<BBox>> {
    for b in boxes {
        b.validate()?;
        let s = b.score.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidGeometry(format!("score {s} outside [0, 1]")));
        }
    }
    let mut live: Vec<(BBox, f64)> = boxes
        .iter()
        .map(|b| (*b, b.score.unwrap_or(0.0)))
        .filter(|(_, s)| *s >= score_floor)
        .collect();
    let mut kept = Vec::with_capacity(live.len());

    while !live.is_empty() {
        // first index wins ties
        let mut best = 0;
        for i in 1..live.len() {
            if live[i].1 > live[best].1 {
                best = i;
            }
        }
        let (sel, sel_score) = live.remove(best);
        kept.push(sel.with_score(sel_score));
        for entry in live.iter_mut() {
            let overlap = iou_unchecked(&sel, &entry.0);
            if overlap > iou_threshold {
                entry.1 *= 1.0 - overlap;
            }
        }
        live.retain(|(_, s)| *s >= score_floor);
    }
    Ok(kept)
}
