//! Independent scalar reference implementations shared by the integration
//! tests and the acceptance runner.

#![allow(dead_code)]

use promodet::apm::ApmConfig;
use promodet::detector::{GroundTruth, HeadValues, LossConfig};
use promodet::geometry::BBox;
use rand::Rng;

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 0 negative, 1 positive, 2 ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct RefMatch {
    pub labels: Vec<u8>,
    pub matched: Vec<Option<usize>>,
}

pub fn ref_match(anchors: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> RefMatch {
    let n = anchors.len();
    let mut labels = vec![0u8; n];
    let mut matched = vec![None; n];
    let mut forced = vec![false; n];
    for (g, gt) in gts.iter().enumerate() {
        let mut best_a = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for (a, anchor) in anchors.iter().enumerate() {
            let v = ref_iou(anchor, gt);
            if !forced[a] && v > best_v {
                best_a = a;
                best_v = v;
            }
        }
        if best_a != usize::MAX {
            forced[best_a] = true;
            labels[best_a] = 1;
            matched[best_a] = Some(g);
        }
    }
    for a in 0..n {
        if forced[a] || gts.is_empty() {
            continue;
        }
        let ious: Vec<f64> = gts.iter().map(|g| ref_iou(&anchors[a], g)).collect();
        let mut arg = 0;
        for g in 1..ious.len() {
            if ious[g] > ious[arg] {
                arg = g;
            }
        }
        if ious[arg] >= pos {
            labels[a] = 1;
            matched[a] = Some(arg);
        } else if ious[arg] >= neg {
            labels[a] = 2;
        }
    }
    RefMatch { labels, matched }
}

/// Linear soft-NMS over `(box, score)`; returns kept `(index, score)` in
/// selection order.
pub fn ref_soft_nms(boxes: &[BBox], scores: &[f64], nt: f64, floor: f64) -> Vec<(usize, f64)> {
    let mut s = scores.to_vec();
    let mut alive: Vec<bool> = s.iter().map(|v| *v >= floor).collect();
    let mut out = Vec::new();
    loop {
        let mut pick = None;
        for i in 0..s.len() {
            if alive[i] && pick.map_or(true, |p: usize| s[i] > s[p]) {
                pick = Some(i);
            }
        }
        let Some(p) = pick else { break };
        alive[p] = false;
        out.push((p, s[p]));
        for i in 0..s.len() {
            if alive[i] {
                let o = ref_iou(&boxes[p], &boxes[i]);
                if o > nt {
                    s[i] *= 1.0 - o;
                }
                if s[i] < floor {
                    alive[i] = false;
                }
            }
        }
    }
    out
}

/// Same-padded 3x3 convolution, single image, CHW layout.
pub fn ref_conv3x3(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let oc = bias.len();
    let mut y = vec![0.0; oc * h * w];
    for o in 0..oc {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = bias[o];
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = yy as i64 + ky as i64 - 1;
                            let sx = xx as i64 + kx as i64 - 1;
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            acc += weight[((o * c + ci) * 3 + ky) * 3 + kx]
                                * x[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                y[(o * h + yy) * w + xx] = acc;
            }
        }
    }
    y
}

fn ln_sigmoid(z: f64) -> f64 {
    // log(1 / (1 + e^-z)) written two ways for stability
    if z >= 0.0 {
        -(1.0 + (-z).exp()).ln()
    } else {
        z - (1.0 + z.exp()).ln()
    }
}

fn sl1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn ref_encode(a: &BBox, g: &BBox) -> [f64; 4] {
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let (gw, gh) = (g.x2 - g.x1, g.y2 - g.y1);
    [
        ((g.x1 + g.x2) / 2.0 - (a.x1 + a.x2) / 2.0) / aw,
        ((g.y1 + g.y2) / 2.0 - (a.y1 + a.y2) / 2.0) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

fn ref_decode(a: &BBox, d: &[f64]) -> BBox {
    if d.iter().all(|v| *v == 0.0) {
        return BBox::new(a.x1, a.y1, a.x2, a.y2);
    }
    let lim = (1000.0f64 / 16.0).ln();
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let cx = (a.x1 + a.x2) / 2.0 + d[0] * aw;
    let cy = (a.y1 + a.y2) / 2.0 + d[1] * ah;
    let w = (aw * d[2].clamp(-lim, lim).exp()).max(1.0);
    let h = (ah * d[3].clamp(-lim, lim).exp()).max(1.0);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Scalar-loop total loss of one image, normalized by its own positive
/// counts. OHEM and the APM negative cap are not modelled.
pub fn ref_total_loss(v: &HeadValues, anchors: &[BBox], gts: &[GroundTruth], apm: &ApmConfig, cfg: &LossConfig) -> f64 {
    let k = v.num_classes + 1;
    let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let scoring = apm.enabled && apm.scoring;
    let adjusting = apm.enabled && apm.adjustment;
    let score = |i: usize| match (&v.apm_logits, scoring) {
        (Some(l), true) => 1.0 / (1.0 + (-l[i]).exp()),
        _ => 1.0,
    };
    let first = ref_match(anchors, &boxes, cfg.positive_iou, cfg.negative_iou);
    let promoted: Vec<BBox> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if adjusting {
                ref_decode(a, &v.apm_deltas[4 * i..4 * i + 4])
            } else {
                *a
            }
        })
        .collect();
    let mut second = ref_match(&promoted, &boxes, cfg.positive_iou, cfg.negative_iou);
    if scoring {
        for i in 0..anchors.len() {
            if second.labels[i] == 0 && score(i) < cfg.theta {
                second.labels[i] = 2;
            }
        }
    }

    let (mut lb, mut lra, mut lc, mut lrd) = (0.0, 0.0, 0.0, 0.0);
    let mut n_apm = 0usize;
    let mut n_d = 0usize;
    for i in 0..anchors.len() {
        if apm.enabled && first.labels[i] == 1 {
            n_apm += 1;
        }
        if scoring {
            let z = v.apm_logits.as_ref().unwrap()[i];
            match first.labels[i] {
                1 => lb -= ln_sigmoid(z),
                0 => lb -= ln_sigmoid(-z),
                _ => {}
            }
        }
        if adjusting && first.labels[i] == 1 {
            let t = ref_encode(&anchors[i], &boxes[first.matched[i].unwrap()]);
            for j in 0..4 {
                lra += sl1(v.apm_deltas[4 * i + j] - t[j]);
            }
        }
        let z = &v.cls_logits[k * i..k * (i + 1)];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        match second.labels[i] {
            1 => {
                n_d += 1;
                let g = second.matched[i].unwrap();
                lc += lse - z[gts[g].class + 1];
                let t = ref_encode(&promoted[i], &boxes[g]);
                for j in 0..4 {
                    lrd += sl1(v.box_deltas[4 * i + j] - t[j]);
                }
            }
            0 => lc += lse - z[0],
            _ => {}
        }
    }
    (lb + lra) / n_apm.max(1) as f64 + (lc + lrd) / n_d.max(1) as f64
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let w = rng.gen_range(2.0..extent / 2.0);
    let h = rng.gen_range(2.0..extent / 2.0);
    let x = rng.gen_range(0.0..extent - w);
    let y = rng.gen_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

/// Largest elementwise relative error between two gradient vectors, with
/// an absolute floor for entries that are both essentially zero.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Up to 500 anchors on jittered grids plus up to 10 ground truths; some
/// ground truths duplicate an anchor so forced and tied matches occur.
pub fn match_instance<R: Rng>(rng: &mut R) -> (Vec<BBox>, Vec<BBox>) {
    let extent = 100.0;
    let n = rng.gen_range(1..=500);
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let (cx, cy) = (rng.gen_range(0..10) as f64 * 10.0 + 5.0, rng.gen_range(0..10) as f64 * 10.0 + 5.0);
        let s = [8.0, 16.0, 32.0][rng.gen_range(0..3)];
        let r: f64 = [1.0, 2.0, 0.5][rng.gen_range(0..3)];
        let (w, h) = (s * r.sqrt(), s / r.sqrt());
        anchors.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
    }
    let g = rng.gen_range(0..=10);
    let gts = (0..g)
        .map(|_| {
            if rng.gen_bool(0.2) {
                anchors[rng.gen_range(0..n)]
            } else {
                random_box(rng, extent)
            }
        })
        .collect();
    (anchors, gts)
}

/// Up to 50 scored boxes; clusters make suppression matter.
pub fn nms_instance<R: Rng>(rng: &mut R) -> Vec<BBox> {
    let n = rng.gen_range(0..=50);
    let centers: Vec<(f64, f64)> = (0..rng.gen_range(1..5))
        .map(|_| (rng.gen_range(20.0..180.0), rng.gen_range(20.0..180.0)))
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.gen_range(0..centers.len())];
            let (w, h) = (rng.gen_range(10.0..60.0), rng.gen_range(10.0..60.0));
            let (jx, jy) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            let score = if rng.gen_bool(0.1) { 0.5 } else { rng.gen_range(0.0..1.0) };
            BBox::new(cx + jx - w / 2.0, cy + jy - h / 2.0, cx + jx + w / 2.0, cy + jy + h / 2.0).with_score(score)
        })
        .collect()
}

/// A small loss instance: a 4x4 grid of three anchor shapes over a 64 px
/// image, 1-3 objects and random head outputs.
pub fn loss_instance<R: Rng>(rng: &mut R, num_classes: usize) -> (HeadValues, Vec<BBox>, Vec<GroundTruth>) {
    let mut anchors = Vec::new();
    for gy in 0..4 {
        for gx in 0..4 {
            let (cx, cy) = (gx as f64 * 16.0 + 8.0, gy as f64 * 16.0 + 8.0);
            for (w, h) in [(16.0, 16.0), (24.0, 12.0), (12.0, 24.0)] {
                anchors.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
            }
        }
    }
    let gts: Vec<GroundTruth> = (0..rng.gen_range(1..=3))
        .map(|_| GroundTruth {
            bbox: random_box(rng, 64.0),
            class: rng.gen_range(0..num_classes),
        })
        .collect();
    let a = anchors.len();
    let mut draw = |len: usize, scale: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-scale..scale)).collect() };
    let values = HeadValues {
        num_classes,
        apm_logits: Some(draw(a, 6.0)),
        apm_deltas: draw(4 * a, 0.4),
        cls_logits: draw((num_classes + 1) * a, 3.0),
        box_deltas: draw(4 * a, 1.5),
    };
    (values, anchors, gts)
}
