//! Photometric-free SSD-style augmentation: flip, expand, crop, resize.

use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::GroundTruth;
use crate::geometry::{iou_unchecked, BBox};

use super::data::{resize_sample, Sample};

const CROP_OPTIONS: [Option<f64>; 7] = [
    None,
    Some(0.1),
    Some(0.3),
    Some(0.5),
    Some(0.7),
    Some(0.9),
    Some(f64::NEG_INFINITY),
];
const CROP_PICKS: usize = 20;
const CROP_TRIALS: usize = 50;

/// Mirrors the image horizontally.
pub fn flip(s: &Sample) -> Sample {
    let w = s.image.width() as f64;
    Sample {
        image: image::imageops::flip_horizontal(&s.image),
        gts: s
            .gts
            .iter()
            .map(|g| GroundTruth {
                bbox: BBox::new(w - g.bbox.x2, g.bbox.y1, w - g.bbox.x1, g.bbox.y2),
                class: g.class,
            })
            .collect(),
        image_id: s.image_id,
    }
}

fn mean_color(img: &Rgb32FImage) -> Rgb<f32> {
    let mut sum = [0f64; 3];
    for p in img.pixels() {
        for c in 0..3 {
            sum[c] += p.0[c] as f64;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    Rgb([(sum[0] / n) as f32, (sum[1] / n) as f32, (sum[2] / n) as f32])
}

/// Places the image on a mean-filled canvas `ratio` times larger, with its
/// top-left corner at `(left, top)`.
pub fn expand(s: &Sample, ratio: f64, left: u32, top: u32) -> Sample {
    let (w, h) = s.image.dimensions();
    let cw = ((w as f64 * ratio) as u32).max(w + left);
    let ch = ((h as f64 * ratio) as u32).max(h + top);
    let mut canvas = Rgb32FImage::from_pixel(cw, ch, mean_color(&s.image));
    image::imageops::replace(&mut canvas, &s.image, left as i64, top as i64);
    let (dx, dy) = (left as f64, top as f64);
    Sample {
        image: canvas,
        gts: s
            .gts
            .iter()
            .map(|g| GroundTruth {
                bbox: BBox::new(g.bbox.x1 + dx, g.bbox.y1 + dy, g.bbox.x2 + dx, g.bbox.y2 + dy),
                class: g.class,
            })
            .collect(),
        image_id: s.image_id,
    }
}

/// IoU-constrained random patch. Boxes whose centres fall inside are kept
/// and clipped. `None` when no valid patch was found.
pub fn random_crop(s: &Sample, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let (w, h) = s.image.dimensions();
    let (wf, hf) = (w as f64, h as f64);
    for _ in 0..CROP_PICKS {
        let Some(min_iou) = CROP_OPTIONS[rng.gen_range(0..CROP_OPTIONS.len())] else {
            return Some(s.clone());
        };
        for _ in 0..CROP_TRIALS {
            let pw = (rng.gen_range(0.3..=1.0) * wf).floor().max(1.0);
            let ph = (rng.gen_range(0.3..=1.0) * hf).floor().max(1.0);
            if ph / pw < 0.5 || ph / pw > 2.0 {
                continue;
            }
            let left = rng.gen_range(0.0..=(wf - pw)).floor();
            let top = rng.gen_range(0.0..=(hf - ph)).floor();
            let patch = BBox::new(left, top, left + pw, top + ph);
            if s.gts.iter().any(|g| iou_unchecked(&g.bbox, &patch) < min_iou) {
                continue;
            }
            let gts: Vec<GroundTruth> = s
                .gts
                .iter()
                .filter(|g| {
                    let (cx, cy, _, _) = g.bbox.center_form();
                    cx > patch.x1 && cx < patch.x2 && cy > patch.y1 && cy < patch.y2
                })
                .map(|g| {
                    let b = g.bbox;
                    GroundTruth {
                        bbox: BBox::new(
                            b.x1.max(patch.x1) - left,
                            b.y1.max(patch.y1) - top,
                            b.x2.min(patch.x2) - left,
                            b.y2.min(patch.y2) - top,
                        ),
                        class: g.class,
                    }
                })
                .collect();
            if gts.is_empty() {
                continue;
            }
            let image = image::imageops::crop_imm(&s.image, left as u32, top as u32, pw as u32, ph as u32).to_image();
            return Some(Sample {
                image,
                gts,
                image_id: s.image_id,
            });
        }
    }
    None
}

fn finish(s: Sample, size: u32) -> Sample {
    let mut out = resize_sample(&s, size);
    let lim = size as f64;
    out.gts = out
        .gts
        .into_iter()
        .map(|g| GroundTruth {
            bbox: g.bbox.clip(lim, lim),
            class: g.class,
        })
        .filter(|g| g.bbox.width() >= 1.0 && g.bbox.height() >= 1.0)
        .collect();
    out
}

/// Randomized pipeline seeded by `seed`: expansion (p = 0.5, up to 4x),
/// SSD crop, horizontal flip (p = 0.5) and resize to `size`.
pub fn augment(sample: &Sample, seed: u64, size: u32) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_flip = rng.gen_bool(0.5);
    let mut s = sample.clone();
    if rng.gen_bool(0.5) {
        let ratio = rng.gen_range(1.0..4.0);
        let (w, h) = s.image.dimensions();
        let left = rng.gen_range(0.0..=(w as f64 * (ratio - 1.0))) as u32;
        let top = rng.gen_range(0.0..=(h as f64 * (ratio - 1.0))) as u32;
        s = expand(&s, ratio, left, top);
    }
    let fallback = || {
        let base = if do_flip { flip(sample) } else { sample.clone() };
        finish(base, size)
    };
    let Some(mut s) = random_crop(&s, &mut rng) else {
        return fallback();
    };
    if do_flip {
        s = flip(&s);
    }
    let out = finish(s, size);
    if out.gts.is_empty() {
        fallback()
    } else {
        out
    }
}
