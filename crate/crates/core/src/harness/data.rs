//! Samples, the synthetic shapes generator and COCO-format ingestion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::detector::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nn::Tensor;

/// An RGB image in `[0, 1]` with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Rgb32FImage,
    pub gts: Vec<GroundTruth>,
    pub image_id: u64,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        for g in &self.gts {
            g.bbox.validate()?;
            let b = g.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::Dataset(format!("box {b:?} leaves the {w}x{h} image")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// External category id of each class, for result records.
    pub category_ids: Vec<u64>,
}

impl Dataset {
    /// Opens `synth:<n>:<seed>[:<size>]` or a COCO annotation file.
    pub fn open(spec: &str, default_size: u32) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("synth:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let num = |i: usize, what: &str| -> Result<u64> {
                parts
                    .get(i)
                    .ok_or_else(|| Error::Dataset(format!("{spec}: missing {what}")))?
                    .parse()
                    .map_err(|_| Error::Dataset(format!("{spec}: bad {what}")))
            };
            let n = num(0, "image count")? as usize;
            let seed = num(1, "seed")?;
            let size = if parts.len() > 2 { num(2, "size")? as u32 } else { default_size };
            return synth_dataset(n, seed, size);
        }
        load_coco(Path::new(spec), None)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];

fn inside(class: usize, b: &BBox, x: f64, y: f64) -> bool {
    let (cx, cy, w, h) = b.center_form();
    match class {
        0 => {
            let (dx, dy) = ((x - cx) / (w / 2.0), (y - cy) / (h / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        1 => x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2,
        _ => {
            // apex at the top centre, base along the bottom edge
            let t = (y - b.y1) / h;
            (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * w / 2.0
        }
    }
}

fn synth_background(rng: &mut ChaCha8Rng, size: u32) -> Rgb32FImage {
    let base: [f32; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let grad: [f32; 3] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let fx: f32 = rng.gen_range(0.02..0.15);
    let fy: f32 = rng.gen_range(0.02..0.15);
    let amp: f32 = rng.gen_range(0.02..0.08);
    let mut img = Rgb32FImage::new(size, size);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let t = (x + y) as f32 / (2 * size) as f32;
        let wave = amp * ((x as f32 * fx).sin() * (y as f32 * fy).cos());
        for c in 0..3 {
            let noise: f32 = rng.gen_range(-0.05..0.05);
            p.0[c] = (base[c] + grad[c] * t + wave + noise).clamp(0.0, 1.0);
        }
    }
    img
}

/// One synthetic image: 1 to 5 shapes on a textured background.
pub fn synth_sample(seed: u64, index: u64, size: u32) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut image = synth_background(&mut rng, size);
    let s = size as f64;
    let count = rng.gen_range(1..=5);
    let mut gts: Vec<GroundTruth> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..20 {
            let class = rng.gen_range(0..SHAPE_CLASSES.len());
            // log-uniform side length between 8% and 60% of the image
            let side = s * (0.08f64.ln() + rng.gen::<f64>() * (0.6f64 / 0.08).ln()).exp();
            let aspect: f64 = rng.gen_range(0.75..1.33);
            let (w, h) = ((side * aspect.sqrt()).round().max(4.0), (side / aspect.sqrt()).round().max(4.0));
            let x1 = rng.gen_range(0.0..=(s - w)).floor();
            let y1 = rng.gen_range(0.0..=(s - h)).floor();
            let b = BBox::new(x1, y1, x1 + w, y1 + h);
            if gts.iter().any(|g| iou(&g.bbox, &b).unwrap_or(1.0) > 0.2) {
                continue;
            }
            let color = loop {
                let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
                let spread = c.iter().cloned().fold(0.0, f32::max) - c.iter().cloned().fold(1.0, f32::min);
                if spread > 0.4 {
                    break c;
                }
            };
            for y in b.y1 as u32..b.y2 as u32 {
                for x in b.x1 as u32..b.x2 as u32 {
                    if inside(class, &b, x as f64 + 0.5, y as f64 + 0.5) {
                        image.put_pixel(x, y, Rgb(color));
                    }
                }
            }
            gts.push(GroundTruth { bbox: b, class });
            break;
        }
    }
    Sample {
        image,
        gts,
        image_id: index,
    }
}

/// Deterministic synthetic shapes dataset with three classes.
pub fn synth_dataset(n: usize, seed: u64, size: u32) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Dataset("need at least one image".into()));
    }
    if size < 32 {
        return Err(Error::Dataset(format!("image size {size} is too small")));
    }
    Ok(Dataset {
        samples: (0..n as u64).map(|i| synth_sample(seed, i, size)).collect(),
        class_names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        category_ids: (1..=SHAPE_CLASSES.len() as u64).collect(),
    })
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Reads a COCO instances file. Images are resolved against `image_dir`,
/// defaulting to the annotation file's directory. Crowd regions and
/// degenerate boxes are skipped; images without boxes are dropped.
pub fn load_coco(annotations: &Path, image_dir: Option<&Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(annotations)
        .map_err(|e| Error::Dataset(format!("{}: {e}", annotations.display())))?;
    let coco: CocoFile = serde_json::from_str(&text)?;
    let dir: PathBuf = image_dir
        .map(Path::to_path_buf)
        .or_else(|| annotations.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let mut cats: Vec<&CocoCategory> = coco.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let class_of: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut per_image: BTreeMap<u64, Vec<GroundTruth>> = BTreeMap::new();
    for a in &coco.annotations {
        let class = *class_of
            .get(&a.category_id)
            .ok_or_else(|| Error::Dataset(format!("unknown category {}", a.category_id)))?;
        let [x, y, w, h] = a.bbox;
        if a.iscrowd != 0 || w <= 0.0 || h <= 0.0 {
            continue;
        }
        per_image.entry(a.image_id).or_default().push(GroundTruth {
            bbox: BBox::new(x, y, x + w, y + h),
            class,
        });
    }
    let mut samples = Vec::new();
    for im in &coco.images {
        let Some(gts) = per_image.remove(&im.id) else { continue };
        let path = dir.join(&im.file_name);
        let image = image::open(&path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
            .to_rgb32f();
        let (w, h) = (image.width() as f64, image.height() as f64);
        let gts = gts
            .into_iter()
            .map(|g| GroundTruth { bbox: g.bbox.clip(w, h), ..g })
            .filter(|g| g.bbox.width() > 0.0 && g.bbox.height() > 0.0)
            .collect();
        samples.push(Sample {
            image,
            gts,
            image_id: im.id,
        });
    }
    Ok(Dataset {
        samples,
        class_names: cats.iter().map(|c| c.name.clone()).collect(),
        category_ids: cats.iter().map(|c| c.id).collect(),
    })
}

/// Resizes to `size x size`, scaling boxes accordingly.
pub fn resize_sample(sample: &Sample, size: u32) -> Sample {
    let (w, h) = sample.image.dimensions();
    if w == size && h == size {
        return sample.clone();
    }
    let image = image::imageops::resize(&sample.image, size, size, image::imageops::FilterType::Triangle);
    let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
    let gts = sample
        .gts
        .iter()
        .map(|g| GroundTruth {
            bbox: BBox::new(g.bbox.x1 * sx, g.bbox.y1 * sy, g.bbox.x2 * sx, g.bbox.y2 * sy),
            class: g.class,
        })
        .collect();
    Sample {
        image,
        gts,
        image_id: sample.image_id,
    }
}

/// Stacks equally sized images into an `N x 3 x H x W` batch centred on 0.
pub fn to_tensor(images: &[&Rgb32FImage]) -> Result<Tensor> {
    let (w, h) = images
        .first()
        .map(|i| i.dimensions())
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(images.len(), 3, h, w);
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        let item = t.item_mut(n);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                item[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 - 0.5;
            }
        }
    }
    Ok(t)
}
