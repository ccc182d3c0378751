//! Training loop and the `train`, `eval`, `stats` and `ablate` commands.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anchors::{gate_negatives, match_anchors, ImbalanceStats, IOU_BIN_EDGES};
use crate::apm::promote_flat;
use crate::detector::{CocoDetection, Detection, Detector, GroundTruth, LossReport};
use crate::error::{Error, Result};
use crate::fam::{OffsetMode, ALIGNED_LEVELS};
use crate::geometry::BBox;
use crate::nn::sgd_step;

use super::augment::augment;
use super::checkpoint::{self, CheckpointMeta};
use super::config::TrainConfig;
use super::data::{resize_sample, to_tensor, Dataset, Sample};
use super::metrics::{coco_thresholds, evaluate_map, MapTable};
use super::plot::bar_chart;
use super::schedule::lr_at;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l_b: f64,
    pub l_r_apm: f64,
    pub l_cls: f64,
    pub l_r_det: f64,
    pub n_apm: usize,
    pub n_d: usize,
    pub det_negatives: usize,
    pub clamped: usize,
}

impl StepLog {
    fn new(step: usize, epoch: usize, lr: f64, r: &LossReport, det_negatives: usize, clamped: usize) -> Self {
        Self {
            step,
            epoch,
            lr,
            total: r.total(),
            l_b: r.l_b * r.apm_norm(),
            l_r_apm: r.l_r_apm * r.apm_norm(),
            l_cls: r.l_cls * r.det_norm(),
            l_r_det: r.l_r_det * r.det_norm(),
            n_apm: r.n_apm,
            n_d: r.n_d,
            det_negatives,
            clamped,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 33)
}

fn check_classes(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.num_classes() != cfg.detector.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("{} configured, dataset has {}", cfg.detector.num_classes, data.num_classes()),
        ));
    }
    if data.samples.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    Ok(())
}

/// Trains a fresh model; `on_step` sees every optimizer step.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_step: impl FnMut(&StepLog, &mut Detector) -> Result<()>,
) -> Result<Detector> {
    cfg.validate()?;
    check_classes(cfg, data)?;
    let size = cfg.detector.backbone.input_size as u32;
    let mut model = Detector::new(cfg.detector.clone(), cfg.seed)?;
    let n = data.samples.len();
    let mut schedule = cfg.schedule.clone();
    schedule.steps_per_epoch = n.div_ceil(cfg.batch_size);
    let limit = cfg.max_steps.unwrap_or(usize::MAX).min(schedule.total_steps());
    let resized: Vec<Sample> = if cfg.augment {
        Vec::new()
    } else {
        data.samples.iter().map(|s| resize_sample(s, size)).collect()
    };
    let mut step = 0;
    'epochs: for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0)));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&data.samples[i], mix(cfg.seed, epoch as u64, i as u64 + 1), size)
                    } else {
                        resized[i].clone()
                    }
                })
                .collect();
            let images = to_tensor(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let targets: Vec<Vec<GroundTruth>> = batch.iter().map(|s| s.gts.clone()).collect();
            let report = model.forward_backward(&images, &targets, cfg.bn_mode)?;
            if !report.loss.total().is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let lr = lr_at(step, &schedule);
            sgd_step(&mut model, lr, cfg.momentum, cfg.weight_decay);
            let log = StepLog::new(step, epoch, lr, &report.loss, report.det_negatives, report.clamped);
            on_step(&log, &mut model)?;
            step += 1;
        }
    }
    Ok(model)
}

/// Runs inference over a dataset; detections are in original image
/// coordinates.
pub fn detect_all(model: &Detector, data: &Dataset) -> Result<Vec<Vec<Detection>>> {
    let size = model.config.backbone.input_size as u32;
    let mut out = Vec::with_capacity(data.samples.len());
    for chunk in data.samples.chunks(8) {
        let resized: Vec<Sample> = chunk.iter().map(|s| resize_sample(s, size)).collect();
        let x = to_tensor(&resized.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        for (dets, s) in model.infer(&x)?.into_iter().zip(chunk) {
            let (sx, sy) = (s.image.width() as f64 / size as f64, s.image.height() as f64 / size as f64);
            out.push(
                dets.into_iter()
                    .map(|d| Detection {
                        bbox: BBox::new(d.bbox.x1 * sx, d.bbox.y1 * sy, d.bbox.x2 * sx, d.bbox.y2 * sy),
                        ..d
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Detector, data: &Dataset) -> Result<(MapTable, Vec<Vec<Detection>>)> {
    let dets = detect_all(model, data)?;
    let gts: Vec<Vec<GroundTruth>> = data.samples.iter().map(|s| s.gts.clone()).collect();
    Ok((evaluate_map(&dets, &gts, data.num_classes(), &coco_thresholds()), dets))
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.4}", v))
}

/// Rendered summary table.
pub fn render_map(table: &MapTable) -> String {
    let cols = [
        ("AP", table.ap),
        ("AP50", table.ap50),
        ("AP75", table.ap75),
        ("APs", table.ap_small),
        ("APm", table.ap_medium),
        ("APl", table.ap_large),
    ];
    let head: Vec<String> = cols.iter().map(|c| format!("{:>8}", c.0)).collect();
    let vals: Vec<String> = cols.iter().map(|c| format!("{:>8}", fmt_ap(c.1))).collect();
    format!("{}\n{}\n", head.join(" "), vals.join(" "))
}

fn write_map_csv(path: &Path, table: &MapTable, class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in [
        ("AP", table.ap),
        ("AP50", table.ap50),
        ("AP75", table.ap75),
        ("APs", table.ap_small),
        ("APm", table.ap_medium),
        ("APl", table.ap_large),
    ] {
        w.write_record([k.to_string(), fmt_ap(v)])?;
    }
    for (t, v) in table.thresholds.iter().zip(&table.per_threshold) {
        w.write_record([format!("AP@{t:.2}"), fmt_ap(*v)])?;
    }
    for (name, v) in class_names.iter().zip(&table.per_class) {
        w.write_record([format!("class:{name}"), fmt_ap(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// `train`: fits a model, writing `loss.csv`, `checkpoint.json` and, with an
/// evaluation set, `eval.csv`.
pub fn run_train(cfg: &TrainConfig, out: &Path) -> Result<Detector> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let size = cfg.detector.backbone.input_size as u32;
    let data = Dataset::open(&cfg.train_data, size)?;
    let mut losses = csv::Writer::from_path(out.join("loss.csv"))?;
    let meta = |step| CheckpointMeta {
        config: cfg.clone(),
        class_names: data.class_names.clone(),
        category_ids: data.category_ids.clone(),
        step,
    };
    let ckpt = out.join("checkpoint.json");
    let mut steps = 0;
    let mut model = train(cfg, &data, |log, model| {
        steps = log.step + 1;
        losses.serialize(log)?;
        if log.step % cfg.log_every == 0 {
            log::info!(
                "step {} epoch {} lr {:.2e} loss {:.4} (Lb {:.4} Lr_apm {:.4} Lcls {:.4} Lr_det {:.4}) pos {} neg {}",
                log.step, log.epoch, log.lr, log.total, log.l_b, log.l_r_apm, log.l_cls, log.l_r_det, log.n_d, log.det_negatives
            );
        }
        if let Some(every) = cfg.checkpoint_every {
            if (log.step + 1) % every == 0 {
                checkpoint::save(&ckpt, model, &meta(log.step + 1))?;
            }
        }
        Ok(())
    })?;
    losses.flush()?;
    checkpoint::save(&ckpt, &mut model, &meta(steps))?;
    if let Some(spec) = &cfg.eval_data {
        let eval_data = Dataset::open(spec, size)?;
        let (table, _) = evaluate(&model, &eval_data)?;
        write_map_csv(&out.join("eval.csv"), &table, &eval_data.class_names)?;
        log::info!("evaluation on {spec}:\n{}", render_map(&table));
    }
    Ok(model)
}

/// `eval`: mAP of a checkpoint on a dataset. Writes `eval.csv` and
/// `detections.json` into `out` when given.
pub fn run_eval(checkpoint_path: &Path, dataset: &str, out: Option<&Path>) -> Result<MapTable> {
    let (model, meta) = checkpoint::load(checkpoint_path)?;
    let data = Dataset::open(dataset, model.config.backbone.input_size as u32)?;
    if data.num_classes() != model.config.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, checkpoint {}",
            data.num_classes(),
            model.config.num_classes
        )));
    }
    let (table, dets) = evaluate(&model, &data)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        write_map_csv(&out.join("eval.csv"), &table, &meta.class_names)?;
        let records: Vec<CocoDetection> = data
            .samples
            .iter()
            .zip(&dets)
            .flat_map(|(s, ds)| ds.iter().map(|d| CocoDetection::new(s.image_id, data.category_ids[d.class], d)))
            .collect();
        std::fs::write(out.join("detections.json"), serde_json::to_string_pretty(&records)?)?;
    }
    Ok(table)
}

/// Anchor statistics before and after promotion.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CensusReport {
    /// Initial anchors under the plain matching rule.
    pub before: ImbalanceStats,
    /// Promoted anchors, matched, without the score gate.
    pub promoted: ImbalanceStats,
    /// Promoted anchors after the score gate; what detection training sees.
    pub after: ImbalanceStats,
    /// Anchors with IoU >= 0.5 to some ground truth, initial and promoted.
    pub high_iou_before: usize,
    pub high_iou_after: usize,
    pub clamped: usize,
    pub images: usize,
}

pub fn census(model: &Detector, data: &Dataset) -> Result<CensusReport> {
    let size = model.config.backbone.input_size as u32;
    let cfg = &model.config;
    let anchors = &model.anchors.boxes;
    let mut rep = CensusReport::default();
    for chunk in data.samples.chunks(8) {
        let resized: Vec<Sample> = chunk.iter().map(|s| resize_sample(s, size)).collect();
        let x = to_tensor(&resized.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let raw = model.eval_raw(&x)?;
        for (n, s) in resized.iter().enumerate() {
            let v = model.head_values(&raw, n)?;
            let scores = v.apm_scores();
            let deltas = if cfg.apm.deltas_active() { v.apm_deltas.clone() } else { vec![0.0; v.apm_deltas.len()] };
            let p = promote_flat(anchors, &deltas, scores.clone())?;
            let gts: Vec<BBox> = s.gts.iter().map(|g| g.bbox).collect();
            let (pos, neg) = (cfg.loss.positive_iou, cfg.loss.negative_iou);
            let m0 = match_anchors(anchors, &gts, pos, neg)?;
            let m1 = match_anchors(&p.boxes, &gts, pos, neg)?;
            let m2 = if cfg.apm.scores_active() {
                gate_negatives(&m1, &scores, cfg.loss.theta)?
            } else {
                m1.clone()
            };
            rep.before.accumulate(&ImbalanceStats::from_match(&m0, anchors, &gts));
            rep.promoted.accumulate(&ImbalanceStats::from_match(&m1, &p.boxes, &gts));
            rep.after.accumulate(&ImbalanceStats::from_match(&m2, &p.boxes, &gts));
            rep.high_iou_before += m0.max_iou.iter().filter(|v| **v >= 0.5).count();
            rep.high_iou_after += m1.max_iou.iter().filter(|v| **v >= 0.5).count();
            rep.clamped += p.clamped;
            rep.images += 1;
        }
    }
    Ok(rep)
}

/// `stats`: writes `stats.csv` and bar charts of the positive-IoU
/// histogram and per-image counts.
pub fn run_stats(checkpoint_path: &Path, dataset: &str, out: &Path) -> Result<CensusReport> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let data = Dataset::open(dataset, model.config.backbone.input_size as u32)?;
    let rep = census(&model, &data)?;
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("stats.csv"))?;
    let mut header = vec![
        "stage".to_string(),
        "positives".into(),
        "negatives".into(),
        "ignored".into(),
        "negatives_per_positive".into(),
        "iou_ge_0.5".into(),
    ];
    for (i, e) in IOU_BIN_EDGES.iter().enumerate() {
        let hi = IOU_BIN_EDGES.get(i + 1).copied().unwrap_or(1.0);
        header.push(format!("iou_{e:.1}_{hi:.1}"));
    }
    w.write_record(&header)?;
    for (stage, s, high) in [
        ("before", &rep.before, rep.high_iou_before),
        ("promoted", &rep.promoted, rep.high_iou_after),
        ("after", &rep.after, rep.high_iou_after),
    ] {
        let mut row = vec![
            stage.to_string(),
            s.positive_count.to_string(),
            s.negative_count.to_string(),
            s.ignored_count.to_string(),
            format!("{:.3}", s.negatives_per_positive()),
            high.to_string(),
        ];
        row.extend(s.iou_histogram.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    let per_image = |v: usize| v as f64 / rep.images.max(1) as f64;
    let hist = |s: &ImbalanceStats| s.iou_histogram.iter().map(|&c| per_image(c)).collect::<Vec<_>>();
    bar_chart(&out.join("iou_histogram.png"), &[hist(&rep.before), hist(&rep.after)])?;
    bar_chart(
        &out.join("positives_negatives.png"),
        &[
            vec![per_image(rep.before.positive_count), per_image(rep.before.negative_count)],
            vec![per_image(rep.after.positive_count), per_image(rep.after.negative_count)],
        ],
    )?;
    Ok(rep)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub name: &'static str,
    pub apm_scoring: bool,
    pub apm_adjustment: bool,
    pub fam: OffsetMode,
}

/// Component toggles without alignment, then every offset mode on the full
/// promotion module.
pub fn ablation_grid() -> Vec<AblationCell> {
    let cell = |name, c, r, fam| AblationCell {
        name,
        apm_scoring: c,
        apm_adjustment: r,
        fam,
    };
    vec![
        cell("baseline", false, false, OffsetMode::None),
        cell("apm_c", true, false, OffsetMode::None),
        cell("apm_r", false, true, OffsetMode::None),
        cell("apm_cr", true, true, OffsetMode::None),
        cell("apm_cr+implicit", true, true, OffsetMode::Implicit),
        cell("apm_cr+explicit-loc", true, true, OffsetMode::ExplicitLoc),
        cell("apm_cr+explicit-shape", true, true, OffsetMode::ExplicitShape),
        cell("apm_cr+explicit-concat", true, true, OffsetMode::ExplicitConcat),
        cell("apm_cr+disentangled", true, true, OffsetMode::Disentangled),
    ]
}

pub fn apply_cell(cfg: &TrainConfig, cell: &AblationCell) -> TrainConfig {
    let mut c = cfg.clone();
    let apm = &mut c.detector.apm;
    apm.enabled = cell.apm_scoring || cell.apm_adjustment;
    apm.scoring = cell.apm_scoring;
    apm.adjustment = cell.apm_adjustment;
    for (l, m) in c.detector.fam_modes.iter_mut().enumerate() {
        *m = if l < ALIGNED_LEVELS { cell.fam } else { OffsetMode::None };
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub apm_c: bool,
    pub apm_r: bool,
    pub fam: String,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub final_loss: f64,
}

/// Trains and evaluates one ablation cell.
pub fn ablate_cell(cfg: &TrainConfig, cell: &AblationCell, train_data: &Dataset, eval_data: &Dataset) -> Result<AblationRow> {
    let c = apply_cell(cfg, cell);
    let mut last = f64::NAN;
    let model = train(&c, train_data, |log, _| {
        last = log.total;
        Ok(())
    })?;
    let (t, _) = evaluate(&model, eval_data)?;
    Ok(AblationRow {
        name: cell.name.to_string(),
        apm_c: cell.apm_scoring,
        apm_r: cell.apm_adjustment,
        fam: cell.fam.to_string(),
        ap: t.ap,
        ap50: t.ap50,
        ap75: t.ap75,
        ap_small: t.ap_small,
        ap_medium: t.ap_medium,
        ap_large: t.ap_large,
        final_loss: last,
    })
}

/// `ablate`: one row per grid cell in `ablation.csv`. Evaluates on
/// `data.eval`, falling back to the training set.
pub fn run_ablate(cfg: &TrainConfig, out: &Path) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out)?;
    let size = cfg.detector.backbone.input_size as u32;
    let train_data = Dataset::open(&cfg.train_data, size)?;
    let eval_data = match &cfg.eval_data {
        Some(spec) => Dataset::open(spec, size)?,
        None => train_data.clone(),
    };
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    let mut rows = Vec::new();
    for cell in ablation_grid() {
        log::info!("ablation cell {}", cell.name);
        let row = ablate_cell(cfg, &cell, &train_data, &eval_data)?;
        w.serialize(&row)?;
        w.flush()?;
        rows.push(row);
    }
    Ok(rows)
}
