//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! model.input_size = 384
//! fam.level1.mode = disentangled
//! train.decay_epochs = 100, 140
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::apm::ApmConfig;
use crate::backbone::{BackboneConfig, EncoderKind, PYRAMID_LEVELS};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::fam::OffsetMode;
use crate::nn::Mode;

use super::schedule::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Accepted for compatibility; training is single-threaded and always
    /// reproducible from `seed`.
    pub deterministic: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub bn_mode: Mode,
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
    /// Dataset spec: `synth:<n>:<seed>` or a COCO annotation file.
    pub train_data: String,
    pub eval_data: Option<String>,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            schedule: Schedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            seed: 0,
            deterministic: true,
            max_steps: None,
            augment: true,
            bn_mode: Mode::Train,
            log_every: 10,
            checkpoint_every: None,
            train_data: "synth:200:0".into(),
            eval_data: None,
            out_dir: "runs/default".into(),
        }
    }
}

fn bad(field: &str, value: &str, what: &str) -> Error {
    Error::config(field, format!("cannot parse {value:?} as {what}"))
}

fn parse<T: FromStr>(field: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(field, value, what))
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(field, value, "a boolean")),
    }
}

fn parse_opt<T: FromStr>(field: &str, value: &str, what: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(field, value, what).map(Some)
    }
}

fn parse_list<T: FromStr>(field: &str, value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse(field, v.trim(), what))
        .collect()
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

fn level_key(key: &str) -> Option<usize> {
    let rest = key.strip_prefix("fam.level")?.strip_suffix(".mode")?;
    let l: usize = rest.parse().ok()?;
    (1..=PYRAMID_LEVELS).contains(&l).then_some(l - 1)
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.detector;
        let b = &mut d.backbone;
        let s = &mut self.schedule;
        match key {
            "model.input_size" => b.input_size = parse(key, value, "an integer")?,
            "model.encoder" => b.encoder_kind = value.parse::<EncoderKind>()?,
            "model.encoder_widths" => {
                let v: Vec<usize> = parse_list(key, value, "integers")?;
                b.encoder_widths = v
                    .try_into()
                    .map_err(|_| Error::config(key, "expected five widths"))?;
            }
            "model.decoder_channels" => b.decoder_channels = parse(key, value, "an integer")?,
            "model.num_classes" => d.num_classes = parse(key, value, "an integer")?,
            "apm.enabled" => d.apm.enabled = parse_bool(key, value)?,
            "apm.scoring" => d.apm.scoring = parse_bool(key, value)?,
            "apm.adjustment" => d.apm.adjustment = parse_bool(key, value)?,
            "apm.head_depth" => d.apm.head_depth = parse(key, value, "an integer")?,
            "apm.score_prior" => d.apm.score_prior = parse(key, value, "a number")?,
            "apm.negative_cap" => d.loss.apm_negative_cap = parse_opt(key, value, "an integer")?,
            "fam.detach_adjustment" => d.detach_adjustment = parse_bool(key, value)?,
            "match.positive_iou" => d.loss.positive_iou = parse(key, value, "a number")?,
            "match.negative_iou" => d.loss.negative_iou = parse(key, value, "a number")?,
            "gate.theta" => {
                let t = parse(key, value, "a number")?;
                d.loss.theta = t;
                d.inference.theta = t;
            }
            "loss.ohem" => d.loss.ohem = parse_bool(key, value)?,
            "loss.ohem_ratio" => d.loss.ohem_ratio = parse(key, value, "an integer")?,
            "infer.confidence" => d.inference.confidence = parse(key, value, "a number")?,
            "infer.nms_iou" => d.inference.nms_iou = parse(key, value, "a number")?,
            "infer.nms_sigma" => d.inference.nms_sigma = parse(key, value, "a number")?,
            "infer.top_k" => d.inference.top_k = parse(key, value, "an integer")?,
            "train.lr_floor" => s.lr_floor = parse(key, value, "a number")?,
            "train.lr_peak" => s.lr_peak = parse(key, value, "a number")?,
            "train.warmup_epochs" => s.warmup_epochs = parse(key, value, "an integer")?,
            "train.decay_epochs" => s.decay_epochs = parse_list(key, value, "integers")?,
            "train.decay_factor" => s.decay_factor = parse(key, value, "a number")?,
            "train.epochs" => s.epochs = parse(key, value, "an integer")?,
            "train.momentum" => self.momentum = parse(key, value, "a number")?,
            "train.weight_decay" => self.weight_decay = parse(key, value, "a number")?,
            "train.batch_size" => self.batch_size = parse(key, value, "an integer")?,
            "train.seed" => self.seed = parse(key, value, "an integer")?,
            "train.deterministic" => self.deterministic = parse_bool(key, value)?,
            "train.max_steps" => self.max_steps = parse_opt(key, value, "an integer")?,
            "train.augment" => self.augment = parse_bool(key, value)?,
            "train.bn_mode" => {
                self.bn_mode = match value {
                    "train" => Mode::Train,
                    "frozen" => Mode::Frozen,
                    _ => return Err(bad(key, value, "train or frozen")),
                }
            }
            "train.log_every" => self.log_every = parse(key, value, "an integer")?,
            "train.checkpoint_every" => self.checkpoint_every = parse_opt(key, value, "an integer")?,
            "data.train" => self.train_data = value.to_string(),
            "data.eval" => self.eval_data = (value != "none").then(|| value.to_string()),
            "out.dir" => self.out_dir = value.to_string(),
            _ => match level_key(key) {
                Some(l) => d.fam_modes[l] = value.parse::<OffsetMode>().map_err(|_| bad(key, value, "an offset mode"))?,
                None => return Err(Error::config(key, "unknown key")),
            },
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.detector;
        let b = &d.backbone;
        let s = &self.schedule;
        let kind = match b.encoder_kind {
            EncoderKind::Tiny => "tiny",
        };
        let mut e: Vec<(String, String)> = vec![
            ("model.input_size".into(), b.input_size.to_string()),
            ("model.encoder".into(), kind.into()),
            ("model.encoder_widths".into(), join_list(&b.encoder_widths)),
            ("model.decoder_channels".into(), b.decoder_channels.to_string()),
            ("model.num_classes".into(), d.num_classes.to_string()),
            ("apm.enabled".into(), d.apm.enabled.to_string()),
            ("apm.scoring".into(), d.apm.scoring.to_string()),
            ("apm.adjustment".into(), d.apm.adjustment.to_string()),
            ("apm.head_depth".into(), d.apm.head_depth.to_string()),
            ("apm.score_prior".into(), d.apm.score_prior.to_string()),
            ("apm.negative_cap".into(), opt(&d.loss.apm_negative_cap)),
        ];
        for (l, m) in d.fam_modes.iter().enumerate() {
            e.push((format!("fam.level{}.mode", l + 1), m.to_string()));
        }
        e.extend([
            ("fam.detach_adjustment".into(), d.detach_adjustment.to_string()),
            ("match.positive_iou".into(), d.loss.positive_iou.to_string()),
            ("match.negative_iou".into(), d.loss.negative_iou.to_string()),
            ("gate.theta".into(), d.loss.theta.to_string()),
            ("loss.ohem".into(), d.loss.ohem.to_string()),
            ("loss.ohem_ratio".into(), d.loss.ohem_ratio.to_string()),
            ("infer.confidence".into(), d.inference.confidence.to_string()),
            ("infer.nms_iou".into(), d.inference.nms_iou.to_string()),
            ("infer.nms_sigma".into(), d.inference.nms_sigma.to_string()),
            ("infer.top_k".into(), d.inference.top_k.to_string()),
            ("train.lr_floor".into(), s.lr_floor.to_string()),
            ("train.lr_peak".into(), s.lr_peak.to_string()),
            ("train.warmup_epochs".into(), s.warmup_epochs.to_string()),
            ("train.decay_epochs".into(), join_list(&s.decay_epochs)),
            ("train.decay_factor".into(), s.decay_factor.to_string()),
            ("train.epochs".into(), s.epochs.to_string()),
            ("train.momentum".into(), self.momentum.to_string()),
            ("train.weight_decay".into(), self.weight_decay.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.deterministic".into(), self.deterministic.to_string()),
            ("train.max_steps".into(), opt(&self.max_steps)),
            ("train.augment".into(), self.augment.to_string()),
            (
                "train.bn_mode".into(),
                match self.bn_mode {
                    Mode::Train => "train",
                    Mode::Frozen => "frozen",
                }
                .into(),
            ),
            ("train.log_every".into(), self.log_every.to_string()),
            ("train.checkpoint_every".into(), opt(&self.checkpoint_every)),
            ("data.train".into(), self.train_data.clone()),
            ("data.eval".into(), opt(&self.eval_data)),
            ("out.dir".into(), self.out_dir.clone()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses config text over the defaults. Errors name the offending key
    /// and line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", i + 1), format!("expected `key = value`, got {line:?}"))
            })?;
            let key = key.trim();
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config { field, message } => Error::Config {
                    field,
                    message: format!("{message} (line {})", i + 1),
                },
                other => Error::config(key, format!("{other} (line {})", i + 1)),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        let mut s = self.schedule.clone();
        s.steps_per_epoch = 1;
        s.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be positive"));
        }
        Ok(())
    }

    /// A small configuration that trains in minutes on one core.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.detector.backbone = BackboneConfig {
            input_size: 128,
            encoder_widths: [8, 16, 32, 32, 32],
            decoder_channels: 32,
            ..BackboneConfig::default()
        };
        cfg.detector.apm = ApmConfig::default();
        cfg.schedule.lr_peak = 5e-3;
        cfg.bn_mode = Mode::Frozen;
        cfg.out_dir = "runs/toy".into();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
        let toy = TrainConfig::toy();
        assert_eq!(TrainConfig::parse(&toy.to_text()).unwrap(), toy);
    }

    #[test]
    fn parses_overrides() {
        let text = "# comment\nmodel.input_size = 512\n\nfam.level2.mode = implicit  # inline\ntrain.decay_epochs = 50, 70\ntrain.epochs = 80\napm.negative_cap = 100\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.detector.backbone.input_size, 512);
        assert_eq!(cfg.detector.fam_modes[1], OffsetMode::Implicit);
        assert_eq!(cfg.schedule.decay_epochs, vec![50, 70]);
        assert_eq!(cfg.detector.loss.apm_negative_cap, Some(100));
    }

    #[test]
    fn errors_name_the_field() {
        let err = TrainConfig::parse("train.momentum = fast\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train.momentum"), "{err}");
        let err = TrainConfig::parse("model.depth = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "model.depth"));
        let err = TrainConfig::parse("fam.level5.mode = disentangled\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let err = TrainConfig::parse("just words\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "line 1"));
        let err = TrainConfig::parse("model.encoder = vgg16-reduced\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let err = TrainConfig::parse("apm.scoring = false\napm.adjustment = false\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }
}
