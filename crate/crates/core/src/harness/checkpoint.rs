//! JSON checkpoints holding the configuration and every named tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::nn::Visit;

use super::config::TrainConfig;

const FORMAT: &str = "promodet-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: String,
    class_names: Vec<String>,
    category_ids: Vec<u64>,
    step: usize,
    tensors: BTreeMap<String, StoredTensor>,
}

/// Everything but the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub category_ids: Vec<u64>,
    pub step: usize,
}

pub fn save(path: &Path, model: &mut Detector, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut bad = None;
    model.visit("", &mut |k, p| {
        if p.value.iter().any(|v| !v.is_finite()) {
            bad.get_or_insert_with(|| k.to_string());
        }
        tensors.insert(
            k.to_string(),
            StoredTensor {
                shape: p.shape.clone(),
                data: p.value.clone(),
            },
        );
    });
    if let Some(k) = bad {
        return Err(Error::NonFinite(format!("parameter {k}")));
    }
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: meta.config.to_text(),
        class_names: meta.class_names.clone(),
        category_ids: meta.category_ids.clone(),
        step: meta.step,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(&file)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds the model from its stored configuration and tensors.
pub fn load(path: &Path) -> Result<(Detector, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotLoaded(format!("no checkpoint at {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            file.format, file.version
        )));
    }
    let config = TrainConfig::parse(&file.config)?;
    let mut model = Detector::new(config.detector.clone(), 0)?;
    let mut tensors = file.tensors;
    let mut problem = None;
    model.visit("", &mut |k, p| {
        if problem.is_some() {
            return;
        }
        match tensors.remove(k) {
            None => problem = Some(format!("missing tensor {k}")),
            Some(t) if t.shape != p.shape || t.data.len() != p.value.len() => {
                problem = Some(format!("tensor {k}: stored shape {:?}, model expects {:?}", t.shape, p.shape))
            }
            Some(t) => p.value = t.data,
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Checkpoint(msg));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((
        model,
        CheckpointMeta {
            config,
            class_names: file.class_names,
            category_ids: file.category_ids,
            step: file.step,
        },
    ))
}
