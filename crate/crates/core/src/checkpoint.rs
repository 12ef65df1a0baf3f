//! Checkpoints: parameters and optimiser moments in a tensor container, with
//! a JSON sidecar holding the configuration and counters.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, TensorContainer};
use crate::energy::ReconConfig;
use crate::error::{DcerError, Result};
use crate::model::{DcerModel, ModelConfig};
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};

pub const SIDECAR_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub recon: ReconConfig,
    pub optimizer_step: u64,
    pub epoch: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let params = &trainer.model.params;
    let mut c = TensorContainer::new();
    for id in params.ids() {
        let name = params.name(id);
        let p = params.get(id);
        c.insert(format!("{PARAM}{name}"), Tensor::new(p.shape().to_vec(), p.data().to_vec())?)?;
        c.insert(
            format!("{MOMENT1}{name}"),
            Tensor::new(p.shape().to_vec(), trainer.opt.m[id.index()].clone())?,
        )?;
        c.insert(
            format!("{MOMENT2}{name}"),
            Tensor::new(p.shape().to_vec(), trainer.opt.v[id.index()].clone())?,
        )?;
    }
    write_container(path, &c)?;
    let side = Sidecar {
        version: SIDECAR_VERSION,
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
        recon: trainer.recon,
        optimizer_step: trainer.opt.step,
        epoch: trainer.epoch,
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| DcerError::io(&sp, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| DcerError::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    if side.version != SIDECAR_VERSION {
        return Err(DcerError::Format {
            path: sp,
            reason: format!("unsupported sidecar version {}", side.version),
        });
    }
    Ok(side)
}

/// Rebuilds the trainer described by the sidecar and restores its state.
pub fn load(path: &Path) -> Result<Trainer> {
    let side = read_sidecar(path)?;
    let model = DcerModel::new(side.model.clone())?;
    let mut trainer = Trainer::new(model, side.train.clone(), side.recon)?;
    restore(path, &mut trainer)?;
    trainer.opt.step = side.optimizer_step;
    trainer.epoch = side.epoch;
    Ok(trainer)
}

/// Loads only the model (parameters) from a checkpoint.
pub fn load_model(path: &Path) -> Result<DcerModel> {
    Ok(load(path)?.model)
}

/// Copies parameters and moments into an existing trainer whose
/// architecture must match by name and shape.
pub fn restore(path: &Path, trainer: &mut Trainer) -> Result<()> {
    let c = read_container(path)?;
    let stored: BTreeSet<String> = c
        .names()
        .filter_map(|n| n.strip_prefix(PARAM))
        .map(str::to_string)
        .collect();
    let expected: BTreeSet<String> = trainer.model.params.names().map(str::to_string).collect();
    if stored != expected {
        return Err(DcerError::Incompatible {
            missing: expected.difference(&stored).cloned().collect(),
            extra: stored.difference(&expected).cloned().collect(),
        });
    }
    let ids: Vec<_> = trainer.model.params.ids().collect();
    for id in ids {
        let name = trainer.model.params.name(id).to_string();
        let fetch = |prefix: &str| {
            c.get(&format!("{prefix}{name}")).ok_or_else(|| DcerError::Format {
                path: path.to_path_buf(),
                reason: format!("missing {prefix}{name}"),
            })
        };
        let p = fetch(PARAM)?;
        trainer.model.params.set(id, p)?;
        let opt: &mut AdamW = &mut trainer.opt;
        for (prefix, slot) in [(MOMENT1, &mut opt.m), (MOMENT2, &mut opt.v)] {
            let t = fetch(prefix)?;
            if t.numel() != slot[id.index()].len() {
                return Err(DcerError::shape("checkpoint moments", t.shape(), p.shape()));
            }
            slot[id.index()].copy_from_slice(t.data());
        }
    }
    Ok(())
}
