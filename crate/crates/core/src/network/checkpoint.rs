//! Checkpoint files: a JSON header (architecture, parameter shapes, optional
//! optimizer bookkeeping) followed by all tensors as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_framed, write_framed};
use crate::tensor::{AdamState, Tensor};

use super::{Layout, ModuleFlags, NetworkConfig, NetworkWeights};

const FORMAT: &str = "hsfuse-checkpoint";
const VERSION: u32 = 1;

/// Optimizer and early-stopping state needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam: AdamState<f32>,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best_weights: NetworkWeights<f32>,
    /// Opaque settings of the run that produced the snapshot.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub flags: ModuleFlags,
    pub weights: NetworkWeights<f32>,
    pub training: Option<TrainingSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    epoch: usize,
    adam_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    best_loss: f64,
    best_epoch: usize,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: NetworkConfig,
    flags: ModuleFlags,
    params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingHeader>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let layout = Layout::new(&ckpt.config, ckpt.flags)?;
    ckpt.weights.check(&layout)?;
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: ckpt.config.clone(),
        flags: ckpt.flags,
        params: layout
            .specs
            .iter()
            .map(|s| ParamEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
        training: ckpt.training.as_ref().map(|t| TrainingHeader {
            epoch: t.epoch,
            adam_step: t.adam.step,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            best_loss: t.best_loss,
            best_epoch: t.best_epoch,
            meta: t.meta.clone(),
        }),
    };
    let mut groups: Vec<&[Tensor<f32>]> = vec![&ckpt.weights.tensors];
    if let Some(t) = &ckpt.training {
        t.best_weights.check(&layout)?;
        groups.extend([&t.adam.first[..], &t.adam.second[..], &t.best_weights.tensors[..]]);
    }
    let payload = groups
        .into_iter()
        .flat_map(|g| g.iter().flat_map(|t| t.data().iter().copied()));
    write_framed(path.as_ref(), &header, payload)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut layout = None;
    let (header, values) = read_framed::<Header>(path, |h| {
        if h.format != FORMAT || h.version != VERSION {
            return Err(Error::format(path, format!("not a version {} checkpoint", VERSION)));
        }
        let l = Layout::new(&h.config, h.flags)?;
        let declared: Vec<(&str, &[usize])> = h.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
        let expected: Vec<(&str, &[usize])> = l.specs.iter().map(|s| (s.name.as_str(), s.shape.as_slice())).collect();
        if declared != expected {
            return Err(Error::format(path, "parameter list does not match the declared architecture"));
        }
        let per_group: usize = l.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        layout = Some(l);
        Ok(per_group * if h.training.is_some() { 4 } else { 1 })
    })?;
    let layout = layout.expect("layout set by header check");
    let mut rest = values.as_slice();
    let mut group = || {
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let (head, tail) = rest.split_at(n);
                rest = tail;
                Tensor::new(s.shape.clone(), head.to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>(NetworkWeights { tensors })
    };
    let weights = group()?;
    let training = match header.training {
        None => None,
        Some(t) => {
            let first = group()?.tensors;
            let second = group()?.tensors;
            let best_weights = group()?;
            Some(TrainingSnapshot {
                epoch: t.epoch,
                adam: AdamState {
                    beta1: t.beta1,
                    beta2: t.beta2,
                    eps: t.eps,
                    step: t.adam_step,
                    first,
                    second,
                },
                best_loss: t.best_loss,
                best_epoch: t.best_epoch,
                best_weights,
                meta: t.meta,
            })
        }
    };
    Ok(Checkpoint {
        config: header.config,
        flags: header.flags,
        weights,
        training,
    })
}
