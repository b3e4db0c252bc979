//! Network checkpoints in the binary container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use super::container::{Container, Record};
use super::network::{InputNorm, Network, TrainingMeta};
use crate::diffcore::kernel::NormStats;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const KIND: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: ArchSpec,
    input_norm: InputNorm,
    meta: TrainingMeta,
}

fn mean_name(slot: usize) -> String {
    format!("norm.{slot}.mean")
}

fn var_name(slot: usize) -> String {
    format!("norm.{slot}.var")
}

pub fn encode_checkpoint(net: &Network<f32>) -> Result<Container> {
    let descriptor = serde_json::to_string(&Descriptor {
        kind: KIND.into(),
        arch: net.spec().clone(),
        input_norm: net.input_norm().clone(),
        meta: net.meta().clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut records: Vec<Record> = net
        .params()
        .iter()
        .map(|(name, t)| Record {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    for (slot, s) in net.norm_stats().iter().enumerate() {
        for (name, v) in [(mean_name(slot), &s.mean), (var_name(slot), &s.var)] {
            records.push(Record {
                name,
                shape: vec![v.len()],
                data: v.clone(),
            });
        }
    }
    Ok(Container { descriptor, records })
}

pub fn decode_checkpoint(c: &Container) -> Result<Network<f32>> {
    let desc: Descriptor = serde_json::from_str(&c.descriptor).map_err(|e| Error::Format(format!("descriptor: {e}")))?;
    if desc.kind != KIND {
        return Err(Error::Format(format!("expected a checkpoint, found `{}`", desc.kind)));
    }
    let mut params = BTreeMap::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for r in &c.records {
        let slot = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad record name `{}`", r.name)));
        match r.name.strip_prefix("norm.").and_then(|s| s.split_once('.')) {
            Some((i, "mean")) => {
                means.insert(slot(i)?, r.data.clone());
            }
            Some((i, "var")) => {
                vars.insert(slot(i)?, r.data.clone());
            }
            _ => {
                params.insert(r.name.clone(), Tensor::new(r.shape.clone(), r.data.clone())?);
            }
        }
    }
    if means.len() != vars.len() || means.keys().ne(vars.keys()) || means.keys().copied().ne(0..means.len()) {
        return Err(Error::Format("normalization statistics are incomplete".into()));
    }
    let norms = means
        .into_values()
        .zip(vars.into_values())
        .map(|(m, v)| NormStats::new(m, v))
        .collect::<Result<Vec<_>>>()?;
    Network::from_parts(desc.arch, params, norms, desc.input_norm, desc.meta)
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<()> {
    encode_checkpoint(net)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    decode_checkpoint(&Container::read(path)?)
}
