//! Datasets stored in the checkpoint container under "images" and "labels".

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::netmodels::{Container, Record};

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    name: String,
    classes: usize,
}

const KIND: &str = "dataset";

pub fn encode_dataset(d: &Dataset) -> Result<Container> {
    let descriptor = serde_json::to_string(&Descriptor {
        kind: KIND.into(),
        name: d.name().into(),
        classes: d.classes(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut records = vec![Record {
        name: "images".into(),
        shape: d.images().shape().to_vec(),
        data: d.images().data().to_vec(),
    }];
    if let Some(labels) = d.labels() {
        records.push(Record {
            name: "labels".into(),
            shape: vec![labels.len()],
            data: labels.iter().map(|&l| l as f32).collect(),
        });
    }
    Ok(Container { descriptor, records })
}

pub fn decode_dataset(c: &Container) -> Result<Dataset> {
    let desc: Descriptor = serde_json::from_str(&c.descriptor).map_err(|e| Error::Format(format!("descriptor: {e}")))?;
    if desc.kind != KIND {
        return Err(Error::Format(format!("expected a dataset, found `{}`", desc.kind)));
    }
    let images = c.record("images").ok_or_else(|| Error::Format("missing `images` record".into()))?;
    let images = Tensor::new(images.shape.clone(), images.data.clone())?;
    let labels = c
        .record("labels")
        .map(|r| {
            r.data
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Format(format!("label {v} is not a class index")))
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Dataset::new(desc.name, images, labels, desc.classes)
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    encode_dataset(d)?.write(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let images = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let d = Dataset::new("rt", images, Some(vec![0, 4, 2]), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tent");
        save_dataset(&d, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
        let unl = d.unlabeled();
        assert_eq!(decode_dataset(&encode_dataset(&unl).unwrap()).unwrap(), unl);
    }
}
