//! Loads the datasets a scenario names and builds its targets.

use std::path::Path;

use tta_core::corrupt::{corrupt_dataset, CorruptionKind, CorruptionSpec};
use tta_core::data::{load_dataset, load_idx, make_shifted_pair_sized, Dataset};
use tta_core::netmodels::{build_lenet, build_resnet, load_checkpoint, Network};

use crate::config::{Arch, Scenario, SourceKind, TargetKind};
use crate::error::{CliError, Result};

pub struct Sources {
    /// Present only when requested.
    pub train: Option<Dataset>,
    pub test: Dataset,
    /// The glyph target domain, for glyph sources.
    pub shifted: Option<Dataset>,
}

pub fn load_sources(s: &Scenario, with_train: bool) -> Result<Sources> {
    let d = &s.data;
    let path = |p: &Option<std::path::PathBuf>| s.resolve(p.as_deref().expect("validated"));
    Ok(match d.source {
        SourceKind::Glyphs => {
            let p = make_shifted_pair_sized(s.seed, if with_train { d.train_size } else { 0 }, d.test_size)?;
            Sources {
                train: with_train.then_some(p.source_train),
                test: p.source_test,
                shifted: Some(p.target),
            }
        }
        SourceKind::Idx => Sources {
            train: if with_train {
                Some(load_idx(&path(&d.train_images), &path(&d.train_labels))?)
            } else {
                None
            },
            test: load_idx(&path(&d.test_images), &path(&d.test_labels))?,
            shifted: None,
        },
        SourceKind::Native => Sources {
            train: if with_train { Some(load_dataset(&path(&d.train_path))?) } else { None },
            test: load_dataset(&path(&d.test_path))?,
            shifted: None,
        },
    })
}

/// One adaptation target.
pub struct Target {
    pub name: String,
    pub data: Dataset,
    /// Severity for corruption targets; groups benchmark columns.
    pub severity: Option<u8>,
    pub kind: Option<CorruptionKind>,
}

pub fn target_name(kind: CorruptionKind, severity: u8) -> String {
    format!("{}_s{severity}", kind.name())
}

/// Targets in scenario order: severities outermost, then kinds.
pub fn build_targets(s: &Scenario, src: &Sources) -> Result<Vec<Target>> {
    Ok(match s.target.kind {
        TargetKind::Corruption => {
            let mut out = Vec::new();
            for &sev in &s.target.severities {
                for kind in s.corruption_kinds() {
                    let spec = CorruptionSpec::new(kind, sev, s.seed)?;
                    out.push(Target {
                        name: target_name(kind, sev),
                        data: corrupt_dataset(&src.test, &spec)?,
                        severity: Some(sev),
                        kind: Some(kind),
                    });
                }
            }
            out
        }
        TargetKind::Shifted => vec![Target {
            name: "shifted".into(),
            data: src.shifted.clone().expect("validated: glyph source"),
            severity: None,
            kind: None,
        }],
        TargetKind::Clean => vec![Target {
            name: "clean".into(),
            data: src.test.clone(),
            severity: None,
            kind: None,
        }],
        TargetKind::Dataset => {
            let p = s.resolve(s.target.path.as_deref().expect("validated"));
            let name = p.file_stem().map_or("dataset".into(), |n| n.to_string_lossy().into_owned());
            vec![Target {
                name,
                data: load_dataset(&p)?,
                severity: None,
                kind: None,
            }]
        }
    })
}

pub fn build_network(s: &Scenario, data: &Dataset) -> Result<Network<f32>> {
    let input = data.image_shape();
    Ok(match s.model.arch {
        Arch::Lenet => build_lenet(input, data.classes(), s.seed)?,
        Arch::Resnet => build_resnet(s.model.depth_blocks, s.model.width, input, data.classes(), s.seed)?,
    })
}

pub fn checkpoint_path(s: &Scenario, out: &Path) -> std::path::PathBuf {
    match &s.model.checkpoint {
        Some(p) => s.resolve(p),
        None => out.join("source.tent"),
    }
}

/// Loads the trained model, failing as a usage error when it is absent.
pub fn load_model(s: &Scenario, out: &Path) -> Result<Network<f32>> {
    let p = checkpoint_path(s, out);
    if !p.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist; run `tta train` with this config first",
            p.display()
        )));
    }
    Ok(load_checkpoint(&p)?)
}
