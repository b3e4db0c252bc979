//! Scenario files: TOML with an explicit schema version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tta_core::adapt::{AdaptationConfig, Method, Schedule, StatsMode, DEFAULT_THRESHOLD};
use tta_core::corrupt::CorruptionKind;
use tta_core::netmodels::TrainConfig;

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub target: TargetConfig,
    #[serde(default)]
    pub adapt: AdaptSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lenet,
    Resnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_depth")]
    pub depth_blocks: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Checkpoint to adapt; `<out>/source.tent` when absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_depth() -> usize {
    2
}

fn default_width() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Procedural glyph digits; the shifted target comes with them.
    Glyphs,
    Idx,
    Native,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
}

fn default_train_size() -> usize {
    10_000
}

fn default_test_size() -> usize {
    2_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Corrupted copies of the source test set.
    Corruption,
    /// The glyph target domain.
    Shifted,
    /// The source test set itself.
    Clean,
    /// A native dataset file.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetKind,
    #[serde(default = "all_corruptions")]
    pub corruptions: Vec<String>,
    #[serde(default = "default_severities")]
    pub severities: Vec<u8>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn all_corruptions() -> Vec<String> {
    CorruptionKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

fn default_severities() -> Vec<u8> {
    vec![5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub methods: Vec<Method>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub threshold: f64,
    pub stats_mode: StatsMode,
    pub track_epochs: bool,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptationConfig::default();
        Self {
            methods: vec![Method::SourceOnly, Method::BatchNorm, Method::Entropy, Method::PseudoLabel],
            lr: a.lr,
            batch_size: a.batch_size,
            epochs: a.epochs,
            schedule: a.schedule,
            threshold: DEFAULT_THRESHOLD,
            stats_mode: a.stats_mode,
            track_epochs: a.track_epochs,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub train_epochs: Option<usize>,
    pub adapt_epochs: Option<usize>,
    pub threshold: Option<f64>,
    pub method: Option<Method>,
    pub severity: Option<u8>,
}

impl Scenario {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let config_err = |message: String| CliError::Config {
            path: origin.to_path_buf(),
            message,
        };
        let mut s: Scenario = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        s.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        s.validate().map_err(config_err)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Usage(format!("config file {} not found", path.display())),
            _ => CliError::io(path, e),
        })?;
        Self::from_toml(&text, path)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(format!("name `{}` must be a non-empty file name", self.name));
        }
        for c in &self.target.corruptions {
            c.parse::<CorruptionKind>().map_err(|e| format!("target.corruptions: {e}"))?;
        }
        if let Some(s) = self.target.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(format!("target.severities: {s} is outside 1..=5"));
        }
        if self.target.kind == TargetKind::Corruption && (self.target.corruptions.is_empty() || self.target.severities.is_empty()) {
            return Err("target: corruption targets need at least one kind and one severity".into());
        }
        if self.target.kind == TargetKind::Dataset && self.target.path.is_none() {
            return Err("target.path is required when target.kind = \"dataset\"".into());
        }
        if self.target.kind == TargetKind::Shifted && self.data.source != SourceKind::Glyphs {
            return Err("target.kind = \"shifted\" needs data.source = \"glyphs\"".into());
        }
        let need = |field: &str, v: &Option<PathBuf>| match v {
            Some(_) => Ok(()),
            None => Err(format!("data.{field} is required for data.source = {:?}", self.data.source)),
        };
        match self.data.source {
            SourceKind::Glyphs => {}
            SourceKind::Idx => {
                need("train_images", &self.data.train_images)?;
                need("train_labels", &self.data.train_labels)?;
                need("test_images", &self.data.test_images)?;
                need("test_labels", &self.data.test_labels)?;
            }
            SourceKind::Native => {
                need("train_path", &self.data.train_path)?;
                need("test_path", &self.data.test_path)?;
            }
        }
        if self.adapt.methods.is_empty() {
            return Err("adapt.methods must not be empty".into());
        }
        self.adaptation(0)
            .validate()
            .map_err(|e| format!("adapt: {e}"))?;
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err("train: batch_size and lr must be positive".into());
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(e) = o.train_epochs {
            self.train.epochs = e;
        }
        if let Some(e) = o.adapt_epochs {
            self.adapt.epochs = e;
        }
        if let Some(t) = o.threshold {
            self.adapt.threshold = t;
        }
        if let Some(m) = o.method {
            self.adapt.methods = vec![m];
        }
        if let Some(s) = o.severity {
            self.target.severities = vec![s];
        }
        self.validate().map_err(CliError::Usage)
    }

    /// Resolves a path from the file against the file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every input path the scenario names.
    pub fn input_paths(&self) -> Vec<(&'static str, PathBuf)> {
        let d = &self.data;
        [
            ("data.train_images", &d.train_images),
            ("data.train_labels", &d.train_labels),
            ("data.test_images", &d.test_images),
            ("data.test_labels", &d.test_labels),
            ("data.train_path", &d.train_path),
            ("data.test_path", &d.test_path),
            ("target.path", &self.target.path),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|p| (k, self.resolve(p))))
        .collect()
    }

    /// Fails before any work if a named input does not exist.
    pub fn preflight(&self) -> Result<()> {
        for (field, p) in self.input_paths() {
            if !p.is_file() {
                return Err(CliError::Usage(format!("{field}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn corruption_kinds(&self) -> Vec<CorruptionKind> {
        self.target.corruptions.iter().map(|c| c.parse().expect("validated")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn adaptation(&self, seed: u64) -> AdaptationConfig {
        AdaptationConfig {
            lr: self.adapt.lr,
            batch_size: self.adapt.batch_size,
            epochs: self.adapt.epochs,
            schedule: self.adapt.schedule,
            seed,
            stats_mode: self.adapt.stats_mode,
            threshold: self.adapt.threshold,
            track_epochs: self.adapt.track_epochs,
            ..AdaptationConfig::default()
        }
    }

    /// SHA-256 of the effective scenario, paths as written.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "t"
seed = 3

[model]
arch = "lenet"

[data]
source = "glyphs"

[target]
kind = "clean"
"#;

    fn parse(text: &str) -> Result<Scenario> {
        Scenario::from_toml(text, Path::new("dir/s.toml"))
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let s = parse(MINIMAL).unwrap();
        assert_eq!(s.adapt.lr, 1e-3);
        assert_eq!(s.adapt.batch_size, 128);
        assert_eq!(s.target.severities, vec![5]);
        assert_eq!(s.target.corruptions.len(), 6);
        assert_eq!(s.base_dir, Path::new("dir"));
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse(&MINIMAL.replace("seed = 3\n", "")).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
        let err = parse(&MINIMAL.replace("arch = \"lenet\"", "")).unwrap_err().to_string();
        assert!(err.contains("arch"), "{err}");
    }

    #[test]
    fn unknown_field_and_version_rejected() {
        assert!(parse(&MINIMAL.replace("seed = 3", "seed = 3\ncolour = 1")).is_err());
        let err = parse(&MINIMAL.replace("schema_version = 1", "schema_version = 2")).unwrap_err().to_string();
        assert!(err.contains("schema_version"), "{err}");
    }

    #[test]
    fn hash_tracks_overrides() {
        let mut s = parse(MINIMAL).unwrap();
        let h = s.hash();
        assert_eq!(h, parse(MINIMAL).unwrap().hash());
        s.apply(&Overrides {
            seed: Some(4),
            ..Overrides::default()
        })
        .unwrap();
        assert_ne!(h, s.hash());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(parse(&MINIMAL.replace("kind = \"clean\"", "kind = \"corruption\"\nseverities = [6]")).is_err());
        assert!(parse(&MINIMAL.replace("kind = \"clean\"", "kind = \"corruption\"\ncorruptions = [\"fog\"]")).is_err());
        assert!(parse(&MINIMAL.replace("kind = \"clean\"", "kind = \"dataset\"")).is_err());
        assert!(parse(&MINIMAL.replace("source = \"glyphs\"", "source = \"idx\"")).is_err());
    }
}
