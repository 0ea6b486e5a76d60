//! Run configuration, on-disk datasets and run manifests.
//!
//! A run is described by one flat JSON object: the keys of [`DataConfig`],
//! [`ModelTemplate`] and [`TrainConfig`] side by side, plus `output_dir`.
//! Unknown keys are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    make_longtail_counts, read_archive, subsample_longtail, synth_gaussian_lt, write_archive, DatasetManifest,
    ElementType, LabeledDataset, LongTailSpec, RecordLayout, Shape3, SplitTag, SynthOptions,
};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{assign_depths, parse_arrangement, BackboneConfig, Family, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// Balanced record archives (e.g. the CIFAR binary files) subsampled to
    /// the long-tailed profile.
    Archive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveFormat {
    #[default]
    Cifar10,
    Cifar100,
}

impl ArchiveFormat {
    pub fn layout(self) -> RecordLayout {
        match self {
            ArchiveFormat::Cifar10 => RecordLayout::cifar10(),
            ArchiveFormat::Cifar100 => RecordLayout::cifar100_fine(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    /// Training samples of the head class.
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub data_seed: u64,
    /// Synthetic input dimension.
    pub dims: usize,
    pub class_separation: f64,
    #[serde(flatten)]
    pub synth: SynthOptions,
    pub train_archive: Option<PathBuf>,
    pub test_archive: Option<PathBuf>,
    pub archive_format: ArchiveFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            num_classes: 10,
            n_max: 200,
            imbalance_factor: 100.0,
            data_seed: 0,
            dims: 16,
            class_separation: 3.0,
            synth: SynthOptions::default(),
            train_archive: None,
            test_archive: None,
            archive_format: ArchiveFormat::Cifar10,
        }
    }
}

impl DataConfig {
    pub fn counts(&self) -> Result<Vec<usize>> {
        make_longtail_counts(self.num_classes, self.n_max, self.imbalance_factor)
    }

    pub fn spec(&self) -> Result<LongTailSpec> {
        LongTailSpec::from_counts(self.counts()?)
    }

    /// Generate or load the train/test pair described by this config.
    pub fn build(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let counts = self.counts()?;
        match self.source {
            DataSource::Synthetic => {
                synth_gaussian_lt(&counts, self.dims, self.class_separation, self.data_seed, &self.synth)
            }
            DataSource::Archive => {
                let layout = self.archive_format.layout();
                let read = |p: &Option<PathBuf>, field: &'static str| -> Result<LabeledDataset> {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| Error::invalid(field, "required when source is \"archive\""))?;
                    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                    let (x, y) = read_archive(&bytes, &layout)?;
                    balanced_dataset(x, y, layout.input_shape, self.num_classes)
                };
                let source = read(&self.train_archive, "train_archive")?;
                let test = read(&self.test_archive, "test_archive")?;
                let train = subsample_longtail(&source, &counts, self.data_seed)?;
                let test = LabeledDataset::new(
                    test.inputs().clone(),
                    test.labels().to_vec(),
                    test.input_shape(),
                    train.spec().clone(),
                    SplitTag::Test,
                )?;
                Ok((train, test))
            }
        }
    }
}

fn balanced_dataset(x: ndarray::Array2<f64>, y: Vec<usize>, shape: Shape3, c: usize) -> Result<LabeledDataset> {
    if let Some(&bad) = y.iter().find(|&&v| v >= c) {
        return Err(Error::InvalidLabel { label: bad, num_classes: c });
    }
    let per = y.len() / c;
    let spec = LongTailSpec::from_counts(vec![per.max(1); c])?;
    LabeledDataset::new(x, y, shape, spec, SplitTag::Test)
}

/// Architecture knobs; the input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelTemplate {
    pub family: Family,
    pub stage_widths: Vec<usize>,
    pub expert_width: usize,
    pub num_experts: usize,
    /// Explicit tap depths such as `"ABC"`; defaults to the even spread.
    pub arrangement: Option<String>,
    pub fusion: bool,
    pub batch_norm: bool,
}

impl Default for ModelTemplate {
    fn default() -> Self {
        ModelTemplate {
            family: Family::Mlp,
            stage_widths: vec![32, 32, 32],
            expert_width: 32,
            num_experts: 3,
            arrangement: None,
            fusion: true,
            batch_norm: true,
        }
    }
}

impl ModelTemplate {
    pub fn tap_depths(&self) -> Result<Vec<usize>> {
        let s = self.stage_widths.len();
        match &self.arrangement {
            Some(a) => {
                let d = parse_arrangement(a, s)?;
                if d.len() != self.num_experts {
                    return Err(Error::invalid(
                        "arrangement",
                        format!("{a:?} has {} experts but num_experts is {}", d.len(), self.num_experts),
                    ));
                }
                Ok(d)
            }
            None => Ok(assign_depths(self.num_experts, s)),
        }
    }

    pub fn model_config(&self, input_shape: Shape3, num_classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                family: self.family,
                input_shape,
                stage_widths: self.stage_widths.clone(),
                batch_norm: self.batch_norm,
            },
            expert_width: self.expert_width,
            num_classes,
            tap_depths: self.tap_depths()?,
            fusion: self.fusion,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    #[serde(flatten)]
    pub model: ModelTemplate,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelTemplate::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// The small synthetic benchmark used by the trend checks: 20 classes in
    /// 5 superclasses, imbalance factor 100, three-stage MLP. Distillation
    /// weights are 0.1; data and training seeds start at 100.
    pub fn desk() -> Self {
        RunConfig {
            data: DataConfig {
                num_classes: 20,
                n_max: 300,
                imbalance_factor: 100.0,
                data_seed: 100,
                dims: 16,
                class_separation: 4.0,
                synth: SynthOptions {
                    noise_std: 1.0,
                    test_per_class: 100,
                    modes_per_class: 1,
                    mode_spread: 2.0,
                    superclasses: 5,
                    subclass_spread: 1.5,
                },
                ..DataConfig::default()
            },
            model: ModelTemplate::default(),
            train: TrainConfig {
                epochs_stage1: 40,
                epochs_stage2: 10,
                base_lr: 0.05,
                batch_size: 64,
                weights: LossWeights {
                    alpha: 0.1,
                    beta: 0.1,
                    temperature: 1.0,
                },
                seed: 100,
                ..TrainConfig::default()
            },
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Parse a flat JSON object, rejecting unknown keys.
    pub fn from_value(value: Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let cfg: RunConfig = serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let known = serde_json::to_value(&cfg)?;
        let known = known.as_object().expect("config serializes to an object");
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file (or defaults when `path` is `None`) and apply
    /// `key=value` overrides. Values parse as JSON, falling back to a string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => Value::Object(Default::default()),
        };
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.counts()?;
        if self.model.num_experts == 0 {
            return Err(Error::invalid("num_experts", "must be at least 1"));
        }
        self.model.tap_depths()?;
        Ok(())
    }

    pub fn model_config(&self, input_shape: Shape3) -> Result<ModelConfig> {
        self.model.model_config(input_shape, self.data.num_classes)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<()> {
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        obj.insert(k.trim().to_string(), parsed);
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of the library sources, computed like a git tree of blobs.
pub fn code_hash() -> String {
    const SOURCES: &[(&str, &str)] = &[
        ("lib.rs", include_str!("lib.rs")),
        ("checkpoint.rs", include_str!("checkpoint.rs")),
        ("config.rs", include_str!("config.rs")),
        ("data/mod.rs", include_str!("data/mod.rs")),
        ("data/archive.rs", include_str!("data/archive.rs")),
        ("data/counts.rs", include_str!("data/counts.rs")),
        ("data/manifest.rs", include_str!("data/manifest.rs")),
        ("data/synth.rs", include_str!("data/synth.rs")),
        ("error.rs", include_str!("error.rs")),
        ("eval/mod.rs", include_str!("eval/mod.rs")),
        ("eval/experiments.rs", include_str!("eval/experiments.rs")),
        ("losses.rs", include_str!("losses.rs")),
        ("model.rs", include_str!("model.rs")),
        ("nn.rs", include_str!("nn.rs")),
        ("report.rs", include_str!("report.rs")),
        ("rng.rs", include_str!("rng.rs")),
        ("train.rs", include_str!("train.rs")),
    ];
    let mut tree = Sha256::new();
    for (name, text) in SOURCES {
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", text.len()));
        blob.update(text);
        tree.update(format!("{name}\0"));
        tree.update(blob.finalize());
    }
    hex::encode(tree.finalize())
}

/// Files written by `build-data` next to each other in one directory.
pub const DATASET_JSON: &str = "dataset.json";
pub const TRAIN_BIN: &str = "train.bin";
pub const TEST_BIN: &str = "test.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub manifest: DatasetManifest,
    pub layout: RecordLayout,
    pub train_sha256: String,
    pub test_sha256: String,
}

fn storage_layout(shape: Shape3) -> RecordLayout {
    RecordLayout {
        input_shape: shape,
        ..RecordLayout::f64_vectors(shape.len())
    }
}

/// Write a train/test pair losslessly into `dir`.
pub fn save_dataset(dir: &Path, train: &LabeledDataset, test: &LabeledDataset, seed: u64) -> Result<DatasetFiles> {
    if train.num_classes() > 256 {
        return Err(Error::invalid("num_classes", "stored datasets hold at most 256 classes"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = storage_layout(train.input_shape());
    let tr = write_archive(train.inputs(), train.labels(), &layout)?;
    let te = write_archive(test.inputs(), test.labels(), &layout)?;
    let files = DatasetFiles {
        manifest: DatasetManifest::new(train.spec(), seed),
        layout,
        train_sha256: sha256_hex(&tr),
        test_sha256: sha256_hex(&te),
    };
    for (name, bytes) in [(TRAIN_BIN, tr), (TEST_BIN, te)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(DATASET_JSON);
    fs::write(&p, serde_json::to_string_pretty(&files)?).map_err(|e| Error::io(&p, e))?;
    Ok(files)
}

/// Read a dataset written by [`save_dataset`], verifying both digests.
pub fn load_dataset(dir: &Path) -> Result<(LabeledDataset, LabeledDataset, DatasetFiles)> {
    let p = dir.join(DATASET_JSON);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let files: DatasetFiles = serde_json::from_str(&text)?;
    let spec = LongTailSpec::from_counts(files.manifest.counts.clone())?;
    let mut out = Vec::new();
    for (name, digest, split) in [
        (TRAIN_BIN, &files.train_sha256, SplitTag::Train),
        (TEST_BIN, &files.test_sha256, SplitTag::Test),
    ] {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if &sha256_hex(&bytes) != digest {
            return Err(Error::invalid("dataset", format!("{} does not match its recorded digest", p.display())));
        }
        if files.layout.element != ElementType::F64Le {
            return Err(Error::invalid("layout", "stored datasets use f64 elements"));
        }
        let (x, y) = read_archive(&bytes, &files.layout)?;
        out.push(LabeledDataset::new(x, y, files.layout.input_shape, spec.clone(), split)?);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test, files))
}

/// Description of one command's outputs, written as `manifest.json` in the
/// output directory. Artifact paths are relative to that directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub dataset: DatasetManifest,
    pub code_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, dataset: DatasetManifest) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.clone(),
            dataset,
            code_hash: code_hash(),
            seed: config.train.seed,
            artifacts: BTreeMap::new(),
        }
    }

    /// Record an artifact; `path` must lie under `dir`.
    pub fn add(&mut self, key: &str, dir: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(dir)
            .map_err(|_| Error::invalid("artifact", format!("{} is outside {}", path.display(), dir.display())))?;
        self.artifacts.insert(key.to_string(), rel.to_path_buf());
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_and_overrides() {
        let cfg = RunConfig::load(None, &["alpha=0.5".into(), "num_classes=12".into(), "output_dir=out/x".into()])
            .unwrap();
        assert_eq!(cfg.train.weights.alpha, 0.5);
        assert_eq!(cfg.data.num_classes, 12);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(RunConfig::from_value(v).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_value(serde_json::json!({ "alpah": 1.0 })).unwrap_err();
        assert!(err.to_string().contains("alpah"));
    }

    #[test]
    fn n_max_below_if_names_field() {
        let err = RunConfig::from_value(serde_json::json!({ "n_max": 50, "imbalance_factor": 100.0 })).unwrap_err();
        assert!(err.to_string().contains("n_max"), "{err}");
    }

    #[test]
    fn arrangement_length_checked() {
        let err = RunConfig::from_value(serde_json::json!({ "num_experts": 2, "arrangement": "ABC" }));
        assert!(err.is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let cfg = DataConfig {
            num_classes: 3,
            n_max: 20,
            imbalance_factor: 10.0,
            dims: 4,
            ..DataConfig::default()
        };
        let (train, test) = cfg.build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_dataset(dir.path(), &train, &test, 0).unwrap();
        let (a, b, f) = load_dataset(dir.path()).unwrap();
        assert_eq!(a, train);
        assert_eq!(b, test);
        assert_eq!(f, files);
    }
}
