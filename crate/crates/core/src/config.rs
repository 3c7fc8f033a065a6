//! TOML run configuration.
//!
//! A file has four optional sections. Every key may be omitted. Missing model keys come from the
//! preset of the selected variant and all other keys have fixed defaults.
//!
//! ```toml
//! [model]
//! variant = "mgiad"          # resnet | mgnet | mgiad
//! levels = 4                 # optional, must equal the length of `channels`
//! channels = [64, 128, 256, 256]
//! lambda = 1
//! nu = 2                     # blocks / smoothing steps per level (resnet, mgnet)
//! eta_pre = 1
//! eta_post = 1
//! g_s = 4                    # channels per group
//! c_K = 64                   # width of the coarsest in-channel level
//! sharing = "ab"             # none | a | ab
//! fas = true
//! num_classes = 10
//! input_channels = 3
//! input_size = 32
//! kernel = 3
//!
//! [train]
//! epochs = 400
//! batch_size = 128
//! lr = 0.05
//! momentum = 0.9
//! weight_decay = 0.0001
//! schedule = "cosine"        # cosine | step
//! step_factor = 0.1
//! step_period = 25
//! shuffle = true
//! checkpoint_every = 0
//!
//! [data]
//! kind = "cifar10"           # synth | cifar10 | cifar100 | fashionmnist
//! dir = "data/cifar-10-batches-bin"
//! augment = true             # flips and padded crops, CIFAR only
//! subset = 512               # optional, keep the first n training samples
//! test_subset = 1000         # optional
//!
//! [data.synth]
//! classes = 10
//! per_class = 50
//! test_per_class = 10
//! size = 32
//! noise = 1.0
//!
//! [run]
//! seed = 0
//! precision = "single"       # single | double
//! out_dir = "runs"
//! runs = 1
//! ```
//!
//! [`ConfigFile::to_toml`] writes every resolved key, so its output parses back to the same value
//! and serializes to the same bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{ModelConfig, SharingPolicy, Variant};
use crate::data::{load_cifar_binary, load_idx, synth_blobs_with, BlobSpec, Dataset, NormStats, Split};
use crate::error::{Error, Result};
use crate::tensor::Precision;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingName {
    None,
    A,
    Ab,
}

impl From<SharingPolicy> for SharingName {
    fn from(p: SharingPolicy) -> Self {
        match (p.share_a, p.share_b) {
            (true, true) => SharingName::Ab,
            (true, false) => SharingName::A,
            _ => SharingName::None,
        }
    }
}

impl From<SharingName> for SharingPolicy {
    fn from(n: SharingName) -> Self {
        match n {
            SharingName::None => SharingPolicy::NONE,
            SharingName::A => SharingPolicy::A,
            SharingName::Ab => SharingPolicy::AB,
        }
    }
}

/// The `[model]` table as written. Unset keys fall back to the variant preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_pre: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_post: Option<usize>,
    #[serde(default, rename = "g_s", skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(default, rename = "c_K", skip_serializing_if = "Option::is_none")]
    pub coarsest_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharing: Option<SharingName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fas: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let base = ModelConfig::preset(self.variant.unwrap_or(Variant::Mgiad));
        let channels = match (&self.channels, self.levels) {
            (Some(c), Some(l)) if c.len() != l => {
                return Err(Error::config(format!(
                    "levels = {l} but channels lists {} entries",
                    c.len()
                )))
            }
            (Some(c), _) => c.clone(),
            (None, Some(l)) if l == 0 || l > base.channels.len() => {
                return Err(Error::config(format!(
                    "levels = {l} needs an explicit channel list (the {} preset has {})",
                    base.variant,
                    base.channels.len()
                )))
            }
            (None, Some(l)) => base.channels[..l].to_vec(),
            (None, None) => base.channels.clone(),
        };
        Ok(ModelConfig {
            variant: base.variant,
            channels,
            lambda: self.lambda.unwrap_or(base.lambda),
            nu: self.nu.unwrap_or(base.nu),
            eta_pre: self.eta_pre.unwrap_or(base.eta_pre),
            eta_post: self.eta_post.unwrap_or(base.eta_post),
            group_size: self.group_size.or(base.group_size),
            coarsest_channels: self.coarsest_channels.or(base.coarsest_channels),
            sharing: self.sharing.map(SharingPolicy::from).unwrap_or(base.sharing),
            fas: self.fas.unwrap_or(base.fas),
            num_classes: self.num_classes.unwrap_or(base.num_classes),
            input_channels: self.input_channels.unwrap_or(base.input_channels),
            input_size: self.input_size.unwrap_or(base.input_size),
            kernel: self.kernel.unwrap_or(base.kernel),
        })
    }

    /// Every key set, so that resolving gives `m` back.
    pub fn explicit(m: &ModelConfig) -> Self {
        ModelSection {
            variant: Some(m.variant),
            levels: Some(m.channels.len()),
            channels: Some(m.channels.clone()),
            lambda: Some(m.lambda),
            nu: Some(m.nu),
            eta_pre: Some(m.eta_pre),
            eta_post: Some(m.eta_post),
            group_size: m.group_size,
            coarsest_channels: m.coarsest_channels,
            sharing: Some(m.sharing.into()),
            fas: Some(m.fas),
            num_classes: Some(m.num_classes),
            input_channels: Some(m.input_channels),
            input_size: Some(m.input_size),
            kernel: Some(m.kernel),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synth,
    Cifar10,
    Cifar100,
    Fashionmnist,
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(DataKind::Synth),
            "cifar10" => Ok(DataKind::Cifar10),
            "cifar100" => Ok(DataKind::Cifar100),
            "fashionmnist" => Ok(DataKind::Fashionmnist),
            other => Err(Error::config(format!(
                "unknown dataset {other:?} (expected synth, cifar10, cifar100 or fashionmnist)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            per_class: 50,
            test_per_class: 10,
            size: 32,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub augment: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Cifar10,
            dir: None,
            augment: true,
            subset: None,
            test_subset: None,
            synth: SynthConfig::default(),
        }
    }
}

/// Normalized training and test splits.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::NotFound(path))
    }
}

impl DataConfig {
    fn dir(&self) -> Result<&Path> {
        self.dir
            .as_deref()
            .ok_or_else(|| Error::config(format!("data.dir is required for {:?} data", self.kind)))
    }

    /// Loads both splits, truncates them to the configured subsets and normalizes them with
    /// statistics of the (truncated) training split. Synthetic data is drawn from `seed`.
    pub fn load(&self, seed: u64) -> Result<Datasets> {
        let (train, test) = match self.kind {
            DataKind::Synth => {
                let s = &self.synth;
                let spec = |per_class, split_seed| BlobSpec {
                    classes: s.classes,
                    per_class,
                    size: s.size,
                    channels: 3,
                    noise: s.noise,
                    seed: split_seed,
                };
                // Same centroids for both splits, independent noise.
                let train = synth_blobs_with(&spec(s.per_class + s.test_per_class, seed))?;
                let n = s.classes * s.per_class;
                let (head, tail) = split_at(&train, n)?;
                (head, tail)
            }
            DataKind::Cifar10 => {
                let dir = self.dir()?;
                let train: Vec<PathBuf> = (1..=5)
                    .map(|i| require(dir.join(format!("data_batch_{i}.bin"))))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
                let test = require(dir.join("test_batch.bin"))?;
                (
                    load_cifar_binary(&refs, 10, Split::Train)?,
                    load_cifar_binary(&[&test], 10, Split::Test)?,
                )
            }
            DataKind::Cifar100 => {
                let dir = self.dir()?;
                let train = require(dir.join("train.bin"))?;
                let test = require(dir.join("test.bin"))?;
                (
                    load_cifar_binary(&[&train], 100, Split::Train)?,
                    load_cifar_binary(&[&test], 100, Split::Test)?,
                )
            }
            DataKind::Fashionmnist => {
                let dir = self.dir()?;
                let part = |prefix: &str, split| -> Result<Dataset> {
                    let images = require(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
                    let labels = require(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
                    let mut ds = load_idx(&images, &labels)?;
                    ds.split = split;
                    ds.classes = 10;
                    ds.pad_to(32)
                };
                (part("train", Split::Train)?, part("t10k", Split::Test)?)
            }
        };
        let train = match self.subset {
            Some(n) => train.subset(n),
            None => train,
        };
        let test = match self.test_subset {
            Some(n) => test.subset(n),
            None => test,
        };
        let stats = NormStats::fit(&train);
        Ok(Datasets {
            train: train.normalized(&stats)?,
            test: test.normalized(&stats)?,
        })
    }

    /// Augmentation is only meaningful for the CIFAR sets.
    pub fn augmentation(&self) -> crate::data::Augment {
        match (self.augment, self.kind) {
            (true, DataKind::Cifar10 | DataKind::Cifar100) => crate::data::Augment::CIFAR,
            _ => crate::data::Augment::NONE,
        }
    }
}

/// Splits `ds` into its first `n` samples and the rest, the latter marked as a test split.
fn split_at(ds: &Dataset, n: usize) -> Result<(Dataset, Dataset)> {
    let (h, w, c) = ds.image_shape();
    let per = h * w * c;
    let data = ds.images.data();
    let head = Dataset::new(
        crate::tensor::Tensor::new([n, h, w, c], data[..n * per].to_vec())?,
        ds.labels[..n].to_vec(),
        ds.classes,
        Split::Train,
    )?;
    let rest = ds.len() - n;
    let tail = Dataset::new(
        crate::tensor::Tensor::new([rest, h, w, c], data[n * per..].to_vec())?,
        ds.labels[n..].to_vec(),
        ds.classes,
        Split::Test,
    )?;
    Ok((head, tail))
}

fn literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key {key:?}")));
    }
    let mut t = table;
    for part in &parts[..parts.len() - 1] {
        let entry = t
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    /// Independent repetitions with seeds `seed, seed + 1, ...`.
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::Single,
            out_dir: PathBuf::from("runs"),
            runs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    model: ModelSection,
    train: TrainConfig,
    data: DataConfig,
    run: RunConfig,
}

/// A resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run: RunConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::preset(Variant::Mgiad)
    }
}

impl ConfigFile {
    /// Preset model of `variant` with default training, data and run settings.
    pub fn preset(variant: Variant) -> Self {
        ConfigFile {
            model: ModelConfig::preset(variant),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            run: RunConfig::default(),
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::parse_with(text, source, &[])
    }

    /// Parses `text`, then sets each dotted `key = value` pair before resolving. Values are read
    /// as TOML literals, falling back to plain strings (`model.c_K=16`, `data.kind=synth`).
    pub fn parse_with(text: &str, source: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("{source}: {}", e.message())))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, literal(value))?;
        }
        let raw: RawConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{source}: {}", e.message())))?;
        let cfg = ConfigFile {
            model: raw.model.resolve()?,
            train: raw.train,
            data: raw.data,
            run: raw.run,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NotFound(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.run.runs == 0 {
            return Err(Error::config("run.runs must be >= 1"));
        }
        if self.run.seed > i64::MAX as u64 {
            return Err(Error::config(format!("run.seed must be at most {}", i64::MAX)));
        }
        let s = &self.data.synth;
        if s.classes == 0 || s.per_class == 0 || s.size == 0 || !(s.noise >= 0.0) {
            return Err(Error::config(
                "data.synth needs classes, per_class and size >= 1 and a non-negative noise",
            ));
        }
        Ok(())
    }

    /// Canonical TOML with every resolved key.
    pub fn to_toml(&self) -> String {
        let raw = RawConfig {
            model: ModelSection::explicit(&self.model),
            train: self.train.clone(),
            data: self.data.clone(),
            run: self.run.clone(),
        };
        toml::to_string(&raw).expect("configuration values are representable in TOML")
    }

    /// The model with its input and output widths set from a dataset.
    pub fn model_for(&self, ds: &Dataset) -> ModelConfig {
        let (h, _, c) = ds.image_shape();
        ModelConfig {
            input_channels: c,
            input_size: h,
            num_classes: ds.classes,
            ..self.model.clone()
        }
    }
}
