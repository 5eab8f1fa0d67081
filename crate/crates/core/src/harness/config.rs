//! Experiment configuration and the flat `section.key = value` file format.
//!
//! A config file is TOML restricted in practice to dotted keys (table
//! headers are accepted too). Every key is laid over the defaults; keys the
//! schema does not know are errors.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::distill::{Fusion, ScoreVariant};
use crate::error::{Error, Result};
use crate::synthdata::{DatasetSpec, SplitMode};
use crate::vitnet::{BottleneckConfig, ViTConfig};

/// The four partial-model toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    pub use_l_se: bool,
    pub use_l_sd: bool,
    /// Score the encoder branch by the final class token rather than the
    /// mean of the earlier ones.
    pub use_cls_m: bool,
    pub use_noisy_or: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            use_l_se: true,
            use_l_sd: true,
            use_cls_m: true,
            use_noisy_or: true,
        }
    }
}

impl LossFlags {
    pub fn score_variant(&self) -> ScoreVariant {
        if self.use_cls_m {
            ScoreVariant::LastToken
        } else {
            ScoreVariant::MeanPrefix
        }
    }

    pub fn fusion(&self) -> Fusion {
        if self.use_noisy_or {
            Fusion::NoisyOr
        } else {
            Fusion::PlainSum
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_l_se && !self.use_l_sd {
            return Err(Error::Config(
                "at least one of loss.use_l_se / loss.use_l_sd must be true".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_encoder: f64,
    /// Shared by the bottleneck and the decoder student.
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Normalize by the running maximum of the second moment.
    pub amsgrad: bool,
    /// Divide each tensor's step size by `max(1, RMS(g^2 / v_hat))`.
    pub update_clamp: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_encoder: 1e-3,
            lr_decoder: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-10,
            amsgrad: true,
            update_clamp: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_encoder >= 0.0
            && self.lr_decoder >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Optional tensor file (`.hdr`/`.bin` stem) with `teacher.*` weights.
    pub teacher_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            checkpoint_every: 500,
            seed: 0,
            precision: Precision::F64,
            teacher_weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Empty means the dataset's normal classes.
    pub normal_ids: Vec<usize>,
    pub shots: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::MultiClass,
            normal_ids: Vec::new(),
            shots: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Overrides the variant implied by `loss.use_cls_m`.
    pub score_variant: Option<ScoreVariant>,
    /// Overrides the fusion implied by `loss.use_noisy_or`.
    pub fusion: Option<Fusion>,
    pub smooth_maps: bool,
    pub pixel_metrics: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_variant: None,
            fusion: None,
            smooth_maps: false,
            pixel_metrics: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub teacher: ViTConfig,
    pub encoder: ViTConfig,
    pub decoder: ViTConfig,
    pub bottleneck: BottleneckConfig,
    pub loss: LossFlags,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DatasetSpec,
    pub split: SplitConfig,
    pub few_shot: FewShotConfig,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub shots: Vec<usize>,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            shots: vec![1, 2, 4, 8],
            seed: 0,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            teacher: ViTConfig::teacher(),
            encoder: ViTConfig::encoder_student(),
            decoder: ViTConfig::decoder_student(),
            bottleneck: BottleneckConfig::default(),
            loss: LossFlags::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DatasetSpec::default(),
            split: SplitConfig::default(),
            few_shot: FewShotConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        crate::vitnet::check_compatible(&self.teacher, &self.encoder, &self.decoder)?;
        self.bottleneck.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config(
                "train.checkpoint_every must be positive".into(),
            ));
        }
        if self.data.kind != crate::synthdata::DatasetKind::Folder
            && (self.data.image_size != self.teacher.image_size
                || self.data.channels != self.teacher.in_channels)
        {
            return Err(Error::Config(
                "data geometry must match the teacher input".into(),
            ));
        }
        self.data.validate()
    }

    /// Smallest geometry the layer grouping allows, on a two-class 8x8
    /// dataset. Trains in milliseconds; meant for smoke tests.
    pub fn tiny() -> Self {
        let shrink = |v: ViTConfig| ViTConfig {
            image_size: 8,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            ..v
        };
        let d = ExperimentConfig::default();
        ExperimentConfig {
            teacher: shrink(d.teacher),
            encoder: shrink(d.encoder),
            decoder: shrink(d.decoder),
            train: TrainConfig {
                iterations: 4,
                batch_size: 2,
                checkpoint_every: 2,
                ..d.train
            },
            data: DatasetSpec {
                num_classes: 2,
                train_per_class: 4,
                test_normal_per_class: 3,
                test_anomalous_per_class: 3,
                image_size: 8,
                defect: crate::synthdata::DefectParams {
                    min_size: 2,
                    max_size: 4,
                    ..Default::default()
                },
                ..d.data
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn score_variant(&self) -> ScoreVariant {
        self.eval
            .score_variant
            .unwrap_or_else(|| self.loss.score_variant())
    }

    pub fn fusion(&self) -> Fusion {
        self.eval.fusion.unwrap_or_else(|| self.loss.fusion())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = parse_flat(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat_string(&self) -> Result<String> {
        to_flat(self)
    }

    /// SHA-256 of the canonical flat serialization.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_flat_string()?;
        Ok(Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Applies `key=value` overrides (value in TOML syntax; bare words are
    /// taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let cfg = apply_overrides(self, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Lays `key=value` overrides over `value`, later ones winning. Values that
/// are not valid TOML are taken as strings.
pub fn apply_overrides<T: Serialize + DeserializeOwned + Default>(
    value: &T,
    overrides: &[String],
) -> Result<T> {
    let mut text = to_flat(value)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let literal = if v.parse::<Value>().is_ok() || format!("x = {v}").parse::<Table>().is_ok() {
            v.to_string()
        } else {
            Value::String(v.to_string()).to_string()
        };
        text.push_str(&format!("{k} = {literal}\n"));
    }
    parse_flat_last_wins(&text)
}

fn flatten_into(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten_into(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = root;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("key {key:?}: {p:?} is not a section")))?;
    }
    if matches!(cur.get(last), Some(Value::Table(_))) {
        return Err(Error::Config(format!(
            "key {key:?} names a section, not a value"
        )));
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn overlay<T: Serialize + DeserializeOwned + Default>(pairs: Vec<(String, Value)>) -> Result<T> {
    let mut base = Table::try_from(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in pairs {
        set_path(&mut base, &k, v)?;
    }
    T::deserialize(base).map_err(|e| Error::Config(e.to_string()))
}

/// Parses flat config text onto `T::default()`. Repeated keys are errors.
pub fn parse_flat<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut pairs = Vec::new();
    flatten_into("", &table, &mut pairs);
    overlay(pairs)
}

/// Like [`parse_flat`] but later lines override earlier ones.
fn parse_flat_last_wins<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let table: Table = line
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("line {}: {e}", n + 1)))?;
        flatten_into("", &table, &mut pairs);
    }
    overlay(pairs)
}

/// Serializes `value` as sorted `dotted.key = value` lines.
pub fn to_flat<T: Serialize>(value: &T) -> Result<String> {
    let table = Table::try_from(value).map_err(|e| Error::Serde(e.to_string()))?;
    let mut pairs = Vec::new();
    flatten_into("", &table, &mut pairs);
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(pairs
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect())
}
