//! Run configuration: a TOML file plus `section.key=value` overrides.
//!
//! ```toml
//! [train]
//! epochs = 60
//!
//! [psa]
//! mu = 0.25
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorSpec;
use crate::decouple::Pooling;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic sample count.
    pub samples: usize,
    /// Seed of the synthetic generator and of the split.
    pub seed: u64,
    /// Manifest holding all samples, or only the training split when the
    /// validation and test manifests are given.
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            samples: 2000,
            seed: 0,
            manifest: None,
            val_manifest: None,
            test_manifest: None,
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Seed of parameter initialization and batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Mea,
    /// Unimodal extractors, pooled and concatenated into the head.
    LateFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Common width `d`.
    pub d: usize,
    /// Decoupled representation width `d_h`.
    pub d_h: usize,
    pub heads: usize,
    /// Temporal convolution kernel per modality (L, V, A).
    pub kernels: [usize; 3],
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mea,
            d: 40,
            d_h: 64,
            heads: 8,
            kernels: [3, 3, 3],
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsaConfig {
    pub layers: usize,
    pub mu: f64,
    /// Softmax the current maps before mixing with the predicted maps.
    pub literal_eq2: bool,
    /// Hidden width of the weighting layer; 0 uses the flattened width.
    pub wal_hidden: usize,
}

impl Default for PsaConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            mu: 0.25,
            literal_eq2: false,
            wal_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HcaConfig {
    pub layers: usize,
}

impl Default for HcaConfig {
    fn default() -> Self {
        Self { layers: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub grl_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-2,
            beta: 3e-2,
            grl_lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgfConfig {
    pub self_loops: bool,
}

impl Default for DgfConfig {
    fn default() -> Self {
        Self { self_loops: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub layers: usize,
    /// Hidden width; 0 uses `d_h`.
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { layers: 2, hidden: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub disable_psa: bool,
    pub disable_prediction_chain: bool,
    pub disable_wal: bool,
    pub disable_hca: bool,
    pub disable_mru_mixed: bool,
    pub disable_mru_coarse: bool,
    pub disable_mru_fine: bool,
    /// Concatenate the node vectors instead of graph fusion.
    pub disable_dgf: bool,
    pub fusion_add: bool,
    pub fusion_mul: bool,
    pub use_sep_loss: bool,
    pub use_only_exclusive: bool,
    pub use_only_agnostic: bool,
    pub no_omega: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub dump_reps: bool,
    pub dump_attention: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/mea"),
            dump_reps: false,
            dump_attention: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub gen: GeneratorSpec,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub psa: PsaConfig,
    pub hca: HcaConfig,
    pub loss: LossConfig,
    pub dgf: DgfConfig,
    pub head: HeadConfig,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key` in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Merges `overrides` (`key=value`) into `base` TOML text.
    pub fn from_toml_with_overrides(base: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = base
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&base, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sorted `key = value` pairs of every setting.
    pub fn flattened(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out.sort();
        out
    }

    /// Settings that change the parameter layout or forward computation.
    pub fn architecture(&self) -> Vec<(String, String)> {
        const KEYS: [&str; 7] = ["model.", "psa.", "hca.", "head.", "ablation.", "dgf.", "loss.grl_lambda"];
        self.flattened()
            .into_iter()
            .filter(|(k, _)| KEYS.iter().any(|p| k.starts_with(p)))
            .collect()
    }

    pub fn fusion_kind(&self) -> FusionKind {
        let a = &self.ablation;
        if a.disable_dgf {
            FusionKind::Concat
        } else if a.fusion_add {
            FusionKind::Add
        } else if a.fusion_mul {
            FusionKind::Mul
        } else {
            FusionKind::Graph
        }
    }

    pub fn head_hidden(&self) -> usize {
        if self.head.hidden == 0 {
            self.model.d_h
        } else {
            self.head.hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if m.d == 0 || !m.d.is_multiple_of(2) {
            return bad(format!("model.d = {} must be positive and even", m.d));
        }
        if m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return bad(format!("model.d = {} is not divisible by model.heads = {}", m.d, m.heads));
        }
        if m.d_h == 0 {
            return bad("model.d_h must be positive".into());
        }
        if let Some(k) = m.kernels.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel size {k} must be odd"));
        }
        if self.psa.layers == 0 || self.hca.layers == 0 || self.head.layers == 0 {
            return bad("psa.layers, hca.layers and head.layers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.psa.mu) {
            return bad(format!("psa.mu = {} must lie in [0, 1]", self.psa.mu));
        }
        if !(self.loss.alpha >= 0.0) || !(self.loss.beta >= 0.0) {
            return bad("loss.alpha and loss.beta must be non-negative".into());
        }
        if self.train.batch_size < 2 {
            return bad(format!("train.batch_size = {} must be at least 2", self.train.batch_size));
        }
        if !(self.train.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        let a = &self.ablation;
        if [a.disable_dgf, a.fusion_add, a.fusion_mul].iter().filter(|&&f| f).count() > 1 {
            return bad("at most one of disable_dgf, fusion_add, fusion_mul may be set".into());
        }
        if a.use_only_exclusive && a.use_only_agnostic {
            return bad("use_only_exclusive and use_only_agnostic are mutually exclusive".into());
        }
        let s = self.data.split;
        if s.iter().any(|&f| !(f >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 || s[0] == 0.0 {
            return bad(format!("data.split {s:?} must be non-negative fractions summing to 1"));
        }
        if self.data.source == DataSource::Manifest && self.data.manifest.is_none() {
            return bad("data.manifest is required when data.source = \"manifest\"".into());
        }
        if self.data.source == DataSource::Synthetic && self.data.samples < 10 {
            return bad(format!("data.samples = {} is too small to split", self.data.samples));
        }
        Ok(())
    }
}

/// Keys whose values differ between two configurations' architectures.
pub fn architecture_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (xa, xb) = (a.architecture(), b.architecture());
    let mut keys: Vec<String> = xa
        .iter()
        .filter(|kv| !xb.contains(kv))
        .map(|(k, _)| k.clone())
        .chain(xb.iter().filter(|kv| !xa.contains(kv)).map(|(k, _)| k.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    keys
}
