//! Pipeline configuration: one JSON object with a section per stage.
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clusterer::HdbscanParams;
use crate::corpus::{ChunkingParams, DEFAULT_CHUNK_LEN, DEFAULT_MAX_LEN, DEFAULT_OVERLAP};
use crate::doc_encoder::{HeadKind, InputSource, PipelineVariant};
use crate::error::{CoreError, Result};
use crate::reducer::ReducerParams;
use crate::synth::SyntheticSpec;
use crate::train::TrainOptions;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    pub chunk_len: usize,
    pub overlap: usize,
    pub max_len: usize,
    pub vocab_max_size: usize,
    pub vocab_min_freq: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("corpus.jsonl"),
            chunk_len: DEFAULT_CHUNK_LEN,
            overlap: DEFAULT_OVERLAP,
            max_len: DEFAULT_MAX_LEN,
            vocab_max_size: 8000,
            vocab_min_freq: 2,
        }
    }
}

impl CorpusSection {
    pub fn chunking(&self) -> ChunkingParams {
        ChunkingParams {
            chunk_len: self.chunk_len,
            overlap: self.overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkEncoderSection {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for ChunkEncoderSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_dim: 256,
            dropout: 0.1,
            epochs: 4,
            lr: 1e-3,
            batch_size: 16,
            clip_norm: Some(1.0),
            seed: 1,
        }
    }
}

impl ChunkEncoderSection {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DocModelSection {
    pub source: InputSource,
    pub head: HeadKind,
    pub max_chunks: usize,
    pub d_cluster: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// `None` picks the per-variant default.
    pub epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for DocModelSection {
    fn default() -> Self {
        Self {
            source: InputSource::Alpha,
            head: HeadKind::Encoder,
            max_chunks: 64,
            d_cluster: 16,
            d_enc: 64,
            heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            epochs: None,
            lr: 2e-3,
            batch_size: 8,
            clip_norm: Some(1.0),
            seed: 3,
        }
    }
}

impl DocModelSection {
    pub fn variant(&self) -> PipelineVariant {
        PipelineVariant::new(self.source, self.head)
    }

    pub fn train_options(&self, variant: PipelineVariant) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs.unwrap_or_else(|| variant.default_epochs()),
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Variant names such as `alpha/encoder+bilstm`.
    pub grid: Vec<String>,
    /// Off by default so reruns produce identical result bytes.
    pub record_wall_clock: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            grid: ["alpha/encoder", "beta/encoder", "alpha_nc/encoder", "alpha/encoder+bilstm"]
                .map(String::from)
                .to_vec(),
            record_wall_clock: false,
        }
    }
}

impl EvaluateSection {
    pub fn variants(&self) -> Result<Vec<PipelineVariant>> {
        self.grid
            .iter()
            .map(|s| PipelineVariant::parse(s).ok_or_else(|| CoreError::Config(format!("unknown variant {s:?} in evaluate.grid"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub artifacts: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub synth: SyntheticSpec,
    pub chunk_encoder: ChunkEncoderSection,
    pub reducer: ReducerParams,
    pub clusterer: HdbscanParams,
    pub doc_model: DocModelSection,
    pub evaluate: EvaluateSection,
}

/// Sets `a.b.c = value` inside a JSON object, creating objects on the way.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CoreError::Config(format!("bad override key {key:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CoreError::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// `KEY=VALUE`; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CoreError::Config(format!("override {s:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl PipelineConfig {
    /// Parses config text, applies `KEY=VALUE` overrides, and resolves a
    /// relative corpus path against `base_dir`.
    pub fn from_json(text: &str, overrides: &[(String, Value)], base_dir: &Path) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        if !value.is_object() {
            return Err(CoreError::Config("config must be a JSON object".into()));
        }
        for (k, v) in overrides {
            set_path(&mut value, k, v.clone())?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| CoreError::Config(e.to_string()))?;
        if cfg.corpus.path.is_relative() {
            cfg.corpus.path = base_dir.join(&cfg.corpus.path);
        }
        if let Some(a) = &cfg.artifacts {
            if a.is_relative() {
                cfg.artifacts = Some(base_dir.join(a));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, overrides, base)
    }

    /// Same seed for every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.chunk_encoder.seed = seed;
        self.reducer.seed = seed;
        self.doc_model.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if let Err(e) = self.corpus.chunking().validate() {
            return bad(e.to_string());
        }
        if self.corpus.max_len < 3 {
            return bad("corpus.max_len must be at least 3".into());
        }
        let ce = &self.chunk_encoder;
        if ce.heads == 0 || ce.d_model % ce.heads != 0 {
            return bad(format!("chunk_encoder.d_model {} is not divisible by {} heads", ce.d_model, ce.heads));
        }
        let dm = &self.doc_model;
        if dm.heads == 0 || dm.d_enc % dm.heads != 0 {
            return bad(format!("doc_model.d_enc {} is not divisible by {} heads", dm.d_enc, dm.heads));
        }
        if self.clusterer.min_cluster_size == 0 || self.clusterer.min_samples == 0 {
            return bad("clusterer parameters must be at least 1".into());
        }
        if let Err(e) = self.synth.validate() {
            return bad(format!("synth: {e}"));
        }
        self.evaluate.variants()?;
        Ok(())
    }

    /// Hash of the named top-level sections, used to detect stale artifacts.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let full = serde_json::to_value(self).expect("config serializes");
        let picked: Vec<&Value> = sections.iter().map(|s| &full[*s]).collect();
        sha256_hex(&serde_json::to_vec(&picked).expect("json"))
    }
}
