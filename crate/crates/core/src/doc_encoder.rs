//! Step II: a transformer layer (optionally followed by bidirectional
//! recurrent layers) over the chunk-vector sequence of a document, with a
//! learned embedding of each chunk's cluster id concatenated to its vector.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use hier_tensor::{decode_checkpoint, encode_checkpoint, ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clusterer::NOISE;
use crate::corpus::{Label, Split};
use crate::error::{invalid, CoreError, Result};
use crate::nn::{BiRecurrent, CellKind, EncoderLayer, LayerNorm, Linear, INIT_STD};
use crate::store::EmbeddingStore;
use crate::train::{argmax2, fit, predict_logits, probabilities, Classifier, TrainOptions, TrainReport};

/// Cluster table row for noise and for ids the model has never seen.
pub const NOISE_ROW: usize = 0;
/// Cluster table row for padded positions.
pub const PAD_ROW: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Full-size chunk vectors with cluster features.
    Alpha,
    /// Reduced chunk vectors with cluster features.
    Beta,
    AlphaNc,
    BetaNc,
}

impl InputSource {
    pub const ALL: [InputSource; 4] = [InputSource::Alpha, InputSource::Beta, InputSource::AlphaNc, InputSource::BetaNc];

    pub fn as_str(self) -> &'static str {
        match self {
            InputSource::Alpha => "alpha",
            InputSource::Beta => "beta",
            InputSource::AlphaNc => "alpha_nc",
            InputSource::BetaNc => "beta_nc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn uses_clusters(self) -> bool {
        matches!(self, InputSource::Alpha | InputSource::Beta)
    }

    pub fn reduced(self) -> bool {
        matches!(self, InputSource::Beta | InputSource::BetaNc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Encoder,
    EncoderBilstm,
    Bigru2,
    BilstmBigru,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Encoder, HeadKind::EncoderBilstm, HeadKind::Bigru2, HeadKind::BilstmBigru];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Encoder => "encoder",
            HeadKind::EncoderBilstm => "encoder+bilstm",
            HeadKind::Bigru2 => "bigru2",
            HeadKind::BilstmBigru => "bilstm+bigru",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Recurrent layers stacked after the transformer layer.
    fn recurrent(self) -> &'static [CellKind] {
        match self {
            HeadKind::Encoder => &[],
            HeadKind::EncoderBilstm => &[CellKind::Lstm],
            HeadKind::Bigru2 => &[CellKind::Gru, CellKind::Gru],
            HeadKind::BilstmBigru => &[CellKind::Lstm, CellKind::Gru],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PipelineVariant {
    pub source: InputSource,
    pub head: HeadKind,
}

impl PipelineVariant {
    pub fn new(source: InputSource, head: HeadKind) -> Self {
        Self { source, head }
    }

    /// `source/head`, e.g. `alpha/encoder+bilstm`.
    pub fn name(&self) -> String {
        format!("{}/{}", self.source.as_str(), self.head.as_str())
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (src, head) = s.split_once('/')?;
        Some(Self::new(InputSource::parse(src)?, HeadKind::parse(head)?))
    }

    /// One epoch for the encoder head with cluster features, three otherwise.
    pub fn default_epochs(&self) -> usize {
        if self.head == HeadKind::Encoder && self.source.uses_clusters() {
            1
        } else {
            3
        }
    }
}

impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// One document, laid out for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DocExample {
    pub doc_id: String,
    pub split: Split,
    /// `max_chunks` rows; padded rows are zero.
    pub embeddings: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    /// Cluster table rows.
    pub cluster_ids: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocBatch {
    pub docs: Vec<DocExample>,
}

impl DocBatch {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Table row for a cluster id: noise → 0, cluster `c` → `c + 2`, and ids
/// the table does not know → 0.
pub fn cluster_row(id: i64, n_clusters: usize) -> usize {
    if id == NOISE || id < 0 || id as usize >= n_clusters {
        NOISE_ROW
    } else {
        id as usize + 2
    }
}

/// Cluster ids attached to documents, plus how many clusters exist.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIds {
    pub n_clusters: usize,
    pub by_doc: BTreeMap<String, Vec<i64>>,
}

/// Lays out every document of `store` in the given splits. Documents longer
/// than `max_chunks` keep their last `max_chunks` chunks.
pub fn build_doc_examples(
    store: &EmbeddingStore,
    clusters: Option<&ClusterIds>,
    variant: PipelineVariant,
    max_chunks: usize,
    splits: &[Split],
) -> Result<Vec<DocExample>> {
    if max_chunks == 0 {
        return Err(invalid("max_chunks must be at least 1"));
    }
    if variant.source.reduced() != store.header.reduced_by.is_some() {
        return Err(invalid(format!(
            "variant {} needs {} embeddings",
            variant,
            if variant.source.reduced() { "reduced" } else { "full-size" }
        )));
    }
    let clusters = match (variant.source.uses_clusters(), clusters) {
        (true, None) => return Err(invalid(format!("variant {variant} needs cluster ids"))),
        (true, c) => c,
        (false, _) => None,
    };
    let dim = store.dim();
    let mut out = Vec::new();
    for d in store.docs.iter().filter(|d| splits.contains(&d.split)) {
        if d.vectors.is_empty() {
            return Err(CoreError::EmptyDocument(d.doc_id.clone()));
        }
        let start = d.vectors.len().saturating_sub(max_chunks);
        let kept = &d.vectors[start..];
        let ids: Vec<usize> = match clusters {
            None => vec![NOISE_ROW; kept.len()],
            Some(c) => {
                let raw = c
                    .by_doc
                    .get(&d.doc_id)
                    .filter(|r| r.len() == d.vectors.len())
                    .ok_or_else(|| invalid(format!("no cluster ids for document {:?}", d.doc_id)))?;
                raw[start..].iter().map(|&id| cluster_row(id, c.n_clusters)).collect()
            }
        };
        let mut embeddings = kept.to_vec();
        let mut cluster_ids = ids;
        let mut mask = vec![true; kept.len()];
        embeddings.resize(max_chunks, vec![0.0; dim]);
        cluster_ids.resize(max_chunks, PAD_ROW);
        mask.resize(max_chunks, false);
        out.push(DocExample {
            doc_id: d.doc_id.clone(),
            split: d.split,
            embeddings,
            mask,
            cluster_ids,
            label: d.label.index(),
        });
    }
    Ok(out)
}

pub fn build_doc_batches(examples: Vec<DocExample>, batch_size: usize) -> Result<Vec<DocBatch>> {
    if batch_size == 0 {
        return Err(invalid("batch_size must be at least 1"));
    }
    let mut batches = Vec::new();
    let mut it = examples.into_iter().peekable();
    while it.peek().is_some() {
        batches.push(DocBatch {
            docs: it.by_ref().take(batch_size).collect(),
        });
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DocModelConfig {
    pub variant: PipelineVariant,
    pub d_in: usize,
    pub n_clusters: usize,
    pub d_cluster: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Positional capacity.
    pub max_chunks: usize,
    pub dropout: f64,
}

impl DocModelConfig {
    pub fn new(variant: PipelineVariant, d_in: usize, n_clusters: usize) -> Self {
        Self {
            variant,
            d_in,
            n_clusters,
            d_cluster: 16,
            d_enc: 64,
            heads: 4,
            ff_dim: 128,
            max_chunks: 64,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DocModel {
    config: DocModelConfig,
    params: ParamSet,
    cluster_emb: ParamId,
    pos_emb: ParamId,
    proj: Linear,
    encoder: EncoderLayer,
    final_ln: LayerNorm,
    recurrent: Vec<BiRecurrent>,
    classifier: Linear,
}

#[derive(Serialize, Deserialize)]
struct DocMeta {
    kind: String,
    config: DocModelConfig,
}

const CHECKPOINT_KIND: &str = "doc_model";

impl DocModel {
    pub fn new(config: DocModelConfig, seed: u64) -> Result<Self> {
        if config.d_enc % 2 != 0 && !config.variant.head.recurrent().is_empty() {
            return Err(invalid("recurrent heads need an even d_enc"));
        }
        if config.d_in == 0 || config.max_chunks == 0 {
            return Err(invalid("d_in and max_chunks must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cluster_emb = params.add_normal("cluster_emb", &[config.n_clusters + 2, config.d_cluster], INIT_STD, &mut rng)?;
        let pos_emb = params.add_normal("doc_pos_emb", &[config.max_chunks, config.d_enc], INIT_STD, &mut rng)?;
        let d_cat = config.d_in + config.d_cluster;
        let proj = Linear::with_std(&mut params, "proj", d_cat, config.d_enc, (1.0 / d_cat as f64).sqrt(), &mut rng)?;
        let encoder = EncoderLayer::new(&mut params, "doc_layer", config.d_enc, config.heads, config.ff_dim, config.dropout, &mut rng)?;
        let final_ln = LayerNorm::new(&mut params, "doc_ln", config.d_enc)?;
        let hidden = config.d_enc / 2;
        let recurrent = config
            .variant
            .head
            .recurrent()
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let d_in = if i == 0 { config.d_enc } else { 2 * hidden };
                BiRecurrent::new(&mut params, &format!("rnn{i}"), kind, d_in, hidden, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(&mut params, "doc_classifier", config.d_enc, 2, &mut rng)?;
        Ok(Self {
            config,
            params,
            cluster_emb,
            pos_emb,
            proj,
            encoder,
            final_ln,
            recurrent,
            classifier,
        })
    }

    pub fn config(&self) -> &DocModelConfig {
        &self.config
    }

    pub fn cluster_table(&self) -> ParamId {
        self.cluster_emb
    }

    /// Encoded sequence `[max_chunks, d_enc]` for one document.
    pub fn encode<'p>(&'p self, t: &mut Tape<'p>, ex: &DocExample, train: bool) -> Result<Var> {
        let len = ex.embeddings.len();
        if len == 0 || len > self.config.max_chunks || ex.mask.len() != len || ex.cluster_ids.len() != len {
            return Err(invalid(format!(
                "document {:?} has {len} slots; the model takes 1..={}",
                ex.doc_id, self.config.max_chunks
            )));
        }
        if !ex.mask.iter().any(|&m| m) {
            return Err(CoreError::EmptyDocument(ex.doc_id.clone()));
        }
        if let Some(row) = ex.embeddings.iter().find(|r| r.len() != self.config.d_in) {
            return Err(CoreError::DimensionMismatch {
                expected: self.config.d_in,
                actual: row.len(),
            });
        }
        let rows = self.config.n_clusters + 2;
        let ids: Vec<usize> = ex.cluster_ids.iter().map(|&c| if c < rows { c } else { NOISE_ROW }).collect();
        let x = t.constant(Tensor::from_rows(&ex.embeddings)?);
        let table = t.param(self.cluster_emb);
        let c = t.embedding(table, &ids)?;
        let x = t.concat(&[x, c], 1)?;
        let x = self.proj.forward(t, x)?;
        let pos = t.param(self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let p = t.embedding(pos, &positions)?;
        let x = t.add(x, p)?;
        let x = t.dropout(x, self.config.dropout, train)?;
        let x = self.encoder.forward(t, x, &ex.mask, train)?;
        self.final_ln.forward(t, x)
    }

    /// Document vector `[1, d_enc]`: masked mean of the encoded sequence, or
    /// the final recurrent states over the real positions.
    pub fn pooled<'p>(&'p self, t: &mut Tape<'p>, ex: &DocExample, train: bool) -> Result<Var> {
        let h = self.encode(t, ex, train)?;
        if self.recurrent.is_empty() {
            return Ok(t.mean_over_mask(h, &ex.mask)?);
        }
        let real: Vec<usize> = (0..ex.mask.len()).filter(|&i| ex.mask[i]).collect();
        let mut seq = t.gather_rows(h, &real)?;
        let mut last = None;
        for layer in &self.recurrent {
            let out = layer.forward(t, seq)?;
            seq = out.sequence;
            last = Some(out.final_state);
        }
        Ok(last.expect("at least one recurrent layer"))
    }

    /// Logits `[b, 2]` for a batch.
    pub fn forward_batch<'p>(&'p self, t: &mut Tape<'p>, batch: &DocBatch, train: bool) -> Result<Var> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let rows = batch
            .docs
            .iter()
            .map(|ex| self.logits(t, ex, train))
            .collect::<Result<Vec<_>>>()?;
        Ok(t.concat(&rows, 0)?)
    }

    /// Inference logits for a batch.
    pub fn batch_logits(&self, batch: &DocBatch) -> Result<Vec<[f64; 2]>> {
        predict_logits(self, &batch.docs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = DocMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config,
        };
        encode_checkpoint(&self.params, &serde_json::to_string(&meta).expect("meta serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = decode_checkpoint(bytes)?;
        let meta: DocMeta = serde_json::from_str(&meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(CoreError::Format(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", meta.kind)));
        }
        let mut m = Self::new(meta.config, 0)?;
        m.params.copy_from(&params)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CoreError::MissingArtifact {
                stage: "train-doc".into(),
                what: format!("document model checkpoint {}", path.display()),
            });
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Classifier for DocModel {
    type Example = DocExample;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logits<'p>(&'p self, t: &mut Tape<'p>, ex: &DocExample, train: bool) -> Result<Var> {
        let v = self.pooled(t, ex, train)?;
        self.classifier.forward(t, v)
    }

    fn target(ex: &DocExample) -> usize {
        ex.label
    }
}

pub fn train_doc_model(model: &mut DocModel, train: &[DocBatch], val: &[DocBatch], opts: &TrainOptions) -> Result<TrainReport> {
    let train: Vec<DocExample> = train.iter().flat_map(|b| b.docs.iter().cloned()).collect();
    let val: Vec<DocExample> = val.iter().flat_map(|b| b.docs.iter().cloned()).collect();
    fit(model, &train, &val, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub label: Label,
    pub p_accepted: f64,
}

/// One prediction per example; equal logits go to `rejected`.
pub fn predict(model: &DocModel, examples: &[DocExample]) -> Result<Vec<Prediction>> {
    let logits = predict_logits(model, examples)?;
    Ok(examples
        .iter()
        .zip(logits)
        .map(|(ex, l)| Prediction {
            doc_id: ex.doc_id.clone(),
            label: Label::from_index(argmax2(&l)).expect("two classes"),
            p_accepted: probabilities(&l)[1],
        })
        .collect())
}
