//! Step I: a small transformer trained to classify chunks with their
//! document's label, then frozen and used to extract `[CLS]` vectors.

use std::path::Path;

use hier_tensor::{encode_checkpoint, decode_checkpoint, ParamId, ParamSet, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_document, encode_chunk, ChunkingParams, Corpus, Split, TokenSequence, Vocab};
use crate::error::{invalid, CoreError, Result};
use crate::nn::{EncoderLayer, LayerNorm, Linear, INIT_STD};
use crate::store::{DocEmbeddings, EmbeddingStore, StoreHeader};
use crate::train::{fit, Classifier, TrainOptions, TrainReport};
use crate::util::sha256_hex;

/// Anything that turns a framed token sequence into a fixed-size vector.
pub trait ChunkEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, seq: &TokenSequence) -> Result<Vec<f64>>;
    /// Identifies the weights, recorded in the embedding store header.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl ChunkEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            layers: 2,
            max_len: 128,
            ff_dim: 256,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub seq: TokenSequence,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct ChunkEncoder {
    config: ChunkEncoderConfig,
    params: ParamSet,
    token_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    classifier: Linear,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ChunkEncoderConfig,
}

const CHECKPOINT_KIND: &str = "chunk_encoder";

impl ChunkEncoder {
    pub fn new(config: ChunkEncoderConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.d_model % config.heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by {} heads",
                config.d_model, config.heads
            )));
        }
        if config.vocab_size == 0 || config.max_len < 3 || config.layers == 0 {
            return Err(invalid("chunk encoder needs vocab_size >= 1, max_len >= 3 and layers >= 1"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        let token_emb = params.add_normal("tok_emb", &[config.vocab_size, d], INIT_STD, &mut rng)?;
        let pos_emb = params.add_normal("pos_emb", &[config.max_len, d], INIT_STD, &mut rng)?;
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("layer{i}"), d, config.heads, config.ff_dim, config.dropout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(&mut params, "final_ln", d)?;
        let classifier = Linear::new(&mut params, "classifier", d, 2, &mut rng)?;
        Ok(Self {
            config,
            params,
            token_emb,
            pos_emb,
            layers,
            final_ln,
            classifier,
        })
    }

    pub fn config(&self) -> &ChunkEncoderConfig {
        &self.config
    }

    /// Final-layer hidden states `[len, d_model]`.
    pub fn hidden_states<'p>(&'p self, t: &mut Tape<'p>, seq: &TokenSequence, train: bool) -> Result<Var> {
        let len = seq.len();
        if len == 0 || len > self.config.max_len || seq.attention_mask.len() != len {
            return Err(invalid(format!(
                "token sequence of length {len} does not fit max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let tok = t.param(self.token_emb);
        let pos = t.param(self.pos_emb);
        let x = t.embedding(tok, &ids)?;
        let p = t.embedding(pos, &positions)?;
        let mut x = t.add(x, p)?;
        x = t.dropout(x, self.config.dropout, train)?;
        let mask = seq.key_mask();
        for layer in &self.layers {
            x = layer.forward(t, x, &mask, train)?;
        }
        self.final_ln.forward(t, x)
    }

    /// Hidden state at position 0, with dropout off.
    pub fn extract_cls(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let mut t = Tape::inference(&self.params);
        let h = self.hidden_states(&mut t, seq, false)?;
        let cls = t.slice_rows(h, 0, 1)?;
        Ok(t.value(cls).to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config,
        };
        encode_checkpoint(&self.params, &serde_json::to_string(&meta).expect("meta serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = decode_checkpoint(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(CoreError::Format(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", meta.kind)));
        }
        let mut model = Self::new(meta.config, 0)?;
        model.params.copy_from(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CoreError::MissingArtifact {
                stage: "train-chunk".into(),
                what: format!("chunk encoder checkpoint {}", path.display()),
            });
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Classifier for ChunkEncoder {
    type Example = LabeledSequence;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logits<'p>(&'p self, t: &mut Tape<'p>, ex: &LabeledSequence, train: bool) -> Result<Var> {
        let h = self.hidden_states(t, &ex.seq, train)?;
        let cls = t.slice_rows(h, 0, 1)?;
        self.classifier.forward(t, cls)
    }

    fn target(ex: &LabeledSequence) -> usize {
        ex.label
    }
}

impl ChunkEmbedder for ChunkEncoder {
    fn dim(&self) -> usize {
        self.config.d_model
    }

    fn embed(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.extract_cls(seq)
    }

    fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Every chunk of every document in `split`, labeled with its document label.
pub fn labeled_sequences(
    corpus: &Corpus,
    vocab: &Vocab,
    chunking: ChunkingParams,
    max_len: usize,
    split: Split,
) -> Result<Vec<LabeledSequence>> {
    let mut out = Vec::new();
    for doc in corpus.split(split) {
        for chunk in chunk_document(doc, chunking)? {
            out.push(LabeledSequence {
                seq: encode_chunk(&chunk, vocab, max_len)?,
                label: chunk.label.index(),
            });
        }
    }
    Ok(out)
}

pub fn finetune_chunk_encoder(
    model: &mut ChunkEncoder,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    fit(model, train, val, opts)
}

/// Embeds every chunk of every document, in corpus then chunk order.
pub fn embed_corpus(
    embedder: &dyn ChunkEmbedder,
    corpus: &Corpus,
    vocab: &Vocab,
    chunking: ChunkingParams,
    max_len: usize,
) -> Result<EmbeddingStore> {
    let mut seqs = Vec::new();
    let mut counts = Vec::with_capacity(corpus.len());
    for doc in &corpus.documents {
        let chunks = chunk_document(doc, chunking)?;
        counts.push(chunks.len());
        for c in &chunks {
            seqs.push(encode_chunk(c, vocab, max_len)?);
        }
    }
    let vectors: Vec<Vec<f64>> = seqs.par_iter().map(|s| embedder.embed(s)).collect::<Result<_>>()?;

    let mut header = StoreHeader::new(embedder.dim(), embedder.fingerprint());
    header.chunking = Some(chunking);
    header.max_len = Some(max_len);
    let mut store = EmbeddingStore::new(header);
    let mut rest = vectors.into_iter();
    for (doc, n) in corpus.documents.iter().zip(counts) {
        store.push(DocEmbeddings {
            doc_id: doc.id.clone(),
            label: doc.label,
            split: doc.split,
            vectors: rest.by_ref().take(n).collect(),
        })?;
    }
    Ok(store)
}
