//! Labeled documents, word-window chunking, vocabulary and token framing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, CoreError, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

pub const DEFAULT_CHUNK_LEN: usize = 510;
pub const DEFAULT_OVERLAP: usize = 100;
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Rejected = 0,
    Accepted = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Rejected),
            1 => Some(Label::Accepted),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rejected" => Some(Label::Rejected),
            "accepted" => Some(Label::Accepted),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Rejected => "rejected",
            Label::Accepted => "accepted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Splits that unsupervised components may be fitted on.
    pub fn is_fit_split(self) -> bool {
        self != Split::Test
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub split: Split,
}

impl Document {
    pub fn words(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

/// Lowercases and splits on anything that is not alphanumeric or `_`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        if documents.is_empty() {
            return Err(CoreError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(CoreError::DuplicateId(d.id.clone()));
            }
            if d.text.trim().is_empty() {
                return Err(invalid(format!("document {:?} has empty text", d.id)));
            }
        }
        Ok(Self { documents })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for d in &self.documents {
            *counts.entry(d.split).or_default() += 1;
        }
        counts
    }
}

/// Reads a JSON-lines corpus. Blank lines are skipped; line numbers in
/// errors are 1-based physical lines.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CoreError::CorpusLine { line, msg };
        let value: Value = serde_json::from_str(raw).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let field = |name: &str| -> Result<&str> {
            value
                .get(name)
                .ok_or_else(|| err(format!("missing field {name:?}")))?
                .as_str()
                .ok_or_else(|| err(format!("field {name:?} must be a string")))
        };
        let id = field("id")?.to_string();
        let text = field("text")?.to_string();
        let label_str = field("label")?;
        let label = Label::parse(label_str).ok_or_else(|| err(format!("unknown label {label_str:?}")))?;
        let split_str = field("split")?;
        let split = Split::parse(split_str).ok_or_else(|| err(format!("unknown split {split_str:?}")))?;
        if text.trim().is_empty() {
            return Err(err(format!("document {id:?} has empty text")));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(err(format!("duplicate id {id:?} (first seen on line {first})")));
        }
        docs.push(Document { id, text, label, split });
    }
    if docs.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    Ok(Corpus { documents: docs })
}

/// Serializes documents in the corpus file format.
pub fn write_corpus_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        let record = serde_json::json!({
            "id": d.id,
            "text": d.text,
            "label": d.label.as_str(),
            "split": d.split.as_str(),
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub words: Vec<String>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingParams {
    pub chunk_len: usize,
    pub overlap: usize,
}

impl Default for ChunkingParams {
    fn default() -> Self {
        Self {
            chunk_len: DEFAULT_CHUNK_LEN,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl ChunkingParams {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.overlap >= self.chunk_len {
            return Err(invalid(format!(
                "overlap ({}) must be smaller than chunk_len ({})",
                self.overlap, self.chunk_len
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_len - self.overlap
    }

    /// Number of windows needed to cover `n_words` words.
    pub fn chunk_count(&self, n_words: usize) -> usize {
        if n_words <= self.chunk_len {
            1
        } else {
            (n_words - self.chunk_len).div_ceil(self.stride()) + 1
        }
    }
}

/// Splits a document into overlapping word windows. Window `i` starts at
/// word `i * (chunk_len - overlap)`; the last window ends on the last word.
pub fn chunk_document(doc: &Document, params: ChunkingParams) -> Result<Vec<Chunk>> {
    params.validate()?;
    let words = doc.words();
    chunk_words(&doc.id, doc.label, &words, params)
}

pub fn chunk_words(doc_id: &str, label: Label, words: &[String], params: ChunkingParams) -> Result<Vec<Chunk>> {
    params.validate()?;
    if words.is_empty() {
        return Err(invalid(format!("document {doc_id:?} has no words")));
    }
    let n = params.chunk_count(words.len());
    Ok((0..n)
        .map(|i| {
            let start = i * params.stride();
            let end = (start + params.chunk_len).min(words.len());
            Chunk {
                doc_id: doc_id.to_string(),
                index: i,
                words: words[start..end].to_vec(),
                label,
            }
        })
        .collect())
}

/// Inverse of [`chunk_document`]: the first chunk in full, then each later
/// chunk minus its leading `overlap` words.
pub fn dechunk(chunks: &[Chunk], overlap: usize) -> Vec<String> {
    let mut out = Vec::new();
    for (i, c) in chunks.iter().enumerate() {
        let skip = if i == 0 { 0 } else { overlap.min(c.words.len()) };
        out.extend_from_slice(&c.words[skip..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Token for each id; the first four entries are the reserved tokens.
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..4].iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b) {
            return Err(invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        match self.index.get(word) {
            Some(&id) if id as usize >= RESERVED_TOKENS.len() => id,
            _ => UNK_ID,
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id(word) != UNK_ID
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_tokens(serde_json::from_str(s)?)
    }
}

/// Keeps the `max_size` most frequent words occurring at least `min_freq`
/// times in the train and validation splits. Ties break alphabetically.
pub fn build_vocab(corpus: &Corpus, max_size: usize, min_freq: usize) -> Result<Vocab> {
    if max_size < 1 {
        return Err(invalid("vocabulary max_size must be at least 1"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus.documents.iter().filter(|d| d.split.is_fit_split()) {
        for w in doc.words() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut eligible: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&w.as_str()))
        .collect();
    eligible.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    eligible.truncate(max_size);
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(eligible.into_iter().map(|(w, _)| w))
        .collect();
    Vocab::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }
}

/// Frames a chunk as `[CLS] w1..wk [SEP] [PAD]...` with `k = min(words, max_len - 2)`.
pub fn encode_chunk(chunk: &Chunk, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    encode_words(&chunk.words, vocab, max_len)
}

pub fn encode_words(words: &[String], vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(invalid(format!("max_len must be at least 3, got {max_len}")));
    }
    let k = words.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(words[..k].iter().map(|w| vocab.id(w)));
    ids.push(SEP_ID);
    ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![1u8; k + 2];
    attention_mask.resize(max_len, 0);
    Ok(TokenSequence { ids, attention_mask })
}

/// Tokens of the non-reserved ids, in order.
pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> Vec<String> {
    seq.ids
        .iter()
        .filter(|&&id| id as usize >= RESERVED_TOKENS.len())
        .filter_map(|&id| vocab.token(id).map(str::to_string))
        .collect()
}
