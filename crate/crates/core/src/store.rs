//! Per-document sequences of chunk vectors, persisted in a binary file.
//!
//! Layout (little endian): magic `HDEMBST1`, `u32` format version,
//! `u64` header length + JSON [`StoreHeader`], `u64` document count, then per
//! document: `u32` id length + UTF-8 id, `u8` label, `u8` split
//! (0 train, 1 validation, 2 test), `u32` chunk count, and
//! `chunk_count * dim` `f64` values in chunk order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkingParams, Label, Split};
use crate::error::{CoreError, Result};
use crate::util::sha256_hex;

const MAGIC: &[u8; 8] = b"HDEMBST1";
pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format_version: u32,
    pub dim: usize,
    pub chunking: Option<ChunkingParams>,
    pub max_len: Option<usize>,
    /// Hash of the checkpoint (or external tool) that produced the vectors.
    pub source: String,
    /// Hash of the reducer model when the vectors are reduced.
    pub reduced_by: Option<String>,
}

impl StoreHeader {
    pub fn new(dim: usize, source: impl Into<String>) -> Self {
        Self {
            format_version: STORE_FORMAT_VERSION,
            dim,
            chunking: None,
            max_len: None,
            source: source.into(),
            reduced_by: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocEmbeddings {
    pub doc_id: String,
    pub label: Label,
    pub split: Split,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub header: StoreHeader,
    pub docs: Vec<DocEmbeddings>,
}

impl EmbeddingStore {
    pub fn new(header: StoreHeader) -> Self {
        Self { header, docs: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn push(&mut self, doc: DocEmbeddings) -> Result<()> {
        if let Some(v) = doc.vectors.iter().find(|v| v.len() != self.header.dim) {
            return Err(CoreError::DimensionMismatch {
                expected: self.header.dim,
                actual: v.len(),
            });
        }
        self.docs.push(doc);
        Ok(())
    }

    pub fn total_vectors(&self) -> usize {
        self.docs.iter().map(|d| d.vectors.len()).sum()
    }

    pub fn doc(&self, id: &str) -> Option<&DocEmbeddings> {
        self.docs.iter().find(|d| d.doc_id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DocEmbeddings> {
        self.docs.iter().filter(move |d| d.split == split)
    }

    /// Copy restricted to train and validation documents.
    pub fn fit_subset(&self) -> EmbeddingStore {
        EmbeddingStore {
            header: self.header.clone(),
            docs: self.docs.iter().filter(|d| d.split.is_fit_split()).cloned().collect(),
        }
    }

    /// Errors if any test-split vector is present.
    pub fn ensure_no_test(&self) -> Result<()> {
        match self.docs.iter().find(|d| d.split == Split::Test) {
            Some(d) => Err(CoreError::TestLeakage(format!(
                "document {:?} belongs to the test split",
                d.doc_id
            ))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + self.total_vectors() * self.dim() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&STORE_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.docs.len() as u64).to_le_bytes());
        for d in &self.docs {
            out.extend_from_slice(&(d.doc_id.len() as u32).to_le_bytes());
            out.extend_from_slice(d.doc_id.as_bytes());
            out.push(d.label.index() as u8);
            out.push(match d.split {
                Split::Train => 0,
                Split::Validation => 1,
                Split::Test => 2,
            });
            out.extend_from_slice(&(d.vectors.len() as u32).to_le_bytes());
            for v in &d.vectors {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(8)? != MAGIC {
            return Err(CoreError::Format("not an embedding store".into()));
        }
        let version = r.u32()?;
        if version != STORE_FORMAT_VERSION {
            return Err(CoreError::Format(format!("unsupported store version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: StoreHeader = serde_json::from_slice(r.take(header_len)?)?;
        let n_docs = r.u64()? as usize;
        let mut store = EmbeddingStore::new(header);
        for _ in 0..n_docs {
            let id_len = r.u32()? as usize;
            let doc_id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| CoreError::Format("document id is not UTF-8".into()))?;
            let label = Label::from_index(r.u8()? as usize).ok_or_else(|| CoreError::Format("bad label".into()))?;
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Validation,
                2 => Split::Test,
                s => return Err(CoreError::Format(format!("bad split code {s}"))),
            };
            let count = r.u32()? as usize;
            let dim = store.dim();
            let mut vectors = Vec::with_capacity(count);
            for _ in 0..count {
                let raw = r.take(dim * 8)?;
                vectors.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
            }
            store.push(DocEmbeddings {
                doc_id,
                label,
                split,
                vectors,
            })?;
        }
        if !r.0.is_empty() {
            return Err(CoreError::Format("trailing bytes in embedding store".into()));
        }
        Ok(store)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(CoreError::Format("truncated embedding store".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
