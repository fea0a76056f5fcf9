//! Stage runner over an artifact directory.
//!
//! Every stage records in `manifest.json` the hash of its config sections,
//! the hashes of the files it read and of the files it wrote. A stage is up
//! to date when all three still match and its upstream stages are up to
//! date too; `pipeline` skips such stages.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::chunk_encoder::{embed_corpus, finetune_chunk_encoder, labeled_sequences, ChunkEncoder, ChunkEncoderConfig};
use crate::clusterer::ClusterModel;
use crate::config::PipelineConfig;
use crate::corpus::{build_vocab, load_corpus, Split, Vocab};
use crate::doc_encoder::{build_doc_batches, build_doc_examples, predict, ClusterIds, DocModel, DocModelConfig, PipelineVariant};
use crate::error::{CoreError, Result};
use crate::evalx::experiment::{merge_shards, render_table, rows_to_jsonl, MetricsRow, ASSIGNED_TEST_CLUSTERS};
use crate::reducer::fit_pumap;
use crate::store::EmbeddingStore;
use crate::train::{evaluate, TrainReport};
use crate::util::sha256_hex;

pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const LOCK: &str = ".lock";
    pub const CORPUS: &str = "corpus";
    pub const VOCAB: &str = "vocab.json";
    pub const CORPUS_SUMMARY: &str = "corpus_summary.json";
    pub const CHUNK_CKPT: &str = "chunk_encoder.ckpt";
    pub const CHUNK_REPORT: &str = "chunk_report.json";
    pub const EMBEDDINGS: &str = "embeddings.store";
    pub const UMAP: &str = "umap.ckpt";
    pub const REDUCED: &str = "reduced.store";
    pub const REDUCE_REPORT: &str = "reduce_report.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const CLUSTER_SUMMARY: &str = "cluster_summary.json";
    pub const DOC_CKPT: &str = "doc_model.ckpt";
    pub const DOC_REPORT: &str = "doc_report.json";
    pub const RESULTS: &str = "results.jsonl";
    pub const TABLE: &str = "results.txt";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const VARIANTS_DIR: &str = "variants";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    TrainChunk,
    Embed,
    Reduce,
    Cluster,
    TrainDoc,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::TrainChunk,
        Stage::Embed,
        Stage::Reduce,
        Stage::Cluster,
        Stage::TrainDoc,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainChunk => "train-chunk",
            Stage::Embed => "embed",
            Stage::Reduce => "reduce",
            Stage::Cluster => "cluster",
            Stage::TrainDoc => "train-doc",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["corpus"],
            Stage::TrainChunk => &["corpus", "chunk_encoder"],
            Stage::Embed => &["corpus"],
            Stage::Reduce => &["reducer"],
            Stage::Cluster => &["clusterer"],
            Stage::TrainDoc => &["doc_model"],
            Stage::Evaluate => &["doc_model", "evaluate"],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        use files::*;
        match self {
            Stage::Ingest => &[VOCAB, CORPUS_SUMMARY],
            Stage::TrainChunk => &[CHUNK_CKPT, CHUNK_REPORT],
            Stage::Embed => &[EMBEDDINGS],
            Stage::Reduce => &[UMAP, REDUCED, REDUCE_REPORT],
            Stage::Cluster => &[CLUSTERS, CLUSTER_SUMMARY],
            Stage::TrainDoc => &[DOC_CKPT, DOC_REPORT],
            Stage::Evaluate => &[RESULTS, TABLE, PREDICTIONS],
        }
    }
}

/// Stage that writes an input artifact, and how to call it in messages.
fn producer(key: &str) -> (&'static str, &'static str) {
    use files::*;
    match key {
        CORPUS => ("synth", "corpus file"),
        VOCAB => ("ingest", "vocabulary"),
        CHUNK_CKPT => ("train-chunk", "chunk encoder checkpoint"),
        EMBEDDINGS => ("embed", "chunk embeddings"),
        REDUCED => ("reduce", "reduced embeddings"),
        CLUSTERS => ("cluster", "cluster model"),
        DOC_CKPT => ("train-doc", "document model checkpoint"),
        _ => ("pipeline", "artifact"),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub summary: String,
}

/// Exclusive ownership of an artifact directory for the guard's lifetime.
pub struct DirLock(PathBuf);

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(files::LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CoreError::Config(format!(
                "artifact directory {} is locked by another run (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn variant_slug(v: PipelineVariant) -> String {
    v.name().replace('/', "__").replace('+', "_plus_")
}

/// Loaded Step II inputs, shared across variants.
#[derive(Default)]
struct DocInputs {
    full: Option<EmbeddingStore>,
    reduced: Option<EmbeddingStore>,
    clusters: Option<ClusterIds>,
}

impl DocInputs {
    fn store(&self, v: PipelineVariant) -> &EmbeddingStore {
        if v.source.reduced() {
            self.reduced.as_ref().expect("reduced store loaded")
        } else {
            self.full.as_ref().expect("full store loaded")
        }
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            dir: dir.into(),
            verbose: false,
        }
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        if name == files::CORPUS {
            self.config.corpus.path.clone()
        } else {
            self.dir.join(name)
        }
    }

    fn doc_needs(v: PipelineVariant) -> Vec<&'static str> {
        let mut need = Vec::new();
        if !v.source.reduced() {
            need.push(files::EMBEDDINGS);
        }
        if v.source.reduced() || v.source.uses_clusters() {
            need.push(files::REDUCED);
        }
        if v.source.uses_clusters() {
            need.push(files::CLUSTERS);
        }
        need
    }

    fn grid(&self) -> Result<Vec<PipelineVariant>> {
        self.config.evaluate.variants()
    }

    pub fn inputs(&self, stage: Stage) -> Result<Vec<&'static str>> {
        use files::*;
        let mut v = match stage {
            Stage::Ingest => vec![CORPUS],
            Stage::TrainChunk => vec![CORPUS, VOCAB],
            Stage::Embed => vec![CORPUS, VOCAB, CHUNK_CKPT],
            Stage::Reduce => vec![EMBEDDINGS],
            Stage::Cluster => vec![REDUCED],
            Stage::TrainDoc => Self::doc_needs(self.config.doc_model.variant()),
            Stage::Evaluate => {
                let mut all = vec![DOC_CKPT];
                all.extend(Self::doc_needs(self.config.doc_model.variant()));
                for g in self.grid()? {
                    all.extend(Self::doc_needs(g));
                }
                all
            }
        };
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        let path = self.path(files::MANIFEST);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| CoreError::Format(format!("manifest: {e}")))
    }

    fn save_manifest(&self, m: &Manifest) -> Result<()> {
        let tmp = self.path("manifest.json.tmp");
        write_json(&tmp, m)?;
        std::fs::rename(tmp, self.path(files::MANIFEST))?;
        Ok(())
    }

    /// `Ok` when the stage's recorded run still matches config, inputs,
    /// outputs and upstream stages; otherwise the reason it does not.
    pub fn status(&self, stage: Stage, manifest: &Manifest) -> Result<std::result::Result<(), String>> {
        let Some(rec) = manifest.stages.get(stage.name()) else {
            return Ok(Err(format!("`{}` has not run", stage.name())));
        };
        if rec.config_hash != self.config.section_hash(stage.sections()) {
            return Ok(Err(format!("configuration of `{}` changed", stage.name())));
        }
        let inputs = self.inputs(stage)?;
        if inputs.len() != rec.inputs.len() {
            return Ok(Err(format!("inputs of `{}` changed", stage.name())));
        }
        for key in &inputs {
            let path = self.path(key);
            if !path.exists() {
                return Ok(Err(format!("{key} is missing")));
            }
            if rec.inputs.get(*key) != Some(&file_hash(&path)?) {
                return Ok(Err(format!("{key} changed since `{}` ran", stage.name())));
            }
        }
        for (name, hash) in &rec.outputs {
            let path = self.path(name);
            if !path.exists() || &file_hash(&path)? != hash {
                return Ok(Err(format!("{name} was modified or removed")));
            }
        }
        for key in inputs {
            if let Some(up) = Stage::parse(producer(key).0) {
                if let Err(reason) = self.status(up, manifest)? {
                    return Ok(Err(reason));
                }
            }
        }
        Ok(Ok(()))
    }

    /// Errors when an input is missing or was produced by a stale stage.
    fn check_inputs(&self, stage: Stage, manifest: &Manifest) -> Result<()> {
        for key in self.inputs(stage)? {
            let (up, what) = producer(key);
            let path = self.path(key);
            if !path.exists() {
                return Err(CoreError::MissingArtifact {
                    stage: up.into(),
                    what: what.into(),
                });
            }
            if let Some(up_stage) = Stage::parse(up) {
                if let Err(reason) = self.status(up_stage, manifest)? {
                    return Err(CoreError::StaleArtifact {
                        stage: up.into(),
                        what: format!("{what} ({key})"),
                        reason,
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs one stage unconditionally after checking its inputs.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let _lock = DirLock::acquire(&self.dir)?;
        self.run_locked(stage)
    }

    fn run_locked(&self, stage: Stage) -> Result<StageOutcome> {
        let mut manifest = self.load_manifest()?;
        self.check_inputs(stage, &manifest)?;
        let mut inputs = BTreeMap::new();
        for key in self.inputs(stage)? {
            inputs.insert(key.to_string(), file_hash(&self.path(key))?);
        }
        self.log(&format!("[{}] running", stage.name()));
        let summary = self.execute(stage)?;
        let mut outputs = BTreeMap::new();
        for name in stage.outputs() {
            outputs.insert(name.to_string(), file_hash(&self.path(name))?);
        }
        manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                config_hash: self.config.section_hash(stage.sections()),
                inputs,
                outputs,
            },
        );
        self.save_manifest(&manifest)?;
        self.log(&format!("[{}] {summary}", stage.name()));
        Ok(StageOutcome {
            stage,
            skipped: false,
            summary,
        })
    }

    /// All stages in order, skipping those that are up to date.
    pub fn run_pipeline(&self) -> Result<Vec<StageOutcome>> {
        let _lock = DirLock::acquire(&self.dir)?;
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let manifest = self.load_manifest()?;
            if self.status(stage, &manifest)?.is_ok() {
                self.log(&format!("[{}] up to date, skipped", stage.name()));
                out.push(StageOutcome {
                    stage,
                    skipped: true,
                    summary: "up to date".into(),
                });
            } else {
                out.push(self.run_locked(stage)?);
            }
        }
        Ok(out)
    }

    fn execute(&self, stage: Stage) -> Result<String> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::TrainChunk => self.train_chunk(),
            Stage::Embed => self.embed(),
            Stage::Reduce => self.reduce(),
            Stage::Cluster => self.cluster(),
            Stage::TrainDoc => self.train_doc(),
            Stage::Evaluate => self.evaluate_grid().map(|rows| format!("{} result rows", rows.len())),
        }
    }

    fn load_vocab(&self) -> Result<Vocab> {
        Vocab::from_json(&std::fs::read_to_string(self.path(files::VOCAB))?)
    }

    fn ingest(&self) -> Result<String> {
        let c = &self.config.corpus;
        let corpus = load_corpus(&c.path)?;
        let vocab = build_vocab(&corpus, c.vocab_max_size, c.vocab_min_freq)?;
        std::fs::write(self.path(files::VOCAB), vocab.to_json())?;
        let counts: BTreeMap<&str, usize> = corpus.split_counts().into_iter().map(|(s, n)| (s.as_str(), n)).collect();
        write_json(
            &self.path(files::CORPUS_SUMMARY),
            &serde_json::json!({ "documents": corpus.len(), "splits": counts, "vocab_size": vocab.len() }),
        )?;
        Ok(format!("{} documents {:?}, vocabulary {}", corpus.len(), counts, vocab.len()))
    }

    fn train_chunk(&self) -> Result<String> {
        let c = &self.config.corpus;
        let s = &self.config.chunk_encoder;
        let corpus = load_corpus(&c.path)?;
        let vocab = self.load_vocab()?;
        let train = labeled_sequences(&corpus, &vocab, c.chunking(), c.max_len, Split::Train)?;
        let val = labeled_sequences(&corpus, &vocab, c.chunking(), c.max_len, Split::Validation)?;
        let config = ChunkEncoderConfig {
            vocab_size: vocab.len(),
            d_model: s.d_model,
            heads: s.heads,
            layers: s.layers,
            max_len: c.max_len,
            ff_dim: s.ff_dim,
            dropout: s.dropout,
        };
        let mut model = ChunkEncoder::new(config, s.seed)?;
        let report = finetune_chunk_encoder(&mut model, &train, &val, &s.train_options())?;
        model.save(&self.path(files::CHUNK_CKPT))?;
        write_json(&self.path(files::CHUNK_REPORT), &report)?;
        Ok(describe_report(&report, train.len()))
    }

    fn embed(&self) -> Result<String> {
        let c = &self.config.corpus;
        let model = ChunkEncoder::load(&self.path(files::CHUNK_CKPT))?;
        let corpus = load_corpus(&c.path)?;
        let vocab = self.load_vocab()?;
        let store = embed_corpus(&model, &corpus, &vocab, c.chunking(), c.max_len)?;
        store.save(&self.path(files::EMBEDDINGS))?;
        Ok(format!("{} vectors for {} documents", store.total_vectors(), store.docs.len()))
    }

    fn reduce(&self) -> Result<String> {
        let store = EmbeddingStore::load(&self.path(files::EMBEDDINGS))?;
        let (model, report) = fit_pumap(&store.fit_subset(), &self.config.reducer)?;
        let reduced = model.reduce_store(&store)?;
        model.save(&self.path(files::UMAP))?;
        reduced.save(&self.path(files::REDUCED))?;
        write_json(&self.path(files::REDUCE_REPORT), &report)?;
        Ok(format!(
            "{} points, {} edges, final loss {:.4}",
            report.n_points,
            report.n_edges,
            report.epoch_losses.last().copied().unwrap_or(0.0)
        ))
    }

    fn load_reduced(&self) -> Result<EmbeddingStore> {
        let store = EmbeddingStore::load(&self.path(files::REDUCED))?;
        if store.header.reduced_by.is_none() {
            return Err(CoreError::MissingArtifact {
                stage: "reduce".into(),
                what: "reduced embeddings".into(),
            });
        }
        Ok(store)
    }

    fn cluster(&self) -> Result<String> {
        let reduced = self.load_reduced()?;
        let model = ClusterModel::fit(&reduced.fit_subset(), self.config.clusterer)?;
        model.save(&self.path(files::CLUSTERS))?;
        let summary = model.summary();
        write_json(&self.path(files::CLUSTER_SUMMARY), &summary)?;
        Ok(format!(
            "{} clusters over {} chunks, noise {:.1}%",
            summary.n_clusters,
            model.labels.len(),
            100.0 * summary.noise_fraction
        ))
    }

    fn doc_inputs(&self, variants: &[PipelineVariant]) -> Result<DocInputs> {
        let mut inp = DocInputs::default();
        if variants.iter().any(|v| !v.source.reduced()) {
            inp.full = Some(EmbeddingStore::load(&self.path(files::EMBEDDINGS))?);
        }
        if variants.iter().any(|v| v.source.reduced() || v.source.uses_clusters()) {
            inp.reduced = Some(self.load_reduced()?);
        }
        if variants.iter().any(|v| v.source.uses_clusters()) {
            let model = ClusterModel::load(&self.path(files::CLUSTERS))?;
            let reduced = inp.reduced.as_ref().expect("loaded above");
            inp.clusters = Some(ClusterIds {
                n_clusters: model.n_clusters(),
                by_doc: model.document_ids(reduced)?,
            });
        }
        Ok(inp)
    }

    fn train_variant(&self, inp: &DocInputs, variant: PipelineVariant) -> Result<(DocModel, TrainReport)> {
        let s = &self.config.doc_model;
        let store = inp.store(variant);
        let clusters = inp.clusters.as_ref().filter(|_| variant.source.uses_clusters());
        let train = build_doc_examples(store, clusters, variant, s.max_chunks, &[Split::Train])?;
        let val = build_doc_examples(store, clusters, variant, s.max_chunks, &[Split::Validation])?;
        let config = DocModelConfig {
            variant,
            d_in: store.dim(),
            n_clusters: clusters.map_or(0, |c| c.n_clusters),
            d_cluster: s.d_cluster,
            d_enc: s.d_enc,
            heads: s.heads,
            ff_dim: s.ff_dim,
            max_chunks: s.max_chunks,
            dropout: s.dropout,
        };
        let mut model = DocModel::new(config, s.seed)?;
        let report = crate::doc_encoder::train_doc_model(
            &mut model,
            &build_doc_batches(train, s.batch_size)?,
            &build_doc_batches(val, s.batch_size)?,
            &s.train_options(variant),
        )?;
        Ok((model, report))
    }

    fn train_doc(&self) -> Result<String> {
        let variant = self.config.doc_model.variant();
        let inp = self.doc_inputs(&[variant])?;
        let (model, report) = self.train_variant(&inp, variant)?;
        model.save(&self.path(files::DOC_CKPT))?;
        write_json(&self.path(files::DOC_REPORT), &report)?;
        Ok(format!("{variant}: {}", describe_report(&report, 0)))
    }

    /// Trains (or loads, for the configured variant) every grid variant,
    /// scores validation and test, writes per-variant shards, and merges
    /// them into the results files.
    pub fn evaluate_grid(&self) -> Result<Vec<MetricsRow>> {
        let primary = self.config.doc_model.variant();
        let grid = self.grid()?;
        let mut all = grid.clone();
        all.push(primary);
        let inp = self.doc_inputs(&all)?;
        let s = &self.config.doc_model;
        let variants_dir = self.path(files::VARIANTS_DIR);
        let mut shards = Vec::new();
        for &variant in &grid {
            let start = Instant::now();
            let (model, flags) = if variant == primary {
                (DocModel::load(&self.path(files::DOC_CKPT))?, Vec::new())
            } else {
                let (m, r) = self.train_variant(&inp, variant)?;
                (m, r.flags)
            };
            let store = inp.store(variant);
            let clusters = inp.clusters.as_ref().filter(|_| variant.source.uses_clusters());
            let mut rows = Vec::new();
            for split in [Split::Validation, Split::Test] {
                let examples = build_doc_examples(store, clusters, variant, s.max_chunks, &[split])?;
                let metrics = evaluate(&model, &examples)?;
                let mut row = MetricsRow::new(&variant.name(), split, &metrics, s.seed);
                row.flags.extend(flags.iter().cloned());
                if split == Split::Test && variant.source.uses_clusters() {
                    row.flags.push(ASSIGNED_TEST_CLUSTERS.into());
                }
                if self.config.evaluate.record_wall_clock {
                    row.wall_clock_s = Some(start.elapsed().as_secs_f64());
                }
                rows.push(row);
            }
            let shard_dir = variants_dir.join(variant_slug(variant));
            std::fs::create_dir_all(&shard_dir)?;
            if variant != primary {
                model.save(&shard_dir.join("model.ckpt"))?;
            }
            std::fs::write(shard_dir.join(files::RESULTS), rows_to_jsonl(&rows))?;
            self.log(&format!(
                "[evaluate] {variant}: test accuracy {:.2}%",
                rows.last().map_or(0.0, |r| r.accuracy)
            ));
            shards.push(rows);
        }
        let rows = merge_shards(shards);
        std::fs::write(self.path(files::RESULTS), rows_to_jsonl(&rows))?;
        std::fs::write(self.path(files::TABLE), render_table(&rows))?;

        let model = DocModel::load(&self.path(files::DOC_CKPT))?;
        let clusters = inp.clusters.as_ref().filter(|_| primary.source.uses_clusters());
        let test = build_doc_examples(inp.store(primary), clusters, primary, s.max_chunks, &[Split::Test])?;
        let preds: String = predict(&model, &test)?
            .iter()
            .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
            .collect();
        std::fs::write(self.path(files::PREDICTIONS), preds)?;
        Ok(rows)
    }
}

fn describe_report(report: &TrainReport, n_train: usize) -> String {
    let best = &report.epochs[report.best_epoch - 1];
    let val = best
        .validation
        .as_ref()
        .map_or("n/a".to_string(), |m| format!("{:.2}%", 100.0 * m.accuracy));
    let mut s = format!(
        "best epoch {} of {}, train loss {:.4}, validation accuracy {val}",
        report.best_epoch,
        report.epochs.len(),
        best.train_loss
    );
    if n_train > 0 {
        s.push_str(&format!(", {n_train} training examples"));
    }
    if !report.flags.is_empty() {
        s.push_str(&format!(" [{}]", report.flags.join(", ")));
    }
    s
}
