//! Central finite differences through whole models: forward, cross-entropy,
//! backward. Parameters are first redrawn at O(1) scale so gradients are
//! not vanishingly small.
#![allow(dead_code)]

use hier_core::chunk_encoder::{ChunkEncoder, ChunkEncoderConfig, LabeledSequence};
use hier_core::corpus::{Split, TokenSequence};
use hier_core::doc_encoder::{DocExample, DocModel, DocModelConfig, HeadKind, InputSource, PipelineVariant};
use hier_core::train::Classifier;
use hier_tensor::{ParamId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SLICES: usize = 12;
const PROBES_PER_SLICE: usize = 3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn loss<M: Classifier>(model: &M, examples: &[M::Example]) -> (f64, Vec<Vec<f64>>) {
    let mut t = Tape::with_params(model.params());
    let rows: Vec<_> = examples.iter().map(|e| model.logits(&mut t, e, true).unwrap()).collect();
    let logits = t.concat(&rows, 0).unwrap();
    let targets: Vec<usize> = examples.iter().map(M::target).collect();
    let l = t.cross_entropy(logits, &targets).unwrap();
    let value = t.value(l)[0];
    let grads = t.backward(l).unwrap();
    (value, grads.into_params())
}

fn randomize<M: Classifier>(model: &mut M, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        for x in model.params_mut().get_mut(id).data_mut() {
            *x = rng.random_range(-0.6..0.6);
        }
    }
}

/// Worst relative error over `SLICES` random parameter tensors.
pub fn check_model<M: Classifier>(model: &mut M, examples: &[M::Example], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize(model, &mut rng);
    let (_, analytic) = loss(model, examples);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut worst = 0.0f64;
    for _ in 0..SLICES {
        let id = ids[rng.random_range(0..ids.len())];
        let n = model.params().get(id).data().len();
        for _ in 0..PROBES_PER_SLICE {
            let k = rng.random_range(0..n);
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + H;
            let fp = loss(model, examples).0;
            model.params_mut().get_mut(id).data_mut()[k] = orig - H;
            let fm = loss(model, examples).0;
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            worst = worst.max(rel_err(analytic[id.index()][k], numeric));
        }
    }
    worst
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> TokenSequence {
    let real = rng.random_range(3..=max_len);
    let mut ids = vec![1u32];
    ids.extend((0..real - 2).map(|_| rng.random_range(4..vocab as u32)));
    ids.push(2);
    let mut mask = vec![1u8; real];
    ids.resize(max_len, 0);
    mask.resize(max_len, 0);
    TokenSequence { ids, attention_mask: mask }
}

pub fn chunk_encoder_check(seed: u64) -> f64 {
    let config = ChunkEncoderConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        max_len: 9,
        ff_dim: 12,
        ..ChunkEncoderConfig::new(30)
    };
    let mut model = ChunkEncoder::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let examples: Vec<LabeledSequence> = (0..3)
        .map(|i| LabeledSequence {
            seq: random_seq(&mut rng, 30, 9),
            label: i % 2,
        })
        .collect();
    check_model(&mut model, &examples, seed)
}

pub fn doc_example(rng: &mut ChaCha8Rng, d_in: usize, max_chunks: usize, n_clusters: usize, label: usize) -> DocExample {
    let real = rng.random_range(1..=max_chunks);
    let mut embeddings: Vec<Vec<f64>> = (0..real).map(|_| (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut cluster_ids: Vec<usize> = (0..real).map(|_| rng.random_range(0..n_clusters + 2)).map(|r| if r == 1 { 0 } else { r }).collect();
    let mut mask = vec![true; real];
    embeddings.resize(max_chunks, vec![0.0; d_in]);
    cluster_ids.resize(max_chunks, 1);
    mask.resize(max_chunks, false);
    DocExample {
        doc_id: format!("doc{label}{real}"),
        split: Split::Train,
        embeddings,
        mask,
        cluster_ids,
        label,
    }
}

pub fn small_doc_config(head: HeadKind, d_in: usize) -> DocModelConfig {
    DocModelConfig {
        d_cluster: 4,
        d_enc: 8,
        heads: 2,
        ff_dim: 12,
        max_chunks: 5,
        ..DocModelConfig::new(PipelineVariant::new(InputSource::Alpha, head), d_in, 3)
    }
}

pub fn doc_encoder_check(head: HeadKind, seed: u64) -> f64 {
    let config = small_doc_config(head, 6);
    let mut model = DocModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
    let examples: Vec<DocExample> = (0..3).map(|i| doc_example(&mut rng, 6, 5, 3, i % 2)).collect();
    check_model(&mut model, &examples, seed)
}
