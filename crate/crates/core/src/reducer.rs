//! Parametric UMAP: a fuzzy kNN graph over the fit vectors and a small
//! network trained so that its outputs reproduce that graph.

use std::collections::BTreeMap;
use std::path::Path;

use hier_tensor::{clip_grad_norm, decode_checkpoint, encode_checkpoint, Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::nn::Linear;
use crate::store::{DocEmbeddings, EmbeddingStore};
use crate::util::{euclidean, sha256_hex};

/// Inside the repulsion log, keeps coincident points finite.
pub const REPULSION_EPS: f64 = 1e-4;
const BISECTION_ITERS: usize = 200;
const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReducerParams {
    pub k: usize,
    pub out_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub negative_rate: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ReducerParams {
    fn default() -> Self {
        Self {
            k: 15,
            out_dim: 64,
            hidden: 128,
            epochs: 20,
            negative_rate: 5,
            lr: 1e-3,
            batch_size: 256,
            seed: 2,
        }
    }
}

/// `a + b - a * b`, the fuzzy union of two directed memberships.
pub fn symmetrize(a_ij: f64, a_ji: f64) -> f64 {
    a_ij + a_ji - a_ij * a_ji
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    pub k: usize,
    /// Per point, its `k` nearest neighbors by (distance, index).
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Directed memberships, aligned with `neighbors`.
    pub memberships: Vec<Vec<f64>>,
    /// Symmetrized weights keyed by `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl FuzzyGraph {
    pub fn target(&self) -> f64 {
        (self.k as f64).log2()
    }

    /// `|Σ_j a_ij − log2(k)|` for point `i`.
    pub fn calibration_error(&self, i: usize) -> f64 {
        (self.memberships[i].iter().sum::<f64>() - self.target()).abs()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.edges
            .binary_search_by(|e| (e.0, e.1).cmp(&key))
            .map_or(0.0, |p| self.edges[p].2)
    }
}

fn membership_sum(dists: &[f64], rho: f64, sigma: f64) -> f64 {
    dists.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum()
}

/// Bandwidth with `Σ exp(−max(0, d − ρ)/σ) = target`, by bisection.
fn solve_sigma(dists: &[f64], rho: f64, target: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while membership_sum(dists, rho, hi) < target && grow < 2000 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
    }
    let mut mid = hi;
    for _ in 0..BISECTION_ITERS {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = membership_sum(dists, rho, mid);
        if (s - target).abs() < 1e-12 {
            break;
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

pub fn build_fuzzy_graph(points: &[Vec<f64>], k: usize) -> Result<FuzzyGraph> {
    let n = points.len();
    if k < 2 || k >= n {
        return Err(invalid(format!("k must satisfy 2 <= k < n, got k = {k}, n = {n}")));
    }
    let target = (k as f64).log2();
    let rows: Vec<(Vec<usize>, Vec<f64>, f64, f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (euclidean(&points[i], &points[j]), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nbrs: Vec<usize> = cand.iter().map(|c| c.1).collect();
            let dists: Vec<f64> = cand.iter().map(|c| c.0).collect();
            let rho = dists[0];
            let sigma = solve_sigma(&dists, rho, target);
            let a: Vec<f64> = dists.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).collect();
            (nbrs, dists, rho, sigma, a)
        })
        .collect();

    let mut directed: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        for (&j, &a) in row.0.iter().zip(&row.4) {
            let entry = directed.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
            if i < j {
                entry.0 = a;
            } else {
                entry.1 = a;
            }
        }
    }
    let edges = directed
        .into_iter()
        .map(|((i, j), (a, b))| (i, j, symmetrize(a, b)))
        .filter(|e| e.2 > 0.0)
        .collect();

    let mut g = FuzzyGraph {
        k,
        neighbors: Vec::with_capacity(n),
        distances: Vec::with_capacity(n),
        rho: Vec::with_capacity(n),
        sigma: Vec::with_capacity(n),
        memberships: Vec::with_capacity(n),
        edges,
    };
    for (nb, d, rho, sigma, a) in rows {
        g.neighbors.push(nb);
        g.distances.push(d);
        g.rho.push(rho);
        g.sigma.push(sigma);
        g.memberships.push(a);
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct UmapModel {
    params: ParamSet,
    layers: [Linear; 3],
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Fingerprint of the store the network was fitted on.
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct UmapMeta {
    kind: String,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    source: String,
}

const CHECKPOINT_KIND: &str = "umap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapReport {
    pub n_points: usize,
    pub n_edges: usize,
    pub max_calibration_error: f64,
    pub epoch_losses: Vec<f64>,
}

impl UmapModel {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(invalid("reducer dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let he = |d: usize| (2.0 / d as f64).sqrt();
        let layers = [
            Linear::with_std(&mut params, "umap.l1", in_dim, hidden, he(in_dim), &mut rng)?,
            Linear::with_std(&mut params, "umap.l2", hidden, hidden, he(hidden), &mut rng)?,
            Linear::with_std(&mut params, "umap.l3", hidden, out_dim, (1.0 / hidden as f64).sqrt(), &mut rng)?,
        ];
        Ok(Self {
            params,
            layers,
            in_dim,
            hidden,
            out_dim,
            source: String::new(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(t, x)?;
        let h = t.gelu(h);
        let h = self.layers[1].forward(t, h)?;
        let h = t.gelu(h);
        self.layers[2].forward(t, h)
    }

    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.transform_rows(std::slice::from_ref(&v.to_vec()))?.remove(0))
    }

    fn transform_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.in_dim) {
            return Err(CoreError::DimensionMismatch {
                expected: self.in_dim,
                actual: r.len(),
            });
        }
        let mut t = Tape::inference(&self.params);
        let x = t.constant(Tensor::from_rows(rows)?);
        let z = self.forward(&mut t, x)?;
        Ok(t.value(z).chunks(self.out_dim).map(<[f64]>::to_vec).collect())
    }

    /// Row-wise transform; each output row depends only on its input row.
    pub fn transform_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let parts: Vec<Vec<Vec<f64>>> = rows.par_chunks(256).map(|c| self.transform_rows(c)).collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Reduces every document (test included) into a new store.
    pub fn reduce_store(&self, store: &EmbeddingStore) -> Result<EmbeddingStore> {
        if store.dim() != self.in_dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.in_dim,
                actual: store.dim(),
            });
        }
        let flat: Vec<Vec<f64>> = store.docs.iter().flat_map(|d| d.vectors.iter().cloned()).collect();
        let mut reduced = self.transform_batch(&flat)?.into_iter();
        let mut header = store.header.clone();
        header.dim = self.out_dim;
        header.reduced_by = Some(self.fingerprint());
        let mut out = EmbeddingStore::new(header);
        for d in &store.docs {
            out.push(DocEmbeddings {
                doc_id: d.doc_id.clone(),
                label: d.label,
                split: d.split,
                vectors: reduced.by_ref().take(d.vectors.len()).collect(),
            })?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = UmapMeta {
            kind: CHECKPOINT_KIND.into(),
            in_dim: self.in_dim,
            hidden: self.hidden,
            out_dim: self.out_dim,
            source: self.source.clone(),
        };
        encode_checkpoint(&self.params, &serde_json::to_string(&meta).expect("meta serializes"))
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = decode_checkpoint(bytes)?;
        let meta: UmapMeta = serde_json::from_str(&meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(CoreError::Format(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", meta.kind)));
        }
        let mut m = Self::new(meta.in_dim, meta.hidden, meta.out_dim, 0)?;
        m.params.copy_from(&params)?;
        m.source = meta.source;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CoreError::MissingArtifact {
                stage: "reduce".into(),
                what: format!("reducer checkpoint {}", path.display()),
            });
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Sampled edge-wise cross-entropy: `log(1 + d²)` on positive edges and
/// `−log(d² / (1 + d²) + eps)` on negatives.
fn batch_loss<'p>(
    model: &'p UmapModel,
    t: &mut Tape<'p>,
    points: &[Vec<f64>],
    positives: &[(usize, usize)],
    pool: &[usize],
    negatives: &[(usize, usize)],
) -> Result<Var> {
    let b = positives.len();
    let rows: Vec<Vec<f64>> = positives
        .iter()
        .map(|e| points[e.0].clone())
        .chain(positives.iter().map(|e| points[e.1].clone()))
        .chain(pool.iter().map(|&p| points[p].clone()))
        .collect();
    let x = t.constant(Tensor::from_rows(&rows)?);
    let z = model.forward(t, x)?;

    let heads: Vec<usize> = (0..b).collect();
    let tails: Vec<usize> = (b..2 * b).collect();
    let zh = t.gather_rows(z, &heads)?;
    let zt = t.gather_rows(z, &tails)?;
    let diff = t.sub(zh, zt)?;
    let sq = t.mul(diff, diff)?;
    let d2 = t.sum_rows(sq)?;
    let one_plus = t.add_scalar(d2, 1.0);
    let attract = t.log(one_plus);
    let attract = t.sum(attract);

    let neg_heads: Vec<usize> = negatives.iter().map(|n| n.0).collect();
    let neg_tails: Vec<usize> = negatives.iter().map(|n| 2 * b + n.1).collect();
    let nh = t.gather_rows(z, &neg_heads)?;
    let nt = t.gather_rows(z, &neg_tails)?;
    let diff = t.sub(nh, nt)?;
    let sq = t.mul(diff, diff)?;
    let d2 = t.sum_rows(sq)?;
    let one_plus = t.add_scalar(d2, 1.0);
    let q = t.recip(one_plus);
    let one_minus_q = t.mul(d2, q)?;
    let shifted = t.add_scalar(one_minus_q, REPULSION_EPS);
    let repel = t.log(shifted);
    let repel = t.sum(repel);
    let repel = t.scale(repel, -1.0);

    let total = t.add(attract, repel)?;
    Ok(t.scale(total, 1.0 / b as f64))
}

/// Fits the network on every vector of `store`, which must not contain
/// test documents.
pub fn fit_pumap(store: &EmbeddingStore, params: &ReducerParams) -> Result<(UmapModel, UmapReport)> {
    store.ensure_no_test()?;
    if params.epochs == 0 || params.batch_size == 0 {
        return Err(invalid("reducer epochs and batch_size must be at least 1"));
    }
    let points: Vec<Vec<f64>> = store.docs.iter().flat_map(|d| d.vectors.iter().cloned()).collect();
    if points.is_empty() {
        return Err(CoreError::EmptyTrainingSet);
    }
    let graph = build_fuzzy_graph(&points, params.k)?;
    let mut model = UmapModel::new(store.dim(), params.hidden, params.out_dim, params.seed)?;
    let mut adam = Adam::new(
        model.params(),
        AdamConfig {
            lr: params.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_u64);
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    let n = points.len();
    for _ in 0..params.epochs {
        let mut sampled: Vec<(usize, usize)> = Vec::new();
        for &(i, j, w) in &graph.edges {
            if rng.random::<f64>() < w {
                sampled.push(if rng.random::<bool>() { (i, j) } else { (j, i) });
            }
        }
        sampled.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in sampled.chunks(params.batch_size) {
            let pool: Vec<usize> = (0..params.batch_size).map(|_| rng.random_range(0..n)).collect();
            let negatives: Vec<(usize, usize)> = (0..batch.len())
                .flat_map(|h| (0..params.negative_rate).map(move |_| h))
                .map(|h| (h, rng.random_range(0..pool.len())))
                .collect();
            let mut grads = {
                let mut t = Tape::with_params(model.params());
                let loss = batch_loss(&model, &mut t, &points, batch, &pool, &negatives)?;
                total += t.value(loss)[0];
                t.backward(loss)?.into_params()
            };
            clip_grad_norm(&mut grads, GRAD_CLIP);
            adam.step(&mut model.params, &grads)?;
            batches += 1;
        }
        epoch_losses.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    model.source = store.fingerprint();
    let max_calibration_error = (0..n).map(|i| graph.calibration_error(i)).fold(0.0, f64::max);
    let report = UmapReport {
        n_points: n,
        n_edges: graph.edges.len(),
        max_calibration_error,
        epoch_losses,
    };
    Ok((model, report))
}
