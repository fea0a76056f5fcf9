//! HDBSCAN: mutual reachability, dense Prim MST, single-linkage tree,
//! condensed tree, excess-of-mass selection, and approximate assignment of
//! unseen points.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{invalid, CoreError, Result};
use crate::store::EmbeddingStore;
use crate::util::euclidean;

pub const NOISE: i64 = -1;
pub const CLUSTER_MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 15,
            min_samples: 10,
        }
    }
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map_or(0, Vec::len);
    for p in points {
        if p.len() != dim {
            return Err(CoreError::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite coordinates"));
        }
    }
    Ok(dim)
}

/// Distance from `query` to its `k`-th nearest point in `points`, skipping
/// index `skip` (the query itself when it belongs to `points`).
fn kth_distance(points: &[Vec<f64>], query: &[f64], skip: Option<usize>, k: usize) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, p)| euclidean(query, p))
        .collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

fn check_min_samples(n: usize, min_samples: usize) -> Result<()> {
    if min_samples == 0 {
        return Err(invalid("min_samples must be at least 1"));
    }
    if n <= min_samples {
        return Err(invalid(format!("need more than {min_samples} points for core distances, got {n}")));
    }
    Ok(())
}

/// Euclidean distance from point `i` to its `min_samples`-th nearest
/// neighbor, the point itself excluded.
pub fn core_distance(points: &[Vec<f64>], i: usize, min_samples: usize) -> Result<f64> {
    check_min_samples(points.len(), min_samples)?;
    if i >= points.len() {
        return Err(invalid(format!("point {i} out of range")));
    }
    Ok(kth_distance(points, &points[i], Some(i), min_samples))
}

pub fn core_distances(points: &[Vec<f64>], min_samples: usize) -> Result<Vec<f64>> {
    check_min_samples(points.len(), min_samples)?;
    Ok((0..points.len())
        .into_par_iter()
        .map(|i| kth_distance(points, &points[i], Some(i), min_samples))
        .collect())
}

pub fn mutual_reachability(points: &[Vec<f64>], core: &[f64], i: usize, j: usize) -> f64 {
    euclidean(&points[i], &points[j]).max(core[i]).max(core[j])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    /// Smaller endpoint.
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

impl MstEdge {
    fn new(i: usize, j: usize, weight: f64) -> Self {
        Self {
            a: i.min(j),
            b: i.max(j),
            weight,
        }
    }

    /// Total order used for tie-breaking: weight, then (min, max) index.
    fn key(&self) -> (f64, usize, usize) {
        (self.weight, self.a, self.b)
    }
}

fn key_less(x: (f64, usize, usize), y: (f64, usize, usize)) -> bool {
    match x.0.total_cmp(&y.0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => (x.1, x.2) < (y.1, y.2),
    }
}

/// Dense O(n²) Prim over a complete graph, starting from vertex 0. Equal
/// weights are ordered by (min index, max index), which makes the tree unique.
pub fn prim_mst<F: Fn(usize, usize) -> f64>(n: usize, weight: F) -> Vec<MstEdge> {
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best: Vec<Option<MstEdge>> = vec![None; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next: Option<usize> = None;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let cand = MstEdge::new(current, v, weight(current, v));
            if best[v].is_none_or(|b| key_less(cand.key(), b.key())) {
                best[v] = Some(cand);
            }
            let bv = best[v].expect("set above");
            if next.is_none_or(|u| key_less(bv.key(), best[u].expect("candidate").key())) {
                next = Some(v);
            }
        }
        let v = next.expect("graph is complete");
        in_tree[v] = true;
        edges.push(best[v].expect("candidate"));
        current = v;
    }
    edges
}

pub fn mutual_reachability_mst(points: &[Vec<f64>], core: &[f64]) -> Vec<MstEdge> {
    prim_mst(points.len(), |i, j| mutual_reachability(points, core, i, j))
}

/// Internal node of the single-linkage tree. Leaves are points `0..n`,
/// merge `k` has id `n + k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub n_points: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn root(&self) -> usize {
        if self.merges.is_empty() {
            0
        } else {
            self.n_points + self.merges.len() - 1
        }
    }

    pub fn size(&self, node: usize) -> usize {
        if node < self.n_points {
            1
        } else {
            self.merges[node - self.n_points].size
        }
    }

    pub fn leaves(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size(node));
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < self.n_points {
                out.push(x);
            } else {
                let m = self.merges[x - self.n_points];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        out
    }
}

struct UnionFind {
    parent: Vec<usize>,
    /// Dendrogram node currently representing each root's component.
    node: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            node: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Merges MST edges in (weight, min, max) order.
pub fn single_linkage(n: usize, mst: &[MstEdge]) -> Dendrogram {
    let mut edges = mst.to_vec();
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight).then((x.a, x.b).cmp(&(y.a, y.b))));
    let mut uf = UnionFind::new(n);
    let mut merges: Vec<Merge> = Vec::with_capacity(edges.len());
    for e in edges {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        debug_assert_ne!(ra, rb, "MST edges never close a cycle");
        let (left, right) = (uf.node[ra], uf.node[rb]);
        let size = |node: usize| if node < n { 1 } else { merges[node - n].size };
        let merged = Merge {
            left,
            right,
            distance: e.weight,
            size: size(left) + size(right),
        };
        merges.push(merged);
        uf.parent[rb] = ra;
        uf.node[ra] = n + merges.len() - 1;
    }
    Dendrogram { n_points: n, merges }
}

/// One row of the condensed tree: either a point leaving `parent` or a
/// child cluster born from it, at `lambda = 1 / distance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub child_is_cluster: bool,
    pub lambda: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedTree {
    pub n_points: usize,
    pub edges: Vec<CondensedEdge>,
    /// Birth lambda per cluster; the root (cluster 0) is born at 0.
    pub births: Vec<f64>,
    pub parents: Vec<Option<usize>>,
}

fn lambda_of(distance: f64) -> f64 {
    if distance > 0.0 {
        1.0 / distance
    } else {
        f64::INFINITY
    }
}

/// Condenses the single-linkage tree. Merges at one distance are read as a
/// single n-way split, so the result does not depend on how ties were
/// ordered. Pieces with at least `min_cluster_size` points become child
/// clusters when two or more of them appear at a positive distance; a lone
/// big piece carries on as its parent; everything else falls out as points.
pub fn condense(dendro: &Dendrogram, min_cluster_size: usize) -> CondensedTree {
    let n = dendro.n_points;
    let mut tree = CondensedTree {
        n_points: n,
        edges: Vec::with_capacity(n + 16),
        births: vec![0.0],
        parents: vec![None],
    };
    let mut stack = vec![(dendro.root(), 0usize)];
    while let Some((node, cluster)) = stack.pop() {
        if node < n {
            let lambda = tree.births[cluster];
            tree.edges.push(point_edge(cluster, node, lambda));
            continue;
        }
        let distance = dendro.merges[node - n].distance;
        let lambda = lambda_of(distance);
        if lambda.is_infinite() {
            for p in dendro.leaves(node) {
                tree.edges.push(point_edge(cluster, p, lambda));
            }
            continue;
        }
        let pieces = level_pieces(dendro, node, distance);
        let big: Vec<usize> = pieces.iter().copied().filter(|&x| dendro.size(x) >= min_cluster_size).collect();
        for &x in pieces.iter().filter(|&&x| dendro.size(x) < min_cluster_size) {
            for p in dendro.leaves(x) {
                tree.edges.push(point_edge(cluster, p, lambda));
            }
        }
        match big.len() {
            0 => {}
            1 => stack.push((big[0], cluster)),
            _ => {
                for &child in big.iter().rev() {
                    let id = tree.births.len();
                    tree.births.push(lambda);
                    tree.parents.push(Some(cluster));
                    tree.edges.push(CondensedEdge {
                        parent: cluster,
                        child: id,
                        child_is_cluster: true,
                        lambda,
                        size: dendro.size(child),
                    });
                    stack.push((child, id));
                }
            }
        }
    }
    tree
}

/// Subtrees hanging below `node` once every merge at exactly `distance`
/// is opened up.
fn level_pieces(dendro: &Dendrogram, node: usize, distance: f64) -> Vec<usize> {
    let n = dendro.n_points;
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x >= n && dendro.merges[x - n].distance == distance {
            let m = dendro.merges[x - n];
            stack.push(m.right);
            stack.push(m.left);
        } else {
            out.push(x);
        }
    }
    out
}

fn point_edge(parent: usize, p: usize, lambda: f64) -> CondensedEdge {
    CondensedEdge {
        parent,
        child: p,
        child_is_cluster: false,
        lambda,
        size: 1,
    }
}

impl CondensedTree {
    pub fn n_clusters(&self) -> usize {
        self.births.len()
    }

    pub fn children(&self, cluster: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.child_is_cluster && e.parent == cluster)
            .map(|e| e.child)
            .collect()
    }

    /// Σ (λ − λ_birth) over everything leaving each cluster, weighted by size.
    pub fn stabilities(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_clusters()];
        for e in &self.edges {
            s[e.parent] += (e.lambda - self.births[e.parent]) * e.size as f64;
        }
        s
    }

    /// Excess-of-mass selection. A cluster replaces its descendants when its
    /// stability is strictly larger than the best total below it.
    pub fn select_eom(&self) -> Vec<usize> {
        let stab = self.stabilities();
        let k = self.n_clusters();
        let mut best = vec![0.0; k];
        let mut selected = vec![false; k];
        let kids: Vec<Vec<usize>> = (0..k).map(|c| self.children(c)).collect();
        for c in (0..k).rev() {
            if kids[c].is_empty() {
                selected[c] = true;
                best[c] = stab[c];
                continue;
            }
            let below: f64 = kids[c].iter().map(|&d| best[d]).sum();
            if stab[c] > below {
                selected[c] = true;
                best[c] = stab[c];
                let mut stack = kids[c].clone();
                while let Some(d) = stack.pop() {
                    selected[d] = false;
                    stack.extend(&kids[d]);
                }
            } else {
                best[c] = below;
            }
        }
        (0..k).filter(|&c| selected[c]).collect()
    }

    /// Flat labels for a set of selected clusters: a point belongs to the
    /// selected cluster it (or a descendant cluster it left from) sits under.
    /// Labels are dense and ordered by each cluster's smallest point index.
    pub fn label_points(&self, selected: &[usize]) -> Vec<i64> {
        let mut is_selected = vec![false; self.n_clusters()];
        for &c in selected {
            is_selected[c] = true;
        }
        let mut raw = vec![None; self.n_points];
        for e in self.edges.iter().filter(|e| !e.child_is_cluster) {
            let mut c = Some(e.parent);
            while let Some(x) = c {
                if is_selected[x] {
                    raw[e.child] = Some(x);
                    break;
                }
                c = self.parents[x];
            }
        }
        let mut dense: HashMap<usize, i64> = HashMap::new();
        raw.iter()
            .map(|r| match r {
                None => NOISE,
                Some(c) => {
                    let next = dense.len() as i64;
                    *dense.entry(*c).or_insert(next)
                }
            })
            .collect()
    }

    /// Lambda at which each point leaves the tree.
    pub fn point_lambdas(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_points];
        for e in self.edges.iter().filter(|e| !e.child_is_cluster) {
            out[e.child] = e.lambda;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdbscanFit {
    pub labels: Vec<i64>,
    pub core: Vec<f64>,
    pub mst: Vec<MstEdge>,
    pub tree: CondensedTree,
    /// Largest MST edge inside each cluster.
    pub radii: Vec<f64>,
    /// Members with the largest lambda in each cluster.
    pub exemplars: Vec<Vec<usize>>,
}

impl HdbscanFit {
    pub fn n_clusters(&self) -> usize {
        self.radii.len()
    }
}

pub fn fit_hdbscan(points: &[Vec<f64>], params: HdbscanParams) -> Result<HdbscanFit> {
    let n = points.len();
    if params.min_cluster_size == 0 {
        return Err(invalid("min_cluster_size must be at least 1"));
    }
    if n < params.min_cluster_size {
        return Err(invalid(format!(
            "need at least min_cluster_size = {} points, got {n}",
            params.min_cluster_size
        )));
    }
    check_points(points)?;
    let core = core_distances(points, params.min_samples)?;
    let mst = mutual_reachability_mst(points, &core);
    let dendro = single_linkage(n, &mst);
    let tree = condense(&dendro, params.min_cluster_size);
    let selected = tree.select_eom();
    let labels = tree.label_points(&selected);
    let k = labels.iter().copied().max().map_or(0, |m| (m + 1) as usize);

    let mut radii = vec![0.0f64; k];
    for e in &mst {
        let (la, lb) = (labels[e.a], labels[e.b]);
        if la != NOISE && la == lb {
            radii[la as usize] = radii[la as usize].max(e.weight);
        }
    }
    let lambdas = tree.point_lambdas();
    let mut top = vec![f64::NEG_INFINITY; k];
    for (p, &l) in labels.iter().enumerate() {
        if l != NOISE {
            top[l as usize] = top[l as usize].max(lambdas[p]);
        }
    }
    let mut exemplars = vec![Vec::new(); k];
    for (p, &l) in labels.iter().enumerate() {
        if l != NOISE && lambdas[p] == top[l as usize] {
            exemplars[l as usize].push(p);
        }
    }
    Ok(HdbscanFit {
        labels,
        core,
        mst,
        tree,
        radii,
        exemplars,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub counts: BTreeMap<i64, usize>,
    pub noise_fraction: f64,
    pub n_clusters: usize,
}

pub fn cluster_summary(labels: &[i64]) -> ClusterSummary {
    let mut counts = BTreeMap::new();
    let mut noise = 0usize;
    for &l in labels {
        if l == NOISE {
            noise += 1;
        } else {
            *counts.entry(l).or_insert(0) += 1;
        }
    }
    let noise_fraction = if labels.is_empty() { 0.0 } else { noise as f64 / labels.len() as f64 };
    ClusterSummary {
        n_clusters: counts.len(),
        counts,
        noise_fraction,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkKey {
    pub doc_id: String,
    pub chunk: usize,
}

/// Everything needed to label fit points and assign new ones without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub format_version: u32,
    pub params: HdbscanParams,
    pub dim: usize,
    /// Fingerprint of the store the model was fitted on.
    pub source: String,
    pub points: Vec<Vec<f64>>,
    pub keys: Vec<ChunkKey>,
    pub labels: Vec<i64>,
    pub core: Vec<f64>,
    pub radii: Vec<f64>,
    pub exemplars: Vec<Vec<usize>>,
}

impl ClusterModel {
    /// Fits on every vector of `store`, which must hold no test documents.
    pub fn fit(store: &EmbeddingStore, params: HdbscanParams) -> Result<Self> {
        store.ensure_no_test()?;
        let mut points = Vec::with_capacity(store.total_vectors());
        let mut keys = Vec::with_capacity(store.total_vectors());
        for d in &store.docs {
            for (i, v) in d.vectors.iter().enumerate() {
                points.push(v.clone());
                keys.push(ChunkKey {
                    doc_id: d.doc_id.clone(),
                    chunk: i,
                });
            }
        }
        let fit = fit_hdbscan(&points, params)?;
        Ok(Self {
            format_version: CLUSTER_MODEL_VERSION,
            params,
            dim: store.dim(),
            source: store.fingerprint(),
            points,
            keys,
            labels: fit.labels,
            core: fit.core,
            radii: fit.radii,
            exemplars: fit.exemplars,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.radii.len()
    }

    pub fn summary(&self) -> ClusterSummary {
        cluster_summary(&self.labels)
    }

    /// Nearest fit point `p`; its cluster if `p` is clustered and the mutual
    /// reachability to `p` is within that cluster's radius, else noise.
    pub fn assign(&self, x: &[f64]) -> Result<i64> {
        if x.len() != self.dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let mut nearest = 0;
        let mut best = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = euclidean(x, p);
            if d < best {
                best = d;
                nearest = i;
            }
        }
        let label = self.labels[nearest];
        if label == NOISE {
            return Ok(NOISE);
        }
        let core_x = kth_distance(&self.points, x, None, self.params.min_samples.min(self.points.len()));
        let reach = best.max(core_x).max(self.core[nearest]);
        Ok(if reach <= self.radii[label as usize] { label } else { NOISE })
    }

    /// Cluster ids per document: fit labels for train and validation
    /// chunks, [`ClusterModel::assign`] for test chunks.
    pub fn document_ids(&self, store: &EmbeddingStore) -> Result<BTreeMap<String, Vec<i64>>> {
        if store.dim() != self.dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.dim,
                actual: store.dim(),
            });
        }
        let index: HashMap<&ChunkKey, usize> = self.keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut out = BTreeMap::new();
        for d in &store.docs {
            let ids = if d.split == Split::Test {
                d.vectors.par_iter().map(|v| self.assign(v)).collect::<Result<Vec<_>>>()?
            } else {
                (0..d.vectors.len())
                    .map(|i| {
                        let key = ChunkKey {
                            doc_id: d.doc_id.clone(),
                            chunk: i,
                        };
                        index.get(&key).map(|&j| self.labels[j]).ok_or_else(|| CoreError::StaleArtifact {
                            stage: "cluster".into(),
                            what: "cluster model".into(),
                            reason: format!("chunk {i} of {:?} was not part of the fit", d.doc_id),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            out.insert(d.doc_id.clone(), ids);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CoreError::MissingArtifact {
                stage: "cluster".into(),
                what: format!("cluster model {}", path.display()),
            });
        }
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.format_version != CLUSTER_MODEL_VERSION {
            return Err(CoreError::Format(format!("unsupported cluster model version {}", m.format_version)));
        }
        Ok(m)
    }
}
