//! Brute-force references for the clustering code. Nothing here calls into
//! the library's clustering internals.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Core distances by fully sorting each row.
pub fn core_by_sorting(points: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| dist(&points[i], &points[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            d[min_samples - 1]
        })
        .collect()
}

pub fn reach_matrix(points: &[Vec<f64>], min_samples: usize) -> Vec<Vec<f64>> {
    let core = core_by_sorting(points, min_samples);
    let n = points.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = dist(&points[i], &points[j]).max(core[i]).max(core[j]);
            }
        }
    }
    m
}

/// Kruskal over all pairs with a plain parent-array union-find.
pub fn kruskal_weight(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((m[i][j], i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut used = 0;
    for (w, i, j) in edges {
        let (ci, cj) = (comp[i], comp[j]);
        if ci != cj {
            for c in comp.iter_mut() {
                if *c == cj {
                    *c = ci;
                }
            }
            total += w;
            used += 1;
            if used + 1 == n {
                break;
            }
        }
    }
    total
}

/// Condensed cluster: its members at birth, child clusters, stability.
#[derive(Debug)]
pub struct OracleCluster {
    pub members: Vec<usize>,
    pub children: Vec<OracleCluster>,
    pub stability: f64,
}

/// Connected components of `set` using pairs with distance `<= t`
/// (or `< t` when `strict`), by breadth-first search.
fn components(m: &[Vec<f64>], set: &[usize], t: f64, strict: bool) -> Vec<Vec<usize>> {
    let linked = |i: usize, j: usize| if strict { m[i][j] < t } else { m[i][j] <= t };
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    for s in 0..set.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![set[s]];
        let mut queue = vec![s];
        while let Some(a) = queue.pop() {
            for b in 0..set.len() {
                if !seen[b] && linked(set[a], set[b]) {
                    seen[b] = true;
                    comp.push(set[b]);
                    queue.push(b);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

/// Smallest threshold at which `set` is connected, by scanning candidate
/// distances in increasing order with a binary search.
fn bottleneck(m: &[Vec<f64>], set: &[usize]) -> f64 {
    let mut cand: Vec<f64> = Vec::new();
    for (a, &i) in set.iter().enumerate() {
        for &j in &set[a + 1..] {
            cand.push(m[i][j]);
        }
    }
    cand.sort_by(f64::total_cmp);
    cand.dedup();
    let (mut lo, mut hi) = (0, cand.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if components(m, set, cand[mid], false).len() == 1 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    cand[lo]
}

fn lam(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d
    } else {
        f64::INFINITY
    }
}

/// Follows `set` down the level-set tree while it belongs to one cluster
/// born at `birth`.
fn grow(m: &[Vec<f64>], set: &[usize], birth: f64, mcs: usize, acc: &mut f64, kids: &mut Vec<OracleCluster>) {
    if set.len() < 2 {
        return;
    }
    let d = bottleneck(m, set);
    let l = lam(d);
    if l.is_infinite() {
        *acc += (l - birth) * set.len() as f64;
        return;
    }
    let parts = components(m, set, d, true);
    let big: Vec<&Vec<usize>> = parts.iter().filter(|p| p.len() >= mcs).collect();
    if big.len() >= 2 {
        *acc += (l - birth) * set.len() as f64;
        for b in big {
            kids.push(make_cluster(m, b, l, mcs));
        }
    } else if big.len() == 1 {
        *acc += (l - birth) * (set.len() - big[0].len()) as f64;
        grow(m, big[0], birth, mcs, acc, kids);
    } else {
        *acc += (l - birth) * set.len() as f64;
    }
}

fn make_cluster(m: &[Vec<f64>], set: &[usize], birth: f64, mcs: usize) -> OracleCluster {
    let mut stability = 0.0;
    let mut children = Vec::new();
    grow(m, set, birth, mcs, &mut stability, &mut children);
    OracleCluster {
        members: set.to_vec(),
        children,
        stability,
    }
}

pub fn oracle_condensed(m: &[Vec<f64>], mcs: usize) -> OracleCluster {
    let all: Vec<usize> = (0..m.len()).collect();
    make_cluster(m, &all, 0.0, mcs)
}

/// Every way to pick clusters so each root-to-leaf path holds exactly one.
fn cuts<'a>(c: &'a OracleCluster) -> Vec<Vec<&'a OracleCluster>> {
    let mut out = vec![vec![c]];
    if !c.children.is_empty() {
        let mut combos: Vec<Vec<&OracleCluster>> = vec![vec![]];
        for child in &c.children {
            let sub = cuts(child);
            let mut next = Vec::new();
            for base in &combos {
                for s in &sub {
                    let mut v = base.clone();
                    v.extend(s.iter().copied());
                    next.push(v);
                }
            }
            combos = next;
        }
        out.extend(combos);
    }
    out
}

/// Exhaustive excess-of-mass: the cut with the largest total stability;
/// near-equal totals prefer more (finer) clusters.
pub fn exhaustive_labels(root: &OracleCluster, n: usize) -> Vec<i64> {
    let all = cuts(root);
    let total = |c: &Vec<&OracleCluster>| c.iter().map(|x| x.stability).sum::<f64>();
    let mut best = &all[0];
    for c in &all[1..] {
        let (tb, tc) = (total(best), total(c));
        if tb.is_infinite() && tc.is_infinite() {
            if c.len() > best.len() {
                best = c;
            }
            continue;
        }
        let tol = 1e-9 * tb.abs().max(tc.abs()).max(1.0);
        if tc > tb + tol || ((tc - tb).abs() <= tol && c.len() > best.len()) {
            best = c;
        }
    }
    let mut labels = vec![-1i64; n];
    for (k, c) in best.iter().enumerate() {
        for &p in &c.members {
            labels[p] = k as i64;
        }
    }
    labels
}

/// Full brute-force flat clustering.
pub fn reference_labels(points: &[Vec<f64>], mcs: usize, min_samples: usize) -> Vec<i64> {
    let m = reach_matrix(points, min_samples);
    exhaustive_labels(&oracle_condensed(&m, mcs), points.len())
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand Index; noise is treated as one more label.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    use std::collections::HashMap;
    let n = a.len() as u64;
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut ra: HashMap<i64, u64> = HashMap::new();
    let mut rb: HashMap<i64, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sa: f64 = ra.values().map(|&v| choose2(v)).sum();
    let sb: f64 = rb.values().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Isotropic Gaussian blobs; returns points and blob index per point.
pub fn blobs(centers: &[Vec<f64>], per_blob: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut pts = Vec::new();
    let mut which = Vec::new();
    for (b, c) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            pts.push(c.iter().map(|&x| x + normal.sample(&mut rng)).collect());
            which.push(b);
        }
    }
    (pts, which)
}

/// Two blobs whose centers are `sep` sigmas apart along the first axis.
pub fn two_blobs(dim: usize, per_blob: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    a[0] = -sep / 2.0;
    b[0] = sep / 2.0;
    blobs(&[a, b], per_blob, 1.0, seed)
}

pub fn uniform_points(n: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.0..scale)).collect()).collect()
}

/// Random 2-D sets mixing a few blobs with scattered points.
pub fn random_2d(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(20..=60);
    let k = rng.random_range(1..=4);
    let centers: Vec<(f64, f64)> = (0..k).map(|_| (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0))).collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            if i % 5 == 4 {
                vec![rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)]
            } else {
                let c = centers[i % k];
                vec![c.0 + normal.sample(&mut rng), c.1 + normal.sample(&mut rng)]
            }
        })
        .collect()
}
