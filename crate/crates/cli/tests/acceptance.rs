//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines are printed as they complete.

#[path = "../../tensor/tests/common/primitive_checks.rs"]
mod primitive_checks;

#[path = "../../core/tests/common/model_fd.rs"]
mod model_fd;

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use hier_core::chunk_encoder::{ChunkEncoder, ChunkEncoderConfig, LabeledSequence};
use hier_core::clusterer::{fit_hdbscan, core_distances, mutual_reachability_mst, ClusterModel, HdbscanParams, NOISE};
use hier_core::corpus::{Label, Split, TokenSequence, CLS_ID, PAD_ID, SEP_ID};
use hier_core::doc_encoder::{build_doc_examples, DocExample, DocModel, DocModelConfig, HeadKind, PipelineVariant};
use hier_core::evalx::{macro_metrics, score, ConfusionMatrix, MetricsRow};
use hier_core::reducer::{fit_pumap, ReducerParams};
use hier_core::store::{DocEmbeddings, EmbeddingStore, StoreHeader};
use hier_core::train::Classifier;
use hier_core::CoreError;
use hier_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn params(mcs: usize, ms: usize) -> HdbscanParams {
    HdbscanParams {
        min_cluster_size: mcs,
        min_samples: ms,
    }
}

fn store_of(pts: &[Vec<f64>], split: Split) -> EmbeddingStore {
    let mut s = EmbeddingStore::new(StoreHeader::new(pts[0].len(), "acceptance"));
    for (i, p) in pts.iter().enumerate() {
        s.push(DocEmbeddings {
            doc_id: format!("d{i:03}"),
            label: if i % 2 == 0 { Label::Accepted } else { Label::Rejected },
            split,
            vectors: vec![p.clone()],
        })
        .unwrap();
    }
    s
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut prim = 0.0f64;
    for (name, check) in primitive_checks::ALL {
        let worst = check();
        ensure!(worst < primitive_checks::TOL, "primitive group {name}: relative error {worst:.2e}");
        prim = prim.max(worst);
    }
    let mut full = model_fd::chunk_encoder_check(1);
    for head in HeadKind::ALL {
        full = full.max(model_fd::doc_encoder_check(head, 2));
    }
    ensure!(full < model_fd::TOL, "full-model relative error {full:.2e}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "primitives {prim:.1e} < 1e-6, models {full:.1e} < 1e-4 over {} slices each, {secs:.1}s",
        model_fd::SLICES
    ))
}

fn hdbscan_oracle() -> Outcome {
    for seed in 0..30u64 {
        let pts = oracles::random_2d(seed);
        let mcs = [3, 5][(seed % 2) as usize];
        let ms = [2, 3][((seed / 2) % 2) as usize];
        let fit = fit_hdbscan(&pts, params(mcs, ms)).map_err(|e| e.to_string())?;
        let ari = oracles::adjusted_rand_index(&fit.labels, &oracles::reference_labels(&pts, mcs, ms));
        ensure!(ari == 1.0, "seed {seed}: ARI {ari}");
        let core = core_distances(&pts, ms).map_err(|e| e.to_string())?;
        let ours: f64 = mutual_reachability_mst(&pts, &core).iter().map(|e| e.weight).sum();
        let theirs = oracles::kruskal_weight(&oracles::reach_matrix(&pts, ms));
        ensure!((ours - theirs).abs() < 1e-9, "seed {seed}: MST {ours} vs {theirs}");
    }
    Ok("30 datasets, ARI 1.0, MST weight within 1e-9".into())
}

fn two_blobs() -> Outcome {
    let start = Instant::now();
    let (pts, which) = oracles::two_blobs(2, 30, 20.0, 11);
    let fit = fit_hdbscan(&pts, params(5, 3)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(fit.n_clusters() == 2, "{} clusters", fit.n_clusters());
    let noise = fit.labels.iter().filter(|&&l| l == NOISE).count() as f64 / pts.len() as f64;
    ensure!(noise <= 0.1, "noise {noise}");
    let mut by_cluster: BTreeMap<i64, BTreeSet<usize>> = BTreeMap::new();
    for (l, b) in fit.labels.iter().zip(&which) {
        if *l != NOISE {
            by_cluster.entry(*l).or_default().insert(*b);
        }
    }
    ensure!(by_cluster.values().all(|s| s.len() == 1), "impure clusters");
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("2 clusters, purity 100%, noise {:.1}%, {secs:.3}s", 100.0 * noise))
}

fn reducer() -> Outcome {
    let (pts, which) = oracles::two_blobs(16, 40, 20.0, 4);
    let p = ReducerParams {
        k: 10,
        epochs: 15,
        ..ReducerParams::default()
    };
    let (model, report) = fit_pumap(&store_of(&pts, Split::Train), &p).map_err(|e| e.to_string())?;
    ensure!(report.max_calibration_error < 1e-5, "calibration {:.2e}", report.max_calibration_error);
    let z = model.transform_batch(&pts).map_err(|e| e.to_string())?;
    ensure!(z.iter().all(|r| r.len() == 64), "output is not 64-d");
    let (mut inter, mut intra, mut ni, mut na) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            let d = oracles::dist(&z[i], &z[j]);
            if which[i] == which[j] {
                intra += d;
                na += 1;
            } else {
                inter += d;
                ni += 1;
            }
        }
    }
    let (inter, intra) = (inter / ni as f64, intra / na as f64);
    ensure!(inter > intra, "inter {inter} <= intra {intra}");
    Ok(format!(
        "inter {inter:.3} > intra {intra:.3}, calibration {:.1e}, 64 dims",
        report.max_calibration_error
    ))
}

fn hier(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hier")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("hier {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// synth + pipeline with the demo config in a fresh directory.
fn demo_run(dir: &Path) -> Result<(PathBuf, f64), String> {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.json");
    let config = dir.join("demo.json");
    std::fs::copy(&demo, &config).map_err(|e| e.to_string())?;
    let config = config.to_str().unwrap();
    hier(&["--config", config, "-q", "synth"])?;
    let start = Instant::now();
    hier(&["--config", config, "-q", "pipeline"])?;
    Ok((dir.join("artifacts"), start.elapsed().as_secs_f64()))
}

fn end_to_end(art: &Path, secs: f64) -> Outcome {
    ensure!(secs <= 600.0, "pipeline took {secs:.0}s");
    let text = std::fs::read_to_string(art.join("results.jsonl")).map_err(|e| e.to_string())?;
    let rows: Vec<MetricsRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure!(rows.len() == 8, "{} result rows", rows.len());
    let alpha = rows
        .iter()
        .find(|r| r.variant == "alpha/encoder" && r.split == Split::Test)
        .ok_or("no alpha/encoder test row")?;
    ensure!(alpha.accuracy >= 90.0, "alpha/encoder test accuracy {:.2}%", alpha.accuracy);
    let table = std::fs::read_to_string(art.join("results.txt")).map_err(|e| e.to_string())?;
    let header = table.lines().nth(1).unwrap_or("");
    ensure!(header.matches("Acc.").count() == 2 && header.matches("mP").count() == 2 && header.matches("mR").count() == 2, "table header {header:?}");
    let clusters: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(art.join("cluster_summary.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let tests: Vec<String> = rows
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| format!("{} {:.1}%", r.variant, r.accuracy))
        .collect();
    Ok(format!(
        "{secs:.0}s, 8 rows, {} clusters, test: {}",
        clusters["n_clusters"],
        tests.join(", ")
    ))
}

fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
    let mut v = vec![CLS_ID];
    v.extend_from_slice(ids);
    v.push(SEP_ID);
    let mut mask = vec![1u8; v.len()];
    v.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    TokenSequence { ids: v, attention_mask: mask }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn doc_logits(model: &DocModel, ex: &DocExample) -> Vec<f64> {
    let mut t = Tape::inference(model.params());
    let l = model.logits(&mut t, ex, false).unwrap();
    t.value(l).to_vec()
}

fn invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;

    let config = ChunkEncoderConfig {
        d_model: 32,
        heads: 4,
        layers: 2,
        max_len: 24,
        ff_dim: 64,
        ..ChunkEncoderConfig::new(60)
    };
    let chunk = ChunkEncoder::new(config, 1).map_err(|e| e.to_string())?;
    let chunk_logits = |s: &TokenSequence| {
        let mut t = Tape::inference(chunk.params());
        let l = chunk.logits(&mut t, &LabeledSequence { seq: s.clone(), label: 0 }, false).unwrap();
        t.value(l).to_vec()
    };
    for _ in 0..10 {
        let real: Vec<u32> = (0..rng.random_range(1..20)).map(|_| rng.random_range(4..60)).collect();
        let s = seq(&real, 24);
        let base = chunk_logits(&s);
        let mut noisy = s.clone();
        for i in real.len() + 2..24 {
            noisy.ids[i] = rng.random_range(0..60);
        }
        worst = worst.max(max_diff(&base, &chunk_logits(&noisy)));
    }

    for head in HeadKind::ALL {
        let model = DocModel::new(model_fd::small_doc_config(head, 6), 2).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let ex = model_fd::doc_example(&mut rng, 6, 5, 3, 0);
            let mut noisy = ex.clone();
            for i in (0..5).filter(|&i| !ex.mask[i]) {
                noisy.embeddings[i] = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
                noisy.cluster_ids[i] = rng.random_range(0..5);
            }
            worst = worst.max(max_diff(&doc_logits(&model, &ex), &doc_logits(&model, &noisy)));
        }
        let variant = PipelineVariant::parse("alpha_nc/encoder").unwrap();
        let big = DocModel::new(DocModelConfig { max_chunks: 9, ..model_fd::small_doc_config(head, 6) }, 4).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let k = rng.random_range(1..=4);
            let vectors: Vec<Vec<f64>> = (0..k).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut store = EmbeddingStore::new(StoreHeader::new(6, "acceptance"));
            store
                .push(DocEmbeddings {
                    doc_id: "d".into(),
                    label: Label::Accepted,
                    split: Split::Train,
                    vectors,
                })
                .unwrap();
            let base = doc_logits(&big, &build_doc_examples(&store, None, variant, 4, &[Split::Train]).unwrap()[0]);
            for mc in 5..=9 {
                let ex = build_doc_examples(&store, None, variant, mc, &[Split::Train]).unwrap();
                worst = worst.max(max_diff(&base, &doc_logits(&big, &ex[0])));
            }
        }
    }
    ensure!(worst <= 1e-9, "largest logit change {worst:.2e}");
    Ok(format!("largest logit change {worst:.1e} <= 1e-9 (padded tokens, padded slots, max_chunks 4..9, all heads)"))
}

fn metrics() -> Outcome {
    let m = macro_metrics(&ConfusionMatrix::from_counts([[3, 1], [2, 4]])).map_err(|e| e.to_string())?;
    ensure!((m.accuracy - 0.7).abs() < 1e-4, "accuracy {}", m.accuracy);
    ensure!((m.macro_precision - 0.7).abs() < 1e-4, "mP {}", m.macro_precision);
    ensure!((m.macro_recall - 0.7083).abs() < 1e-4, "mR {}", m.macro_recall);
    let golds = [0, 1, 1, 0, 1, 0];
    let p = score(&golds, &golds).map_err(|e| e.to_string())?;
    ensure!(
        p.accuracy == 1.0 && p.macro_precision == 1.0 && p.macro_recall == 1.0,
        "perfect fixture gave {p:?}"
    );
    Ok(format!(
        "{:.4}/{:.4}/{:.4}, perfect fixture 1/1/1",
        m.accuracy, m.macro_precision, m.macro_recall
    ))
}

fn artifact_files(dir: &Path) -> Vec<PathBuf> {
    let mut names: Vec<PathBuf> = [
        "results.jsonl",
        "results.txt",
        "chunk_encoder.ckpt",
        "embeddings.store",
        "umap.ckpt",
        "reduced.store",
        "clusters.json",
        "doc_model.ckpt",
    ]
    .iter()
    .map(PathBuf::from)
    .collect();
    if let Ok(entries) = std::fs::read_dir(dir.join("variants")) {
        for e in entries.flatten() {
            let ckpt = e.path().join("model.ckpt");
            if ckpt.exists() {
                names.push(ckpt.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    names.sort();
    names
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let files = artifact_files(a);
    ensure!(files == artifact_files(b), "different artifact sets");
    for f in &files {
        let x = std::fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(f)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{} differs between runs", f.display());
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn leakage() -> Outcome {
    let (pts, _) = oracles::two_blobs(4, 20, 20.0, 6);
    let mut store = store_of(&pts, Split::Train);
    store.docs[0].split = Split::Test;
    let e = fit_pumap(&store, &ReducerParams { k: 10, epochs: 1, ..ReducerParams::default() }).unwrap_err();
    ensure!(matches!(e, CoreError::TestLeakage(_)) && e.to_string().contains("test leakage"), "reducer: {e}");
    let e = ClusterModel::fit(&store, params(3, 2)).unwrap_err();
    ensure!(matches!(e, CoreError::TestLeakage(_)) && e.to_string().contains("test leakage"), "clusterer: {e}");

    let train = store_of(&pts, Split::Train);
    let model = ClusterModel::fit(&train, params(5, 3)).map_err(|e| e.to_string())?;
    let mut full = train.clone();
    let probe = vec![pts[3].clone(), vec![1e4; 4], pts[30].clone()];
    full.push(DocEmbeddings {
        doc_id: "t".into(),
        label: Label::Rejected,
        split: Split::Test,
        vectors: probe.clone(),
    })
    .unwrap();
    let ids = model.document_ids(&full).map_err(|e| e.to_string())?;
    let assigned: Vec<i64> = probe.iter().map(|p| model.assign(p).unwrap()).collect();
    ensure!(ids["t"] == assigned, "test ids {:?} vs assign {:?}", ids["t"], assigned);
    Ok("reducer and clusterer reject test vectors; test ids equal assign()".into())
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let pass = outcome.is_ok();
    let detail = outcome.unwrap_or_else(|e| e);
    println!("{} [{n}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let mut ok = true;
    ok &= run(1, "gradient checks", gradients);
    ok &= run(2, "hdbscan oracle equivalence", hdbscan_oracle);
    ok &= run(3, "two-blob clustering", two_blobs);
    ok &= run(4, "reducer sanity", reducer);

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let run_a = demo_run(first.path());
    ok &= run(5, "end-to-end synthetic pipeline", || {
        let (art, secs) = run_a.clone()?;
        end_to_end(&art, secs)
    });
    ok &= run(6, "masking and truncation invariance", invariance);
    ok &= run(7, "metrics oracle", metrics);
    ok &= run(8, "determinism", || {
        let (a, _) = run_a.clone()?;
        let (b, _) = demo_run(second.path())?;
        determinism(&a, &b)
    });
    ok &= run(9, "leakage guards", leakage);

    if !ok {
        std::process::exit(1);
    }
}
