//! Acceptance suite. Each criterion runs on its own clock and prints one
//! PASS/FAIL line; the test fails if any criterion fails or overruns.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};
use synthqa_cli::pipeline::{self, DECISIONS_FILE, REPORT_FILE, SCORED_PAIRS_FILE};
use synthqa_cli::{run_all, BackendMode, RunConfig};
use synthqa_core::clustering::{kmeans, DEFAULT_MAX_ITER, DEFAULT_TOL};
use synthqa_core::embedding::{local_deterministic_embed, Vector};
use synthqa_core::evaluation::{
    cosine_similarity, relevance_report, shannon_entropy, BenchmarkLabel, EvaluationReport, DEFAULT_THRESHOLD,
};
use synthqa_core::ingest::{chunk_document, parse_document, sample_corpus, Chunk, ChunkingConfig, Document, DocumentFormat};
use synthqa_core::llm::{PairStatus, QnaPair, QuestionType};
use synthqa_core::projection::{conditional_affinities, joint_affinities, kl_divergence, kl_gradient, tsne, TsneConfig};
use synthqa_core::review::{export_jsonl, parse_dataset, parse_log};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    bound: Duration,
    run: fn() -> Outcome,
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { name: "chunking-coverage", bound: Duration::from_secs(5), run: chunking_coverage },
        Criterion { name: "local-embedder", bound: Duration::from_secs(5), run: local_embedder },
        Criterion { name: "kmeans-oracle", bound: Duration::from_secs(30), run: kmeans_oracle },
        Criterion { name: "tsne-correctness", bound: Duration::from_secs(60), run: tsne_correctness },
        Criterion { name: "evaluation-metrics", bound: Duration::from_secs(1), run: evaluation_metrics },
        Criterion { name: "diversity-check", bound: Duration::from_secs(10), run: diversity_check },
        Criterion { name: "end-to-end-determinism", bound: Duration::from_secs(60), run: end_to_end_determinism },
        Criterion { name: "review-service", bound: Duration::from_secs(10), run: review_service },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.bound => Err(format!("{detail}; runtime over bound")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "{tag} {:<24} {:>7.3} s (bound {} s)  {detail}",
            c.name,
            elapsed.as_secs_f64(),
            c.bound.as_secs()
        );
        if outcome.is_err() {
            failed.push(c.name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ---------------------------------------------------------------- chunking

/// Walk chunks against the paragraph sequence: whole paragraphs joined by a
/// blank line, split paragraphs continuing with no separator.
fn covers(doc: &Document, chunks: &[Chunk]) -> Result<(), String> {
    let paras: Vec<&str> = doc.paragraphs().map(|b| b.text.as_str()).collect();
    let (mut p, mut off) = (0usize, 0usize);
    for c in chunks {
        let mut t = c.text.as_str();
        ensure!(!t.is_empty(), "empty chunk {}", c.chunk_id);
        loop {
            ensure!(p < paras.len(), "chunk {} runs past the source", c.chunk_id);
            let rest = &paras[p][off..];
            if let Some(after) = t.strip_prefix(rest) {
                p += 1;
                off = 0;
                if after.is_empty() {
                    break;
                }
                t = after.strip_prefix("\n\n").ok_or_else(|| format!("missing separator in {}", c.chunk_id))?;
            } else {
                ensure!(rest.starts_with(t), "chunk {} diverges from the source", c.chunk_id);
                off += t.len();
                break;
            }
        }
    }
    ensure!((p, off) == (paras.len(), 0), "source not fully covered");
    Ok(())
}

fn random_markdown(seed: u64) -> String {
    const SYLLABLES: &[&str] = &["ka", "ro", "ti", "ne", "su", "vo", "lé", "mä", "za", "qu", "ion", "str"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.random_range(1..4)).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
    };
    let mut out = String::from("<<<page 1>>>\n");
    let mut page = 1;
    for _ in 0..rng.random_range(1..30) {
        match rng.random_range(0..10) {
            0 => {
                page += rng.random_range(1..3);
                out.push_str(&format!("<<<page {page}>>>\n"));
            }
            1 | 2 => {
                let level = rng.random_range(1..4);
                out.push_str(&format!("{} {}\n\n", "#".repeat(level), word(&mut rng)));
            }
            _ => {
                for s in 0..rng.random_range(1..40) {
                    if s > 0 {
                        out.push(' ');
                    }
                    let n = if rng.random_bool(0.05) { rng.random_range(300..900) } else { rng.random_range(3..25) };
                    let ws: Vec<String> = (0..n).map(|_| word(&mut rng)).collect();
                    out.push_str(&ws.join(" "));
                    out.push_str([".", "?", "!", ";"][rng.random_range(0..4)]);
                }
                out.push_str("\n\n");
            }
        }
    }
    out
}

fn chunking_coverage() -> Outcome {
    let configs = [
        ChunkingConfig::default(),
        ChunkingConfig { target_chars: 300, max_chars: 500, min_chars: 80 },
        ChunkingConfig { target_chars: 60, max_chars: 61, min_chars: 1 },
    ];
    let mut docs = vec![sample_corpus()];
    ensure!(docs[0].blocks.iter().map(|b| b.page).max() == Some(3), "sample corpus is not 3 pages");
    for seed in 0..50 {
        docs.push(parse_document("rand", &random_markdown(seed), DocumentFormat::Markdown).map_err(|e| e.to_string())?);
    }
    let mut total = 0;
    for (i, doc) in docs.iter().enumerate() {
        for cfg in &configs {
            let chunks = chunk_document(doc, cfg);
            covers(doc, &chunks).map_err(|e| format!("document {i}: {e}"))?;
            for c in &chunks {
                ensure!(c.text.chars().count() <= cfg.max_chars, "{} exceeds max_chars", c.chunk_id);
            }
            total += chunks.len();
        }
    }
    Ok(format!("{} documents x {} configs, {total} chunks", docs.len(), configs.len()))
}

// ---------------------------------------------------------------- embedder

fn local_embedder() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_norm: f64 = 0.0;
    for _ in 0..200 {
        let words: Vec<String> = (0..rng.random_range(1..40)).map(|_| format!("w{}", rng.random_range(0..500))).collect();
        let text = words.join(" ");
        let a = local_deterministic_embed(&text, 256).map_err(|e| e.to_string())?;
        let b = local_deterministic_embed(&text, 256).map_err(|e| e.to_string())?;
        ensure!(a == b, "embedding not deterministic for {text:?}");
        worst_norm = worst_norm.max((a.norm() - 1.0).abs());
        let mut shuffled = words.clone();
        shuffled.shuffle(&mut rng);
        let c = local_deterministic_embed(&shuffled.join(" "), 256).map_err(|e| e.to_string())?;
        ensure!(a.values == c.values, "word order changed the embedding");
    }
    ensure!(worst_norm <= 1e-6, "norm deviates by {worst_norm}");

    let vocab: Vec<String> = (0..5000).map(|i| format!("tok{i}")).collect();
    let (mut shared, mut disjoint) = (0.0, 0.0);
    for _ in 0..100 {
        let picks: Vec<&str> = vocab.choose_multiple(&mut rng, 30).map(String::as_str).collect();
        let base = picks[..10].join(" ");
        let overlap = [&picks[..5], &picks[10..15]].concat().join(" ");
        let other = picks[20..30].join(" ");
        let b = local_deterministic_embed(&base, 256).unwrap();
        shared += cosine_similarity(&b, &local_deterministic_embed(&overlap, 256).unwrap()).unwrap();
        disjoint += cosine_similarity(&b, &local_deterministic_embed(&other, 256).unwrap()).unwrap();
    }
    let (shared, disjoint) = (shared / 100.0, disjoint / 100.0);
    ensure!(shared > disjoint, "overlap mean {shared} not above disjoint mean {disjoint}");
    Ok(format!("max |norm-1| {worst_norm:.1e}; mean cosine overlap {shared:.3} vs disjoint {disjoint:.3}"))
}

// ---------------------------------------------------------------- k-means

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive minimum inertia over partitions into at most k groups.
fn brute_force_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    fn rec(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        if labels.len() == points.len() {
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &l) in points.iter().zip(labels.iter()) {
                counts[l] += 1;
                sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
            }
            let inertia: f64 = points
                .iter()
                .zip(labels.iter())
                .map(|(p, &l)| sq(p, &sums[l].iter().map(|s| s / counts[l] as f64).collect::<Vec<_>>()))
                .sum();
            *best = best.min(inertia);
            return;
        }
        for l in 0..(used + 1).min(k) {
            labels.push(l);
            rec(points, k, labels, used.max(l + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(points, k, &mut Vec::new(), 0, &mut best);
    best
}

fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let (ka, kb) = (a.iter().max().unwrap() + 1, b.iter().max().unwrap() + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| c2(c)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / c2(a.len());
    let max = (rows + cols) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

fn planted(seed: u64, n: usize, dim: usize, separation: f64) -> (Vec<Vector>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut vecs = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n {
        let c = i % 3;
        let v = (0..dim).map(|d| if d == c { separation } else { 0.0 } + noise.sample(&mut rng)).collect();
        vecs.push(Vector::new(v).unwrap());
        truth.push(c);
    }
    (vecs, truth)
}

fn kmeans_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_ratio: f64 = 0.0;
    for instance in 0..20u64 {
        let n = rng.random_range(4..=12);
        let k = rng.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let vecs: Vec<Vector> = points.iter().map(|p| Vector::new(p.clone()).unwrap()).collect();
        let model = kmeans(&vecs, k, instance, DEFAULT_MAX_ITER, DEFAULT_TOL).map_err(|e| e.to_string())?;
        let optimum = brute_force_inertia(&points, k);
        let ratio = if optimum > 0.0 { model.inertia / optimum } else { 1.0 };
        worst_ratio = worst_ratio.max(ratio);
        ensure!(model.inertia <= optimum * 1.10 + 1e-12, "instance {instance}: {} vs optimum {optimum}", model.inertia);
    }
    // Unit-variance noise, centers 20 apart on separate axes.
    let mut worst_ari: f64 = 1.0;
    for seed in 0..10 {
        let (vecs, truth) = planted(100 + seed, 120, 5, 20.0);
        let model = kmeans(&vecs, 3, seed, DEFAULT_MAX_ITER, DEFAULT_TOL).map_err(|e| e.to_string())?;
        let ari = adjusted_rand_index(&model.assignments, &truth);
        worst_ari = worst_ari.min(ari);
        ensure!(ari >= 0.9, "seed {seed}: ARI {ari}");
    }
    Ok(format!("worst inertia/optimum {worst_ratio:.4}; worst ARI {worst_ari:.3}"))
}

// ---------------------------------------------------------------- t-SNE

fn gaussian_points(seed: u64, n: usize, dim: usize) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| Vector::new((0..dim).map(|_| normal.sample(&mut rng)).collect()).unwrap()).collect()
}

fn knn_agreement(coords: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = coords.len();
    let mut agree = 0;
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sq(&coords[i], &coords[j]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        agree += d[..k].iter().filter(|&&(_, j)| labels[j] == labels[i]).count();
    }
    agree as f64 / (n * k) as f64
}

fn tsne_correctness() -> Outcome {
    let (planted_vecs, planted_labels) = planted(150, 150, 10, 15.0);
    let cases: Vec<(Vec<Vector>, f64)> = vec![
        (gaussian_points(1, 60, 8), 10.0),
        (gaussian_points(2, 150, 50), 30.0),
        (planted_vecs.clone(), 30.0),
        (gaussian_points(4, 20, 3), 5.0),
    ];
    let mut worst_perp: f64 = 0.0;
    for (vecs, target) in &cases {
        let n = vecs.len();
        let cond = conditional_affinities(vecs, *target, 1e-5, 200).map_err(|e| e.to_string())?;
        for i in 0..n {
            let h: f64 = cond.p[i * n..(i + 1) * n].iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
            let err = (2f64.powf(h) - target).abs();
            worst_perp = worst_perp.max(err);
            ensure!(err <= 1e-5, "n={n} row {i}: perplexity off by {err}");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst_rel: f64 = 0.0;
    for instance in 0..5u64 {
        let vecs = gaussian_points(100 + instance, 6, 4);
        let cfg = TsneConfig::default();
        let p = joint_affinities(&vecs, cfg.effective_perplexity(6), cfg.perplexity_tol, cfg.perplexity_max_bisections)
            .map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let y: Vec<f64> = (0..12).map(|_| normal.sample(&mut rng)).collect();
            let analytic = kl_gradient(&p, &y, 2);
            for (k, a) in analytic.iter().enumerate() {
                let h = 1e-6;
                let (mut plus, mut minus) = (y.clone(), y.clone());
                plus[k] += h;
                minus[k] -= h;
                let numeric = (kl_divergence(&p, &plus, 2) - kl_divergence(&p, &minus, 2)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                worst_rel = worst_rel.max(rel);
                ensure!(rel <= 1e-4, "instance {instance} coordinate {k}: relative error {rel}");
            }
        }
    }

    let out = tsne(&planted_vecs, &TsneConfig { seed: 3, ..TsneConfig::default() }).map_err(|e| e.to_string())?;
    let agreement = knn_agreement(&out.coords, &planted_labels, 5);
    ensure!(agreement >= 0.9, "5-NN agreement {agreement}");
    Ok(format!(
        "max perplexity error {worst_perp:.1e}; max gradient relative error {worst_rel:.1e}; 5-NN agreement {agreement:.3}"
    ))
}

// ---------------------------------------------------------------- evaluation

fn unit(v: Vec<f64>) -> Vector {
    Vector::new(v).unwrap()
}

fn evaluation_metrics() -> Outcome {
    let cos = |a: Vec<f64>, b: Vec<f64>| cosine_similarity(&unit(a), &unit(b)).unwrap();
    let cases = [
        (cos(vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]), 1.0),
        (cos(vec![1.0, 0.0], vec![0.0, 5.0]), 0.0),
        (cos(vec![1.0, 0.0], vec![1.0, 1.0]), std::f64::consts::FRAC_1_SQRT_2),
    ];
    for (got, want) in cases {
        ensure!((got - want).abs() <= 1e-8, "cosine {got} vs {want}");
    }

    // Hand values: one token, four equiprobable tokens, and a 2:1 split
    // (-(2/3) log2(2/3) - (1/3) log2(1/3)).
    let third: f64 = 1.0 / 3.0;
    let split = -(2.0 * third) * (2.0 * third).log2() - third * third.log2();
    ensure!((split - 0.91829583).abs() <= 1e-6, "hand formula {split}");
    for (texts, want) in [(vec!["pump pump pump"], 0.0), (vec!["a b", "c d"], 2.0), (vec!["valve valve", "relief"], split)]
    {
        let got = shannon_entropy(&texts).map_err(|e| e.to_string())?.entropy_bits;
        ensure!((got - want).abs() <= 1e-6, "entropy of {texts:?}: {got} vs {want}");
    }

    let pair = |id: &str| QnaPair {
        pair_id: id.into(),
        chunk_id: "c".into(),
        question: id.into(),
        answer: "a".into(),
        question_type: QuestionType::FundamentalRecall,
        source_ref: "d p. 1".into(),
        similarity: None,
        status: PairStatus::Pending,
    };
    let at = |s: f64| unit(vec![s, (1.0 - s * s).sqrt()]);
    let pairs = vec![pair("p85"), pair("p80"), pair("p79")];
    let chunks = HashMap::from([("c".to_string(), unit(vec![1.0, 0.0]))]);
    let questions = HashMap::from([
        ("p85".to_string(), at(0.85)),
        ("p80".to_string(), unit(vec![0.8, 0.6])),
        ("p79".to_string(), at(0.79)),
    ]);
    let r = relevance_report(&pairs, &chunks, &questions, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
    let sims: Vec<f64> = r.pairs.iter().map(|p| p.similarity.unwrap()).collect();
    ensure!(sims[1] == 0.8, "boundary pair similarity {}", sims[1]);
    ensure!(r.flagged == ["p79"], "flagged {:?}", r.flagged);
    Ok(format!("similarities {sims:?} at threshold {DEFAULT_THRESHOLD}; flagged {:?}", r.flagged))
}

// ---------------------------------------------------------------- diversity

fn mock_run(dir: &Path, seed: u64) -> Result<RunConfig, String> {
    let mut cfg = RunConfig { out_dir: dir.to_path_buf(), seed, ..RunConfig::default() };
    cfg.set_backend(BackendMode::Mock);
    run_all(&cfg).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn diversity_check() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    mock_run(dir.path(), 7)?;
    let report = EvaluationReport::from_json(&std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap())
        .map_err(|e| e.to_string())?;
    ensure!(report.backend_ids.embedding.starts_with("local"), "embedding backend {}", report.backend_ids.embedding);
    let score = |label| report.benchmark_scores.iter().filter(move |s| s.label == label).map(|s| s.mean_top_k_cosine);
    let inside: Vec<f64> = score(BenchmarkLabel::InDomain).collect();
    let outside: Vec<f64> = score(BenchmarkLabel::OutOfDomain).collect();
    ensure!(inside.len() == 1 && outside.len() == 4, "benchmark has {} / {} questions", inside.len(), outside.len());
    let best_out = outside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure!(inside[0] > best_out, "in-domain {} does not exceed out-of-domain {outside:?}", inside[0]);
    Ok(format!("in-domain {:.3} vs best out-of-domain {best_out:.3} over {} questions", inside[0], report.scored_pairs))
}

// ---------------------------------------------------------------- determinism

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let run = Command::new(env!("CARGO_BIN_EXE_synthqa"))
            .args(["run-all", "--backend", "mock", "--seed", "7", "--out"])
            .arg(&out)
            // any attempted connection would fail fast
            .env("HTTP_PROXY", "http://127.0.0.1:9")
            .env("HTTPS_PROXY", "http://127.0.0.1:9")
            .env("ALL_PROXY", "http://127.0.0.1:9")
            .env_remove("SOURCE_DATE_EPOCH")
            .output()
            .unwrap();
        ensure!(run.status.success(), "run-all failed: {}", String::from_utf8_lossy(&run.stderr));
        trees.push(tree(&out));
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure!(a.keys().eq(b.keys()), "file sets differ: {:?} vs {:?}", a.keys(), b.keys());
    for (name, bytes) in a {
        ensure!(bytes == &b[name], "{name} differs between runs");
    }
    for required in ["report.json", "diversity_scatter.svg", "diversity_scatter.csv", "cluster_scatter.svg", "similarity_histogram.csv"] {
        ensure!(a.contains_key(required), "{required} missing");
    }

    let before = synthqa_core::http::requests_sent();
    let in_process = tempfile::tempdir().unwrap();
    mock_run(in_process.path(), 7)?;
    let sent = synthqa_core::http::requests_sent() - before;
    ensure!(sent == 0, "mock run issued {sent} HTTP requests");
    ensure!(tree(in_process.path()) == *a, "in-process run differs from the binary's");
    Ok(format!("{} files byte-identical across runs; 0 HTTP requests", a.len()))
}

// ---------------------------------------------------------------- review

const REFERENCE_QUESTION: &str = "Why are Class I power sources essential in a CANDU NPP?";
const REFERENCE_ANSWER: &str = "Class I power sources are essential in a CANDU NPP because they provide the necessary DC power to operate critical systems and equipment needed for the safe operation of the nuclear power plant. The loss of Class I power triggers shutdown systems to ensure safety.";

fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> Result<(u16, String), String> {
    let mut s = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let body = body.map(Value::to_string).unwrap_or_default();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .map_err(|e| e.to_string())?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let raw = String::from_utf8(raw).map_err(|e| e.to_string())?;
    let (head, mut rest) = raw.split_once("\r\n\r\n").ok_or("no header terminator")?;
    let status = head.get(9..12).and_then(|s| s.parse().ok()).ok_or("bad status line")?;
    if !head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        return Ok((status, rest.to_string()));
    }
    let mut out = String::new();
    loop {
        let (size, tail) = rest.split_once("\r\n").ok_or("bad chunk")?;
        let n = usize::from_str_radix(size.trim(), 16).map_err(|e| e.to_string())?;
        if n == 0 {
            return Ok((status, out));
        }
        out.push_str(&tail[..n]);
        rest = &tail[n + 2..];
    }
}

fn start_service(dir: &Path) -> Result<(Child, SocketAddr), String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_synthqa"))
        .args(["review", "serve", "--bind", "127.0.0.1:0", "--out"])
        .arg(dir)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| format!("unexpected banner {line:?}"))?;
    Ok((child, addr))
}

fn decide(addr: SocketAddr, id: &str, body: Value) -> Result<Value, String> {
    let (status, text) = http(addr, "POST", &format!("/api/pairs/{id}/decision"), Some(&body))?;
    ensure!(status == 200, "decision on {id}: HTTP {status} {text}");
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn review_service() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    mock_run(dir.path(), 7)?;
    let dataset_text = std::fs::read_to_string(dir.path().join(SCORED_PAIRS_FILE)).unwrap();
    let dataset = parse_dataset(&dataset_text).map_err(|e| e.to_string())?;
    let reference = dataset
        .iter()
        .find(|p| p.question == REFERENCE_QUESTION)
        .ok_or("reference pair missing from the sample dataset")?
        .pair_id
        .clone();
    let others: Vec<&str> = dataset.iter().map(|p| p.pair_id.as_str()).filter(|id| *id != reference).collect();

    let (mut child, addr) = start_service(dir.path())?;
    let (status, queue) = http(addr, "GET", "/api/queue?status=all&limit=500", None)?;
    ensure!(status == 200, "queue: HTTP {status}");
    let queue: Value = serde_json::from_str(&queue).map_err(|e| e.to_string())?;
    ensure!(queue["total"] == dataset.len(), "queue total {}", queue["total"]);
    decide(addr, &reference, json!({"verdict": "accept", "reviewer": "alice"}))?;
    decide(addr, others[0], json!({"verdict": "reject", "reviewer": "alice"}))?;
    decide(addr, others[1], json!({"verdict": "edit", "edited_question": "Which buses does Class III power feed?", "reviewer": "alice"}))?;

    // Hard kill mid-session, then restart on the same files.
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;
    let (mut child, addr) = start_service(dir.path())?;
    let result = (|| -> Outcome {
        let (_, detail) = http(addr, "GET", &format!("/api/pairs/{}", others[1]), None)?;
        let detail: Value = serde_json::from_str(&detail).map_err(|e| e.to_string())?;
        ensure!(detail["state"] == "edited", "edit lost across restart: {}", detail["state"]);
        let d = decide(addr, others[0], json!({"verdict": "accept", "reviewer": "bob"}))?;
        ensure!(d["decision_seq"] == 4, "sequence did not continue: {}", d["decision_seq"]);
        decide(addr, others[2], json!({"verdict": "edit", "edited_answer": "Standby generators pick up the load.", "reviewer": "bob"}))?;
        decide(addr, others[3], json!({"verdict": "reject", "reviewer": "bob"}))?;

        let (status, exported) = http(addr, "GET", "/api/export?format=jsonl", None)?;
        ensure!(status == 200, "export: HTTP {status}");
        let log_text = std::fs::read_to_string(dir.path().join(DECISIONS_FILE)).unwrap();
        let known = dataset.iter().map(|p| p.pair_id.as_str()).collect();
        let log = parse_log(&log_text, &known).map_err(|e| e.to_string())?;
        ensure!(log.len() == 6, "log has {} decisions", log.len());
        ensure!(exported == export_jsonl(&dataset, &log), "HTTP export differs from replay of the log");

        let curated: Vec<QnaPair> = synthqa_core::jsonl::parse(&exported).map_err(|e| e.to_string())?;
        ensure!(curated.len() == 4, "export has {} pairs", curated.len());
        let r = curated.iter().find(|p| p.pair_id == reference).ok_or("reference pair not exported")?;
        ensure!(r.question == REFERENCE_QUESTION && r.answer == REFERENCE_ANSWER, "reference pair altered");
        ensure!(r.status == PairStatus::Accepted, "reference status {:?}", r.status);

        let cfg = RunConfig { out_dir: dir.path().to_path_buf(), seed: 7, ..RunConfig::default() };
        pipeline::export(&cfg).map_err(|e| e.to_string())?;
        let cli_export = std::fs::read_to_string(dir.path().join(pipeline::CURATED_FILE)).unwrap();
        ensure!(cli_export == exported, "CLI export differs from HTTP export");
        Ok(format!("6 decisions across a kill/restart; {} pairs exported, reference pair verbatim", curated.len()))
    })();
    let _ = child.kill();
    let _ = child.wait();
    result
}
