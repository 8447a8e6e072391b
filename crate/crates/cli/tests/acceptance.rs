// End-to-end acceptance checks. Runs without the libtest harness so every
// check prints one PASS/FAIL line; the process fails if any check fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use urag_core::config::PipelineConfig;
use urag_core::corpus::{chunk_corpus, Chunk, ChunkStore};
use urag_core::encoder::{
    info_nce, loss_and_gradients, resolve_triplets, train, Encoder, EncoderConfig, EncoderModel, ParamGroup,
    TextTriplet, TrainingBatch,
};
use urag_core::eval::{
    alignment_vectors, auroc, auroc_scores, calibration_rows, default_taus, rsa, tau_sweep, uniformity_vectors,
    write_tau_csv, CalibrationConfig, CalibrationRecord, QaRecord,
};
use urag_core::hashing::derive_seed;
use urag_core::lexical_index::Bm25Index;
use urag_core::provider::{generation_key, CacheEntry, CachedToken, PairScoreRecord, ReplayProvider};
use urag_core::retrieval::build_embedding_index;
use urag_core::sampling::{build_dataset, Checkpoint};
use urag_core::synth::generate_corpus;
use urag_core::uncertainty::{
    all_chunking_score, precise_chunking_score, span_uncertainty, window_snr, Span, SpanConfig,
};
use urag_core::Execution;

type Check = std::result::Result<String, String>;
type Named = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

fn urag(dir: &Path, args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_urag"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "urag {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) {
    let body: String = items
        .iter()
        .map(|x| serde_json::to_string(x).unwrap() + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

fn chunk(id: &str, text: &str) -> Chunk {
    Chunk {
        chunk_id: id.into(),
        doc_id: id.into(),
        ordinal: 0,
        text: text.into(),
        word_count: text.split_whitespace().count(),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-r..r)).collect()
}

// ---------------------------------------------------------------- oracles

fn oracle_mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

fn oracle_windows(n: usize, w: usize, stride: usize) -> Vec<(usize, usize)> {
    if n < w {
        return vec![(0, n)];
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s + w <= n {
        out.push((s, s + w));
        s += stride;
    }
    out
}

fn oracle_su(si: &[f64], w: usize, stride: usize, sigma: f64) -> f64 {
    let mut picked = BTreeSet::new();
    for (s, e) in oracle_windows(si.len(), w, stride) {
        let (m, v) = oracle_mean_var(&si[s..e]);
        if v > 0.0 && m / v < sigma {
            picked.extend(s..e);
        }
    }
    if picked.is_empty() {
        return si.iter().sum::<f64>() / si.len() as f64;
    }
    picked.iter().map(|&i| si[i]).sum::<f64>() / picked.len() as f64
}

fn oracle_info_nce(a: &[Vec<f64>], p: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let k = a.len();
    let mut total = 0.0;
    for i in 0..k {
        let denom: f64 = (0..k).map(|j| dot(&a[i], &p[j]).exp() + dot(&a[i], &n[j]).exp()).sum();
        total -= (dot(&a[i], &p[i]).exp() / denom).ln();
    }
    total / k as f64
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn oracle_bm25(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    docs.iter()
        .map(|d| {
            query
                .iter()
                .map(|t| {
                    let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                    let tf = d.iter().filter(|x| *x == t).count() as f64;
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl))
                })
                .sum()
        })
        .collect()
}

fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

fn equation_oracles() -> Check {
    const TRIALS: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0dac1e);
    let exact = 1e-9;
    let summed = 1e-6;

    for t in 0..TRIALS {
        let n = rng.gen_range(1..120);
        let mut lps: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0..6.0)).collect();
        if t % 4 == 0 {
            // constant runs give zero-variance windows
            let v = lps[0];
            let run = rng.gen_range(0..=n);
            lps[..run].iter_mut().for_each(|x| *x = v);
        }
        let w = rng.gen_range(1..=25);
        let cfg = SpanConfig {
            window_len: w,
            stride: rng.gen_range(1..=w),
            sigma: rng.gen_range(0.1..5.0),
        };
        let si: Vec<f64> = lps.iter().map(|x| -x).collect();
        let boundary = if n > 1 { rng.gen_range(1..n) } else { 1 };
        if n > 1 {
            let rec = PairScoreRecord::from_logprobs("a", "c", &lps, boundary).unwrap();
            let su = span_uncertainty(&rec, &cfg).unwrap().su;
            let want = oracle_su(&si, cfg.window_len, cfg.stride, cfg.sigma);
            ensure(close(su, want, exact), || format!("span_uncertainty trial {t}: {su} vs {want}"))?;

            let all = all_chunking_score(&rec).unwrap().su;
            let want = si.iter().sum::<f64>() / n as f64;
            ensure(close(all, want, exact), || format!("all_chunking trial {t}: {all} vs {want}"))?;
            let precise = precise_chunking_score(&rec).unwrap().su;
            let tail = &si[boundary..];
            let want = tail.iter().sum::<f64>() / tail.len() as f64;
            ensure(close(precise, want, exact), || format!("precise_chunking trial {t}: {precise} vs {want}"))?;
        }
        for (s, e) in oracle_windows(n, cfg.window_len, cfg.stride) {
            let got = window_snr(&si, Span { start: s, end: e }, cfg.sigma);
            let (m, v) = oracle_mean_var(&si[s..e]);
            let snr = if v > 0.0 { m / v } else { f64::INFINITY };
            ensure(
                close(got.mean_si, m, exact)
                    && close(got.var_si, v, exact)
                    && close(got.snr, snr, exact)
                    && got.selected == (snr < cfg.sigma),
                || format!("window_snr trial {t} [{s},{e}): {got:?} vs mean {m} var {v}"),
            )?;
        }
    }

    for t in 0..TRIALS {
        let k = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let mk = |rng: &mut ChaCha8Rng| (0..k).map(|_| random_vec(rng, d, 1.5)).collect::<Vec<_>>();
        let (a, p, n) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let got = info_nce(&a, &p, &n).unwrap();
        let want = oracle_info_nce(&a, &p, &n);
        ensure(close(got, want, exact), || format!("info_nce trial {t}: {got} vs {want}"))?;
    }

    let vocab: Vec<String> = (0..15).map(|i| format!("w{i}")).collect();
    for t in 0..TRIALS {
        let docs: Vec<Vec<String>> = (0..rng.gen_range(1..12))
            .map(|_| (0..rng.gen_range(1..30)).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect())
            .collect();
        let store = ChunkStore::from_chunks(
            docs.iter()
                .enumerate()
                .map(|(i, d)| chunk(&format!("c{i:02}"), &d.join(" ")))
                .collect(),
        )
        .unwrap();
        let (k1, b) = (rng.gen_range(0.1..3.0), rng.gen_range(0.0..=1.0));
        let idx = Bm25Index::build(&store, k1, b).unwrap();
        let query: Vec<String> = (0..rng.gen_range(1..6))
            .map(|_| format!("w{}", rng.gen_range(0..18)))
            .collect();
        let got = idx.score_all(&query.join(" "));
        let want = oracle_bm25(&docs, &query, k1, b);
        for (g, w) in got.iter().zip(&want) {
            ensure(close(*g, *w, summed), || format!("bm25 trial {t}: {got:?} vs {want:?}"))?;
        }
    }

    for t in 0..TRIALS {
        let d = rng.gen_range(1..=8);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..rng.gen_range(1..10))
            .map(|_| (random_vec(&mut rng, d, 1.0), random_vec(&mut rng, d, 1.0)))
            .collect();
        let got = alignment_vectors(&pairs).unwrap();
        let want = pairs
            .iter()
            .map(|(x, y)| unit(x).iter().zip(unit(y)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / pairs.len() as f64;
        ensure(close(got, want, summed), || format!("alignment trial {t}: {got} vs {want}"))?;

        let vs: Vec<Vec<f64>> = (0..rng.gen_range(2..12)).map(|_| random_vec(&mut rng, d, 1.0)).collect();
        let got = uniformity_vectors(&vs, Execution::Sequential).unwrap();
        let mut acc = 0.0;
        for x in &vs {
            for y in &vs {
                let dist: f64 = unit(x).iter().zip(unit(y)).map(|(a, b)| (a - b).powi(2)).sum();
                acc += (-2.0 * dist).exp();
            }
        }
        let want = (acc / (vs.len() * vs.len()) as f64).ln();
        ensure(close(got, want, summed), || format!("uniformity trial {t}: {got} vs {want}"))?;

        let m = rng.gen_range(3..10);
        let d = rng.gen_range(2..=8);
        let sa: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut rng, d, 1.0)).collect();
        let sb: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut rng, d, 1.0)).collect();
        let cos = |s: &[Vec<f64>]| {
            let mut out = Vec::new();
            for i in 0..s.len() {
                for j in i + 1..s.len() {
                    out.push(unit(&s[i]).iter().zip(unit(&s[j])).map(|(a, b)| a * b).sum::<f64>());
                }
            }
            out
        };
        let got = rsa(&sa, &sb).unwrap();
        let want = oracle_pearson(&cos(&sa), &cos(&sb));
        ensure(close(got, want, summed), || format!("rsa trial {t}: {got} vs {want}"))?;
    }

    for t in 0..TRIALS {
        let n = rng.gen_range(2..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse grid so ties occur
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8)) / 4.0).collect();
        let got = auroc_scores(&scores, &labels).unwrap();
        let want = oracle_auroc(&scores, &labels);
        ensure(close(got, want, exact), || format!("auroc trial {t}: {got} vs {want}"))?;
    }
    Ok(format!("{TRIALS} randomized instances per quantity"))
}

// ---------------------------------------------------------------- gradients

fn embed_loss(model: &EncoderModel, triplets: &[TextTriplet]) -> f64 {
    let e = |s: &str| model.embed(s).unwrap();
    let a: Vec<_> = triplets.iter().map(|t| e(&t.anchor)).collect();
    let p: Vec<_> = triplets.iter().map(|t| e(&t.positive)).collect();
    let n: Vec<_> = triplets.iter().map(|t| e(&t.negative)).collect();
    oracle_info_nce(&a, &p, &n)
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..50 {
        let cfg = EncoderConfig {
            vocab_hash_dim: rng.gen_range(11..64),
            embed_dim: rng.gen_range(1..=8),
            output_dim: rng.gen_range(1..=8),
            dropout_rate: 0.0,
        };
        let mut model = EncoderModel::new(cfg, trial).unwrap();
        // move off the structured initialization so every parameter matters
        for g in [ParamGroup::TokenTable, ParamGroup::Projection, ParamGroup::Bias] {
            model.param_mut(g).iter_mut().for_each(|x| *x += rng.gen_range(-0.5..0.5));
        }
        let words: Vec<String> = (0..12).map(|i| format!("v{i}")).collect();
        let text = |rng: &mut ChaCha8Rng| {
            (0..rng.gen_range(1..7))
                .map(|_| words.choose(rng).unwrap().as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let triplets: Vec<TextTriplet> = (0..rng.gen_range(1..=2))
            .map(|_| TextTriplet {
                anchor: text(&mut rng),
                positive: text(&mut rng),
                negative: text(&mut rng),
            })
            .collect();
        let batch = TrainingBatch::new(&triplets).unwrap();
        let (_, grads) = loss_and_gradients(&model, &batch, None).unwrap();
        let mut compare = |group: ParamGroup, i: usize, analytic: f64| -> std::result::Result<(), String> {
            let mut plus = model.clone();
            plus.param_mut(group)[i] += h;
            let mut minus = model.clone();
            minus.param_mut(group)[i] -= h;
            let numeric = (embed_loss(&plus, &triplets) - embed_loss(&minus, &triplets)) / (2.0 * h);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            ensure(rel < 1e-4, || {
                format!("model {trial} {group:?}[{i}]: numeric {numeric} analytic {analytic} rel {rel:.2e}")
            })
        };
        for (i, &g) in grads.projection.iter().enumerate() {
            compare(ParamGroup::Projection, i, g)?;
        }
        for (i, &g) in grads.bias.iter().enumerate() {
            compare(ParamGroup::Bias, i, g)?;
        }
        // token rows not in the gradient map must have zero derivative too
        for row in 0..cfg.vocab_hash_dim {
            for j in 0..cfg.embed_dim {
                let g = grads.rows.get(&row).map_or(0.0, |r| r[j]);
                compare(ParamGroup::TokenTable, row * cfg.embed_dim + j, g)?;
            }
        }
    }
    Ok(format!("50 models, {checked} parameters, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- SNR trace

fn snr_trace_crossing() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases = 100;
    let mut chunks = Vec::new();
    let mut pairs = Vec::new();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let mut pool: Vec<usize> = (0..5000).collect();
        pool.shuffle(&mut rng);
        let words: Vec<String> = pool[..60].iter().map(|i| format!("w{i}")).collect();
        let mut again = words.clone();
        again.shuffle(&mut rng);
        chunks.push(chunk(&format!("a{case:03}"), &words.join(" ")));
        chunks.push(chunk(&format!("b{case:03}"), &again.join(" ")));
        pairs.push(serde_json::json!({"anchor_id": format!("a{case:03}"), "candidate_id": format!("b{case:03}")}));
    }
    write_lines(&dir.path().join("chunks.jsonl"), &chunks);
    write_lines(&dir.path().join("pairs.jsonl"), &pairs);
    fs::write(dir.path().join("urag.toml"), "seed = 3\n[provider]\nkind = \"synthetic\"\nrecall = true\n")
        .map_err(|e| e.to_string())?;
    urag(
        dir.path(),
        &[
            "--config", "urag.toml", "score-pairs", "--chunks", "chunks.jsonl", "--pairs", "pairs.jsonl",
            "--out", "scores.jsonl", "--trace", "trace.jsonl",
        ],
    )?;
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).map_err(|e| e.to_string())?;
    let mut crossed = 0;
    let mut lines = 0;
    for line in trace.lines() {
        lines += 1;
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let sigma = v["sigma"].as_f64().ok_or("trace line without sigma")?;
        let windows = v["windows"].as_array().ok_or("trace line without windows")?;
        let n_tokens = windows.iter().filter_map(|w| w["span"]["end"].as_u64()).max().unwrap_or(0);
        // null SNR is a zero-variance window: +inf
        let snr: Vec<(f64, u64)> = windows
            .iter()
            .map(|w| (w["snr"].as_f64().unwrap_or(f64::INFINITY), w["span"]["end"].as_u64().unwrap_or(0)))
            .collect();
        let above_first = snr.iter().position(|&(s, _)| s >= sigma);
        let hit = above_first.is_some_and(|i| snr[i + 1..].iter().any(|&(s, end)| s < sigma && end < n_tokens));
        crossed += usize::from(hit);
    }
    ensure(lines == cases as usize, || format!("trace has {lines} lines, expected {cases}"))?;
    let frac = crossed as f64 / cases as f64;
    ensure(frac >= 0.9, || format!("trace crossed below sigma in {crossed}/{cases} cases"))?;
    Ok(format!("crossed below sigma before the end in {crossed}/{cases} cases"))
}

// ---------------------------------------------------------------- planted topics

const PLANTED_TOPIC_FRACTION: f64 = 0.37;
const PLANTED_WORDS_PER_DOC: usize = 100;
const PLANTED_ROUNDS: usize = 4;
const PLANTED_ANCHORS: usize = 20;
const PLANTED_EPOCHS: usize = 4500;

fn planted_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_root_seed(seed);
    cfg.synth.topics = 10;
    cfg.synth.topic_fraction = PLANTED_TOPIC_FRACTION;
    cfg.synth.words_per_doc = PLANTED_WORDS_PER_DOC;
    cfg.sampling.rounds = PLANTED_ROUNDS;
    cfg.sampling.anchors_per_cluster = PLANTED_ANCHORS;
    cfg.provider.recall = true;
    cfg
}

struct Planted {
    corpus: urag_core::synth::SynthCorpus,
    chunks: ChunkStore,
    triplets: Vec<urag_core::sampling::Triplet>,
}

fn planted_data(cfg: &PipelineConfig) -> std::result::Result<Planted, String> {
    let s = |e: urag_core::Error| e.to_string();
    let corpus = generate_corpus(&cfg.synth).map_err(s)?;
    let chunks = chunk_corpus(&corpus.documents, cfg.corpus.chunk_size).map_err(s)?;
    let index = Bm25Index::build(&chunks, cfg.index.k1, cfg.index.b).map_err(s)?;
    let provider = cfg.provider.build().map_err(s)?;
    let checkpoint = Checkpoint::in_memory(cfg.sampling.mode);
    let built = build_dataset(&chunks, &index, &*provider, &cfg.sampling, &cfg.span, &checkpoint).map_err(s)?;
    Ok(Planted {
        corpus,
        chunks,
        triplets: built.triplets,
    })
}

fn training_gain() -> Check {
    let started = Instant::now();
    let mut trained_sum = 0.0;
    let mut untrained_sum = 0.0;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = planted_config(seed);
        cfg.train.epochs = PLANTED_EPOCHS;
        ensure(cfg.train.batch_size == 16 && cfg.train.learning_rate == 1e-5, || {
            "training defaults are not batch 16, lr 1e-5".into()
        })?;
        let data = planted_data(&cfg)?;
        let texts = resolve_triplets(&data.triplets, &data.chunks).map_err(|e| e.to_string())?;
        let untrained = EncoderModel::new(cfg.encoder, derive_seed(cfg.train.seed, "encoder")).map_err(|e| e.to_string())?;
        let (trained, _) = train(&texts, cfg.encoder, &cfg.train).map_err(|e| e.to_string())?;
        let precision = |m: &EncoderModel| -> std::result::Result<f64, String> {
            let idx = build_embedding_index(m, &data.chunks).map_err(|e| e.to_string())?;
            data.corpus.same_topic_precision(&idx, &data.chunks, 5).map_err(|e| e.to_string())
        };
        let (u, t) = (precision(&untrained)?, precision(&trained)?);
        untrained_sum += u;
        trained_sum += t;
        detail.push(format!("seed {seed}: {u:.3} -> {t:.3}"));
    }
    let (u, t) = (untrained_sum / 3.0, trained_sum / 3.0);
    let secs = started.elapsed().as_secs_f64();
    let summary = format!(
        "same-topic precision@5 untrained {u:.3} trained {t:.3} (mean of 3 seeds; {}) in {secs:.0}s",
        detail.join(", ")
    );
    ensure(t >= 0.9 && u <= 0.5 && secs < 600.0, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- scaling ablation

const ABLATION_EPOCHS: usize = 3000;

fn scaling_ablation() -> Check {
    let mut sums = [[0.0; 2]; 3];
    for seed in 0..3u64 {
        let mut base = planted_config(100 + seed);
        base.synth.docs_per_topic = 12;
        base.sampling.rounds = 2;
        base.sampling.anchors_per_cluster = 4;
        base.train.epochs = ABLATION_EPOCHS;
        let mut rounds = base.clone();
        rounds.sampling.rounds *= 2;
        let mut anchors = base.clone();
        anchors.sampling.anchors_per_cluster *= 2;

        let reference = planted_data(&base)?;
        let eval_pairs: Vec<(String, String)> = resolve_triplets(&reference.triplets, &reference.chunks)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|t| (t.anchor, t.positive))
            .collect();
        for (slot, cfg) in [&base, &rounds, &anchors].into_iter().enumerate() {
            let data = planted_data(cfg)?;
            let texts = resolve_triplets(&data.triplets, &data.chunks).map_err(|e| e.to_string())?;
            let (model, _) = train(&texts, cfg.encoder, &cfg.train).map_err(|e| e.to_string())?;
            let embed = |s: &str| model.embed(s).map_err(|e| e.to_string());
            let vecs = data.chunks.iter().map(|c| embed(&c.text)).collect::<std::result::Result<Vec<_>, _>>()?;
            let pairs = eval_pairs
                .iter()
                .map(|(a, p)| Ok((embed(a)?, embed(p)?)))
                .collect::<std::result::Result<Vec<_>, String>>()?;
            sums[slot][0] += alignment_vectors(&pairs).map_err(|e| e.to_string())? / 3.0;
            sums[slot][1] += uniformity_vectors(&vecs, Execution::auto()).map_err(|e| e.to_string())? / 3.0;
        }
    }
    let [b, r, a] = sums;
    let summary = format!(
        "uniformity base {:.4} vs 2x rounds {:.4}; alignment base {:.4} vs 2x anchors {:.4} (means of 3 seeds)",
        b[1], r[1], b[0], a[0]
    );
    ensure(r[1] <= b[1] && a[0] <= b[0], || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- calibration

const MODEL: &str = "replay-qa";

fn qa_fixture(n: usize, cfg: &CalibrationConfig) -> (Vec<QaRecord>, Vec<CacheEntry>) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut records = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let correct = i % 2 == 0;
        let gold = format!("answer {i}");
        let prompt = format!("question number {i}?");
        let text = if correct { gold.clone() } else { format!("wrong {}", i * 7 + 1) };
        let lp = if correct { -rng.gen_range(0.01..0.3) } else { -rng.gen_range(1.5..4.0) };
        let tokens = text
            .split_whitespace()
            .map(|w| CachedToken { t: w.into(), lp })
            .collect();
        let prompt_tokens = prompt
            .split_whitespace()
            .map(|w| CachedToken {
                t: w.into(),
                lp: -rng.gen_range(0.5..4.0),
            })
            .collect();
        entries.push(CacheEntry {
            key: generation_key(MODEL, &prompt, cfg.max_tokens),
            tokens,
            boundary_index: None,
            text: Some(text),
            prompt_tokens: Some(prompt_tokens),
        });
        records.push(QaRecord { prompt, gold });
    }
    (records, entries)
}

fn calibration_pipeline() -> Check {
    let cfg = CalibrationConfig::default();
    let (records, entries) = qa_fixture(500, &cfg);
    let provider = ReplayProvider::from_entries(MODEL, entries.clone());
    let rows = calibration_rows(&provider, &records, &cfg).map_err(|e| e.to_string())?;
    ensure(rows.skipped == 0, || format!("{} records skipped", rows.skipped))?;
    let recs = rows.records(cfg.tau);
    let separable = auroc(&recs).map_err(|e| e.to_string())?;
    ensure(separable == 1.0, || format!("separable set AUROC {separable}"))?;

    let mut labels: Vec<u8> = recs.iter().map(|r| r.binary_label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(500));
    let permuted: Vec<CalibrationRecord> = recs
        .iter()
        .zip(&labels)
        .map(|(r, &l)| CalibrationRecord {
            binary_label: l,
            ..*r
        })
        .collect();
    let null = auroc(&permuted).map_err(|e| e.to_string())?;
    ensure((null - 0.5).abs() <= 0.05, || format!("permuted-label AUROC {null}"))?;

    // tau sweep through the CLI: same records at every tau, identical sweep file
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = dir.path().join("cache.jsonl");
    write_lines(&cache, &entries);
    write_lines(&dir.path().join("qa.jsonl"), &records);
    fs::write(
        dir.path().join("urag.toml"),
        format!("[provider]\nkind = \"replay\"\nmodel = \"{MODEL}\"\ncache = \"cache.jsonl\"\n"),
    )
    .map_err(|e| e.to_string())?;
    let mut sweeps = BTreeSet::new();
    let mut uncertainties = BTreeSet::new();
    for tau in default_taus() {
        let t = format!("{tau}");
        urag(
            dir.path(),
            &[
                "--config", "urag.toml", "calibrate", "--qa", "qa.jsonl", "--tau", &t, "--out", "cal.json",
                "--tau-csv", "sweep.csv",
            ],
        )?;
        sweeps.insert(fs::read_to_string(dir.path().join("sweep.csv")).map_err(|e| e.to_string())?);
        let out: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("cal.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let us: Vec<String> = out["records"]
            .as_array()
            .ok_or("calibration output without records")?
            .iter()
            .map(|r| r["uncertainty"].to_string())
            .collect();
        uncertainties.insert(us.join(","));
    }
    ensure(sweeps.len() == 1 && uncertainties.len() == 1, || {
        format!("{} distinct sweep files, {} distinct uncertainty lists", sweeps.len(), uncertainties.len())
    })?;
    let csv_path = dir.path().join("lib_sweep.csv");
    let points = tau_sweep(&rows, &default_taus());
    write_tau_csv(&points, &csv_path).map_err(|e| e.to_string())?;
    ensure(points.len() == 9, || format!("{} sweep points", points.len()))?;
    Ok(format!("separable AUROC {separable}, permuted {null:.4} over 500 records, tau sweep stable over 0.1..0.9"))
}

// ---------------------------------------------------------------- determinism

fn pipeline_run(dir: &Path) -> std::result::Result<BTreeMap<&'static str, Vec<u8>>, String> {
    let steps: [&[&str]; 6] = [
        &["synth", "--out", "corpus.jsonl", "--docs-per-topic", "6"],
        &["chunk", "--in", "corpus.jsonl", "--out", "chunks.jsonl"],
        &["index", "--chunks", "chunks.jsonl", "--out", "bm25.json"],
        &["build-dataset", "--chunks", "chunks.jsonl", "--index", "bm25.json", "--out", "triplets.jsonl"],
        &["train", "--chunks", "chunks.jsonl", "--triplets", "triplets.jsonl", "--out", "model.bin", "--epochs", "3"],
        &["eval", "--model", "model.bin", "--chunks", "chunks.jsonl", "--triplets", "triplets.jsonl", "--out", "eval.json"],
    ];
    for step in steps {
        let mut args = vec!["--seed", "2024"];
        args.extend_from_slice(step);
        urag(dir, &args)?;
    }
    let mut out = BTreeMap::new();
    for name in ["triplets.jsonl", "model.bin", "eval.json"] {
        out.insert(name, fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?);
    }
    Ok(out)
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (x, y) = (pipeline_run(a.path())?, pipeline_run(b.path())?);
    for (name, bytes) in &x {
        ensure(!bytes.is_empty(), || format!("{name} is empty"))?;
        ensure(y[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    Ok("triplets.jsonl, model.bin and eval.json byte-identical across two runs".into())
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [Named; 7] = [
        ("1 equation oracles", equation_oracles),
        ("2 InfoNCE gradient check", gradient_check),
        ("3 SNR trace crosses below sigma", snr_trace_crossing),
        ("4 training gain on planted topics", training_gain),
        ("5 scaling ablation direction", scaling_ablation),
        ("6 calibration pipeline", calibration_pipeline),
        ("7 pipeline determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let res = check();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS [{name}] {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{name}] {msg} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
