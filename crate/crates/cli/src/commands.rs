use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use urag_core::config::PipelineConfig;
use urag_core::corpus::{chunk_corpus, ingest_documents, write_documents, ChunkStore, CorpusFormat, DocumentSet};
use urag_core::encoder::{resolve_triplets, train, Encoder, EncoderModel};
use urag_core::eval::{calibration_rows, default_taus, evaluate, read_qa_records, tau_sweep, write_tau_csv};
use urag_core::eval::{auroc, CalibrationOutcome, UncertaintyMethod};
use urag_core::lexical_index::Bm25Index;
use urag_core::par;
use urag_core::provider::score_pair;
use urag_core::retrieval::{assemble_prompt, build_embedding_index, EmbedIndex, PromptTemplate, TaskTag};
use urag_core::sampling::{build_dataset, read_triplets, write_triplets, Checkpoint};
use urag_core::synth::generate_corpus;
use urag_core::uncertainty::{score_records, self_information_seq, snr_trace, ScoreMode, WindowStats};
use urag_core::Execution;

use crate::{Cli, Command, Resume};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load_with_seed(p, cli.seed)?,
        None => PipelineConfig::with_root_seed(cli.seed.unwrap_or(0)),
    };
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Chunk(a) => chunk(cfg, a),
        Command::Index(a) => index(cfg, a),
        Command::ScorePairs(a) => score_pairs(cfg, a),
        Command::BuildDataset(a) => build(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::EmbedIndex(a) => embed_index(a),
        Command::Retrieve(a) => retrieve(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Calibrate(a) => calibrate(cfg, a),
    }
}

fn skip(out: &Path, r: &Resume) -> bool {
    let s = r.resume && out.exists();
    if s {
        info!("{} exists; skipped", out.display());
    }
    s
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_chunks(path: &Path) -> Result<ChunkStore> {
    ChunkStore::load_jsonl(path).with_context(|| format!("loading chunks from {}", path.display()))
}

fn synth(mut cfg: PipelineConfig, a: crate::SynthArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    if let Some(t) = a.topics {
        cfg.synth.topics = t;
    }
    if let Some(d) = a.docs_per_topic {
        cfg.synth.docs_per_topic = d;
    }
    if let Some(w) = a.words_per_doc {
        cfg.synth.words_per_doc = w;
    }
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.synth)?;
    write_documents(&corpus.documents, &a.out)?;
    println!("{} documents in {} topics -> {}", corpus.documents.len(), cfg.synth.topics, a.out.display());
    Ok(())
}

fn chunk(mut cfg: PipelineConfig, a: crate::ChunkArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    if let Some(s) = a.size {
        cfg.corpus.chunk_size = s;
    }
    if let Some(f) = a.format {
        cfg.corpus.format = f;
    }
    if !a.inputs.is_empty() {
        cfg.corpus.paths = a.inputs;
    }
    cfg.validate()?;
    if cfg.corpus.paths.is_empty() {
        bail!("no corpus given: pass --in or set corpus.paths");
    }
    let format: CorpusFormat = cfg.corpus.format.parse()?;
    let mut docs = Vec::new();
    for p in &cfg.corpus.paths {
        docs.extend(ingest_documents(p, format)?.into_inner());
    }
    let docs = DocumentSet::new(docs)?;
    let chunks = chunk_corpus(&docs, cfg.corpus.chunk_size)?;
    chunks.save_jsonl(&a.out)?;
    println!("{} documents -> {} chunks -> {}", docs.len(), chunks.len(), a.out.display());
    Ok(())
}

fn index(mut cfg: PipelineConfig, a: crate::IndexArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    if let Some(k1) = a.k1 {
        cfg.index.k1 = k1;
    }
    if let Some(b) = a.b {
        cfg.index.b = b;
    }
    cfg.validate()?;
    let chunks = load_chunks(&a.chunks)?;
    let idx = Bm25Index::build(&chunks, cfg.index.k1, cfg.index.b)?;
    idx.save(&a.out)?;
    println!("indexed {} chunks -> {}", idx.corpus_size(), a.out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PairRef {
    anchor_id: String,
    candidate_id: String,
}

/// One `--trace` line. Infinite SNR (zero-variance window) is written as null.
#[derive(Debug, Serialize)]
struct TraceLine<'a> {
    anchor_id: &'a str,
    candidate_id: &'a str,
    boundary_index: usize,
    sigma: f64,
    windows: Vec<WindowStats>,
}

fn score_pairs(mut cfg: PipelineConfig, a: crate::ScorePairsArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    if let Some(m) = &a.mode {
        cfg.sampling.mode = m.parse::<ScoreMode>()?;
    }
    cfg.validate()?;
    let chunks = load_chunks(&a.chunks)?;
    let pairs: Vec<PairRef> = read_jsonl(&a.pairs)?;
    let provider = cfg.provider.build()?;
    let records = par::try_map(Execution::auto(), &pairs, |p| -> urag_core::Result<_> {
        let x = chunks.require(&p.anchor_id)?;
        let y = chunks.require(&p.candidate_id)?;
        score_pair(&*provider, x, y, &cfg.sampling.separator)
    })?;
    let scores = score_records(&records, cfg.sampling.mode, &cfg.span, Execution::auto())?;
    write_jsonl(&scores, &a.out)?;
    if let Some(path) = &a.trace {
        let mut lines = Vec::with_capacity(records.len());
        for r in &records {
            lines.push(TraceLine {
                anchor_id: &r.anchor_id,
                candidate_id: &r.candidate_id,
                boundary_index: r.boundary_index,
                sigma: cfg.span.sigma,
                windows: snr_trace(&self_information_seq(&r.logprobs())?, &cfg.span),
            });
        }
        write_jsonl(&lines, path)?;
    }
    println!("scored {} pairs ({}) -> {}", scores.len(), cfg.sampling.mode, a.out.display());
    Ok(())
}

fn build(mut cfg: PipelineConfig, a: crate::BuildDatasetArgs) -> Result<()> {
    if let Some(r) = a.rounds {
        cfg.sampling.rounds = r;
    }
    if let Some(c) = a.anchors_per_cluster {
        cfg.sampling.anchors_per_cluster = c;
    }
    cfg.validate()?;
    if a.dry_run {
        let chunks = load_chunks(&a.chunks)?;
        let idx = Bm25Index::load(&a.index).with_context(|| format!("loading {}", a.index.display()))?;
        if idx.corpus_size() != chunks.len() {
            bail!(
                "index covers {} chunks but {} has {}",
                idx.corpus_size(),
                a.chunks.display(),
                chunks.len()
            );
        }
        if cfg.sampling.k_clusters > chunks.len() {
            bail!("k_clusters ({}) exceeds the {} chunks", cfg.sampling.k_clusters, chunks.len());
        }
        println!(
            "configuration valid: {} chunks, k={} anchors/cluster={} N={} M={} m={} rounds={} mode={}",
            chunks.len(),
            cfg.sampling.k_clusters,
            cfg.sampling.anchors_per_cluster,
            cfg.sampling.prefilter_n,
            cfg.sampling.scored_m,
            cfg.sampling.window_m,
            cfg.sampling.rounds,
            cfg.sampling.mode
        );
        return Ok(());
    }
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    let chunks = load_chunks(&a.chunks)?;
    let idx = Bm25Index::load(&a.index).with_context(|| format!("loading {}", a.index.display()))?;
    let provider = cfg.provider.build()?;
    let ck = match &a.checkpoint {
        Some(p) => Checkpoint::open(p, cfg.sampling.mode)?,
        None => Checkpoint::in_memory(cfg.sampling.mode),
    };
    let ds = build_dataset(&chunks, &idx, &*provider, &cfg.sampling, &cfg.span, &ck)?;
    write_triplets(&ds.triplets, &a.out)?;
    println!(
        "{} anchors, {} triplets -> {}",
        ds.anchors.len(),
        ds.triplets.len(),
        a.out.display()
    );
    Ok(())
}

fn report_path(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| out.with_extension("report.json"))
}

fn train_cmd(mut cfg: PipelineConfig, a: crate::TrainArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.validate()?;
    let chunks = load_chunks(&a.chunks)?;
    let triplets = read_triplets(&a.triplets)?;
    let texts = resolve_triplets(&triplets, &chunks)?;
    let (model, report) = train(&texts, cfg.encoder, &cfg.train)?;
    model.save(&a.out)?;
    report.save(&report_path(&a.out, a.report))?;
    println!(
        "{} triplets, {} steps, loss {:.4} -> {:.4}; model {} -> {}",
        report.triplets,
        report.total_steps,
        report.first_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN),
        &report.model_fingerprint[..12],
        a.out.display()
    );
    Ok(())
}

fn embed_index(a: crate::EmbedIndexArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    let model = EncoderModel::load(&a.model)?;
    let chunks = load_chunks(&a.chunks)?;
    let idx = build_embedding_index(&model, &chunks)?;
    idx.save(&a.out)?;
    println!("embedded {} chunks (dim {}) -> {}", idx.len(), idx.dim(), a.out.display());
    Ok(())
}

fn retrieve(cfg: PipelineConfig, a: crate::RetrieveArgs) -> Result<()> {
    let model = EncoderModel::load(&a.model)?;
    let idx = EmbedIndex::load(&a.index)?;
    if idx.model_fingerprint() != model.fingerprint() {
        bail!(
            "index {} was built with a different model than {}",
            a.index.display(),
            a.model.display()
        );
    }
    let chunks = load_chunks(&a.chunks)?;
    let m = a.m.unwrap_or(cfg.retrieval.m);
    let task = match &a.task {
        Some(t) => t.parse::<TaskTag>()?,
        None => cfg.retrieval.task,
    };
    let template = match a.template.as_ref().or(cfg.retrieval.template.as_ref()) {
        Some(p) => PromptTemplate::load(task, p)?,
        None => PromptTemplate::builtin(task),
    };
    let hits = idx.retrieve(&model, &a.query, m)?;
    let mut texts = Vec::with_capacity(hits.len());
    let mut out = String::new();
    for (rank, h) in hits.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{:.6}\n", rank + 1, h.chunk_id, h.score));
        texts.push(chunks.require(&h.chunk_id)?.text.as_str());
    }
    out.push('\n');
    out.push_str(&assemble_prompt(&template, &texts, &a.query));
    out.push('\n');
    std::io::stdout().write_all(out.as_bytes())?;
    Ok(())
}

fn eval(cfg: PipelineConfig, a: crate::EvalArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    let model = EncoderModel::load(&a.model)?;
    let chunks = load_chunks(&a.chunks)?;
    let triplets = read_triplets(&a.triplets)?;
    let pairs: Vec<(String, String)> = resolve_triplets(&triplets, &chunks)?
        .into_iter()
        .map(|t| (t.anchor, t.positive))
        .collect();
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let reference = a.reference.as_deref().map(EncoderModel::load).transpose()?;
    let report = evaluate(&model, &pairs, &texts, reference.as_ref().map(|r| r as &dyn Encoder))?;
    report.save(&a.out)?;
    println!(
        "alignment {:.6} uniformity {:.6}{} -> {}",
        report.alignment,
        report.uniformity,
        report.rsa.map(|r| format!(" rsa {r:.6}")).unwrap_or_default(),
        a.out.display()
    );
    if let Some(qa) = &a.qa {
        cfg.calibration.validate()?;
        let provider = cfg.provider.build()?;
        let records = read_qa_records(qa)?;
        let rows = calibration_rows(&*provider, &records, &cfg.calibration)?;
        write_tau_csv(&tau_sweep(&rows, &default_taus()), &a.tau_csv)?;
        println!("tau sweep over {} records -> {}", rows.rows.len(), a.tau_csv.display());
    }
    Ok(())
}

fn calibrate(mut cfg: PipelineConfig, a: crate::CalibrateArgs) -> Result<()> {
    if skip(&a.out, &a.resume) {
        return Ok(());
    }
    if let Some(m) = &a.method {
        cfg.calibration.method = m.parse::<UncertaintyMethod>()?;
    }
    if let Some(t) = a.tau {
        cfg.calibration.tau = t;
    }
    cfg.calibration.full_stream |= a.full_stream;
    cfg.validate()?;
    let provider = cfg.provider.build()?;
    let records = read_qa_records(&a.qa)?;
    let rows = calibration_rows(&*provider, &records, &cfg.calibration)?;
    let recs = rows.records(cfg.calibration.tau);
    let outcome = CalibrationOutcome {
        auroc: auroc(&recs)?,
        tau: cfg.calibration.tau,
        method: cfg.calibration.method,
        records: recs,
        skipped: rows.skipped,
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&outcome)? + "\n")
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(csv) = &a.tau_csv {
        write_tau_csv(&tau_sweep(&rows, &default_taus()), csv)?;
    }
    println!(
        "AUROC {:.6} at tau {} over {} records ({} skipped) -> {}",
        outcome.auroc,
        outcome.tau,
        outcome.records.len(),
        outcome.skipped,
        a.out.display()
    );
    Ok(())
}
