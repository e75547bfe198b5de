use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use segrobust::audio::{log_mel, read_features, read_wav, write_features, write_wav, FeatureMatrix, SpeakerStatsTable};
use segrobust::corpus::{documents_from_manifest, read_manifest, sentence_entries, words, write_manifest, ManifestEntry};
use segrobust::data::{train_samples, FeatureBank};
use segrobust::eval::{evaluate, join_segments, EvalDocument, EvalOptions, EvalSegment, Feedback};
use segrobust::experiment::{run_experiment, write_tables, ExperimentConfig, ExperimentPlan, ResultStore};
use segrobust::model::{load_checkpoint, save_checkpoint, ContextMode, Model, ModelConfig};
use segrobust::reseg::resegment;
use segrobust::text::{BpeModel, Tokenizer, Vocabulary};
use segrobust::toy::{ToyCorpus, ToySpec};
use segrobust::train::{TrainConfig, Trainer};
use segrobust::vad::{segment_stream, VadConfig};
use segrobust::{Error, Result};

use crate::args::Command;

const DEFAULT_SEED: u64 = 1;
const MERGES_FILE: &str = "merges.txt";
const VOCAB_FILE: &str = "vocab.tsv";
const FEATURE_DIR: &str = "features";
const UNKNOWN_SPEAKER: &str = "unknown";

pub fn dispatch(cmd: Command, seed: Option<u64>) -> Result<()> {
    let s = seed.unwrap_or(DEFAULT_SEED);
    match cmd {
        Command::Toygen { spec, out, merges } => toygen(spec.as_deref(), &out, merges, seed),
        Command::Features { input, out } => features(&input, &out),
        Command::Segment {
            input,
            frame_ms,
            aggressiveness,
            hangover_ms,
            out,
        } => segment(&input, VadConfig::new(frame_ms, aggressiveness, hangover_ms)?, &out),
        Command::Resegment { input, out } => resegment_cmd(&input, &out, s),
        Command::Train {
            config,
            data,
            manifest,
            init,
            freeze_encoder,
            steps,
            out,
            log,
        } => {
            let log = log.unwrap_or_else(|| suffixed(&out, ".log.jsonl"));
            let opts = TrainOpts {
                config: config.as_deref(),
                data: &data,
                manifest: &manifest,
                init: init.as_deref(),
                freeze_encoder,
                steps,
                out: &out,
                log: &log,
            };
            train(&opts, seed)
        }
        Command::Evaluate {
            ckpt,
            manifest,
            segments,
            data,
            beam,
            context,
            oracle_context,
            report,
        } => {
            let data = data.unwrap_or_else(|| parent(&manifest));
            let feedback = if oracle_context { Feedback::Oracle } else { Feedback::Generated };
            evaluate_cmd(
                &ckpt,
                &manifest,
                segments.as_deref(),
                &data,
                beam,
                context.map(Into::into),
                feedback,
                &report,
            )
        }
        Command::Experiment {
            plan,
            scale,
            config,
            out,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from(format!("results/{plan}-seed{s}")));
            experiment(&plan, &scale, config.as_deref(), &out, s)
        }
        Command::Report { input, plan } => report(&input, plan.as_deref()),
    }
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = File::open(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    read_manifest(BufReader::new(f))
}

fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_manifest(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))
    };
    Ok(Tokenizer {
        bpe: BpeModel::from_merges_file(&read(MERGES_FILE)?)?,
        vocab: Vocabulary::from_file(&read(VOCAB_FILE)?)?,
    })
}

/// WAV files named by `input`: the file itself or a directory's `*.wav`, sorted.
fn wav_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Usage(format!("{}: no such file or directory", input.display())))
    }
}

fn stem(p: &str) -> String {
    Path::new(p)
        .file_stem()
        .map_or_else(|| p.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Raw features for every audio file the entries mention, read from the
/// feature cache when present.
fn raw_features(entries: &[ManifestEntry], base: &Path) -> Result<BTreeMap<String, FeatureMatrix>> {
    let cache = base.join(FEATURE_DIR);
    let mut out = BTreeMap::new();
    for e in entries {
        if out.contains_key(&e.audio) {
            continue;
        }
        let speaker = e.speaker.as_deref().unwrap_or(UNKNOWN_SPEAKER);
        let cached = cache.join(format!("{}.feat", stem(&e.audio)));
        let m = if cached.is_file() {
            read_features(&mut BufReader::new(File::open(&cached)?), speaker)?
        } else {
            log_mel(&read_wav(&base.join(&e.audio))?, speaker)?
        };
        out.insert(e.audio.clone(), m);
    }
    Ok(out)
}

fn toygen(spec_path: Option<&Path>, out: &Path, merges: i64, seed: Option<u64>) -> Result<()> {
    let mut spec: ToySpec = match spec_path {
        Some(p) => read_json(p)?,
        None => ToySpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = ToyCorpus::generate(&spec)?;
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir)?;
    let mut manifests: BTreeMap<&str, Vec<ManifestEntry>> = BTreeMap::new();
    for (split, docs) in [("train", &corpus.train), ("valid", &corpus.valid), ("test", &corpus.test)] {
        let lines = manifests.entry(split).or_default();
        for doc in docs {
            write_wav(&audio_dir.join(&doc.audio), &corpus.render(doc)?)?;
            lines.extend(sentence_entries(doc).into_iter().map(|mut e| {
                e.audio = format!("audio/{}", e.audio);
                e
            }));
        }
    }
    for (split, lines) in &manifests {
        save_manifest(&out.join(format!("{split}.jsonl")), lines)?;
    }
    let targets: Vec<Vec<String>> = manifests["train"].iter().map(|e| words(&e.tgt)).collect();
    let tok = Tokenizer::learn(&targets, merges)?;
    fs::write(out.join(MERGES_FILE), tok.bpe.to_merges_file())?;
    fs::write(out.join(VOCAB_FILE), tok.vocab.to_file())?;
    write_json(&out.join("spec.json"), &spec)?;
    log::info!(
        "toygen: {} train / {} valid / {} test documents, vocabulary {} -> {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        tok.vocab.len(),
        out.display()
    );
    Ok(())
}

fn features(input: &Path, out: &Path) -> Result<()> {
    let files = wav_inputs(input)?;
    fs::create_dir_all(out)?;
    for f in &files {
        let m = log_mel(&read_wav(f)?, UNKNOWN_SPEAKER)?;
        let name = format!("{}.feat", stem(&f.to_string_lossy()));
        let mut w = BufWriter::new(File::create(out.join(name))?);
        write_features(&mut w, &m)?;
        w.flush()?;
    }
    log::info!("features: {} files -> {}", files.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SegmentLine<'a> {
    clip: &'a str,
    start_s: f64,
    end_s: f64,
}

#[derive(Deserialize)]
struct SegmentRecord {
    clip: String,
    start_s: f64,
    end_s: f64,
}

fn segment(input: &Path, cfg: VadConfig, out: &Path) -> Result<()> {
    let files = wav_inputs(input)?;
    let mut w = BufWriter::new(File::create(out)?);
    let mut count = 0;
    for f in &files {
        let clip = read_wav(f)?;
        let name = f.to_string_lossy();
        for s in segment_stream(&clip, &cfg)? {
            let line = SegmentLine {
                clip: &name,
                start_s: s.start_s,
                end_s: s.end_s,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
            count += 1;
        }
    }
    w.flush()?;
    log::info!("segment: {} clips, {count} segments -> {}", files.len(), out.display());
    Ok(())
}

fn resegment_cmd(input: &Path, out: &Path, seed: u64) -> Result<()> {
    let docs = documents_from_manifest(&load_manifest(input)?)?;
    let mut lines = Vec::new();
    let (mut fragments, mut discarded) = (0, 0);
    for doc in &docs {
        let r = resegment(doc, seed)?;
        fragments += r.fragments;
        discarded += r.discarded;
        lines.extend(r.samples.iter().map(|s| s.to_entry(doc)));
    }
    save_manifest(out, &lines)?;
    log::info!(
        "resegment: {} documents, {fragments} fragments, {discarded} discarded -> {}",
        docs.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

struct TrainOpts<'a> {
    config: Option<&'a Path>,
    data: &'a Path,
    manifest: &'a str,
    init: Option<&'a Path>,
    freeze_encoder: bool,
    steps: Option<usize>,
    out: &'a Path,
    log: &'a Path,
}

fn train(o: &TrainOpts, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainFile = match o.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(n) = o.steps {
        cfg.train.steps = n;
    }
    cfg.train.freeze_encoder |= o.freeze_encoder;
    if cfg.model.context_mode == ContextMode::None {
        cfg.train.alpha = 0.0;
    }
    let tok = load_tokenizer(o.data)?;
    if cfg.model.vocab_size != tok.vocab.len() {
        log::info!("train: vocab_size set to {} from the tokenizer", tok.vocab.len());
        cfg.model.vocab_size = tok.vocab.len();
    }
    let entries = load_manifest(&o.data.join(o.manifest))?;
    let raw = raw_features(&entries, o.data)?;
    let stats = SpeakerStatsTable::build(raw.values());
    let bank = FeatureBank::from_raw(raw, &stats);
    let samples = train_samples(&entries, &bank, &tok)?;

    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(p) = o.init {
        let base = load_checkpoint(p)?;
        let n = model.init_from(&base);
        log::info!("train: {n} parameter tensors initialised from {}", p.display());
    }
    let mut trainer = Trainer::new(&mut model, cfg.train.clone())?;
    let mut log_file = BufWriter::new(File::create(o.log)?);
    let mut write_err = None;
    let every = (cfg.train.steps / 20).max(1);
    trainer.run(&mut model, &samples, |s| {
        let line = serde_json::to_string(s).expect("step logs serialize");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
        if s.step % every == 0 {
            log::info!("train: step {} lr {:.3e} L {:.4} L' {:.4}", s.step, s.lr, s.loss, s.loss_prime);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log_file.flush()?;
    save_checkpoint(o.out, &model)?;
    write_json(&suffixed(o.out, ".stats.json"), &stats)?;
    log::info!("train: {} samples, {} steps -> {}", samples.len(), trainer.step, o.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    ckpt: &Path,
    manifest: &Path,
    segments: Option<&Path>,
    data: &Path,
    beam: usize,
    context: Option<ContextMode>,
    feedback: Feedback,
    report_path: &Path,
) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let tok = load_tokenizer(data)?;
    if tok.vocab.len() != model.config.vocab_size {
        return Err(Error::Usage(format!(
            "tokenizer has {} entries, model expects {}",
            tok.vocab.len(),
            model.config.vocab_size
        )));
    }
    let base = parent(manifest);
    let entries = load_manifest(manifest)?;
    let raw = raw_features(&entries, &base)?;
    let stats_path = suffixed(ckpt, ".stats.json");
    let stats: SpeakerStatsTable = if stats_path.is_file() {
        read_json(&stats_path)?
    } else {
        log::warn!("evaluate: {} missing; normalizing with test statistics", stats_path.display());
        SpeakerStatsTable::build(raw.values())
    };
    let bank = FeatureBank::from_raw(raw, &stats);

    let mut order: Vec<&str> = Vec::new();
    let mut by_doc: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &entries {
        if !by_doc.contains_key(e.doc_id.as_str()) {
            order.push(&e.doc_id);
        }
        by_doc.entry(&e.doc_id).or_default().push(e);
    }
    let external: Option<BTreeMap<String, Vec<(f64, f64)>>> = match segments {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
            let mut m: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: SegmentRecord = serde_json::from_str(line)?;
                m.entry(stem(&r.clip)).or_default().push((r.start_s, r.end_s));
            }
            Some(m)
        }
        None => None,
    };

    let mut docs = Vec::new();
    for id in order {
        let mut lines = by_doc.remove(id).unwrap_or_default();
        lines.sort_by_key(|e| e.idx);
        let refs: Vec<Vec<String>> = lines.iter().map(|e| words(&e.tgt)).collect();
        let audio = &lines[0].audio;
        let spans: Vec<(f64, f64, Vec<String>)> = match &external {
            Some(m) => m
                .get(&stem(audio))
                .map(|v| v.iter().map(|&(a, b)| (a, b, Vec::new())).collect())
                .unwrap_or_default(),
            None => lines.iter().map(|e| (e.start_s, e.end_s, words(&e.tgt))).collect(),
        };
        let segments = spans
            .into_iter()
            .enumerate()
            .map(|(idx, (a, b, reference))| {
                Ok(EvalSegment {
                    idx,
                    start_s: a,
                    end_s: b,
                    features: bank.segment(audio, a, b)?.into(),
                    reference,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        docs.push(EvalDocument {
            doc_id: id.to_string(),
            segments,
            reference: join_segments(&refs),
        });
    }
    let opts = EvalOptions {
        beam,
        context: context.unwrap_or(model.config.context_mode),
        feedback,
    };
    let (report, hyps) = evaluate(&model, &tok, &docs, &opts)?;
    write_json(report_path, &report)?;
    let hyp_path = report_path.with_extension("hyps.jsonl");
    let mut w = BufWriter::new(File::create(&hyp_path)?);
    for h in &hyps {
        writeln!(w, "{}", serde_json::to_string(h)?)?;
    }
    w.flush()?;
    log::info!(
        "evaluate: {} documents, {} segments, BLEU {:.2}, TER {:.2} -> {}",
        report.documents,
        report.segments,
        report.bleu,
        report.ter,
        report_path.display()
    );
    Ok(())
}

fn experiment(plan_name: &str, scale: &str, config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let plan = ExperimentPlan::by_name(plan_name)?;
    let mut cfg = match config {
        Some(p) => read_json::<ExperimentConfig>(p)?,
        None => ExperimentConfig::preset(scale)?,
    };
    cfg.seed = seed;
    let store = ResultStore::new(out)?;
    let plan_path = out.join("plan.json");
    let cfg_path = out.join("config.json");
    if cfg_path.is_file() {
        let previous: ExperimentConfig = read_json(&cfg_path)?;
        if previous != cfg {
            return Err(Error::Usage(format!(
                "{} holds results for a different configuration",
                out.display()
            )));
        }
    }
    write_json(&plan_path, &plan)?;
    write_json(&cfg_path, &cfg)?;
    let results = run_experiment(&cfg, &plan, &store)?;
    let (text_path, _) = write_tables(&store, &plan, &results)?;
    print!("{}", fs::read_to_string(text_path)?);
    Ok(())
}

fn report(dir: &Path, plan: Option<&str>) -> Result<()> {
    let plan = match plan {
        Some(name) => ExperimentPlan::by_name(name)?,
        None => read_json(&dir.join("plan.json"))?,
    };
    let store = ResultStore::open(dir);
    let (results, missing) = store.collect(&plan)?;
    if !missing.is_empty() {
        let names: BTreeSet<String> = missing.iter().map(|c| c.to_string()).collect();
        for n in &names {
            log::error!("missing cell: {n}");
        }
        return Err(segrobust::experiment::missing_error(&missing));
    }
    let (text_path, _) = write_tables(&store, &plan, &results)?;
    print!("{}", fs::read_to_string(text_path)?);
    Ok(())
}
