//! The comparison grid: systems trained on clean or re-segmented toy data,
//! each evaluated on one or more test segmentations.
//!
//! Every finished cell is written as its own JSON file and every trained
//! model as a checkpoint, so an interrupted run picks up where it stopped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{log_mel, SpeakerStatsTable};
use crate::corpus::{sentence_entries, words, Document, ManifestEntry};
use crate::data::{eval_document, sentence_spans, train_samples, vad_spans, FeatureBank};
use crate::error::{usage, Error, Result};
use crate::eval::{evaluate, EvalDocument, EvalOptions, EvalReport, Feedback};
use crate::model::{read_checkpoint, write_checkpoint, ContextMode, Integration, Model, ModelConfig};
use crate::reseg::resegment;
use crate::text::Tokenizer;
use crate::toy::{ToyCorpus, ToySpec};
use crate::train::{TrainConfig, TrainSample, Trainer};
use crate::vad::VadConfig;

/// A trained system of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum System {
    /// Trained on clean sentence segments only.
    Base,
    /// Base training continued on re-segmented data.
    FineTune,
    /// Context-aware model initialised from the base and trained on
    /// re-segmented data. `Text` context is the target side (TGT), `Audio`
    /// the source side (SRC).
    Context {
        source: ContextMode,
        integration: Integration,
        reg: bool,
    },
}

impl System {
    pub fn context(source: ContextMode, integration: Integration, reg: bool) -> Self {
        System::Context {
            source,
            integration,
            reg,
        }
    }

    pub fn slug(&self) -> String {
        self.to_string().to_lowercase().replace(" + ", "-").replace(' ', "-")
    }

    pub fn context_mode(&self) -> ContextMode {
        match self {
            System::Context { source, .. } => *source,
            _ => ContextMode::None,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            System::Base => f.write_str("BASE"),
            System::FineTune => f.write_str("FINE-TUNE"),
            System::Context {
                source,
                integration,
                reg,
            } => {
                let side = if *source == ContextMode::Audio { "SRC" } else { "TGT" };
                let how = if *integration == Integration::Parallel { "PAR" } else { "SEQ" };
                write!(f, "{side} {how}{}", if *reg { " + REG" } else { "" })
            }
        }
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "BASE" => return Ok(System::Base),
            "FINE-TUNE" => return Ok(System::FineTune),
            _ => {}
        }
        let (body, reg) = match s.strip_suffix(" + REG") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let source = match body.get(..4) {
            Some("TGT ") => ContextMode::Text,
            Some("SRC ") => ContextMode::Audio,
            _ => return usage(format!("unknown system {s:?}")),
        };
        let integration = match &body[4..] {
            "SEQ" => Integration::Sequential,
            "PAR" => Integration::Parallel,
            _ => return usage(format!("unknown system {s:?}")),
        };
        Ok(System::context(source, integration, reg))
    }
}

impl Serialize for System {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for System {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How the test audio is cut before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmentation {
    /// Gold sentence boundaries.
    Sentence,
    /// The experiment's voice-activity configuration.
    Vad,
}

impl fmt::Display for Segmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segmentation::Sentence => "sentence",
            Segmentation::Vad => "vad",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub system: System,
    pub segmentation: Segmentation,
}

impl Cell {
    pub fn file_name(&self) -> String {
        format!("{}.{}.json", self.system.slug(), self.segmentation)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {}", self.system, self.segmentation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub systems: Vec<System>,
    pub segmentations: Vec<Segmentation>,
}

impl ExperimentPlan {
    /// Base, fine-tuning and every context variant with and without gate
    /// regularization, on gold and VAD test segmentation.
    pub fn paper_grid() -> Self {
        let mut systems = vec![System::Base, System::FineTune];
        for source in [ContextMode::Text, ContextMode::Audio] {
            for integration in [Integration::Sequential, Integration::Parallel] {
                for reg in [false, true] {
                    systems.push(System::context(source, integration, reg));
                }
            }
        }
        ExperimentPlan {
            name: "paper-grid".into(),
            systems,
            segmentations: vec![Segmentation::Sentence, Segmentation::Vad],
        }
    }

    /// The three systems of the headline comparison, on VAD segmentation.
    pub fn core() -> Self {
        ExperimentPlan {
            name: "core".into(),
            systems: vec![
                System::Base,
                System::FineTune,
                System::context(ContextMode::Text, Integration::Parallel, true),
            ],
            segmentations: vec![Segmentation::Vad],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper-grid" => Ok(Self::paper_grid()),
            "core" => Ok(Self::core()),
            _ => usage(format!("unknown plan {name:?} (expected paper-grid or core)")),
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.systems
            .iter()
            .flat_map(|&system| {
                self.segmentations.iter().map(move |&segmentation| Cell {
                    system,
                    segmentation,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub system: System,
    pub segmentation: Segmentation,
    pub bleu: f64,
    pub ter: f64,
    pub report: EvalReport,
}

impl CellResult {
    pub fn cell(&self) -> Cell {
        Cell {
            system: self.system,
            segmentation: self.segmentation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: ToySpec,
    /// `vocab_size`, `context_mode` and `integration` are set per system.
    pub model: ModelConfig,
    /// Training on clean sentences.
    pub base: TrainConfig,
    /// Training on re-segmented data (fine-tuning and context models).
    pub finetune: TrainConfig,
    /// Gate-regularization weight of the `+ REG` systems.
    pub reg_alpha: f64,
    pub bpe_merges: i64,
    pub beam: usize,
    pub vad_frame_ms: u32,
    pub vad_aggressiveness: u8,
    pub vad_hangover_ms: u32,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    /// Desk-scale setting: 2,000 documents.
    pub fn toy() -> Self {
        ExperimentConfig {
            corpus: ToySpec {
                documents: 2000,
                ..ToySpec::default()
            },
            model: ModelConfig {
                dropout: 0.1,
                ..ModelConfig::default()
            },
            base: TrainConfig {
                lr_peak: 1.5e-3,
                steps: 5000,
                batch_pairs: 16,
                alpha: 0.0,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 2000,
                batch_pairs: 16,
                alpha: 0.0,
                warmup_steps: 100,
                ..TrainConfig::default()
            },
            reg_alpha: 0.04,
            bpe_merges: 1000,
            beam: 4,
            vad_frame_ms: 20,
            vad_aggressiveness: 3,
            vad_hangover_ms: 300,
            seed: 1,
        }
    }

    /// A few documents and steps; exercises every code path in seconds.
    pub fn smoke() -> Self {
        let mut c = Self::toy();
        c.corpus.documents = 20;
        c.corpus.max_sentences = 3;
        c.model.d_model = 16;
        c.model.ffn_dim = 24;
        c.model.encoder_layers = 1;
        c.model.decoder_layers = 1;
        c.model.conv_channels = 4;
        c.base.steps = 4;
        c.base.batch_pairs = 4;
        c.finetune.steps = 2;
        c.finetune.batch_pairs = 4;
        c.beam = 2;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "smoke" => Ok(Self::smoke()),
            _ => usage(format!("unknown scale {name:?} (expected toy or smoke)")),
        }
    }

    pub fn vad(&self) -> Result<VadConfig> {
        VadConfig::new(self.vad_frame_ms, self.vad_aggressiveness, self.vad_hangover_ms)
    }

    fn base_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            alpha: 0.0,
            ..self.base.clone()
        }
    }

    fn finetune_train(&self, system: System) -> TrainConfig {
        let alpha = match system {
            System::Context { reg: true, .. } => self.reg_alpha,
            _ => 0.0,
        };
        TrainConfig {
            seed: self.seed,
            alpha,
            ..self.finetune.clone()
        }
    }
}

/// Everything derived from the corpus that training and evaluation need.
pub struct Prepared {
    pub tokenizer: Tokenizer,
    pub clean: Vec<TrainSample>,
    pub resegmented: Vec<TrainSample>,
    pub tests: BTreeMap<Segmentation, Vec<EvalDocument>>,
}

impl Prepared {
    pub fn build(cfg: &ExperimentConfig, segmentations: &[Segmentation]) -> Result<Self> {
        let corpus = ToyCorpus::generate(&cfg.corpus)?;
        let vad = cfg.vad()?;
        let mut raw = BTreeMap::new();
        let mut vad_cuts: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for doc in corpus.all_documents() {
            let clip = corpus.render(doc)?;
            if segmentations.contains(&Segmentation::Vad) && corpus.test.iter().any(|d| d.id == doc.id) {
                vad_cuts.insert(doc.id.clone(), vad_spans(&clip, &vad)?);
            }
            raw.insert(doc.audio.clone(), log_mel(&clip, &doc.speaker)?);
        }
        let train_audio: Vec<&str> = corpus.train.iter().map(|d| d.audio.as_str()).collect();
        let stats = SpeakerStatsTable::build(
            raw.iter()
                .filter(|(k, _)| train_audio.contains(&k.as_str()))
                .map(|(_, m)| m),
        );
        let bank = FeatureBank::from_raw(raw, &stats);

        let clean_entries: Vec<ManifestEntry> = corpus.train.iter().flat_map(sentence_entries).collect();
        let targets: Vec<Vec<String>> = clean_entries.iter().map(|e| words(&e.tgt)).collect();
        let tokenizer = Tokenizer::learn(&targets, cfg.bpe_merges)?;
        let mut reseg_entries = Vec::new();
        for doc in &corpus.train {
            let out = resegment(doc, cfg.seed)?;
            reseg_entries.extend(out.samples.iter().map(|s| s.to_entry(doc)));
        }
        let clean = train_samples(&clean_entries, &bank, &tokenizer)?;
        let resegmented = train_samples(&reseg_entries, &bank, &tokenizer)?;

        let mut tests = BTreeMap::new();
        for &seg in segmentations {
            let docs = corpus
                .test
                .iter()
                .map(|d: &Document| {
                    let spans = match seg {
                        Segmentation::Sentence => sentence_spans(d),
                        Segmentation::Vad => vad_cuts[&d.id].clone(),
                    };
                    eval_document(d, &spans, &bank)
                })
                .collect::<Result<Vec<_>>>()?;
            tests.insert(seg, docs);
        }
        Ok(Prepared {
            tokenizer,
            clean,
            resegmented,
            tests,
        })
    }
}

/// Persisted grid state under an output directory.
pub struct ResultStore {
    pub dir: PathBuf,
}

impl ResultStore {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("cells"))?;
        fs::create_dir_all(dir.join("models"))?;
        Ok(ResultStore { dir: dir.to_path_buf() })
    }

    /// Opens an existing store without creating anything.
    pub fn open(dir: &Path) -> Self {
        ResultStore { dir: dir.to_path_buf() }
    }

    pub fn cell_path(&self, cell: &Cell) -> PathBuf {
        self.dir.join("cells").join(cell.file_name())
    }

    pub fn model_path(&self, system: System) -> PathBuf {
        self.dir.join("models").join(format!("{}.ckpt", system.slug()))
    }

    pub fn load_cell(&self, cell: &Cell) -> Result<Option<CellResult>> {
        let path = self.cell_path(cell);
        if !path.exists() {
            return Ok(None);
        }
        let r: CellResult = serde_json::from_slice(&fs::read(&path)?)?;
        if r.cell() != *cell {
            return Err(Error::Format(format!("{} holds {}", path.display(), r.cell())));
        }
        Ok(Some(r))
    }

    pub fn save_cell(&self, r: &CellResult) -> Result<()> {
        let path = self.cell_path(&r.cell());
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(r)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// All cells of the plan that have results, and those that do not.
    pub fn collect(&self, plan: &ExperimentPlan) -> Result<(Vec<CellResult>, Vec<Cell>)> {
        let mut done = Vec::new();
        let mut missing = Vec::new();
        for cell in plan.cells() {
            match self.load_cell(&cell)? {
                Some(r) => done.push(r),
                None => missing.push(cell),
            }
        }
        Ok((done, missing))
    }
}

fn checkpoint_roundtrip(model: &Model) -> Result<Model> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    read_checkpoint(&mut buf.as_slice())
}

/// Trains one system. Trained weights pass through the checkpoint format so
/// a resumed run sees exactly what a fresh run sees.
pub fn train_system(
    cfg: &ExperimentConfig,
    system: System,
    base: Option<&Model>,
    data: &Prepared,
) -> Result<Model> {
    let mut mc = cfg.model.clone();
    mc.vocab_size = data.tokenizer.vocab.len();
    let (mut model, tc, samples) = match system {
        System::Base => {
            mc.context_mode = ContextMode::None;
            (Model::new(mc, cfg.seed)?, cfg.base_train(), &data.clean)
        }
        System::FineTune => {
            let base = base.ok_or_else(|| Error::Usage("fine-tuning needs the base model".into()))?;
            (base.clone(), cfg.finetune_train(system), &data.resegmented)
        }
        System::Context {
            source,
            integration,
            ..
        } => {
            let base = base.ok_or_else(|| Error::Usage("context models start from the base model".into()))?;
            mc.context_mode = source;
            mc.integration = integration;
            let mut m = Model::new(mc, cfg.seed)?;
            m.init_from(base);
            (m, cfg.finetune_train(system), &data.resegmented)
        }
    };
    let mut trainer = Trainer::new(&mut model, tc)?;
    let every = (trainer.cfg.steps / 10).max(1);
    trainer.run(&mut model, samples, |s| {
        if s.step % every == 0 {
            log::info!(
                "{system}: step {} lr {:.2e} L {:.4} L' {:.4} lambda {:?}",
                s.step,
                s.lr,
                s.loss,
                s.loss_prime,
                s.mean_lambda_per_layer
            );
        }
    })?;
    checkpoint_roundtrip(&model)
}

pub fn evaluate_cell(cfg: &ExperimentConfig, model: &Model, cell: Cell, data: &Prepared) -> Result<CellResult> {
    let docs = data
        .tests
        .get(&cell.segmentation)
        .ok_or_else(|| Error::Lookup(format!("no test data for {}", cell.segmentation)))?;
    let opts = EvalOptions {
        beam: cfg.beam,
        context: model.config.context_mode,
        feedback: Feedback::Generated,
    };
    let (report, _) = evaluate(model, &data.tokenizer, docs, &opts)?;
    Ok(CellResult {
        system: cell.system,
        segmentation: cell.segmentation,
        bleu: report.bleu,
        ter: report.ter,
        report,
    })
}

/// Runs every missing cell of the plan and returns all results in plan order.
pub fn run_experiment(cfg: &ExperimentConfig, plan: &ExperimentPlan, store: &ResultStore) -> Result<Vec<CellResult>> {
    let (_, missing) = store.collect(plan)?;
    if !missing.is_empty() {
        let data = Prepared::build(cfg, &plan.segmentations)?;
        let needs_base = missing.iter().any(|c| c.system != System::Base);
        let mut base: Option<Model> = None;
        let get_model = |system: System, base: &Option<Model>| -> Result<Model> {
            let path = store.model_path(system);
            if path.exists() {
                return crate::model::load_checkpoint(&path);
            }
            let m = train_system(cfg, system, base.as_ref(), &data)?;
            crate::model::save_checkpoint(&path, &m)?;
            Ok(m)
        };
        if needs_base || missing.iter().any(|c| c.system == System::Base) {
            base = Some(get_model(System::Base, &base)?);
        }
        for system in &plan.systems {
            let cells: Vec<Cell> = missing.iter().filter(|c| c.system == *system).copied().collect();
            if cells.is_empty() {
                continue;
            }
            let model = match system {
                System::Base => base.clone().expect("base model is trained first"),
                _ => get_model(*system, &base)?,
            };
            for cell in cells {
                let r = evaluate_cell(cfg, &model, cell, &data)?;
                log::info!("{cell}: BLEU {:.2} TER {:.2}", r.bleu, r.ter);
                store.save_cell(&r)?;
            }
        }
    }
    let (done, missing) = store.collect(plan)?;
    if !missing.is_empty() {
        return Err(missing_error(&missing));
    }
    Ok(done)
}

pub fn missing_error(missing: &[Cell]) -> Error {
    let list: Vec<String> = missing.iter().map(|c| c.to_string()).collect();
    Error::Lookup(format!("missing cells: {}", list.join(", ")))
}

/// Aligned text table and CSV. In each column the best value (highest BLEU,
/// lowest TER) is marked with `*`.
pub fn render_tables(plan: &ExperimentPlan, results: &[CellResult]) -> Result<(String, String)> {
    let by_cell: BTreeMap<Cell, &CellResult> = results.iter().map(|r| (r.cell(), r)).collect();
    let missing: Vec<Cell> = plan.cells().into_iter().filter(|c| !by_cell.contains_key(c)).collect();
    if !missing.is_empty() {
        return Err(missing_error(&missing));
    }
    let mut best_bleu: BTreeMap<Segmentation, f64> = BTreeMap::new();
    let mut best_ter: BTreeMap<Segmentation, f64> = BTreeMap::new();
    for r in by_cell.values() {
        let b = best_bleu.entry(r.segmentation).or_insert(f64::NEG_INFINITY);
        *b = b.max(r.bleu);
        let t = best_ter.entry(r.segmentation).or_insert(f64::INFINITY);
        *t = t.min(r.ter);
    }
    let mark = |v: f64, best: f64| if v == best { "*" } else { " " };

    let mut header = vec!["system".to_string()];
    for s in &plan.segmentations {
        header.push(format!("{s} BLEU"));
        header.push(format!("{s} TER"));
    }
    let mut rows = vec![header];
    let mut csv = String::from("system,segmentation,bleu,ter,best_bleu,best_ter\n");
    for system in &plan.systems {
        let mut row = vec![system.to_string()];
        for seg in &plan.segmentations {
            let r = by_cell[&Cell {
                system: *system,
                segmentation: *seg,
            }];
            row.push(format!("{:.2}{}", r.bleu, mark(r.bleu, best_bleu[seg])));
            row.push(format!("{:.2}{}", r.ter, mark(r.ter, best_ter[seg])));
            csv.push_str(&format!(
                "{system},{seg},{},{},{},{}\n",
                r.bleu,
                r.ter,
                u8::from(r.bleu == best_bleu[seg]),
                u8::from(r.ter == best_ter[seg])
            ));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            text.push('\n');
        }
    }
    Ok((text, csv))
}

/// One CSV row: `(system, segmentation, bleu, ter, best_bleu, best_ter)`.
pub type CsvRow = (System, Segmentation, f64, f64, bool, bool);

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("system,segmentation,bleu,ter,best_bleu,best_ter") {
        return Err(Error::Format("results CSV: bad header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("results CSV: bad row {l:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("results CSV: bad number {s:?}")))
            };
            let seg = match f[1] {
                "sentence" => Segmentation::Sentence,
                "vad" => Segmentation::Vad,
                other => return Err(Error::Format(format!("results CSV: bad segmentation {other:?}"))),
            };
            Ok((f[0].parse()?, seg, num(f[2])?, num(f[3])?, f[4] == "1", f[5] == "1"))
        })
        .collect()
}

/// Writes `results.txt` and `results.csv` next to the cells.
pub fn write_tables(store: &ResultStore, plan: &ExperimentPlan, results: &[CellResult]) -> Result<(PathBuf, PathBuf)> {
    let (text, csv) = render_tables(plan, results)?;
    let t = store.dir.join("results.txt");
    let c = store.dir.join("results.csv");
    fs::write(&t, text)?;
    fs::write(&c, csv)?;
    Ok((t, c))
}
