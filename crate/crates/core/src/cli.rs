//! Command-line front end. Every subcommand reads a TOML config, works
//! inside the run directory `<output root>/<run_name>`, and writes a
//! manifest next to its outputs.
//!
//! Run directory layout:
//!
//! ```text
//! data/<platform>/{train,val,test}.jsonl   hate corpora
//! data/{sentiment,aggression}_{train,val}.jsonl   cue corpora
//! data/targets.jsonl                        corpus with hate_target metadata
//! vocab.txt
//! cues/{sentiment,aggression}.ckpt
//! model/                                    trained bundle
//! results/                                  matrices, reports, heatmaps
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{run_dir, Config};
use crate::cue::{freeze, CueExtractor};
use crate::data::{load_corpus, load_corpus_with, load_labeled_texts, write_jsonl, Corpus, Format, Splits};
use crate::detector::{predict_prepared, prepare, train, HateModel, TrainLog};
use crate::encoder::{pretrain_cue_classifier, CueTask, EncoderState, Vocabulary};
use crate::error::{ensure, Error, Result};
use crate::eval::{
    ablation_csv, cross_platform_eval, cross_target_eval, error_breakdown, write_json, write_text, HateModelFactory,
    HeatmapDoc,
};
use crate::metrics::macro_f1;
use crate::schedule::TrainSchedule;
use crate::synth;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "cueguard", version, about = "Cue-guided hate speech detection")]
pub struct Cli {
    /// Directory holding run directories [env: CUEGUARD_OUTPUT_ROOT, default: .]
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a raw JSONL/CSV corpus, normalize it and write stratified splits.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        platform: String,
        /// Overrides `data.format`.
        #[arg(long)]
        format: Option<Format>,
    },
    /// Pretrain one cue classifier and save its encoder checkpoint.
    PretrainCue {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: CueTask,
    },
    /// Train the hate model on one platform and save a bundle to `model/`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first configured platform.
        #[arg(long)]
        platform: Option<String>,
    },
    /// Train on each platform, score every platform's test split.
    EvalCross {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train on one hate target, score on the other, both directions.
    EvalTarget {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cross-platform evaluation of all four cue variants over the
    /// configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-group error rates of the trained bundle on a test split.
    Errors {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        platform: Option<String>,
    },
    /// Token heatmaps for texts under the trained bundle.
    Explain {
        #[arg(long)]
        config: PathBuf,
        /// Text to explain; repeatable.
        #[arg(long = "text")]
        texts: Vec<String>,
        /// JSONL corpus whose first `--limit` records are explained.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Generate the synthetic cue corpora, platform suite and two-target
    /// corpus, plus the lexicon vocabulary.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::PretrainCue { .. } => "pretrain-cue",
            Command::Train { .. } => "train",
            Command::EvalCross { .. } => "eval-cross",
            Command::EvalTarget { .. } => "eval-target",
            Command::Ablate { .. } => "ablate",
            Command::Errors { .. } => "errors",
            Command::Explain { .. } => "explain",
            Command::GenSynth { .. } => "gen-synth",
        }
    }

    fn config_path(&self) -> &Path {
        match self {
            Command::Ingest { config, .. }
            | Command::PretrainCue { config, .. }
            | Command::Train { config, .. }
            | Command::EvalCross { config }
            | Command::EvalTarget { config }
            | Command::Ablate { config }
            | Command::Errors { config, .. }
            | Command::Explain { config, .. }
            | Command::GenSynth { config } => config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Written as `manifest-<command>.json` into the command's output
/// directory. Contains no timestamps so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub crate_version: String,
    pub config_schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: Vec<OutputFile>,
}

struct Run {
    cfg: Config,
    config_hash: String,
    dir: PathBuf,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.cfg.seed,
            ..self.cfg.schedule
        }
    }

    fn platforms(&self) -> Result<Vec<String>> {
        ensure!(!self.cfg.data.platforms.is_empty(), Config, "data.platforms is empty");
        Ok(self.cfg.data.platforms.clone())
    }

    fn platform_dir(&self, platform: &str) -> PathBuf {
        self.path(&self.cfg.data.dir).join(platform)
    }

    fn load_splits(&self, platform: &str) -> Result<Splits> {
        let dir = self.platform_dir(platform);
        let load = |split: &str| {
            let p = dir.join(format!("{split}.jsonl"));
            ensure!(p.exists(), Validation, "platform {platform} is missing its {split} split ({})", p.display());
            load_corpus(&p, Format::Jsonl, platform)
        };
        Ok(Splits {
            train: load("train")?,
            val: load("val")?,
            test: load("test")?,
        })
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.path("vocab.txt"))
    }

    fn cues(&self) -> Result<CueExtractor> {
        let load = |task: &str| EncoderState::load(&self.path(&format!("cues/{task}.ckpt"))).map(freeze);
        Ok(CueExtractor::new(load("sentiment")?, load("aggression")?))
    }

    fn factory(&self) -> Result<HateModelFactory> {
        Ok(HateModelFactory {
            vocab: self.vocab()?,
            config: self.cfg.detector.encoder,
            cues: self.cues()?,
            selector_mode: self.cfg.detector.selector_mode(),
            selector_hidden: self.cfg.detector.selector_hidden,
            variant: self.cfg.detector.variant,
        })
    }

    fn default_platform(&self, p: &Option<String>) -> Result<String> {
        match p {
            Some(p) => Ok(p.clone()),
            None => Ok(self.platforms()?[0].clone()),
        }
    }

    fn write_manifest(&self, command: &str, out_dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        let mut files = Vec::with_capacity(outputs.len());
        for p in outputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(&self.dir).unwrap_or(p);
            files.push(OutputFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = RunManifest {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_schema_version: self.cfg.schema_version,
            config_sha256: self.config_hash.clone(),
            seed: self.cfg.seed,
            outputs: files,
        };
        let path = out_dir.join(format!("manifest-{command}.json"));
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let (cfg, config_hash) = Config::load(cli.command.config_path())?;
    let dir = run_dir(&cfg, cli.output_root.as_deref());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let run = Run { cfg, config_hash, dir };
    let name = cli.command.name();
    let (out_dir, outputs) = match &cli.command {
        Command::Ingest {
            input,
            platform,
            format,
            ..
        } => ingest(&run, input, platform, format.unwrap_or(run.cfg.data.format))?,
        Command::PretrainCue { task, .. } => pretrain(&run, *task)?,
        Command::Train { platform, .. } => train_cmd(&run, &run.default_platform(platform)?)?,
        Command::EvalCross { .. } => eval_cross(&run)?,
        Command::EvalTarget { .. } => eval_target(&run)?,
        Command::Ablate { .. } => ablate(&run)?,
        Command::Errors { platform, .. } => errors(&run, &run.default_platform(platform)?)?,
        Command::Explain {
            texts, input, limit, ..
        } => explain(&run, texts, input.as_deref(), *limit)?,
        Command::GenSynth { .. } => gen_synth(&run)?,
    };
    let manifest = run.write_manifest(name, &out_dir, &outputs)?;
    println!("{name}: wrote {} outputs; manifest {}", outputs.len(), manifest.display());
    Ok(())
}

type Outputs = (PathBuf, Vec<PathBuf>);

fn write_splits(run: &Run, platform: &str, s: &Splits) -> Result<Vec<PathBuf>> {
    let dir = run.platform_dir(platform);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::new();
    for (name, c) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let p = dir.join(format!("{name}.jsonl"));
        c.write_jsonl(&p)?;
        out.push(p);
    }
    Ok(out)
}

fn ingest(run: &Run, input: &Path, platform: &str, format: Format) -> Result<Outputs> {
    let corpus = load_corpus_with(input, format, platform, &run.cfg.data.csv)?;
    let summary = corpus.summary();
    println!("{summary}");
    let splits = Splits::stratified(&corpus, &run.cfg.split()?)?;
    let mut outputs = write_splits(run, platform, &splits)?;
    let results = run.mkdir("results")?;
    let p = results.join(format!("ingest-{platform}.json"));
    write_json(
        &p,
        &serde_json::json!({
            "summary": summary,
            "splits": {
                "train": splits.train.summary(),
                "val": splits.val.summary(),
                "test": splits.test.summary(),
            },
        }),
    )?;
    outputs.push(p);
    Ok((results, outputs))
}

fn gen_synth(run: &Run) -> Result<Outputs> {
    let s = &run.cfg.synth;
    let seed = run.cfg.seed;
    let lex = synth::Lexicon::new(s.lexicon)?;
    let data = run.mkdir(&run.cfg.data.dir)?;
    let mut outputs = Vec::new();

    let cue_sets = [
        ("sentiment_train", synth::sentiment_corpus(&lex, s.sentiment_train, seed ^ 0x11)),
        ("sentiment_val", synth::sentiment_corpus(&lex, s.sentiment_val, seed ^ 0x12)),
        ("aggression_train", synth::aggression_corpus(&lex, s.aggression_train, seed ^ 0x21)),
        ("aggression_val", synth::aggression_corpus(&lex, s.aggression_val, seed ^ 0x22)),
    ];
    for (name, rows) in &cue_sets {
        let p = data.join(format!("{name}.jsonl"));
        write_jsonl(&p, rows)?;
        outputs.push(p);
    }

    let suite = synth::shift_suite(&lex, s.sizes, &s.hate, seed)?;
    for (name, splits) in &suite {
        outputs.extend(write_splits(run, name, splits)?);
    }

    let targets = &run.cfg.data.targets;
    ensure!(targets.len() == 2, Config, "data.targets must name exactly 2 targets");
    let tc = synth::two_target_corpus(&lex, [&targets[0], &targets[1]], s.per_target, &s.hate, seed ^ 0x7a)?;
    let tp = run.path(&run.cfg.data.target_corpus);
    if let Some(parent) = tp.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tc.write_jsonl(&tp)?;
    outputs.push(tp);

    let vp = run.path("vocab.txt");
    lex.vocabulary()?.save(&vp)?;
    outputs.push(vp);
    Ok((run.dir.clone(), outputs))
}

/// The run's vocabulary, built from its corpora on first use.
fn ensure_vocab(run: &Run) -> Result<(Vocabulary, Option<PathBuf>)> {
    let vp = run.path("vocab.txt");
    if vp.exists() {
        return Ok((Vocabulary::load(&vp)?, None));
    }
    let data = run.path(&run.cfg.data.dir);
    let mut texts = Vec::new();
    for task in ["sentiment", "aggression"] {
        let p = data.join(format!("{task}_train.jsonl"));
        if p.exists() {
            texts.extend(load_labeled_texts(&p)?.into_iter().map(|t| t.text));
        }
    }
    for platform in run.platforms()? {
        let p = run.platform_dir(&platform).join("train.jsonl");
        if p.exists() {
            texts.extend(load_corpus(&p, Format::Jsonl, &platform)?.records.into_iter().map(|r| r.text));
        }
    }
    ensure!(!texts.is_empty(), Validation, "no corpora found under {} to build a vocabulary from", data.display());
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), run.cfg.data.vocab_size)?;
    vocab.save(&vp)?;
    Ok((vocab, Some(vp)))
}

fn pretrain(run: &Run, task: CueTask) -> Result<Outputs> {
    let (vocab, built) = ensure_vocab(run)?;
    let data = run.path(&run.cfg.data.dir);
    let name = task.name();
    let train_set = load_labeled_texts(&data.join(format!("{name}_train.jsonl")))?;
    let val_set = load_labeled_texts(&data.join(format!("{name}_val.jsonl")))?;
    let schedule = TrainSchedule {
        seed: run.cfg.seed,
        ..run.cfg.cue.schedule
    };
    let (state, report) = pretrain_cue_classifier(&train_set, &val_set, &vocab, run.cfg.cue.encoder, task, &schedule)?;
    println!(
        "{name}: best validation accuracy {:.4} at epoch {} (majority baseline {:.4})",
        report.best_val_accuracy, report.best_epoch, report.majority_baseline
    );
    let cues = run.mkdir("cues")?;
    let ckpt = cues.join(format!("{name}.ckpt"));
    state.save(&ckpt)?;
    let rp = cues.join(format!("{name}-report.json"));
    write_json(&rp, &report)?;
    let mut outputs = vec![ckpt, rp];
    outputs.extend(built);
    Ok((cues, outputs))
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    platform: &'a str,
    log: &'a TrainLog,
    test_macro_f1: f64,
}

fn train_cmd(run: &Run, platform: &str) -> Result<Outputs> {
    let splits = run.load_splits(platform)?;
    let schedule = run.schedule();
    let mut model = run.factory()?.build(schedule.seed)?;
    let log = train(&mut model, &splits.train, &splits.val, &schedule)?;
    let test = prepare(&model, &splits.test)?;
    let f1 = macro_f1(&predict_prepared(&model, &test)?, &test.labels)?;
    println!("{platform}: best epoch {} val macro-F1 {:.4}, test macro-F1 {f1:.4}", log.best_epoch, log.best_val_macro_f1);

    let bundle = run.path("model");
    model.save_bundle(&bundle, Some(&schedule))?;
    let mut outputs: Vec<PathBuf> = ["manifest.json", "vocab.txt", "detector.ckpt", "sentiment.ckpt", "aggression.ckpt", "selector.ckpt", "classifier.ckpt"]
        .iter()
        .map(|f| bundle.join(f))
        .collect();
    let results = run.mkdir("results")?;
    let rp = results.join(format!("train-{platform}.json"));
    write_json(
        &rp,
        &TrainReport {
            platform,
            log: &log,
            test_macro_f1: f1,
        },
    )?;
    outputs.push(rp);
    Ok((results, outputs))
}

fn all_splits(run: &Run) -> Result<Vec<(String, Splits)>> {
    run.platforms()?
        .into_iter()
        .map(|p| {
            let s = run.load_splits(&p)?;
            Ok((p, s))
        })
        .collect()
}

fn eval_cross(run: &Run) -> Result<Outputs> {
    let corpora = all_splits(run)?;
    let m = cross_platform_eval(&run.factory()?, &corpora, &run.schedule())?;
    println!("off-diagonal mean macro-F1 {:.4}", m.off_diagonal_mean());
    let results = run.mkdir("results")?;
    let outputs = m.write(&results, "eval-cross")?;
    Ok((results, outputs))
}

fn eval_target(run: &Run) -> Result<Outputs> {
    let targets = &run.cfg.data.targets;
    ensure!(targets.len() == 2, Config, "data.targets must name exactly 2 targets");
    let corpus = load_corpus(&run.path(&run.cfg.data.target_corpus), Format::Jsonl, "targets")?;
    let r = cross_target_eval(
        &run.factory()?,
        &corpus,
        [&targets[0], &targets[1]],
        &run.cfg.split()?,
        &run.schedule(),
    )?;
    for d in &r.directions {
        println!("{} -> {}: macro-F1 {:.4}", d.train_target, d.test_target, d.macro_f1);
    }
    let results = run.mkdir("results")?;
    let outputs = r.write(&results, "eval-target")?;
    Ok((results, outputs))
}

fn ablate(run: &Run) -> Result<Outputs> {
    let corpora = all_splits(run)?;
    let reports = crate::eval::ablation_run(&run.factory()?, &corpora, &run.schedule(), &run.cfg.eval.seeds)?;
    let results = run.mkdir("results")?;
    let mut outputs = Vec::new();
    for r in &reports {
        println!(
            "{:<16} off-diagonal {:.4} ± {:.4} (full - variant = {:+.4})",
            r.variant.name(),
            r.off_diagonal_mean,
            r.off_diagonal_std,
            r.delta_from_full
        );
        outputs.extend(r.scores.write(&results, &format!("ablation-{}", r.variant.name()))?);
    }
    let csv_path = results.join("ablation.csv");
    write_text(&csv_path, &ablation_csv(&reports)?)?;
    let json_path = results.join("ablation.json");
    write_json(&json_path, &reports)?;
    outputs.push(csv_path);
    outputs.push(json_path);
    Ok((results, outputs))
}

fn load_bundle(run: &Run) -> Result<HateModel> {
    Ok(HateModel::load_bundle(&run.path("model"))?.0)
}

fn errors(run: &Run, platform: &str) -> Result<Outputs> {
    let model = load_bundle(run)?;
    let test = run.load_splits(platform)?.test;
    let b = error_breakdown(&model, &test, run.cfg.eval.error_dimension, run.cfg.eval.error_scope())?;
    for (g, e) in &b.groups {
        println!("{g}: {}/{} misclassified ({:.4})", e.errors, e.count, e.error_rate);
    }
    let results = run.mkdir("results")?;
    let outputs = b.write(&results, &format!("errors-{platform}"))?;
    Ok((results, outputs))
}

fn explain(run: &Run, texts: &[String], input: Option<&Path>, limit: usize) -> Result<Outputs> {
    let model = load_bundle(run)?;
    let mut cases: Vec<(String, Option<u8>)> = texts.iter().map(|t| (t.clone(), None)).collect();
    if let Some(p) = input {
        let c: Corpus = load_corpus(p, Format::Jsonl, "explain")?;
        cases.extend(c.records.into_iter().take(limit).map(|r| (r.text, Some(r.label))));
    }
    ensure!(!cases.is_empty(), Validation, "nothing to explain: pass --text or --input");
    let out = run.mkdir("results/explain")?;
    let mut outputs = Vec::new();
    for (i, (text, label)) in cases.iter().enumerate() {
        let pred = model.predict(text)?;
        let doc = HeatmapDoc::from_prediction(&pred, &pred.attribution.tokens, *label)?;
        let html = out.join(format!("case-{i:03}.html"));
        let json = doc.write(&html)?;
        println!("case {i}: p(hateful) = {:.4}", pred.probs[1]);
        outputs.push(html);
        outputs.push(json);
    }
    Ok((out, outputs))
}
