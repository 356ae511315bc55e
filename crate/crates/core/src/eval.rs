//! Evaluation harness: cross-platform and cross-target matrices, cue
//! ablations, error breakdowns and token heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cue::{CueExtractor, SelectorMode, SelectorParams};
use crate::data::{Corpus, SplitSpec, Splits};
use crate::detector::{predict_prepared, prepare, train, CueVariant, HateModel, Prediction, TrainSchedule};
use crate::encoder::{EncoderConfig, Vocabulary, CLS};
use crate::error::{ensure, Error, Result};
use crate::metrics::macro_f1;

/// Anything that labels a corpus.
pub trait HateClassifier {
    fn predict_corpus(&self, corpus: &Corpus) -> Result<Vec<u8>>;
}

impl HateClassifier for HateModel {
    fn predict_corpus(&self, corpus: &Corpus) -> Result<Vec<u8>> {
        predict_prepared(self, &prepare(self, corpus)?)
    }
}

/// Builds and trains one model per (train, val) pair.
pub trait ModelFactory {
    type Model: HateClassifier;

    fn fit(&self, train: &Corpus, val: &Corpus, schedule: &TrainSchedule) -> Result<Self::Model>;
}

/// Trains a fresh [`HateModel`] around shared frozen cue modules.
#[derive(Debug, Clone)]
pub struct HateModelFactory {
    pub vocab: Vocabulary,
    pub config: EncoderConfig,
    pub cues: CueExtractor,
    pub selector_mode: SelectorMode,
    pub selector_hidden: usize,
    pub variant: CueVariant,
}

impl HateModelFactory {
    pub fn with_variant(&self, variant: CueVariant) -> Self {
        HateModelFactory {
            variant,
            ..self.clone()
        }
    }

    /// An untrained model initialized from `seed`.
    pub fn build(&self, seed: u64) -> Result<HateModel> {
        let selector = SelectorParams::new(self.selector_mode, self.selector_hidden, seed ^ 0x005e_1ec7)?;
        HateModel::new(self.vocab.clone(), self.config, self.cues.clone(), selector, self.variant, seed)
    }
}

impl ModelFactory for HateModelFactory {
    type Model = HateModel;

    fn fit(&self, train_corpus: &Corpus, val: &Corpus, schedule: &TrainSchedule) -> Result<HateModel> {
        let mut model = self.build(schedule.seed)?;
        train(&mut model, train_corpus, val, schedule)?;
        Ok(model)
    }
}

/// Macro-F1 of every (source, target) pair; rows are training sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn new(sources: Vec<String>, targets: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(
            scores.len() == sources.len() && scores.iter().all(|r| r.len() == targets.len()),
            Validation,
            "score grid does not match {} sources x {} targets",
            sources.len(),
            targets.len()
        );
        ensure!(
            scores.iter().flatten().all(|s| (0.0..=1.0).contains(s)),
            Validation,
            "scores must lie in [0, 1]"
        );
        Ok(EvalMatrix {
            sources,
            targets,
            scores,
        })
    }

    pub fn get(&self, source: &str, target: &str) -> Option<f64> {
        let i = self.sources.iter().position(|s| s == source)?;
        let j = self.targets.iter().position(|t| t == target)?;
        Some(self.scores[i][j])
    }

    /// Scores whose source and target differ.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, s) in self.sources.iter().enumerate() {
            for (j, t) in self.targets.iter().enumerate() {
                if s != t {
                    out.push(self.scores[i][j]);
                }
            }
        }
        out
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        mean(&self.off_diagonal())
    }

    /// Scores whose source equals their target.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, s) in self.sources.iter().enumerate() {
            if let Some(j) = self.targets.iter().position(|t| t == s) {
                out.push(self.scores[i][j]);
            }
        }
        out
    }

    /// Header `source,<target...>`, one row per source.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["source".to_string()];
        header.extend(self.targets.iter().cloned());
        w.write_record(&header)?;
        for (s, row) in self.sources.iter().zip(&self.scores) {
            let mut rec = vec![s.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        csv_string(w)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        write_text(&csv_path, &self.to_csv()?)?;
        write_json(&json_path, self)?;
        Ok(vec![csv_path, json_path])
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Validation(format!("csv output is not UTF-8: {e}")))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn check_splits(name: &str, s: &Splits) -> Result<()> {
    for (split, c) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        ensure!(!c.is_empty(), Validation, "platform {name} is missing its {split} split");
    }
    Ok(())
}

/// Train on each platform in turn and score every platform's test split.
/// Row and column order follow `corpora`.
pub fn cross_platform_eval<F: ModelFactory>(
    factory: &F,
    corpora: &[(String, Splits)],
    schedule: &TrainSchedule,
) -> Result<EvalMatrix> {
    ensure!(corpora.len() >= 2, Validation, "cross-platform evaluation needs at least 2 platforms");
    for (name, s) in corpora {
        check_splits(name, s)?;
    }
    let names: Vec<String> = corpora.iter().map(|(n, _)| n.clone()).collect();
    let mut scores = Vec::with_capacity(corpora.len());
    for (_, source) in corpora {
        let model = factory.fit(&source.train, &source.val, schedule)?;
        let row = corpora
            .iter()
            .map(|(_, target)| macro_f1(&model.predict_corpus(&target.test)?, &target.test.labels()))
            .collect::<Result<Vec<_>>>()?;
        scores.push(row);
    }
    EvalMatrix::new(names.clone(), names, scores)
}

/// Minimum records per class each target needs.
pub const MIN_TARGET_CLASS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub train_target: String,
    pub test_target: String,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTargetReport {
    pub directions: Vec<DirectionScore>,
}

impl CrossTargetReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["train_target", "test_target", "macro_f1"])?;
        for d in &self.directions {
            w.write_record([d.train_target.as_str(), d.test_target.as_str(), &format!("{:.6}", d.macro_f1)])?;
        }
        csv_string(w)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        write_text(&csv_path, &self.to_csv()?)?;
        write_json(&json_path, self)?;
        Ok(vec![csv_path, json_path])
    }
}

/// Train on one target's records (split into train/val by `split`) and
/// score on every record of the other target, in both directions.
pub fn cross_target_eval<F: ModelFactory>(
    factory: &F,
    corpus: &Corpus,
    targets: [&str; 2],
    split: &SplitSpec,
    schedule: &TrainSchedule,
) -> Result<CrossTargetReport> {
    ensure!(targets[0] != targets[1], Validation, "cross-target evaluation needs two distinct targets");
    let mut parts = Vec::with_capacity(2);
    for t in targets {
        let records = corpus.filter_target(t);
        let hate = records.iter().filter(|r| r.label == 1).count();
        let clean = records.len() - hate;
        ensure!(
            hate >= MIN_TARGET_CLASS && clean >= MIN_TARGET_CLASS,
            Validation,
            "target {t} has {hate} hateful and {clean} non-hateful records; each class needs at least {MIN_TARGET_CLASS}"
        );
        parts.push(Corpus::from_records(corpus.platform.clone(), records)?);
    }
    let mut directions = Vec::with_capacity(2);
    for (from, to) in [(0, 1), (1, 0)] {
        let s = Splits::stratified(&parts[from], split)?;
        let model = factory.fit(&s.train, &s.val, schedule)?;
        let other = &parts[to];
        directions.push(DirectionScore {
            train_target: targets[from].to_string(),
            test_target: targets[to].to_string(),
            macro_f1: macro_f1(&model.predict_corpus(other)?, &other.labels())?,
        });
    }
    Ok(CrossTargetReport { directions })
}

/// One variant's cross-platform results over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: CueVariant,
    pub seeds: Vec<u64>,
    /// Element-wise mean over seeds.
    pub scores: EvalMatrix,
    pub per_seed: Vec<EvalMatrix>,
    /// Off-diagonal mean of each seed's matrix.
    pub seed_off_diagonal: Vec<f64>,
    pub off_diagonal_mean: f64,
    pub off_diagonal_std: f64,
    /// Full variant's off-diagonal mean minus this one's.
    pub delta_from_full: f64,
}

fn mean_matrix(ms: &[EvalMatrix]) -> Result<EvalMatrix> {
    let first = &ms[0];
    let mut grid = vec![vec![0.0; first.targets.len()]; first.sources.len()];
    for m in ms {
        for (row, mrow) in grid.iter_mut().zip(&m.scores) {
            for (g, v) in row.iter_mut().zip(mrow) {
                *g += v / ms.len() as f64;
            }
        }
    }
    for v in grid.iter_mut().flatten() {
        *v = v.clamp(0.0, 1.0);
    }
    EvalMatrix::new(first.sources.clone(), first.targets.clone(), grid)
}

/// All four cue variants under identical seeds and splits. Training seeds
/// replace `schedule.seed`.
pub fn ablation_run(
    factory: &HateModelFactory,
    corpora: &[(String, Splits)],
    schedule: &TrainSchedule,
    seeds: &[u64],
) -> Result<Vec<AblationReport>> {
    ensure!(!seeds.is_empty(), Validation, "ablation needs at least one seed");
    let mut reports = Vec::with_capacity(CueVariant::ALL.len());
    for variant in CueVariant::ALL {
        let f = factory.with_variant(variant);
        let per_seed = seeds
            .iter()
            .map(|&seed| cross_platform_eval(&f, corpora, &TrainSchedule { seed, ..*schedule }))
            .collect::<Result<Vec<_>>>()?;
        let seed_off: Vec<f64> = per_seed.iter().map(EvalMatrix::off_diagonal_mean).collect();
        reports.push(AblationReport {
            variant,
            seeds: seeds.to_vec(),
            scores: mean_matrix(&per_seed)?,
            per_seed,
            off_diagonal_mean: mean(&seed_off),
            off_diagonal_std: std_dev(&seed_off),
            seed_off_diagonal: seed_off,
            delta_from_full: 0.0,
        });
    }
    let full = reports[0].off_diagonal_mean;
    for r in &mut reports {
        r.delta_from_full = full - r.off_diagonal_mean;
    }
    Ok(reports)
}

/// `variant,off_diagonal_mean,off_diagonal_std,delta_from_full` rows.
pub fn ablation_csv(reports: &[AblationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "off_diagonal_mean", "off_diagonal_std", "delta_from_full"])?;
    for r in reports {
        w.write_record([
            r.variant.name(),
            &format!("{:.6}", r.off_diagonal_mean),
            &format!("{:.6}", r.off_diagonal_std),
            &format!("{:.6}", r.delta_from_full),
        ])?;
    }
    csv_string(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDimension {
    HateTarget,
    HateType,
}

impl std::str::FromStr for ErrorDimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hate_target" => Ok(ErrorDimension::HateTarget),
            "hate_type" => Ok(ErrorDimension::HateType),
            other => Err(Error::Config(format!("unknown error dimension {other:?}; expected hate_target or hate_type"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorScope {
    HatefulOnly,
    AllRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub count: usize,
    pub errors: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub dimension: ErrorDimension,
    pub scope: ErrorScope,
    pub groups: BTreeMap<String, GroupError>,
    /// In-scope records lacking the metadata field.
    pub excluded: usize,
}

impl ErrorBreakdown {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "count", "errors", "error_rate"])?;
        for (g, e) in &self.groups {
            w.write_record([
                g.as_str(),
                &e.count.to_string(),
                &e.errors.to_string(),
                &format!("{:.6}", e.error_rate),
            ])?;
        }
        csv_string(w)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        write_text(&csv_path, &self.to_csv()?)?;
        write_json(&json_path, self)?;
        Ok(vec![csv_path, json_path])
    }
}

/// Error rate per metadata group, from predictions aligned with `test`.
pub fn error_breakdown_from(
    preds: &[u8],
    test: &Corpus,
    dimension: ErrorDimension,
    scope: ErrorScope,
) -> Result<ErrorBreakdown> {
    ensure!(
        preds.len() == test.len(),
        Validation,
        "{} predictions for {} records",
        preds.len(),
        test.len()
    );
    let mut groups: BTreeMap<String, GroupError> = BTreeMap::new();
    let mut excluded = 0;
    for (r, &p) in test.records.iter().zip(preds) {
        if scope == ErrorScope::HatefulOnly && r.label != 1 {
            continue;
        }
        let key = match dimension {
            ErrorDimension::HateTarget => &r.hate_target,
            ErrorDimension::HateType => &r.hate_type,
        };
        let Some(key) = key else {
            excluded += 1;
            continue;
        };
        let g = groups.entry(key.clone()).or_insert(GroupError {
            count: 0,
            errors: 0,
            error_rate: 0.0,
        });
        g.count += 1;
        g.errors += usize::from(p != r.label);
    }
    ensure!(
        !groups.is_empty(),
        Validation,
        "no in-scope test records carry the {dimension:?} field"
    );
    for g in groups.values_mut() {
        g.error_rate = g.errors as f64 / g.count as f64;
    }
    Ok(ErrorBreakdown {
        dimension,
        scope,
        groups,
        excluded,
    })
}

pub fn error_breakdown<M: HateClassifier>(
    model: &M,
    test: &Corpus,
    dimension: ErrorDimension,
    scope: ErrorScope,
) -> Result<ErrorBreakdown> {
    error_breakdown_from(&model.predict_corpus(test)?, test, dimension, scope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTrack {
    pub name: String,
    pub values: Vec<f64>,
}

impl HeatmapTrack {
    /// Index of the largest value, which renders darkest.
    pub fn darkest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, v) in self.values.iter().enumerate() {
            if best.is_none_or(|b| *v > self.values[b]) {
                best = Some(i);
            }
        }
        best
    }

    /// Per-track min-max normalized intensity in [0, 1]; a constant track
    /// maps to 0 everywhere.
    pub fn intensities(&self) -> Vec<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.values
            .iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDoc {
    pub tokens: Vec<String>,
    /// S, A, C and detector attention, in that order.
    pub tracks: Vec<HeatmapTrack>,
    pub prediction: u8,
    pub probs: [f64; 2],
    pub label: Option<u8>,
}

pub const TRACK_NAMES: [&str; 4] = ["sentiment", "aggression", "fusion", "detector"];

impl HeatmapDoc {
    /// One column per word. A leading `<cls>` marker in `tokens` is dropped
    /// together with its value in every track.
    pub fn from_prediction(pred: &Prediction, tokens: &[String], label: Option<u8>) -> Result<Self> {
        let a = &pred.attribution;
        let tracks = [&a.cue.s, &a.cue.a, &a.fusion.c, &a.detector_attention];
        for (name, t) in TRACK_NAMES.iter().zip(tracks) {
            ensure!(
                t.len() == tokens.len(),
                Validation,
                "{name} track has {} values for {} tokens",
                t.len(),
                tokens.len()
            );
        }
        let skip = usize::from(tokens.first().map(String::as_str) == Some(CLS));
        Ok(HeatmapDoc {
            tokens: tokens[skip..].to_vec(),
            tracks: TRACK_NAMES
                .iter()
                .zip(tracks)
                .map(|(n, v)| HeatmapTrack {
                    name: n.to_string(),
                    values: v[skip..].to_vec(),
                })
                .collect(),
            prediction: pred.label,
            probs: pred.probs,
            label,
        })
    }

    pub fn track(&self, name: &str) -> Option<&HeatmapTrack> {
        self.tracks.iter().find(|t| t.name == name)
    }

    pub fn to_html(&self) -> String {
        let verdict = |y: u8| if y == 1 { "hateful" } else { "not hateful" };
        let mut h = String::new();
        h.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Token attribution</title>\n");
        h.push_str(
            "<style>\nbody{font-family:sans-serif;margin:2em}\ntable{border-collapse:collapse}\n\
             td,th{padding:4px 6px;border:1px solid #ddd;text-align:center}\nth{text-align:left}\n</style>\n",
        );
        h.push_str("</head>\n<body>\n");
        let _ = writeln!(
            h,
            "<p>Prediction: <b>{}</b> (p(hateful) = {:.4})</p>",
            verdict(self.prediction),
            self.probs[1]
        );
        if let Some(y) = self.label {
            let _ = writeln!(h, "<p>Label: <b>{}</b></p>", verdict(y));
        }
        h.push_str("<table>\n<tr><th></th>");
        for t in &self.tokens {
            let _ = write!(h, "<th>{}</th>", escape_html(t));
        }
        h.push_str("</tr>\n");
        for track in &self.tracks {
            let _ = write!(h, "<tr><th>{}</th>", escape_html(&track.name));
            for (v, i) in track.values.iter().zip(track.intensities()) {
                let (bg, fg) = shade(i);
                let _ = write!(h, "<td style=\"background:{bg};color:{fg}\" title=\"{v:.6}\">{v:.3}</td>");
            }
            h.push_str("</tr>\n");
        }
        h.push_str("</table>\n</body>\n</html>\n");
        h
    }

    /// Writes the HTML to `out_path` and the JSON next to it (same stem,
    /// `.json` extension). Returns the JSON path.
    pub fn write(&self, out_path: &Path) -> Result<PathBuf> {
        write_text(out_path, &self.to_html())?;
        let json_path = out_path.with_extension("json");
        write_json(&json_path, self)?;
        Ok(json_path)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Background and text colors for an intensity in [0, 1]: lightness falls
/// monotonically from white to dark blue.
pub fn shade(intensity: f64) -> (String, &'static str) {
    let i = intensity.clamp(0.0, 1.0);
    let light = 97.0 - 67.0 * i;
    let fg = if light < 55.0 { "#fff" } else { "#000" };
    (format!("hsl(220,70%,{light:.1}%)"), fg)
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn export_heatmap(pred: &Prediction, tokens: &[String], label: Option<u8>, out_path: &Path) -> Result<HeatmapDoc> {
    let doc = HeatmapDoc::from_prediction(pred, tokens, label)?;
    doc.write(out_path)?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cue::{CueAttention, FusionVector};
    use crate::data::Record;
    use crate::detector::Attribution;

    fn rec(label: u8, target: Option<&str>, kind: Option<&str>) -> Record {
        Record {
            text: "x".into(),
            label,
            platform: "p".into(),
            hate_target: target.map(Into::into),
            hate_type: kind.map(Into::into),
            raw_score: None,
        }
    }

    fn corpus(records: Vec<Record>) -> Corpus {
        Corpus::from_records("p", records).unwrap()
    }

    struct Oracle;

    impl HateClassifier for Oracle {
        fn predict_corpus(&self, corpus: &Corpus) -> Result<Vec<u8>> {
            Ok(corpus.labels())
        }
    }

    impl ModelFactory for Oracle {
        type Model = Oracle;

        fn fit(&self, _: &Corpus, _: &Corpus, _: &TrainSchedule) -> Result<Oracle> {
            Ok(Oracle)
        }
    }

    fn balanced(n: usize, target: &str) -> Vec<Record> {
        (0..n).map(|i| rec((i % 2) as u8, Some(target), None)).collect()
    }

    fn splits() -> Splits {
        let c = corpus(balanced(20, "t"));
        Splits {
            train: c.clone(),
            val: c.clone(),
            test: c,
        }
    }

    #[test]
    fn oracle_matrix_is_all_ones_with_labels() {
        let corpora: Vec<(String, Splits)> = ["a", "b", "c"].iter().map(|n| (n.to_string(), splits())).collect();
        let m = cross_platform_eval(&Oracle, &corpora, &TrainSchedule::default()).unwrap();
        assert_eq!(m.scores.iter().flatten().count(), 9);
        assert!(m.scores.iter().flatten().all(|&s| s == 1.0));
        let csv = m.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "source,a,b,c");
        assert!(csv.lines().nth(2).unwrap().starts_with("b,"));
        assert_eq!(m.off_diagonal().len(), 6);
        assert_eq!(m.diagonal().len(), 3);
    }

    #[test]
    fn cross_platform_needs_two_platforms_and_all_splits() {
        let one = vec![("a".to_string(), splits())];
        assert!(cross_platform_eval(&Oracle, &one, &TrainSchedule::default()).is_err());
        let mut missing = splits();
        missing.val.records.clear();
        let two = vec![("a".to_string(), splits()), ("gab".to_string(), missing)];
        let err = cross_platform_eval(&Oracle, &two, &TrainSchedule::default()).unwrap_err();
        assert!(err.to_string().contains("gab"), "{err}");
    }

    #[test]
    fn cross_target_oracle_scores_one_in_both_directions() {
        let mut records = balanced(40, "migrants");
        records.extend(balanced(40, "lgbtq"));
        let r = cross_target_eval(
            &Oracle,
            &corpus(records),
            ["migrants", "lgbtq"],
            &SplitSpec::default(),
            &TrainSchedule::default(),
        )
        .unwrap();
        assert_eq!(r.directions.len(), 2);
        assert_eq!((r.directions[0].train_target.as_str(), r.directions[0].test_target.as_str()), ("migrants", "lgbtq"));
        assert!(r.directions.iter().all(|d| d.macro_f1 == 1.0));
        assert_eq!(r.to_csv().unwrap().lines().count(), 3);
    }

    #[test]
    fn cross_target_rejects_thin_targets() {
        let mut records = balanced(40, "migrants");
        records.extend(balanced(18, "lgbtq"));
        let err = cross_target_eval(
            &Oracle,
            &corpus(records),
            ["migrants", "lgbtq"],
            &SplitSpec::default(),
            &TrainSchedule::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("lgbtq"), "{err}");
    }

    #[test]
    fn error_breakdown_counts_the_violence_group() {
        let mut records: Vec<Record> = (0..10).map(|_| rec(1, None, Some("violence"))).collect();
        records.extend((0..5).map(|_| rec(1, None, Some("insult"))));
        records.extend((0..5).map(|_| rec(0, None, None)));
        records.push(rec(1, None, None));
        let test = corpus(records);
        let mut preds = test.labels();
        for p in preds.iter_mut().take(4) {
            *p = 0;
        }
        let b = error_breakdown_from(&preds, &test, ErrorDimension::HateType, ErrorScope::HatefulOnly).unwrap();
        assert_eq!(b.groups["violence"].error_rate, 0.4);
        assert_eq!(b.groups["insult"].error_rate, 0.0);
        assert_eq!(b.groups.values().map(|g| g.count).sum::<usize>(), 15);
        assert_eq!(b.excluded, 1);

        let perfect = error_breakdown(&Oracle, &test, ErrorDimension::HateType, ErrorScope::AllRecords).unwrap();
        assert!(perfect.groups.values().all(|g| g.error_rate == 0.0));
        assert_eq!(perfect.excluded, 6);
        assert!(error_breakdown(&Oracle, &test, ErrorDimension::HateTarget, ErrorScope::HatefulOnly).is_err());
    }

    fn prediction(c: Vec<f64>) -> Prediction {
        let k = c.len();
        Prediction {
            label: 1,
            probs: [0.25, 0.75],
            attribution: Attribution {
                tokens: (0..k).map(|i| format!("t{i}")).collect(),
                cue: CueAttention {
                    s: vec![1.0 / k as f64; k],
                    a: (0..k).map(|i| i as f64 / 10.0).collect(),
                },
                fusion: FusionVector { c },
                detector_attention: vec![0.3; k],
            },
        }
    }

    #[test]
    fn heatmap_shades_monotonically_and_round_trips() {
        let pred = prediction(vec![0.1, 0.9, 0.5]);
        let tokens = pred.attribution.tokens.clone();
        let dir = tempfile::tempdir().unwrap();
        let html = dir.path().join("case.html");
        let doc = export_heatmap(&pred, &tokens, Some(1), &html).unwrap();
        let c = doc.track("fusion").unwrap();
        assert_eq!(c.darkest(), Some(1));
        let shades: Vec<String> = c.intensities().into_iter().map(|i| shade(i).0).collect();
        assert_eq!(shades[1], "hsl(220,70%,30.0%)");
        assert!(fs::read_to_string(&html).unwrap().contains(&shades[1]));
        let back = HeatmapDoc::read_json(&html.with_extension("json")).unwrap();
        assert_eq!(back, doc);
        for (a, b) in back.tracks.iter().zip(&doc.tracks) {
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn heatmap_drops_the_cls_column() {
        let mut pred = prediction(vec![0.9, 0.2, 0.4]);
        pred.attribution.tokens[0] = CLS.to_string();
        let doc = HeatmapDoc::from_prediction(&pred, &pred.attribution.tokens, None).unwrap();
        assert_eq!(doc.tokens, ["t1", "t2"]);
        assert_eq!(doc.track("fusion").unwrap().values, [0.2, 0.4]);
        assert_eq!(doc.track("fusion").unwrap().darkest(), Some(1));
    }

    #[test]
    fn heatmap_rejects_length_mismatch() {
        let pred = prediction(vec![0.1, 0.9, 0.5]);
        let err = HeatmapDoc::from_prediction(&pred, &["a".into(), "b".into()], None).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn shade_darkens_with_intensity() {
        let lightness = |i: f64| {
            let s = shade(i).0;
            s.trim_start_matches("hsl(220,70%,").trim_end_matches("%)").parse::<f64>().unwrap()
        };
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let l = lightness(k as f64 / 20.0);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn html_escapes_tokens() {
        assert_eq!(escape_html("<b>&\"'"), "&lt;b&gt;&amp;&quot;&#39;");
    }
}
