//! Labeled corpora: loading, normalization, binarization, splits and
//! class-balancing weights.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{ensure, Error, Result};

/// Scores strictly below this are non-hateful.
pub const HATE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Validation(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: u8,
    pub platform: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hate_target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hate_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_score: Option<f64>,
}

impl Record {
    pub fn is_hateful(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: String,
    pub format: Option<Format>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub platform: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadSummary {
    pub platform: String,
    pub count: usize,
    pub hateful: usize,
    pub hateful_fraction: f64,
}

impl fmt::Display for LoadSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "platform={} records={} hateful={} hateful_fraction={:.4}",
            self.platform, self.count, self.hateful, self.hateful_fraction
        )
    }
}

impl Corpus {
    /// Build a corpus from in-memory records, retagging them with `platform`.
    pub fn from_records(platform: impl Into<String>, records: Vec<Record>) -> Result<Self> {
        let platform = platform.into();
        ensure!(!records.is_empty(), Validation, "corpus {platform:?} is empty");
        let records = records
            .into_iter()
            .map(|mut r| {
                r.platform = platform.clone();
                r
            })
            .collect();
        Ok(Corpus {
            records,
            platform,
            provenance: Provenance {
                path: "<memory>".into(),
                format: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn hateful_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_hateful()).count()
    }

    pub fn hateful_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.hateful_count() as f64 / self.records.len() as f64
    }

    pub fn summary(&self) -> LoadSummary {
        LoadSummary {
            platform: self.platform.clone(),
            count: self.len(),
            hateful: self.hateful_count(),
            hateful_fraction: self.hateful_fraction(),
        }
    }

    /// Records whose `hate_target` equals `target`, as a new corpus.
    pub fn filter_target(&self, target: &str) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| r.hate_target.as_deref() == Some(target))
            .cloned()
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// 0 iff `score < 0.5`, else 1.
pub fn binarize_score(score: f64) -> Result<u8> {
    ensure!(score.is_finite(), Validation, "hate score must be finite, got {score}");
    Ok(u8::from(score >= HATE_THRESHOLD))
}

/// NFC, then collapse every whitespace run to one space and trim.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Which CSV header names hold which record fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvColumns {
    pub text: String,
    pub label: String,
    pub raw_score: String,
    pub hate_target: String,
    pub hate_type: String,
}

impl Default for CsvColumns {
    fn default() -> Self {
        CsvColumns {
            text: "text".into(),
            label: "label".into(),
            raw_score: "raw_score".into(),
            hate_target: "hate_target".into(),
            hate_type: "hate_type".into(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawRecord {
    text: Option<String>,
    label: Option<serde_json::Value>,
    raw_score: Option<f64>,
    hate_target: Option<String>,
    hate_type: Option<String>,
}

fn parse_label(v: &serde_json::Value, line: usize) -> Result<u8> {
    let n = match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::Bool(b) => Some(f64::from(u8::from(*b))),
        serde_json::Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match n {
        Some(0.0) => Ok(0),
        Some(1.0) => Ok(1),
        _ => Err(Error::Schema {
            line,
            message: format!("label must be 0 or 1, got {v}"),
        }),
    }
}

fn finish_record(raw: RawRecord, platform: &str, line: usize) -> Result<Record> {
    let text = normalize_text(raw.text.as_deref().unwrap_or(""));
    if text.is_empty() {
        return Err(Error::Schema {
            line,
            message: "record has no text".into(),
        });
    }
    let from_score = match raw.raw_score {
        Some(s) => Some(binarize_score(s).map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?),
        None => None,
    };
    let label = match (&raw.label, from_score) {
        (Some(v), Some(b)) => {
            let l = parse_label(v, line)?;
            if l != b {
                return Err(Error::Schema {
                    line,
                    message: format!("label {l} disagrees with binarized raw_score {b}"),
                });
            }
            l
        }
        (Some(v), None) => parse_label(v, line)?,
        (None, Some(b)) => b,
        (None, None) => {
            return Err(Error::Schema {
                line,
                message: "record carries neither label nor raw_score".into(),
            })
        }
    };
    let nonempty = |o: Option<String>| o.map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
    Ok(Record {
        text,
        label,
        platform: platform.to_string(),
        hate_target: nonempty(raw.hate_target),
        hate_type: nonempty(raw.hate_type),
        raw_score: raw.raw_score,
    })
}

pub fn load_corpus(path: &Path, format: Format, platform: &str) -> Result<Corpus> {
    load_corpus_with(path, format, platform, &CsvColumns::default())
}

pub fn load_corpus_with(
    path: &Path,
    format: Format,
    platform: &str,
    columns: &CsvColumns,
) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = match format {
        Format::Jsonl => read_jsonl_records(BufReader::new(file), path, platform)?,
        Format::Csv => read_csv_records(file, platform, columns)?,
    };
    ensure!(!records.is_empty(), Validation, "corpus {} is empty", path.display());
    Ok(Corpus {
        records,
        platform: platform.to_string(),
        provenance: Provenance {
            path: path.display().to_string(),
            format: Some(format),
        },
    })
}

fn read_jsonl_records<R: BufRead>(reader: R, path: &Path, platform: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(finish_record(raw, platform, line_no)?);
    }
    Ok(out)
}

fn read_csv_records<R: std::io::Read>(reader: R, platform: &str, cols: &CsvColumns) -> Result<Vec<Record>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let text_col = find(&cols.text).ok_or_else(|| Error::Schema {
        line: 1,
        message: format!("CSV header lacks text column {:?}", cols.text),
    })?;
    let label_col = find(&cols.label);
    let score_col = find(&cols.raw_score);
    let target_col = find(&cols.hate_target);
    let type_col = find(&cols.hate_type);

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // header is line 1
        let line_no = i + 2;
        let row = row?;
        let cell = |c: Option<usize>| {
            c.and_then(|c| row.get(c))
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        let raw_score = match cell(score_col) {
            Some(s) => Some(s.parse::<f64>().map_err(|_| Error::Schema {
                line: line_no,
                message: format!("raw_score {s:?} is not a number"),
            })?),
            None => None,
        };
        let raw = RawRecord {
            text: row.get(text_col).map(str::to_string),
            label: cell(label_col).map(serde_json::Value::String),
            raw_score,
            hate_target: cell(target_col),
            hate_type: cell(type_col),
        };
        out.push(finish_record(raw, platform, line_no)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec {
            ratios: (train, val, test),
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.ratios;
        ensure!(
            a > 0.0 && b > 0.0 && c > 0.0,
            Validation,
            "split ratios must all be positive, got {:?}",
            self.ratios
        );
        ensure!(
            ((a + b + c) - 1.0).abs() <= 1e-9,
            Validation,
            "split ratios must sum to 1, got {}",
            a + b + c
        );
        Ok(())
    }
}

pub const MIN_PER_CLASS: usize = 10;

/// Label-stratified three-way split. Within each split records keep their
/// corpus order.
pub fn stratified_split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus)> {
    spec.validate()?;
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    for c in [0u8, 1] {
        let n = by_class.get(&c).map_or(0, Vec::len);
        ensure!(
            n >= MIN_PER_CLASS,
            Validation,
            "corpus {:?} has {n} records of class {c}; need at least {MIN_PER_CLASS}",
            corpus.platform
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * spec.ratios.0).round() as usize;
        let n_val = ((n as f64 * spec.ratios.1).round() as usize).min(n - n_train);
        tr.extend_from_slice(&idx[..n_train]);
        va.extend_from_slice(&idx[n_train..n_train + n_val]);
        te.extend_from_slice(&idx[n_train + n_val..]);
    }

    let build = |mut ids: Vec<usize>, tag: &str| {
        ids.sort_unstable();
        Corpus {
            records: ids.into_iter().map(|i| corpus.records[i].clone()).collect(),
            platform: corpus.platform.clone(),
            provenance: Provenance {
                path: format!("{}#{tag}", corpus.provenance.path),
                format: corpus.provenance.format,
            },
        }
    };
    Ok((build(tr, "train"), build(va, "val"), build(te, "test")))
}

/// Train / validation / test partitions of one platform (or target).
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

impl Splits {
    pub fn stratified(corpus: &Corpus, spec: &SplitSpec) -> Result<Self> {
        let (train, val, test) = stratified_split(corpus, spec)?;
        Ok(Splits { train, val, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub non_hate: f64,
    pub hate: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights {
        non_hate: 1.0,
        hate: 1.0,
    };

    #[inline]
    pub fn of(&self, label: u8) -> f64 {
        if label == 1 {
            self.hate
        } else {
            self.non_hate
        }
    }
}

/// Inverse-frequency weights `N / (2 N_c)`.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let n = labels.len();
    let n_hate = labels.iter().filter(|&&l| l == 1).count();
    let n_non = labels.iter().filter(|&&l| l == 0).count();
    ensure!(n_hate + n_non == n, Validation, "labels must be binary");
    ensure!(
        n_hate > 0 && n_non > 0,
        Validation,
        "class weights need both classes (hate={n_hate}, non_hate={n_non})"
    );
    Ok(ClassWeights {
        non_hate: n as f64 / (2.0 * n_non as f64),
        hate: n as f64 / (2.0 * n_hate as f64),
    })
}

/// Multi-class text example used to pretrain cue classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: usize,
}

pub fn load_labeled_texts(path: &Path) -> Result<Vec<LabeledText>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut t: LabeledText = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        t.text = normalize_text(&t.text);
        if t.text.is_empty() {
            return Err(Error::Schema {
                line: i + 1,
                message: "record has no text".into(),
            });
        }
        out.push(t);
    }
    ensure!(!out.is_empty(), Validation, "labeled corpus {} is empty", path.display());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(text: &str, label: u8) -> Record {
        Record {
            text: text.into(),
            label,
            platform: "p".into(),
            hate_target: None,
            hate_type: None,
            raw_score: None,
        }
    }

    fn corpus(n_hate: usize, n_non: usize) -> Corpus {
        let mut rs = Vec::new();
        for i in 0..n_hate + n_non {
            rs.push(rec(&format!("t{i}"), u8::from(i < n_hate)));
        }
        Corpus::from_records("p", rs).unwrap()
    }

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize_score(0.3).unwrap(), 0);
        assert_eq!(binarize_score(0.5).unwrap(), 1);
        assert_eq!(binarize_score(-2.7).unwrap(), 0);
        assert!(binarize_score(f64::NAN).is_err());
        assert!(binarize_score(f64::INFINITY).is_err());
    }

    proptest! {
        #[test]
        fn binarize_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(binarize_score(lo).unwrap() <= binarize_score(hi).unwrap());
        }

        #[test]
        fn class_weights_balance_mass(h in 1usize..500, n in 1usize..500) {
            let mut labels = vec![1u8; h];
            labels.extend(std::iter::repeat_n(0u8, n));
            let w = class_weights(&labels).unwrap();
            let a = w.hate * h as f64;
            let b = w.non_hate * n as f64;
            prop_assert!(((a - b) / a).abs() < 1e-12);
        }
    }

    #[test]
    fn class_weight_examples() {
        let mut l = vec![1u8; 50];
        l.extend([0u8; 50]);
        assert_eq!(class_weights(&l).unwrap(), ClassWeights::UNIFORM);

        let mut l = vec![1u8; 25];
        l.extend([0u8; 75]);
        let w = class_weights(&l).unwrap();
        assert!((w.hate - 2.0).abs() < 1e-12);
        assert!((w.non_hate - 2.0 / 3.0).abs() < 1e-12);

        let mut l = vec![1u8; 7657];
        l.extend(vec![0u8; 23983]);
        let w = class_weights(&l).unwrap();
        assert!((w.hate / w.non_hate - 23983.0 / 7657.0).abs() < 1e-12);
        assert!((w.hate / w.non_hate - 3.13).abs() < 0.005);

        assert!(class_weights(&[1, 1, 1]).is_err());
    }

    #[test]
    fn split_sizes_and_strata() {
        let c = corpus(30, 70);
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 7).unwrap();
        let (tr, va, te) = stratified_split(&c, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert!((23..=25).contains(&tr.hateful_count()));

        let mut all: Vec<_> = tr.records.iter().chain(&va.records).chain(&te.records).map(|r| r.text.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);

        let again = stratified_split(&c, &spec).unwrap();
        assert_eq!(again, (tr, va, te));
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(stratified_split(&corpus(5, 70), &SplitSpec::default()).is_err());
        assert!(SplitSpec::new(0.8, 0.2, 0.0, 1).is_err());
        assert!(SplitSpec::new(0.5, 0.2, 0.2, 1).is_err());
    }

    #[test]
    fn load_jsonl_with_scores_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut f = File::create(&p).unwrap();
        writeln!(f, r#"{{"text": "you  are\tgreat", "label": 0}}"#).unwrap();
        writeln!(f, r#"{{"text": "go away", "raw_score": 0.3}}"#).unwrap();
        writeln!(f, r#"{{"text": "awful people", "raw_score": 0.9, "hate_target": "Migrants"}}"#).unwrap();
        drop(f);
        let c = load_corpus(&p, Format::Jsonl, "twi").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.records[0].text, "you are great");
        assert_eq!(c.records[1].label, 0);
        assert_eq!(c.records[2].label, 1);
        assert!((c.hateful_fraction() - 1.0 / 3.0).abs() < 1e-12);
        assert!(c.records.iter().all(|r| r.platform == "twi"));

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"text\": \"ok\", \"label\": 1}\n{\"text\": \"missing\"}\n").unwrap();
        match load_corpus(&bad, Format::Jsonl, "x") {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_corpus(&empty, Format::Jsonl, "x"), Err(Error::Validation(_))));
        assert!(matches!(
            load_corpus(&dir.path().join("nope.jsonl"), Format::Jsonl, "x"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_csv_with_column_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "comment,hs_score,target\n\"hello, there\",0.1,LGBTQ\nbad words,0.75,\n").unwrap();
        let cols = CsvColumns {
            text: "comment".into(),
            raw_score: "hs_score".into(),
            hate_target: "target".into(),
            ..CsvColumns::default()
        };
        let c = load_corpus_with(&p, Format::Csv, "fb", &cols).unwrap();
        assert_eq!(c.labels(), vec![0, 1]);
        assert_eq!(c.records[0].hate_target.as_deref(), Some("LGBTQ"));
        assert_eq!(c.records[1].hate_target, None);
    }

    #[test]
    fn nfc_normalization() {
        // "e" + combining acute becomes the precomposed form
        assert_eq!(normalize_text("caf\u{0065}\u{0301}  x"), "caf\u{00e9} x");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = corpus(3, 4);
        c.records[0].raw_score = Some(0.75);
        c.records[1].hate_type = Some("violence".into());
        let p = dir.path().join("rt.jsonl");
        c.write_jsonl(&p).unwrap();
        let back = load_corpus(&p, Format::Jsonl, "p").unwrap();
        assert_eq!(back.records, c.records);
    }
}
