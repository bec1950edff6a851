use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::reflection::{Matching, ReflectionDetector, KEYWORDS};
use crate::error::{Error, Result};

/// One model response. `token_count` should come from the model's tokenizer;
/// without it the whitespace-delimited word count is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    #[serde(default)]
    pub id: Value,
    pub dataset: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<i64>,
}

impl ResponseRecord {
    pub fn length(&self) -> (u64, bool) {
        match self.token_count {
            Some(n) => (n, true),
            None => (self.response.split_whitespace().count() as u64, false),
        }
    }
}

/// Where the lengths in a group came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthSource {
    Tokens,
    /// Whitespace word count.
    Approx,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n: u64,
    pub avg_length: f64,
    pub length_source: LengthSource,
    pub reflective_count: u64,
    pub reflective_ratio: f64,
    /// Keyword occurrences per response.
    pub keyword_freq: f64,
    pub keyword_counts: BTreeMap<String, u64>,
    /// Fraction correct; present only when every record carries a label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl DatasetStats {
    /// Stats known only as printed summaries (e.g. a results table).
    pub fn from_summary(avg_length: f64, accuracy: Option<f64>) -> Self {
        DatasetStats {
            n: 0,
            avg_length,
            length_source: LengthSource::Tokens,
            reflective_count: 0,
            reflective_ratio: 0.0,
            keyword_freq: 0.0,
            keyword_counts: BTreeMap::new(),
            accuracy,
        }
    }
}

/// Unweighted means over datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroStats {
    pub avg_length: f64,
    pub reflective_ratio: f64,
    pub keyword_freq: f64,
    /// Present only when every dataset has an accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub matching: Matching,
    pub datasets: BTreeMap<String, DatasetStats>,
    pub macro_avg: MacroStats,
    /// Dataset → difficulty level → stats, for records carrying a level.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub difficulty: BTreeMap<String, BTreeMap<i64, DatasetStats>>,
}

impl CorpusReport {
    pub fn from_datasets(matching: Matching, datasets: BTreeMap<String, DatasetStats>) -> Self {
        let macro_avg = macro_stats(&datasets);
        CorpusReport {
            matching,
            datasets,
            macro_avg,
            difficulty: BTreeMap::new(),
        }
    }
}

fn macro_stats(datasets: &BTreeMap<String, DatasetStats>) -> MacroStats {
    let k = datasets.len().max(1) as f64;
    let mean = |f: fn(&DatasetStats) -> f64| datasets.values().map(f).sum::<f64>() / k;
    let accuracy = if !datasets.is_empty() && datasets.values().all(|d| d.accuracy.is_some()) {
        Some(datasets.values().map(|d| d.accuracy.unwrap()).sum::<f64>() / k)
    } else {
        None
    };
    MacroStats {
        avg_length: mean(|d| d.avg_length),
        reflective_ratio: mean(|d| d.reflective_ratio),
        keyword_freq: mean(|d| d.keyword_freq),
        accuracy,
    }
}

#[derive(Clone, Debug, Default)]
struct Group {
    n: u64,
    length_sum: u64,
    counted: u64,
    reflective: u64,
    keywords: u64,
    per_keyword: BTreeMap<&'static str, u64>,
    correct: u64,
    labelled: u64,
}

impl Group {
    fn add(&mut self, length: u64, tokenized: bool, reflective: bool, per_keyword: &BTreeMap<&'static str, usize>, correct: Option<bool>) {
        self.n += 1;
        self.length_sum += length;
        self.counted += tokenized as u64;
        self.reflective += reflective as u64;
        for (k, c) in per_keyword {
            *self.per_keyword.entry(k).or_insert(0) += *c as u64;
            self.keywords += *c as u64;
        }
        if let Some(c) = correct {
            self.labelled += 1;
            self.correct += c as u64;
        }
    }

    fn finish(&self) -> DatasetStats {
        let n = self.n as f64;
        DatasetStats {
            n: self.n,
            avg_length: self.length_sum as f64 / n,
            length_source: match self.counted {
                c if c == self.n => LengthSource::Tokens,
                0 => LengthSource::Approx,
                _ => LengthSource::Mixed,
            },
            reflective_count: self.reflective,
            reflective_ratio: self.reflective as f64 / n,
            keyword_freq: self.keywords as f64 / n,
            keyword_counts: KEYWORDS
                .iter()
                .map(|k| (k.to_string(), self.per_keyword.get(k).copied().unwrap_or(0)))
                .collect(),
            accuracy: (self.labelled == self.n).then(|| self.correct as f64 / n),
        }
    }
}

/// Streaming aggregator. All tallies are integers, so the result does not
/// depend on record order.
pub struct CorpusAccumulator {
    matching: Matching,
    detector: &'static ReflectionDetector,
    groups: BTreeMap<String, Group>,
    levels: BTreeMap<String, BTreeMap<i64, Group>>,
}

impl CorpusAccumulator {
    pub fn new(matching: Matching) -> Self {
        CorpusAccumulator {
            matching,
            detector: ReflectionDetector::shared(matching),
            groups: BTreeMap::new(),
            levels: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, record: &ResponseRecord) -> Result<()> {
        if record.dataset.trim().is_empty() {
            return Err(Error::validation("dataset", "must not be empty"));
        }
        let (length, tokenized) = record.length();
        let r = self.detector.detect(&record.response);
        self.groups
            .entry(record.dataset.clone())
            .or_default()
            .add(length, tokenized, r.is_reflective, &r.per_keyword, record.correct);
        if let Some(level) = record.difficulty {
            self.levels
                .entry(record.dataset.clone())
                .or_default()
                .entry(level)
                .or_default()
                .add(length, tokenized, r.is_reflective, &r.per_keyword, record.correct);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<CorpusReport> {
        if self.groups.is_empty() {
            return Err(Error::validation("responses", "no records"));
        }
        let datasets = self.groups.iter().map(|(k, g)| (k.clone(), g.finish())).collect();
        let mut report = CorpusReport::from_datasets(self.matching, datasets);
        report.difficulty = self
            .levels
            .iter()
            .map(|(d, lv)| (d.clone(), lv.iter().map(|(l, g)| (*l, g.finish())).collect()))
            .collect();
        Ok(report)
    }
}

pub fn corpus_stats(records: &[ResponseRecord], matching: Matching) -> Result<CorpusReport> {
    let mut acc = CorpusAccumulator::new(matching);
    for r in records {
        acc.add(r)?;
    }
    acc.finish()
}

/// Per-level stats over records that carry a difficulty, across all datasets.
pub fn difficulty_profile(records: &[ResponseRecord], matching: Matching) -> BTreeMap<i64, DatasetStats> {
    let detector = ReflectionDetector::shared(matching);
    let mut levels: BTreeMap<i64, Group> = BTreeMap::new();
    for rec in records {
        let Some(level) = rec.difficulty else { continue };
        let (length, tokenized) = rec.length();
        let r = detector.detect(&rec.response);
        levels
            .entry(level)
            .or_default()
            .add(length, tokenized, r.is_reflective, &r.per_keyword, rec.correct);
    }
    levels.iter().map(|(l, g)| (*l, g.finish())).collect()
}

/// Read a JSONL file of [`ResponseRecord`]s into `acc`, skipping blank lines.
pub fn read_responses(path: impl AsRef<Path>, acc: &mut CorpusAccumulator) -> Result<u64> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut n = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let field = format!("{}:{}", path.display(), i + 1);
        let rec: ResponseRecord =
            serde_json::from_str(&line).map_err(|e| Error::validation(&field, e.to_string()))?;
        acc.add(&rec).map_err(|e| match e {
            Error::Validation { field: f, message } => Error::validation(format!("{field}: {f}"), message),
            other => other,
        })?;
        n += 1;
    }
    Ok(n)
}

/// Relative length reduction of `candidate` against `baseline`, positive when
/// the candidate is shorter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthReduction {
    pub per_dataset: BTreeMap<String, f64>,
    /// Unweighted mean of the per-dataset reductions.
    pub macro_reduction: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub only_in_candidate: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub only_in_baseline: Vec<String>,
}

pub fn length_reduction(candidate: &CorpusReport, baseline: &CorpusReport) -> Result<LengthReduction> {
    let mut per_dataset = BTreeMap::new();
    for (name, c) in &candidate.datasets {
        let Some(b) = baseline.datasets.get(name) else { continue };
        if b.avg_length <= 0.0 {
            return Err(Error::validation(
                format!("baseline.{name}.avg_length"),
                "baseline length must be positive",
            ));
        }
        per_dataset.insert(name.clone(), (b.avg_length - c.avg_length) / b.avg_length);
    }
    if per_dataset.is_empty() {
        return Err(Error::validation("baseline", "no dataset in common with the candidate"));
    }
    let macro_reduction = per_dataset.values().sum::<f64>() / per_dataset.len() as f64;
    let only = |a: &CorpusReport, b: &CorpusReport| -> Vec<String> {
        a.datasets.keys().filter(|k| !b.datasets.contains_key(*k)).cloned().collect()
    };
    Ok(LengthReduction {
        per_dataset,
        macro_reduction,
        only_in_candidate: only(candidate, baseline),
        only_in_baseline: only(baseline, candidate),
    })
}
