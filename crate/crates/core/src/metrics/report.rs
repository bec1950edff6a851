use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::corpus::{length_reduction, CorpusReport, DatasetStats, LengthReduction, LengthSource};
use super::reflection::{Matching, KEYWORDS};
use crate::error::Result;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Versioned report written by the `metrics` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub matching: Matching,
    /// Keyword counting convention.
    pub counting: String,
    pub keywords: Vec<String>,
    pub candidate: CorpusReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<CorpusReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<LengthReduction>,
}

impl MetricsReport {
    pub fn new(candidate: CorpusReport, baseline: Option<CorpusReport>) -> Result<Self> {
        let reduction = baseline
            .as_ref()
            .map(|b| length_reduction(&candidate, b))
            .transpose()?;
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            matching: candidate.matching,
            counting: "per_occurrence".into(),
            keywords: KEYWORDS.iter().map(|k| k.to_string()).collect(),
            candidate,
            baseline,
            reduction,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let matching = match self.matching {
            Matching::Substring => "substring",
            Matching::WordBoundary => "word-boundary",
        };
        let _ = writeln!(s, "# Response metrics\n");
        let _ = writeln!(
            s,
            "Keyword matching: {matching}, counted per occurrence. Keywords: {}.\n",
            self.keywords.join(", ")
        );
        let _ = writeln!(s, "## Candidate\n");
        table(&mut s, &self.candidate, self.reduction.as_ref());
        if let Some(b) = &self.baseline {
            let _ = writeln!(s, "\n## Baseline\n");
            table(&mut s, b, None);
        }
        if !self.candidate.difficulty.is_empty() {
            let _ = writeln!(s, "\n## By difficulty\n");
            let _ = writeln!(s, "| Dataset | Level | N | Avg. length | Reflective % |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|");
            for (d, levels) in &self.candidate.difficulty {
                for (l, st) in levels {
                    let _ = writeln!(
                        s,
                        "| {d} | {l} | {} | {:.1} | {:.1} |",
                        st.n,
                        st.avg_length,
                        100.0 * st.reflective_ratio
                    );
                }
            }
        }
        s
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.1}", 100.0 * v))
}

fn length(d: &DatasetStats) -> String {
    match d.length_source {
        LengthSource::Tokens => format!("{:.1}", d.avg_length),
        _ => format!("{:.1} (approx)", d.avg_length),
    }
}

fn table(s: &mut String, r: &CorpusReport, red: Option<&LengthReduction>) {
    let _ = writeln!(s, "| Dataset | N | Avg. length | Reduction % | Reflective % | Keywords / response | Accuracy % |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|");
    for (name, d) in &r.datasets {
        let reduction = red.and_then(|x| x.per_dataset.get(name).copied());
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | {:.1} | {:.2} | {} |",
            d.n,
            length(d),
            pct(reduction),
            100.0 * d.reflective_ratio,
            d.keyword_freq,
            pct(d.accuracy)
        );
    }
    let m = &r.macro_avg;
    let _ = writeln!(
        s,
        "| **Avg.** | | {:.1} | {} | {:.1} | {:.2} | {} |",
        m.avg_length,
        pct(red.map(|x| x.macro_reduction)),
        100.0 * m.reflective_ratio,
        m.keyword_freq,
        pct(m.accuracy)
    );
}
