//! Long-to-short analysis of response corpora: response lengths, length
//! reduction against a baseline, reflective-response detection and accuracy
//! aggregation, per dataset and per difficulty level.

mod corpus;
mod reflection;
mod report;

pub use corpus::{
    corpus_stats, difficulty_profile, length_reduction, read_responses, CorpusAccumulator,
    CorpusReport, DatasetStats, LengthReduction, LengthSource, MacroStats, ResponseRecord,
};
pub use reflection::{detect_reflection, Matching, ReflectionDetector, Reflection, KEYWORDS};
pub use report::{MetricsReport, REPORT_SCHEMA_VERSION};
