use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Reflection keywords, longest variants first so that "let me just check"
/// is one hit rather than a partial one.
pub const KEYWORDS: [&str; 8] = [
    "let me just check",
    "let me just verify",
    "let me check",
    "let me verify",
    "double-check",
    "re-examine",
    "recap",
    "wait",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Plain case-insensitive substring search; "awaiting" counts as "wait".
    #[default]
    Substring,
    /// Keywords must start and end on word boundaries.
    WordBoundary,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Reflection {
    pub is_reflective: bool,
    /// Non-overlapping keyword occurrences.
    pub keyword_count: usize,
    pub per_keyword: BTreeMap<&'static str, usize>,
}

pub struct ReflectionDetector {
    re: Regex,
}

fn build(matching: Matching) -> Regex {
    let alts: Vec<String> = KEYWORDS.iter().map(|k| format!("({})", regex::escape(k))).collect();
    let body = alts.join("|");
    let pattern = match matching {
        Matching::Substring => format!("(?i)(?:{body})"),
        Matching::WordBoundary => format!(r"(?i)\b(?:{body})\b"),
    };
    Regex::new(&pattern).expect("keyword pattern compiles")
}

impl ReflectionDetector {
    pub fn new(matching: Matching) -> Self {
        Self { re: build(matching) }
    }

    /// Shared detector for `matching`, compiled once per process.
    pub fn shared(matching: Matching) -> &'static ReflectionDetector {
        static SUB: OnceLock<ReflectionDetector> = OnceLock::new();
        static WORD: OnceLock<ReflectionDetector> = OnceLock::new();
        let cell = match matching {
            Matching::Substring => &SUB,
            Matching::WordBoundary => &WORD,
        };
        cell.get_or_init(|| ReflectionDetector::new(matching))
    }

    pub fn detect(&self, text: &str) -> Reflection {
        let mut per_keyword = BTreeMap::new();
        let mut count = 0;
        for caps in self.re.captures_iter(text) {
            // group i + 1 is KEYWORDS[i]; case folding can change the matched text itself
            let i = (1..caps.len()).find(|&g| caps.get(g).is_some()).expect("one group matched");
            *per_keyword.entry(KEYWORDS[i - 1]).or_insert(0) += 1;
            count += 1;
        }
        Reflection {
            is_reflective: count > 0,
            keyword_count: count,
            per_keyword,
        }
    }
}

/// `(is_reflective, keyword_count)` with substring matching.
pub fn detect_reflection(text: &str) -> (bool, usize) {
    let r = ReflectionDetector::shared(Matching::Substring).detect(text);
    (r.is_reflective, r.keyword_count)
}
