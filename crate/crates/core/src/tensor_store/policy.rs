use glob::Pattern;
use serde::{Deserialize, Serialize};

use super::DType;
use crate::error::{Error, Result};

/// Which dtype a tensor is written as: a fixed dtype, or whatever it was loaded from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeChoice {
    Source,
    #[serde(untagged)]
    Fixed(DType),
}

/// One override rule: tensors whose name matches `pattern` are written as `dtype`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtypeRule {
    pub pattern: String,
    pub dtype: DType,
}

/// Maps tensor names to output dtypes. The first matching rule wins; otherwise
/// `default` applies.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct DtypePolicy {
    default: DtypeChoice,
    rules: Vec<(Pattern, DType)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawPolicy {
    #[serde(default = "source_choice")]
    default: DtypeChoice,
    #[serde(default)]
    rules: Vec<DtypeRule>,
}

fn source_choice() -> DtypeChoice {
    DtypeChoice::Source
}

impl TryFrom<RawPolicy> for DtypePolicy {
    type Error = Error;

    fn try_from(raw: RawPolicy) -> Result<Self> {
        let mut policy = DtypePolicy::new(raw.default);
        for (i, rule) in raw.rules.into_iter().enumerate() {
            policy = policy.with_rule(&rule.pattern, rule.dtype).map_err(|e| match e {
                Error::Validation { message, .. } => {
                    Error::validation(format!("dtype.rules[{i}].pattern"), message)
                }
                other => other,
            })?;
        }
        Ok(policy)
    }
}

impl From<DtypePolicy> for RawPolicy {
    fn from(p: DtypePolicy) -> Self {
        RawPolicy {
            default: p.default,
            rules: p
                .rules
                .into_iter()
                .map(|(pattern, dtype)| DtypeRule {
                    pattern: pattern.as_str().to_string(),
                    dtype,
                })
                .collect(),
        }
    }
}

impl PartialEq for DtypePolicy {
    fn eq(&self, other: &Self) -> bool {
        self.default == other.default
            && self.rules.len() == other.rules.len()
            && self
                .rules
                .iter()
                .zip(&other.rules)
                .all(|(a, b)| a.0.as_str() == b.0.as_str() && a.1 == b.1)
    }
}

impl Default for DtypePolicy {
    fn default() -> Self {
        Self::preserve()
    }
}

impl DtypePolicy {
    pub fn new(default: DtypeChoice) -> Self {
        Self {
            default,
            rules: Vec::new(),
        }
    }

    /// Keep every tensor in the dtype it was loaded with.
    pub fn preserve() -> Self {
        Self::new(DtypeChoice::Source)
    }

    pub fn uniform(dtype: DType) -> Self {
        Self::new(DtypeChoice::Fixed(dtype))
    }

    pub fn with_rule(mut self, pattern: &str, dtype: DType) -> Result<Self> {
        let compiled =
            Pattern::new(pattern).map_err(|e| Error::validation("dtype.rules", e.to_string()))?;
        self.rules.push((compiled, dtype));
        Ok(self)
    }

    pub fn default_choice(&self) -> DtypeChoice {
        self.default
    }

    pub fn resolve(&self, name: &str, source: DType) -> DType {
        for (pattern, dtype) in &self.rules {
            if pattern.matches(name) {
                return *dtype;
            }
        }
        match self.default {
            DtypeChoice::Source => source,
            DtypeChoice::Fixed(d) => d,
        }
    }
}
