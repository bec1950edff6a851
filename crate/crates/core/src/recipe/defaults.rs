use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model size class used to pick default hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scale {
    B1_5,
    B7,
    B14,
    B32,
}

impl Scale {
    /// Heuristic size class from a parameter count.
    pub fn from_param_count(params: u64) -> Self {
        match params {
            p if p < 3_000_000_000 => Scale::B1_5,
            p if p < 10_000_000_000 => Scale::B7,
            p if p < 20_000_000_000 => Scale::B14,
            _ => Scale::B32,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::B1_5 => "1.5b",
            Scale::B7 => "7b",
            Scale::B14 => "14b",
            Scale::B32 => "32b",
        }
    }

    pub fn defaults(self) -> ScaleDefaults {
        match self {
            Scale::B1_5 => ScaleDefaults {
                ta_alpha: 0.7,
                ties: (0.8, 1.0),
                dare_p: Some(0.3),
                aim_omega: Some(0.4),
                sens: Some((0.4, 3.0)),
            },
            Scale::B7 => ScaleDefaults {
                ta_alpha: 0.7,
                ties: (0.8, 1.0),
                dare_p: Some(0.3),
                aim_omega: Some(0.4),
                sens: Some((0.7, 2.0)),
            },
            Scale::B14 => ScaleDefaults {
                ta_alpha: 0.7,
                ties: (0.2, 0.5),
                dare_p: Some(0.4),
                aim_omega: Some(0.4),
                sens: Some((0.8, 6.0)),
            },
            Scale::B32 => ScaleDefaults {
                ta_alpha: 0.7,
                ties: (0.25, 0.55),
                dare_p: None,
                aim_omega: None,
                sens: None,
            },
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1.5b" => Ok(Scale::B1_5),
            "7b" => Ok(Scale::B7),
            "14b" => Ok(Scale::B14),
            "32b" => Ok(Scale::B32),
            other => Err(Error::validation(
                "scale",
                format!("unknown scale `{other}` (expected 1.5b, 7b, 14b or 32b)"),
            )),
        }
    }
}

impl Serialize for Scale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Scale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Default hyperparameters for one scale. `None` marks methods that have no
/// published configuration at that size; recipes must then set them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleDefaults {
    pub ta_alpha: f64,
    /// TIES `(k, α)`, with `k` the trimmed fraction.
    pub ties: (f64, f64),
    pub dare_p: Option<f64>,
    pub aim_omega: Option<f64>,
    /// Sens `(α, T)`.
    pub sens: Option<(f64, f64)>,
}
