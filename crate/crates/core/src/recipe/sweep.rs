use std::fmt;
use std::str::FromStr;

use super::MergeRecipe;
use crate::error::{Error, Result};

const FIELD: &str = "sweep";

/// A one-parameter grid such as `alpha=0.5:0.8:0.05` (inclusive range) or
/// `k=0.2,0.5,0.8` (explicit list).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
}

const FLOAT_PARAMS: &[&str] = &["alpha", "k", "p", "omega", "temperature", "tau", "tau_abs", "tol", "lore_lambda", "energy"];
const INT_PARAMS: &[&str] = &["seed", "rank", "max_iters"];

fn number(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::validation(FIELD, format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::validation(FIELD, format!("`{s}` is not finite")));
    }
    Ok(v)
}

/// Snap grid points to 12 decimals so `0.5 + 3·0.05` prints as `0.65`.
fn snap(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

impl FromStr for SweepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (param, range) = s
            .split_once('=')
            .ok_or_else(|| Error::validation(FIELD, "expected PARAM=START:STOP:STEP or PARAM=V1,V2,..."))?;
        let param = param.trim().to_string();
        if !FLOAT_PARAMS.contains(&param.as_str()) && !INT_PARAMS.contains(&param.as_str()) {
            return Err(Error::validation(FIELD, format!("`{param}` is not a sweepable parameter")));
        }
        let parts: Vec<&str> = range.split(':').collect();
        let values = match parts.as_slice() {
            [start, stop, step] => {
                let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
                if step <= 0.0 || stop < start {
                    return Err(Error::validation(FIELD, "range needs STEP > 0 and STOP >= START"));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                if n > 10_000 {
                    return Err(Error::validation(FIELD, format!("{} grid points is too many", n + 1)));
                }
                (0..=n).map(|i| snap(start + i as f64 * step)).collect()
            }
            [list] => list.split(',').map(number).collect::<Result<Vec<_>>>()?,
            _ => return Err(Error::validation(FIELD, "range must be START:STOP:STEP")),
        };
        if values.is_empty() {
            return Err(Error::validation(FIELD, "no grid points"));
        }
        if INT_PARAMS.contains(&param.as_str()) {
            if let Some(v) = values.iter().find(|v| v.fract() != 0.0 || **v < 0.0) {
                return Err(Error::validation(FIELD, format!("`{param}` takes non-negative integers, got {v}")));
            }
        }
        Ok(SweepSpec { param, values })
    }
}

impl fmt::Display for SweepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals: Vec<String> = self.values.iter().map(|v| v.to_string()).collect();
        write!(f, "{}={}", self.param, vals.join(","))
    }
}

impl SweepSpec {
    /// One finalized recipe per grid point, each writing to
    /// `<output>/<param>=<value>`. `draft` must not be finalized yet, so that
    /// options such as `trim_is_keep` apply to the swept value too.
    pub fn expand(&self, draft: &MergeRecipe) -> Result<Vec<MergeRecipe>> {
        let out = draft.output()?.to_path_buf();
        self.values
            .iter()
            .map(|&v| {
                let mut r = draft.clone();
                let p = &mut r.params;
                match self.param.as_str() {
                    "alpha" => p.alpha = Some(v),
                    "k" => p.k = Some(v),
                    "p" => p.p = Some(v),
                    "omega" => p.omega = Some(v),
                    "temperature" => p.temperature = Some(v),
                    "tau" => p.tau = Some(v),
                    "tau_abs" => p.tau_abs = Some(v),
                    "tol" => p.tol = Some(v),
                    "lore_lambda" => p.lore_lambda = Some(v),
                    "energy" => p.energy = Some(v),
                    "seed" => p.seed = Some(v as u64),
                    "rank" => p.rank = Some(v as usize),
                    "max_iters" => p.max_iters = Some(v as usize),
                    other => unreachable!("unchecked sweep parameter {other}"),
                }
                r.output = Some(out.join(format!("{}={v}", self.param)));
                r.finalize()
            })
            .collect()
    }
}
