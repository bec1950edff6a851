//! Mergers driven by calibration statistics: per-row protection of critical
//! base weights (AIM) and sensitivity-derived layer-wise coefficients (Sens).

mod aim;
mod sens;
mod stats;

pub use aim::{aim_adjust, AimOutcome, AimParams};
pub use sens::{sens_coefficients, sens_merge, softmax_tempered, SensParams};
pub use stats::{CalibrationStats, StatsMeta, STATS_SCHEMA_VERSION};
