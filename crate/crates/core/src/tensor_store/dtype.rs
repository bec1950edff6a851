use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Storage dtypes understood by the container reader and writer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "BF16", alias = "bf16")]
    BF16,
    #[serde(rename = "F32", alias = "f32", alias = "fp32", alias = "FP32")]
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::BF16 => 2,
            DType::F32 => 4,
        }
    }

    /// Tag written into container headers.
    pub fn as_str(self) -> &'static str {
        match self {
            DType::BF16 => "BF16",
            DType::F32 => "F32",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BF16" => Ok(DType::BF16),
            "F32" | "FP32" => Ok(DType::F32),
            other => Err(format!("unknown dtype `{other}`")),
        }
    }
}

#[inline]
pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Narrow to BF16 with round-to-nearest-even. Values already representable
/// in BF16 (low half of the word zero) are passed through bit-for-bit, which
/// also keeps NaN payloads intact on widen/narrow roundtrips.
#[inline]
pub fn f32_to_bf16(value: f32) -> u16 {
    let bits = value.to_bits();
    if bits & 0xFFFF == 0 {
        return (bits >> 16) as u16;
    }
    half::bf16::from_f32(value).to_bits()
}

pub(crate) fn decode(dtype: DType, bytes: &[u8]) -> Vec<f32> {
    match dtype {
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|b| bf16_to_f32(u16::from_le_bytes([b[0], b[1]])))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    }
}

pub(crate) fn encode_into(dtype: DType, values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * dtype.size());
    match dtype {
        DType::BF16 => {
            for &v in values {
                out.extend_from_slice(&f32_to_bf16(v).to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}
