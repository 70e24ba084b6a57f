use serde::{Deserialize, Serialize};

use super::SecureError;

/// Two's-complement fixed point in the ring of integers mod 2^64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    scale_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self { scale_bits: 16 }
    }
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32) -> Result<Self, SecureError> {
        if scale_bits == 0 || scale_bits > 40 {
            return Err(SecureError::InvalidScale(scale_bits));
        }
        Ok(Self { scale_bits })
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Largest magnitude that survives a sum of `parties` encodings:
    /// `2^46 / S / parties`.
    pub fn magnitude_budget(&self, parties: usize) -> f64 {
        (1u64 << 46) as f64 / self.scale() / parties.max(1) as f64
    }

    /// `round(x * S)` as a ring element.
    pub fn encode(&self, x: f64) -> u64 {
        ((x * self.scale()).round() as i64) as u64
    }

    pub fn decode(&self, v: u64) -> f64 {
        (v as i64) as f64 / self.scale()
    }

    /// Worst-case quantization error of one encode/decode round trip.
    pub fn resolution(&self) -> f64 {
        0.5 / self.scale()
    }
}
