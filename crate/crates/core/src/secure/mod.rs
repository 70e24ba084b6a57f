//! Pairwise key agreement over `Z_p^*`, zero-sum blinding masks and masked
//! aggregation of embeddings in the fixed-point ring `Z_{2^64}`.
//!
//! Every passive party `k` agrees a key `CK_{k,j}` with every other passive
//! party `j` and expands it into a per-element stream. Party `k` adds the
//! stream when `k < j` and subtracts it when `k > j`, so each pair's
//! contributions cancel in the ring sum and the active party only learns
//! the total.

mod codec;
mod group;
mod mask;

pub use codec::FixedPointCodec;
pub use group::{derive_shared, hash_element, keygen, GroupChoice, GroupParams, KeyPair, SharedSecret};
pub use mask::{aggregate, blinding_mask, mask_embedding, prf, BlindingMask, RingTensor};

#[derive(Debug, thiserror::Error)]
pub enum SecureError {
    #[error("degenerate group: {0}")]
    DegenerateGroup(String),
    #[error("key out of range: {0}")]
    KeyOutOfRange(String),
    #[error("party {party} has no shared secret with party {peer}")]
    MissingSecret { party: usize, peer: usize },
    #[error("expected {expected} ring elements, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("embedding value {value} exceeds the fixed-point budget {budget}")]
    Overflow { value: f64, budget: f64 },
    #[error("aggregation needs at least one masked contribution")]
    NoContributions,
    #[error("scale exponent {0} outside 1..=40")]
    InvalidScale(u32),
}
