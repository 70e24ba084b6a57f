use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FixedPointCodec, SecureError, SharedSecret};
use crate::nn::Tensor;

/// Tensor of ring elements, the wire form of a masked embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingTensor {
    pub shape: Vec<usize>,
    pub values: Vec<u64>,
}

impl RingTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-element blinding values of one passive party for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlindingMask {
    pub values: Vec<u64>,
    pub nonce: u64,
}

impl BlindingMask {
    pub fn zero(len: usize, nonce: u64) -> Self {
        Self {
            values: vec![0; len],
            nonce,
        }
    }
}

/// `SHA-256(key || nonce_le || index_le)`, first 8 bytes read little-endian.
pub fn prf(key: &SharedSecret, nonce: u64, index: u64) -> u64 {
    prf_stream(key, nonce, index, 1)[0]
}

fn prf_stream(key: &SharedSecret, nonce: u64, start: u64, len: usize) -> Vec<u64> {
    let mut block = [0u8; 48];
    block[..32].copy_from_slice(key.as_bytes());
    block[32..40].copy_from_slice(&nonce.to_le_bytes());
    (start..start + len as u64)
        .map(|i| {
            block[40..].copy_from_slice(&i.to_le_bytes());
            let digest = Sha256::digest(block);
            u64::from_le_bytes(digest[..8].try_into().expect("8-byte prefix"))
        })
        .collect()
}

/// Mask of passive party `party` (1-based) among `parties` passive parties:
/// element `i` is the ring sum over peers `j` of `+prf(CK, nonce, i)` when
/// `party < j` and `-prf(CK, nonce, i)` when `party > j`. Summed over all
/// passive parties the masks vanish.
pub fn blinding_mask(
    party: usize,
    parties: usize,
    secrets: &BTreeMap<usize, SharedSecret>,
    len: usize,
    nonce: u64,
) -> Result<BlindingMask, SecureError> {
    let mut values = vec![0u64; len];
    for peer in (1..=parties).filter(|&j| j != party) {
        let key = secrets.get(&peer).ok_or(SecureError::MissingSecret { party, peer })?;
        let stream = prf_stream(key, nonce, 0, len);
        if party < peer {
            for (v, r) in values.iter_mut().zip(stream) {
                *v = v.wrapping_add(r);
            }
        } else {
            for (v, r) in values.iter_mut().zip(stream) {
                *v = v.wrapping_sub(r);
            }
        }
    }
    Ok(BlindingMask { values, nonce })
}

/// `encode(E) + r` elementwise. Values beyond the codec's magnitude budget
/// for `parties` contributions are refused.
pub fn mask_embedding(
    embedding: &Tensor,
    mask: &BlindingMask,
    codec: &FixedPointCodec,
    parties: usize,
) -> Result<RingTensor, SecureError> {
    if embedding.len() != mask.values.len() {
        return Err(SecureError::LengthMismatch {
            expected: embedding.len(),
            actual: mask.values.len(),
        });
    }
    let budget = codec.magnitude_budget(parties);
    let values = embedding
        .data()
        .iter()
        .zip(&mask.values)
        .map(|(&x, &r)| {
            if !(x.abs() <= budget) {
                return Err(SecureError::Overflow { value: x, budget });
            }
            Ok(codec.encode(x).wrapping_add(r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RingTensor {
        shape: embedding.shape().to_vec(),
        values,
    })
}

/// `(E_active + sum_k E_k) / parties_total`, where the passive terms arrive
/// masked and are summed in the ring before decoding.
pub fn aggregate(
    active: &Tensor,
    masked: &[RingTensor],
    codec: &FixedPointCodec,
    parties_total: usize,
) -> Result<Tensor, SecureError> {
    if masked.is_empty() {
        return Err(SecureError::NoContributions);
    }
    let len = active.len();
    let mut sum = vec![0u64; len];
    for m in masked {
        if m.values.len() != len {
            return Err(SecureError::LengthMismatch {
                expected: len,
                actual: m.values.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(&m.values) {
            *s = s.wrapping_add(*v);
        }
    }
    let inv = 1.0 / parties_total as f64;
    let data = active
        .data()
        .iter()
        .zip(sum)
        .map(|(a, s)| (a + codec.decode(s)) * inv)
        .collect();
    Ok(Tensor::new(active.shape().to_vec(), data).expect("shape preserved"))
}
