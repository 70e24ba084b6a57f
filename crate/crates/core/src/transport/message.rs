use std::fmt;

use num_bigint::BigUint;

use super::FrameError;
use crate::nn::Tensor;
use crate::secure::RingTensor;

/// Party index; 0 is the active (label-holding) party.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartyId(pub u16);

impl PartyId {
    pub const ACTIVE: PartyId = PartyId(0);

    pub fn is_active(self) -> bool {
        self.0 == 0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_active() {
            write!(f, "active")
        } else {
            write!(f, "passive-{}", self.0)
        }
    }
}

/// (epoch, batch) counter; ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RoundNonce {
    pub epoch: u32,
    pub batch: u32,
}

impl RoundNonce {
    pub fn new(epoch: u32, batch: u32) -> Self {
        Self { epoch, batch }
    }

    /// Packed form fed to the mask PRF.
    pub fn as_u64(self) -> u64 {
        (u64::from(self.epoch) << 32) | u64::from(self.batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    PublicKey = 1,
    MaskedEmbedding = 2,
    GlobalEmbedding = 3,
    Prediction = 4,
    LossAndGrad = 5,
}

impl MessageType {
    pub const ALL: [MessageType; 5] = [
        MessageType::PublicKey,
        MessageType::MaskedEmbedding,
        MessageType::GlobalEmbedding,
        MessageType::Prediction,
        MessageType::LossAndGrad,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get((v as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageType::PublicKey => "public_key",
            MessageType::MaskedEmbedding => "masked_embedding",
            MessageType::GlobalEmbedding => "global_embedding",
            MessageType::Prediction => "prediction",
            MessageType::LossAndGrad => "loss_and_grad",
        }
    }
}

/// Protocol payloads. `party` fields name the party the payload is about;
/// for relayed public keys that differs from the frame sender.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    PublicKey {
        party: PartyId,
        key: BigUint,
    },
    MaskedEmbedding {
        party: PartyId,
        nonce: RoundNonce,
        batch_id: u64,
        embedding: RingTensor,
    },
    GlobalEmbedding {
        nonce: RoundNonce,
        batch_id: u64,
        embedding: Tensor,
    },
    Prediction {
        party: PartyId,
        nonce: RoundNonce,
        logits: Tensor,
    },
    LossAndGrad {
        party: PartyId,
        nonce: RoundNonce,
        loss: f64,
        grad: Tensor,
    },
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Message::PublicKey { .. } => MessageType::PublicKey,
            Message::MaskedEmbedding { .. } => MessageType::MaskedEmbedding,
            Message::GlobalEmbedding { .. } => MessageType::GlobalEmbedding,
            Message::Prediction { .. } => MessageType::Prediction,
            Message::LossAndGrad { .. } => MessageType::LossAndGrad,
        }
    }

    pub fn nonce(&self) -> Option<RoundNonce> {
        match self {
            Message::PublicKey { .. } => None,
            Message::MaskedEmbedding { nonce, .. }
            | Message::GlobalEmbedding { nonce, .. }
            | Message::Prediction { nonce, .. }
            | Message::LossAndGrad { nonce, .. } => Some(*nonce),
        }
    }

    /// Payload bytes (frame header excluded).
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Vec::new();
        match self {
            Message::PublicKey { party, key } => {
                put_u16(&mut w, party.0);
                let bytes = key.to_bytes_be();
                put_u16(&mut w, bytes.len() as u16);
                w.extend_from_slice(&bytes);
            }
            Message::MaskedEmbedding {
                party,
                nonce,
                batch_id,
                embedding,
            } => {
                put_u16(&mut w, party.0);
                put_nonce(&mut w, *nonce);
                w.extend_from_slice(&batch_id.to_le_bytes());
                put_shape(&mut w, &embedding.shape);
                for v in &embedding.values {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::GlobalEmbedding {
                nonce,
                batch_id,
                embedding,
            } => {
                put_nonce(&mut w, *nonce);
                w.extend_from_slice(&batch_id.to_le_bytes());
                put_tensor(&mut w, embedding);
            }
            Message::Prediction {
                party,
                nonce,
                logits,
            } => {
                put_u16(&mut w, party.0);
                put_nonce(&mut w, *nonce);
                put_tensor(&mut w, logits);
            }
            Message::LossAndGrad {
                party,
                nonce,
                loss,
                grad,
            } => {
                put_u16(&mut w, party.0);
                put_nonce(&mut w, *nonce);
                w.extend_from_slice(&loss.to_le_bytes());
                put_tensor(&mut w, grad);
            }
        }
        w
    }

    pub fn decode_payload(kind: MessageType, payload: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader { buf: payload, at: 0 };
        let msg = match kind {
            MessageType::PublicKey => {
                let party = PartyId(r.u16()?);
                let len = r.u16()? as usize;
                let key = BigUint::from_bytes_be(r.take(len)?);
                Message::PublicKey { party, key }
            }
            MessageType::MaskedEmbedding => {
                let party = PartyId(r.u16()?);
                let nonce = r.nonce()?;
                let batch_id = r.u64()?;
                let shape = r.shape()?;
                let n = element_count(&shape)?;
                let values = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
                Message::MaskedEmbedding {
                    party,
                    nonce,
                    batch_id,
                    embedding: RingTensor { shape, values },
                }
            }
            MessageType::GlobalEmbedding => {
                let nonce = r.nonce()?;
                let batch_id = r.u64()?;
                let embedding = r.tensor()?;
                Message::GlobalEmbedding {
                    nonce,
                    batch_id,
                    embedding,
                }
            }
            MessageType::Prediction => {
                let party = PartyId(r.u16()?);
                let nonce = r.nonce()?;
                let logits = r.tensor()?;
                Message::Prediction {
                    party,
                    nonce,
                    logits,
                }
            }
            MessageType::LossAndGrad => {
                let party = PartyId(r.u16()?);
                let nonce = r.nonce()?;
                let loss = f64::from_le_bytes(r.array()?);
                let grad = r.tensor()?;
                Message::LossAndGrad {
                    party,
                    nonce,
                    loss,
                    grad,
                }
            }
        };
        if r.at != payload.len() {
            return Err(FrameError::Payload(format!(
                "{} trailing bytes after {}",
                payload.len() - r.at,
                kind.name()
            )));
        }
        Ok(msg)
    }
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_nonce(w: &mut Vec<u8>, n: RoundNonce) {
    w.extend_from_slice(&n.epoch.to_le_bytes());
    w.extend_from_slice(&n.batch.to_le_bytes());
}

fn put_shape(w: &mut Vec<u8>, shape: &[usize]) {
    w.push(shape.len() as u8);
    for d in shape {
        w.extend_from_slice(&(*d as u32).to_le_bytes());
    }
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    put_shape(w, t.shape());
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

fn element_count(shape: &[usize]) -> Result<usize, FrameError> {
    shape
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| FrameError::Payload("tensor shape overflows".into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            FrameError::Payload(format!("payload truncated at byte {}", self.buf.len()))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FrameError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn nonce(&mut self) -> Result<RoundNonce, FrameError> {
        Ok(RoundNonce::new(self.u32()?, self.u32()?))
    }

    fn shape(&mut self) -> Result<Vec<usize>, FrameError> {
        let rank = self.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        // Reject shapes the remaining bytes cannot possibly hold.
        let n = element_count(&shape)?;
        if n.saturating_mul(8) > self.buf.len() - self.at {
            return Err(FrameError::Payload(format!("shape {shape:?} exceeds payload")));
        }
        Ok(shape)
    }

    fn tensor(&mut self) -> Result<Tensor, FrameError> {
        let shape = self.shape()?;
        let n = element_count(&shape)?;
        let data = (0..n)
            .map(|_| self.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(|e| FrameError::Payload(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonce_ordering_is_lexicographic() {
        assert!(RoundNonce::new(0, 9) < RoundNonce::new(1, 0));
        assert!(RoundNonce::new(1, 0) < RoundNonce::new(1, 1));
        assert_eq!(RoundNonce::new(1, 2).as_u64(), (1 << 32) | 2);
    }

    #[test]
    fn public_key_layout() {
        let m = Message::PublicKey {
            party: PartyId(3),
            key: BigUint::from(0x0102u32),
        };
        assert_eq!(m.encode_payload(), vec![3, 0, 2, 0, 1, 2]);
    }

    #[test]
    fn tensor_layout() {
        let m = Message::Prediction {
            party: PartyId(1),
            nonce: RoundNonce::new(2, 5),
            logits: Tensor::from_rows(&[vec![1.5]]),
        };
        let p = m.encode_payload();
        assert_eq!(&p[..2], &[1, 0]);
        assert_eq!(&p[2..10], &[2, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(p[10], 2);
        assert_eq!(&p[11..19], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&p[19..], &1.5f64.to_le_bytes());
        assert_eq!(Message::decode_payload(MessageType::Prediction, &p).unwrap(), m);
    }

    #[test]
    fn truncated_and_trailing_payloads_rejected() {
        let m = Message::LossAndGrad {
            party: PartyId(2),
            nonce: RoundNonce::new(0, 0),
            loss: 0.25,
            grad: Tensor::zeros(vec![2, 2]),
        };
        let mut p = m.encode_payload();
        assert!(Message::decode_payload(MessageType::LossAndGrad, &p[..p.len() - 1]).is_err());
        p.push(0);
        assert!(Message::decode_payload(MessageType::LossAndGrad, &p).is_err());
    }

    #[test]
    fn absurd_shape_rejected_without_allocating() {
        let mut p = vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        p.extend_from_slice(&[2, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff]);
        assert!(Message::decode_payload(MessageType::Prediction, &p).is_err());
    }
}
