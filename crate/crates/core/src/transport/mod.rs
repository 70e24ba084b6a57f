//! Message delivery between the active party (the hub) and passive
//! parties. Only star links exist: passive parties talk to the active party
//! and never to each other. Both transports move the same encoded frames,
//! so byte counts and payloads are identical whichever one is used.

mod frame;
mod memory;
mod message;
mod tcp;

use std::collections::HashMap;
use std::time::Duration;

pub use frame::{read_frame, write_frame, Frame, FrameError, HEADER_LEN, MAGIC, MAX_PAYLOAD, VERSION};
pub use memory::{memory_star, MemoryEndpoint};
pub use message::{Message, MessageType, PartyId, RoundNonce};
pub use tcp::{TcpHub, TcpLink};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("peer disconnected")]
    Disconnected,
    #[error("malformed frame: {0}")]
    Malformed(#[from] FrameError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{from} cannot reach {to} in a star topology")]
    Topology { from: PartyId, to: PartyId },
    #[error("party id {0} connected twice")]
    DuplicateParty(u16),
    #[error("unexpected party id {0}")]
    UnknownParty(u16),
    #[error("replayed {kind} from {from}: round {nonce:?} is not after {last:?}")]
    Replay {
        from: PartyId,
        kind: &'static str,
        nonce: RoundNonce,
        last: RoundNonce,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub from: PartyId,
    pub message: Message,
    /// Size of the frame on the wire.
    pub bytes: usize,
}

/// One party's connection to the star. Endpoints are used from a single
/// thread each.
pub trait Endpoint: Send {
    fn party(&self) -> PartyId;

    /// Sends one message; returns the number of bytes put on the wire.
    fn send(&mut self, to: PartyId, message: &Message) -> Result<usize, TransportError>;

    /// Next message in arrival order, or [`TransportError::Timeout`].
    fn recv(&mut self, timeout: Duration) -> Result<Envelope, TransportError>;
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn party(&self) -> PartyId {
        (**self).party()
    }

    fn send(&mut self, to: PartyId, message: &Message) -> Result<usize, TransportError> {
        (**self).send(to, message)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Envelope, TransportError> {
        (**self).recv(timeout)
    }
}

/// Rejects any round nonce that does not strictly increase per
/// (sender, message type).
#[derive(Debug, Default)]
pub(crate) struct NonceGuard {
    last: HashMap<(PartyId, MessageType), RoundNonce>,
}

impl NonceGuard {
    pub(crate) fn admit(&mut self, from: PartyId, message: &Message) -> Result<(), TransportError> {
        let Some(nonce) = message.nonce() else {
            return Ok(());
        };
        let kind = message.kind();
        if let Some(&last) = self.last.get(&(from, kind)) {
            if nonce <= last {
                return Err(TransportError::Replay {
                    from,
                    kind: kind.name(),
                    nonce,
                    last,
                });
            }
        }
        self.last.insert((from, kind), nonce);
        Ok(())
    }
}

pub(crate) fn check_route(from: PartyId, to: PartyId) -> Result<(), TransportError> {
    if from.is_active() == to.is_active() {
        return Err(TransportError::Topology { from, to });
    }
    Ok(())
}
