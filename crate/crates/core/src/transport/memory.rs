use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{check_route, Endpoint, Envelope, Frame, Message, NonceGuard, PartyId, TransportError};

/// In-process endpoint backed by channels carrying encoded frames.
pub struct MemoryEndpoint {
    id: PartyId,
    inbox: Receiver<Vec<u8>>,
    peers: BTreeMap<PartyId, Sender<Vec<u8>>>,
    guard: NonceGuard,
}

/// Hub endpoint for the active party plus one endpoint per passive party
/// (ids `1..=passive`).
pub fn memory_star(passive: usize) -> (MemoryEndpoint, Vec<MemoryEndpoint>) {
    let (hub_tx, hub_rx) = mpsc::channel();
    let mut hub_peers = BTreeMap::new();
    let mut spokes = Vec::with_capacity(passive);
    for k in 1..=passive {
        let id = PartyId(k as u16);
        let (tx, rx) = mpsc::channel();
        hub_peers.insert(id, tx);
        spokes.push(MemoryEndpoint {
            id,
            inbox: rx,
            peers: BTreeMap::from([(PartyId::ACTIVE, hub_tx.clone())]),
            guard: NonceGuard::default(),
        });
    }
    let hub = MemoryEndpoint {
        id: PartyId::ACTIVE,
        inbox: hub_rx,
        peers: hub_peers,
        guard: NonceGuard::default(),
    };
    (hub, spokes)
}

impl MemoryEndpoint {
    /// Pushes arbitrary bytes to a peer, bypassing encoding.
    pub fn send_raw(&mut self, to: PartyId, bytes: Vec<u8>) -> Result<(), TransportError> {
        check_route(self.id, to)?;
        let tx = self
            .peers
            .get(&to)
            .ok_or(TransportError::UnknownParty(to.0))?;
        tx.send(bytes).map_err(|_| TransportError::Disconnected)
    }
}

impl Endpoint for MemoryEndpoint {
    fn party(&self) -> PartyId {
        self.id
    }

    fn send(&mut self, to: PartyId, message: &Message) -> Result<usize, TransportError> {
        let bytes = Frame {
            sender: self.id,
            message: message.clone(),
        }
        .encode()?;
        let n = bytes.len();
        self.send_raw(to, bytes)?;
        Ok(n)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Envelope, TransportError> {
        let bytes = self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout(timeout),
            RecvTimeoutError::Disconnected => TransportError::Disconnected,
        })?;
        let frame = match Frame::decode(&bytes) {
            Ok(f) => f,
            Err(e) => {
                // A corrupt frame poisons the link.
                self.peers.clear();
                return Err(e.into());
            }
        };
        check_route(frame.sender, self.id)?;
        self.guard.admit(frame.sender, &frame.message)?;
        Ok(Envelope {
            from: frame.sender,
            message: frame.message,
            bytes: bytes.len(),
        })
    }
}
