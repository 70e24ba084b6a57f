//! Wire frame:
//!
//! ```text
//! magic "VFMH" | version u8 = 1 | msg_type u8 | sender u16 LE | payload_len u32 LE | payload
//! ```

use std::io::{self, Read, Write};

use super::{Message, MessageType, PartyId};

pub const MAGIC: [u8; 4] = *b"VFMH";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB frame limit")]
    Oversize(usize),
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("malformed payload: {0}")]
    Payload(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub sender: PartyId,
    pub message: Message,
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let payload = self.message.encode_payload();
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::Oversize(payload.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.message.kind() as u8);
        out.extend_from_slice(&self.sender.0.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let header = parse_header(bytes)?;
        let have = bytes.len() - HEADER_LEN;
        if have != header.payload_len {
            return Err(FrameError::Truncated {
                need: HEADER_LEN + header.payload_len,
                have: bytes.len(),
            });
        }
        let message = Message::decode_payload(header.kind, &bytes[HEADER_LEN..])?;
        Ok(Frame {
            sender: header.sender,
            message,
        })
    }
}

struct Header {
    kind: MessageType,
    sender: PartyId,
    payload_len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            need: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(FrameError::BadVersion(bytes[4]));
    }
    let kind = MessageType::from_u8(bytes[5]).ok_or(FrameError::UnknownType(bytes[5]))?;
    let sender = PartyId(u16::from_le_bytes([bytes[6], bytes[7]]));
    let payload_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(payload_len));
    }
    Ok(Header {
        kind,
        sender,
        payload_len,
    })
}

/// Reads one frame from a stream. Returns the frame and its size on the wire.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Result<(Frame, usize), FrameError>> {
    let mut header = [0u8; HEADER_LEN];
    reader.read_exact(&mut header)?;
    let parsed = match parse_header(&header) {
        Ok(h) => h,
        Err(e) => return Ok(Err(e)),
    };
    let mut buf = vec![0u8; HEADER_LEN + parsed.payload_len];
    buf[..HEADER_LEN].copy_from_slice(&header);
    reader.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(Frame::decode(&buf).map(|f| (f, buf.len())))
}

pub fn write_frame<W: Write>(writer: &mut W, bytes: &[u8]) -> io::Result<()> {
    writer.write_all(bytes)?;
    writer.flush()
}
