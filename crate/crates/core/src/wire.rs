//! Length-prefixed binary messages spoken between the control server and
//! AWG / DC-source endpoints.
//!
//! ```text
//! [total_len u32][opcode u16][request_id u16][body]
//! ```
//!
//! All integers are little-endian with no padding. `total_len` counts the
//! opcode, request id and body (everything after itself). A response echoes
//! the request id, sets bit 15 of the opcode and carries a one-byte status
//! followed by an opcode-specific payload.
//!
//! | opcode | name        | request body                                  |
//! |--------|-------------|-----------------------------------------------|
//! | 0x0001 | UPLOAD_WAVE | `slot u16, sample_count u32, codes i16[]`     |
//! | 0x0002 | SET_OFFSET  | `channel u8, code i16`                        |
//! | 0x0003 | SET_DELAY   | `channel u8, samples u32`                     |
//! | 0x0004 | SET_TRIG    | `mode u8`                                     |
//! | 0x0005 | PLAY        | `channel u8, slot u16`                        |
//! | 0x0010 | DC_SET      | `channel u8, microvolts i64`                  |
//! | 0x0020 | READ_WAVE   | `slot u16` (response payload: `codes i16[]`)  |
//! | 0x00FF | PING        | empty                                         |

use std::io::{self, Read, Write};

use thiserror::Error;

pub const HEADER_LEN: usize = 8;
pub const RESPONSE_FLAG: u16 = 0x8000;
/// Default cap on a single body when reading from a stream.
pub const DEFAULT_MAX_BODY: usize = 64 << 20;

pub mod opcode {
    pub const UPLOAD_WAVE: u16 = 0x0001;
    pub const SET_OFFSET: u16 = 0x0002;
    pub const SET_DELAY: u16 = 0x0003;
    pub const SET_TRIG: u16 = 0x0004;
    pub const PLAY: u16 = 0x0005;
    pub const DC_SET: u16 = 0x0010;
    pub const READ_WAVE: u16 = 0x0020;
    pub const PING: u16 = 0x00FF;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("short buffer: need {needed} bytes, have {have}")]
    Short { needed: usize, have: usize },
    #[error("length field {0} is smaller than the 4-byte opcode/request-id block")]
    LengthMismatch(u32),
    #[error("body of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("unknown opcode {0:#06x}")]
    UnknownOpcode(u16),
    #[error("malformed {what} body: {reason}")]
    MalformedBody { what: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub opcode: u16,
    pub request_id: u16,
    pub body: Vec<u8>,
}

impl WireMessage {
    pub fn new(opcode: u16, request_id: u16, body: Vec<u8>) -> Self {
        Self {
            opcode,
            request_id,
            body,
        }
    }

    pub fn total_len(&self) -> u32 {
        (4 + self.body.len()) as u32
    }

    pub fn is_response(&self) -> bool {
        self.opcode & RESPONSE_FLAG != 0
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(&self.total_len().to_le_bytes());
        h[4..6].copy_from_slice(&self.opcode.to_le_bytes());
        h[6..8].copy_from_slice(&self.request_id.to_le_bytes());
        h
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(HEADER_LEN + self.body.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.body);
    }

    /// Writes header and body without concatenating them first.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.header())?;
        w.write_all(&self.body)
    }
}

pub fn encode_message(m: &WireMessage) -> Vec<u8> {
    let mut out = Vec::new();
    m.encode_into(&mut out);
    out
}

/// Decodes one message from the front of `buf`, returning it and the number
/// of bytes consumed. Never returns a partially filled message.
pub fn decode_message(buf: &[u8]) -> Result<(WireMessage, usize), WireError> {
    if buf.len() < HEADER_LEN {
        return Err(WireError::Short {
            needed: HEADER_LEN,
            have: buf.len(),
        });
    }
    let total = u32::from_le_bytes(buf[..4].try_into().unwrap());
    if total < 4 {
        return Err(WireError::LengthMismatch(total));
    }
    let end = 4usize
        .checked_add(total as usize)
        .ok_or(WireError::TooLarge(total as usize))?;
    if buf.len() < end {
        return Err(WireError::Short {
            needed: end,
            have: buf.len(),
        });
    }
    let opcode = u16::from_le_bytes([buf[4], buf[5]]);
    let request_id = u16::from_le_bytes([buf[6], buf[7]]);
    Ok((
        WireMessage {
            opcode,
            request_id,
            body: buf[HEADER_LEN..end].to_vec(),
        },
        end,
    ))
}

/// Reads exactly one message from a byte stream. A stream that ends inside
/// a message yields `UnexpectedEof`; decode failures map to `InvalidData`.
pub fn read_message<R: Read>(r: &mut R, max_body: usize) -> io::Result<WireMessage> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let total = u32::from_le_bytes(header[..4].try_into().unwrap());
    if total < 4 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            WireError::LengthMismatch(total),
        ));
    }
    let body_len = total as usize - 4;
    if body_len > max_body {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            WireError::TooLarge(body_len),
        ));
    }
    let mut body = vec![0u8; body_len];
    r.read_exact(&mut body)?;
    Ok(WireMessage {
        opcode: u16::from_le_bytes([header[4], header[5]]),
        request_id: u16::from_le_bytes([header[6], header[7]]),
        body,
    })
}

/// A typed request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    UploadWave { slot: u16, codes: Vec<i16> },
    SetOffset { channel: u8, code: i16 },
    SetDelay { channel: u8, samples: u32 },
    SetTrig { mode: u8 },
    Play { channel: u8, slot: u16 },
    DcSet { channel: u8, microvolts: i64 },
    ReadWave { slot: u16 },
    Ping,
}

struct BodyReader<'a> {
    what: &'static str,
    buf: &'a [u8],
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::MalformedBody {
                what: self.what,
                reason: format!("truncated: need {n} more bytes, have {}", self.buf.len()),
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16, WireError> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::MalformedBody {
                what: self.what,
                reason: format!("{} trailing bytes", self.buf.len()),
            })
        }
    }
}

pub fn codes_to_le_bytes(codes: &[i16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len() * 2);
    for c in codes {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn codes_from_le_bytes(bytes: &[u8]) -> Option<Vec<i16>> {
    if bytes.len() % 2 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect(),
    )
}

impl Command {
    pub fn opcode(&self) -> u16 {
        match self {
            Command::UploadWave { .. } => opcode::UPLOAD_WAVE,
            Command::SetOffset { .. } => opcode::SET_OFFSET,
            Command::SetDelay { .. } => opcode::SET_DELAY,
            Command::SetTrig { .. } => opcode::SET_TRIG,
            Command::Play { .. } => opcode::PLAY,
            Command::DcSet { .. } => opcode::DC_SET,
            Command::ReadWave { .. } => opcode::READ_WAVE,
            Command::Ping => opcode::PING,
        }
    }

    pub fn name(&self) -> &'static str {
        opcode_name(self.opcode()).unwrap_or("?")
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self {
            Command::UploadWave { slot, codes } => {
                b.reserve(6 + codes.len() * 2);
                b.extend_from_slice(&slot.to_le_bytes());
                b.extend_from_slice(&(codes.len() as u32).to_le_bytes());
                for c in codes {
                    b.extend_from_slice(&c.to_le_bytes());
                }
            }
            Command::SetOffset { channel, code } => {
                b.push(*channel);
                b.extend_from_slice(&code.to_le_bytes());
            }
            Command::SetDelay { channel, samples } => {
                b.push(*channel);
                b.extend_from_slice(&samples.to_le_bytes());
            }
            Command::SetTrig { mode } => b.push(*mode),
            Command::Play { channel, slot } => {
                b.push(*channel);
                b.extend_from_slice(&slot.to_le_bytes());
            }
            Command::DcSet {
                channel,
                microvolts,
            } => {
                b.push(*channel);
                b.extend_from_slice(&microvolts.to_le_bytes());
            }
            Command::ReadWave { slot } => b.extend_from_slice(&slot.to_le_bytes()),
            Command::Ping => {}
        }
        b
    }

    pub fn to_message(&self, request_id: u16) -> WireMessage {
        WireMessage::new(self.opcode(), request_id, self.encode_body())
    }

    pub fn decode(opcode: u16, body: &[u8]) -> Result<Command, WireError> {
        let what = opcode_name(opcode).ok_or(WireError::UnknownOpcode(opcode))?;
        let mut r = BodyReader { what, buf: body };
        let cmd = match opcode {
            opcode::UPLOAD_WAVE => {
                let slot = r.u16()?;
                let count = r.u32()? as usize;
                let raw = r.take(count.checked_mul(2).ok_or(WireError::TooLarge(count))?)?;
                Command::UploadWave {
                    slot,
                    codes: codes_from_le_bytes(raw).expect("even length"),
                }
            }
            opcode::SET_OFFSET => Command::SetOffset {
                channel: r.u8()?,
                code: r.i16()?,
            },
            opcode::SET_DELAY => Command::SetDelay {
                channel: r.u8()?,
                samples: r.u32()?,
            },
            opcode::SET_TRIG => Command::SetTrig { mode: r.u8()? },
            opcode::PLAY => Command::Play {
                channel: r.u8()?,
                slot: r.u16()?,
            },
            opcode::DC_SET => Command::DcSet {
                channel: r.u8()?,
                microvolts: r.i64()?,
            },
            opcode::READ_WAVE => Command::ReadWave { slot: r.u16()? },
            opcode::PING => Command::Ping,
            _ => unreachable!(),
        };
        r.finish()?;
        Ok(cmd)
    }

    pub fn from_message(m: &WireMessage) -> Result<Command, WireError> {
        Self::decode(m.opcode, &m.body)
    }
}

pub fn opcode_name(op: u16) -> Option<&'static str> {
    Some(match op {
        opcode::UPLOAD_WAVE => "UPLOAD_WAVE",
        opcode::SET_OFFSET => "SET_OFFSET",
        opcode::SET_DELAY => "SET_DELAY",
        opcode::SET_TRIG => "SET_TRIG",
        opcode::PLAY => "PLAY",
        opcode::DC_SET => "DC_SET",
        opcode::READ_WAVE => "READ_WAVE",
        opcode::PING => "PING",
        _ => return None,
    })
}

/// First byte of every response body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    UnknownOpcode = 1,
    Malformed = 2,
    OutOfRange = 3,
}

impl Status {
    pub fn from_byte(b: u8) -> Option<Status> {
        Some(match b {
            0 => Status::Ok,
            1 => Status::UnknownOpcode,
            2 => Status::Malformed,
            3 => Status::OutOfRange,
            _ => return None,
        })
    }
}

pub fn response(request: &WireMessage, status: Status, payload: &[u8]) -> WireMessage {
    let mut body = Vec::with_capacity(1 + payload.len());
    body.push(status as u8);
    body.extend_from_slice(payload);
    WireMessage::new(request.opcode | RESPONSE_FLAG, request.request_id, body)
}

/// Splits a response body into status byte and payload.
pub fn split_response(m: &WireMessage) -> Result<(u8, &[u8]), WireError> {
    match m.body.split_first() {
        Some((s, rest)) => Ok((*s, rest)),
        None => Err(WireError::MalformedBody {
            what: "response",
            reason: "missing status byte".into(),
        }),
    }
}
