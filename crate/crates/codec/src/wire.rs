//! Byte-level encoding of CoAP messages.
//!
//! Layout: a 4-byte header (2-bit version, 2-bit type, 4-bit token length,
//! 8-bit code, 16-bit big-endian message ID), the token, delta-encoded
//! options in ascending number order, and an optional `0xFF` marker
//! followed by a non-empty payload.

use thiserror::Error;

use crate::message::{CoapMessage, CoapOption, Code, MessageType, MAX_TOKEN_LEN, VERSION};

const PAYLOAD_MARKER: u8 = 0xff;
const EXT8_BASE: usize = 13;
const EXT16_BASE: usize = 269;
const MAX_EXTENDED: usize = EXT16_BASE + 0xffff;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("token length {0} exceeds 8 bytes")]
    TokenTooLong(usize),
    #[error("option {number} value of {len} bytes cannot be encoded")]
    OptionTooLong { number: u16, len: usize },
    #[error("empty message (code 0.00) must not carry a token, options or payload")]
    NonEmptyEmptyMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed message: {0}")]
    MalformedMessage(&'static str),
}

fn malformed(reason: &'static str) -> DecodeError {
    DecodeError::MalformedMessage(reason)
}

/// Splits a delta or length into its nibble and extended bytes.
fn extended(value: usize) -> Option<(u8, Vec<u8>)> {
    if value < EXT8_BASE {
        Some((value as u8, Vec::new()))
    } else if value < EXT16_BASE {
        Some((13, vec![(value - EXT8_BASE) as u8]))
    } else if value <= MAX_EXTENDED {
        Some((14, ((value - EXT16_BASE) as u16).to_be_bytes().to_vec()))
    } else {
        None
    }
}

pub fn encode(msg: &CoapMessage) -> Result<Vec<u8>, EncodeError> {
    if msg.token.len() > MAX_TOKEN_LEN {
        return Err(EncodeError::TokenTooLong(msg.token.len()));
    }
    if msg.code.is_empty()
        && (!msg.token.is_empty() || !msg.options().is_empty() || !msg.payload.is_empty())
    {
        return Err(EncodeError::NonEmptyEmptyMessage);
    }

    let mut out = Vec::with_capacity(4 + msg.token.len() + msg.payload.len() + 8);
    out.push((VERSION << 6) | (msg.mtype.bits() << 4) | msg.token.len() as u8);
    out.push(msg.code.byte());
    out.extend_from_slice(&msg.message_id.to_be_bytes());
    out.extend_from_slice(&msg.token);

    let mut previous = 0u16;
    for opt in msg.options() {
        let delta = usize::from(opt.number - previous);
        let len = opt.value.len();
        let (delta_nibble, delta_ext) = extended(delta).ok_or(EncodeError::OptionTooLong {
            number: opt.number,
            len,
        })?;
        let (len_nibble, len_ext) = extended(len).ok_or(EncodeError::OptionTooLong {
            number: opt.number,
            len,
        })?;
        out.push((delta_nibble << 4) | len_nibble);
        out.extend_from_slice(&delta_ext);
        out.extend_from_slice(&len_ext);
        out.extend_from_slice(&opt.value);
        previous = opt.number;
    }

    if !msg.payload.is_empty() {
        out.push(PAYLOAD_MARKER);
        out.extend_from_slice(&msg.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, reason: &'static str) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(malformed(reason))?;
        let slice = self.bytes.get(self.pos..end).ok_or(malformed(reason))?;
        self.pos = end;
        Ok(slice)
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    fn extended(&mut self, nibble: u8) -> Result<usize, DecodeError> {
        match nibble {
            0..=12 => Ok(usize::from(nibble)),
            13 => Ok(EXT8_BASE + usize::from(self.take(1, "option overrun")?[0])),
            14 => {
                let b = self.take(2, "option overrun")?;
                Ok(EXT16_BASE + usize::from(u16::from_be_bytes([b[0], b[1]])))
            }
            _ => Err(malformed("reserved option nibble 15")),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<CoapMessage, DecodeError> {
    if bytes.len() < 4 {
        return Err(malformed("truncated header"));
    }
    if bytes[0] >> 6 != VERSION {
        return Err(malformed("unsupported version"));
    }
    let mtype = MessageType::from_bits(bytes[0] >> 4);
    let tkl = usize::from(bytes[0] & 0x0f);
    if tkl > MAX_TOKEN_LEN {
        return Err(malformed("token length nibble 9..15"));
    }
    let code = Code::from_byte(bytes[1]);
    let message_id = u16::from_be_bytes([bytes[2], bytes[3]]);

    if code.is_empty() && (tkl != 0 || bytes.len() != 4) {
        return Err(malformed("empty message with trailing content"));
    }

    let mut reader = Reader { bytes, pos: 4 };
    let token = reader.take(tkl, "truncated token")?.to_vec();
    let mut msg = CoapMessage::new(mtype, code, message_id).with_token(token);

    let mut number = 0u16;
    while let Some(&head) = reader.rest().first() {
        reader.pos += 1;
        if head == PAYLOAD_MARKER {
            if reader.rest().is_empty() {
                return Err(malformed("payload marker without payload"));
            }
            msg.payload = reader.rest().to_vec();
            break;
        }
        let delta = reader.extended(head >> 4)?;
        let len = reader.extended(head & 0x0f)?;
        number = u16::try_from(usize::from(number) + delta)
            .map_err(|_| malformed("option number overflow"))?;
        let value = reader.take(len, "option overrun")?;
        msg.add_option(CoapOption::new(number, value));
    }
    Ok(msg)
}
