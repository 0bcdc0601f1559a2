//! In-memory representation of a CoAP message.

use std::fmt;

/// CoAP protocol version carried in every header.
pub const VERSION: u8 = 1;

/// Maximum token length permitted by the header's 4-bit TKL field.
pub const MAX_TOKEN_LEN: usize = 8;

/// Option numbers interpreted by this crate.
pub mod option {
    pub const URI_HOST: u16 = 3;
    pub const OBSERVE: u16 = 6;
    pub const URI_PATH: u16 = 11;
    pub const CONTENT_FORMAT: u16 = 12;
}

/// Observe option values used in requests.
pub const OBSERVE_REGISTER: u32 = 0;
pub const OBSERVE_DEREGISTER: u32 = 1;

/// Observe sequence numbers live in a 24-bit space.
pub const OBSERVE_MODULUS: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageType {
    Confirmable,
    NonConfirmable,
    Acknowledgement,
    Reset,
}

impl MessageType {
    pub fn from_bits(bits: u8) -> Self {
        match bits & 0x03 {
            0 => Self::Confirmable,
            1 => Self::NonConfirmable,
            2 => Self::Acknowledgement,
            _ => Self::Reset,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Self::Confirmable => 0,
            Self::NonConfirmable => 1,
            Self::Acknowledgement => 2,
            Self::Reset => 3,
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Confirmable => "CON",
            Self::NonConfirmable => "NON",
            Self::Acknowledgement => "ACK",
            Self::Reset => "RST",
        })
    }
}

/// Request method or response code, `class.detail`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Code(u8);

impl Code {
    pub const EMPTY: Code = Code::new(0, 0);
    pub const GET: Code = Code::new(0, 1);
    pub const POST: Code = Code::new(0, 2);
    pub const PUT: Code = Code::new(0, 3);
    pub const DELETE: Code = Code::new(0, 4);
    pub const CHANGED: Code = Code::new(2, 4);
    pub const CONTENT: Code = Code::new(2, 5);
    pub const BAD_REQUEST: Code = Code::new(4, 0);
    pub const NOT_FOUND: Code = Code::new(4, 4);
    pub const METHOD_NOT_ALLOWED: Code = Code::new(4, 5);

    /// Class is truncated to 3 bits and detail to 5 bits.
    pub const fn new(class: u8, detail: u8) -> Self {
        Code(((class & 0x07) << 5) | (detail & 0x1f))
    }

    pub const fn from_byte(byte: u8) -> Self {
        Code(byte)
    }

    pub const fn byte(self) -> u8 {
        self.0
    }

    pub const fn class(self) -> u8 {
        self.0 >> 5
    }

    pub const fn detail(self) -> u8 {
        self.0 & 0x1f
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_request(self) -> bool {
        self.class() == 0 && self.detail() != 0
    }

    pub fn is_response(self) -> bool {
        self.class() >= 2
    }

    pub fn is_success(self) -> bool {
        self.class() == 2
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class(), self.detail())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

impl CoapOption {
    pub fn new(number: u16, value: impl Into<Vec<u8>>) -> Self {
        Self {
            number,
            value: value.into(),
        }
    }

    pub fn uri_host(host: &str) -> Self {
        Self::new(option::URI_HOST, host.as_bytes())
    }

    pub fn uri_path(segment: &str) -> Self {
        Self::new(option::URI_PATH, segment.as_bytes())
    }

    pub fn observe(value: u32) -> Self {
        Self::new(option::OBSERVE, encode_uint(value % OBSERVE_MODULUS))
    }

    pub fn content_format(format: u16) -> Self {
        Self::new(option::CONTENT_FORMAT, encode_uint(u32::from(format)))
    }

    fn name(&self) -> Option<&'static str> {
        match self.number {
            option::URI_HOST => Some("Uri-Host"),
            option::OBSERVE => Some("Observe"),
            option::URI_PATH => Some("Uri-Path"),
            option::CONTENT_FORMAT => Some("Content-Format"),
            _ => None,
        }
    }
}

impl fmt::Display for CoapOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.name(), self.number) {
            (Some(name), option::URI_HOST | option::URI_PATH) => {
                write!(f, "{name}={}", String::from_utf8_lossy(&self.value))
            }
            (Some(name), _) => match decode_uint(&self.value) {
                Some(v) => write!(f, "{name}={v}"),
                None => write!(f, "{name}=0x{}", hex::encode(&self.value)),
            },
            (None, n) => write!(f, "opt{n}=0x{}", hex::encode(&self.value)),
        }
    }
}

/// Minimal big-endian unsigned integer encoding; zero encodes as no bytes.
pub fn encode_uint(value: u32) -> Vec<u8> {
    let bytes = value.to_be_bytes();
    let skip = bytes.iter().take_while(|b| **b == 0).count();
    bytes[skip..].to_vec()
}

/// Inverse of [`encode_uint`]. Returns `None` for values wider than 4 bytes.
pub fn decode_uint(bytes: &[u8]) -> Option<u32> {
    if bytes.len() > 4 {
        return None;
    }
    Some(bytes.iter().fold(0u32, |acc, b| (acc << 8) | u32::from(*b)))
}

/// A CoAP message. Options are kept sorted by number; options with the same
/// number keep their insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoapMessage {
    pub mtype: MessageType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    pub fn new(mtype: MessageType, code: Code, message_id: u16) -> Self {
        Self {
            mtype,
            code,
            message_id,
            token: Vec::new(),
            options: Vec::new(),
            payload: Vec::new(),
        }
    }

    /// An empty ACK (code 0.00) acknowledging `message_id`.
    pub fn empty_ack(message_id: u16) -> Self {
        Self::new(MessageType::Acknowledgement, Code::EMPTY, message_id)
    }

    pub fn with_token(mut self, token: impl Into<Vec<u8>>) -> Self {
        self.token = token.into();
        self
    }

    pub fn with_option(mut self, opt: CoapOption) -> Self {
        self.add_option(opt);
        self
    }

    pub fn with_options(mut self, opts: impl IntoIterator<Item = CoapOption>) -> Self {
        for opt in opts {
            self.add_option(opt);
        }
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    pub fn options(&self) -> &[CoapOption] {
        &self.options
    }

    /// Inserts after any existing options with the same number.
    pub fn add_option(&mut self, opt: CoapOption) {
        let at = self.options.partition_point(|o| o.number <= opt.number);
        self.options.insert(at, opt);
    }

    pub fn remove_option(&mut self, number: u16) {
        self.options.retain(|o| o.number != number);
    }

    pub fn option_values(&self, number: u16) -> impl Iterator<Item = &[u8]> {
        self.options
            .iter()
            .filter(move |o| o.number == number)
            .map(|o| o.value.as_slice())
    }

    pub fn first_option(&self, number: u16) -> Option<&[u8]> {
        self.option_values(number).next()
    }

    /// Observe value, if the option is present and well formed.
    pub fn observe(&self) -> Option<u32> {
        self.first_option(option::OBSERVE).and_then(decode_uint)
    }

    pub fn set_observe(&mut self, value: Option<u32>) {
        self.remove_option(option::OBSERVE);
        if let Some(v) = value {
            self.add_option(CoapOption::observe(v));
        }
    }

    pub fn is_empty_message(&self) -> bool {
        self.code.is_empty()
    }

    pub fn is_empty_ack(&self) -> bool {
        self.code.is_empty() && self.mtype == MessageType::Acknowledgement
    }
}

impl fmt::Display for CoapMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} mid={}", self.mtype, self.code, self.message_id)?;
        if !self.token.is_empty() {
            write!(f, " tok={}", hex::encode(&self.token))?;
        }
        for opt in &self.options {
            write!(f, " {opt}")?;
        }
        if !self.payload.is_empty() {
            match std::str::from_utf8(&self.payload) {
                Ok(text) if text.chars().all(|c| c.is_ascii_graphic() || c == ' ') => {
                    write!(f, " payload={text:?}")?
                }
                _ => write!(f, " payload=0x{}", hex::encode(&self.payload))?,
            }
        }
        Ok(())
    }
}
