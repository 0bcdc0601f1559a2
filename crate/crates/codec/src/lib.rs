//! The subset of the CoAP wire format used by the proxy: the fixed header,
//! tokens, delta-encoded options (Uri-Host, Observe, Uri-Path and
//! Content-Format are interpreted, everything else is carried opaquely)
//! and payloads.

pub mod message;
pub mod uri;
pub mod wire;

pub use message::{
    decode_uint, encode_uint, option, CoapMessage, CoapOption, Code, MessageType, MAX_TOKEN_LEN,
    OBSERVE_DEREGISTER, OBSERVE_MODULUS, OBSERVE_REGISTER, VERSION,
};
pub use uri::{options_to_uri, parse_uri, uri_to_options, CoapUri, UriError};
pub use wire::{decode, encode, DecodeError, EncodeError};
