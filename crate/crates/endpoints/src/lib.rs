//! Standard CoAP endpoints: servers that speak core CoAP plus Observe and
//! clients that issue scripted requests. Neither knows anything about
//! group names or the network that carries their messages.

mod client;
mod server;

pub use client::{Client, ClientAction, ClientLog};
pub use server::{Resource, Server, ServerError, ServerReply, FIRST_OBSERVE_SEQ};
