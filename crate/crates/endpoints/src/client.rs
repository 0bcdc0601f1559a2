use std::collections::BTreeSet;

use icoap_codec::{
    uri_to_options, CoapMessage, CoapUri, Code, MessageType, OBSERVE_DEREGISTER, OBSERVE_REGISTER,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientAction {
    Get(CoapUri),
    Put(CoapUri, Vec<u8>),
    Observe(CoapUri),
    Unobserve(CoapUri),
}

impl ClientAction {
    pub fn uri(&self) -> &CoapUri {
        match self {
            Self::Get(u) | Self::Put(u, _) | Self::Observe(u) | Self::Unobserve(u) => u,
        }
    }
}

/// Append-only record of what a client sent and received.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientLog {
    pub sent: Vec<(u64, CoapMessage)>,
    pub received: Vec<(u64, CoapMessage)>,
}

#[derive(Debug, Clone)]
pub struct Client {
    id: String,
    ordinal: u16,
    seq: u16,
    next_mid: u16,
    issued: BTreeSet<Vec<u8>>,
    log: ClientLog,
}

impl Client {
    /// `ordinal` distinguishes clients in their tokens; it should be unique
    /// within a simulation.
    pub fn new(id: impl Into<String>, ordinal: u16) -> Self {
        Self {
            id: id.into(),
            ordinal,
            seq: 0,
            next_mid: 1,
            issued: BTreeSet::new(),
            log: ClientLog::default(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn log(&self) -> &ClientLog {
        &self.log
    }

    /// Token for the next request: ordinal followed by a per-client sequence.
    fn fresh_token(&mut self) -> Vec<u8> {
        self.seq = self.seq.wrapping_add(1);
        let mut token = self.ordinal.to_be_bytes().to_vec();
        token.extend_from_slice(&self.seq.to_be_bytes());
        token
    }

    pub fn issue(&mut self, action: &ClientAction, at: u64) -> CoapMessage {
        let token = self.fresh_token();
        let mid = self.next_mid;
        self.next_mid = self.next_mid.wrapping_add(1);
        let code = match action {
            ClientAction::Put(..) => Code::PUT,
            _ => Code::GET,
        };
        let mut msg = CoapMessage::new(MessageType::Confirmable, code, mid)
            .with_token(token.clone())
            .with_options(uri_to_options(action.uri()));
        match action {
            ClientAction::Put(_, payload) => msg.payload = payload.clone(),
            ClientAction::Observe(_) => msg.set_observe(Some(OBSERVE_REGISTER)),
            ClientAction::Unobserve(_) => msg.set_observe(Some(OBSERVE_DEREGISTER)),
            ClientAction::Get(_) => {}
        }
        self.issued.insert(token);
        self.log.sent.push((at, msg.clone()));
        msg
    }

    /// Records a received message. Returns false if it carries a token this
    /// client never issued (empty messages are matched by message ID and
    /// always accepted).
    pub fn receive(&mut self, msg: CoapMessage, at: u64) -> bool {
        let known = msg.is_empty_message() || self.issued.contains(&msg.token);
        self.log.received.push((at, msg));
        known
    }
}
