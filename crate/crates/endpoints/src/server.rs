//! A standard CoAP server: path-based dispatch over a resource tree, with
//! delayed (separate) responses and Observe. It has no notion of groups.

use std::collections::BTreeMap;

use thiserror::Error;

use icoap_codec::{
    option, CoapMessage, CoapOption, Code, MessageType, OBSERVE_DEREGISTER, OBSERVE_REGISTER,
};

/// First Observe value a server hands out; 0 and 1 are request markers.
pub const FIRST_OBSERVE_SEQ: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServerError {
    #[error("server {server} has no resource at /{path}")]
    UnknownPath { server: String, path: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resource {
    pub path: Vec<String>,
    pub value: Vec<u8>,
    pub observable: bool,
    /// GETs before this time get an empty ACK and a separate response.
    pub ready_at: Option<u64>,
    observe_seq: u32,
}

impl Resource {
    pub fn new(path: Vec<String>, value: impl Into<Vec<u8>>) -> Self {
        Self {
            path,
            value: value.into(),
            observable: false,
            ready_at: None,
            observe_seq: FIRST_OBSERVE_SEQ,
        }
    }

    pub fn observable(mut self, observable: bool) -> Self {
        self.observable = observable;
        self
    }

    pub fn ready_at(mut self, at: Option<u64>) -> Self {
        self.ready_at = at;
        self
    }

    pub fn observe_seq(&self) -> u32 {
        self.observe_seq
    }

    fn is_ready(&self, at: u64) -> bool {
        self.ready_at.is_none_or(|t| t <= at)
    }
}

/// What a server emits for one request: an optional immediate reply and
/// messages to be sent at later (or equal) times.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerReply {
    pub immediate: Option<CoapMessage>,
    pub scheduled: Vec<(u64, CoapMessage)>,
}

#[derive(Debug, Clone)]
pub struct Server {
    id: String,
    resources: BTreeMap<Vec<String>, Resource>,
    /// Observer tokens per resource path.
    registrations: BTreeMap<Vec<String>, Vec<Vec<u8>>>,
    next_mid: u16,
}

impl Server {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            resources: BTreeMap::new(),
            registrations: BTreeMap::new(),
            next_mid: 1,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn add_resource(&mut self, resource: Resource) {
        self.resources.insert(resource.path.clone(), resource);
    }

    pub fn resource(&self, path: &[String]) -> Option<&Resource> {
        self.resources.get(path)
    }

    pub fn resource_paths(&self) -> impl Iterator<Item = &Vec<String>> {
        self.resources.keys()
    }

    pub fn registrations(&self, path: &[String]) -> &[Vec<u8>] {
        self.registrations.get(path).map_or(&[], Vec::as_slice)
    }

    pub fn registration_count(&self) -> usize {
        self.registrations.values().map(Vec::len).sum()
    }

    pub fn max_registrations_per_resource(&self) -> usize {
        self.registrations.values().map(Vec::len).max().unwrap_or(0)
    }

    fn fresh_mid(&mut self) -> u16 {
        let mid = self.next_mid;
        self.next_mid = self.next_mid.wrapping_add(1);
        mid
    }

    /// Builds a response to `req`: piggybacked on an ACK for CON requests,
    /// a NON with a fresh message ID otherwise.
    fn respond(&mut self, req: &CoapMessage, code: Code) -> CoapMessage {
        let (mtype, mid) = match req.mtype {
            MessageType::Confirmable => (MessageType::Acknowledgement, req.message_id),
            _ => (MessageType::NonConfirmable, self.fresh_mid()),
        };
        CoapMessage::new(mtype, code, mid).with_token(req.token.clone())
    }

    pub fn handle(&mut self, req: &CoapMessage, at: u64) -> ServerReply {
        if !matches!(
            req.mtype,
            MessageType::Confirmable | MessageType::NonConfirmable
        ) || !req.code.is_request()
        {
            return ServerReply::default();
        }
        let path: Vec<String> = req
            .option_values(option::URI_PATH)
            .map(|s| String::from_utf8_lossy(s).into_owned())
            .collect();

        match req.code {
            Code::GET => self.handle_get(req, path, at),
            Code::PUT => self.handle_put(req, path, at),
            _ => ServerReply {
                immediate: Some(self.respond(req, Code::METHOD_NOT_ALLOWED)),
                scheduled: Vec::new(),
            },
        }
    }

    fn handle_get(&mut self, req: &CoapMessage, path: Vec<String>, at: u64) -> ServerReply {
        let Some(resource) = self.resources.get(&path) else {
            return ServerReply {
                immediate: Some(self.respond(req, Code::NOT_FOUND)),
                scheduled: Vec::new(),
            };
        };
        let observable = resource.observable;
        let seq = resource.observe_seq;
        let value = resource.value.clone();
        let ready_at = resource.ready_at.filter(|_| !resource.is_ready(at));

        let registered = match req.observe() {
            Some(OBSERVE_REGISTER) if observable => {
                let tokens = self.registrations.entry(path.clone()).or_default();
                if !tokens.contains(&req.token) {
                    tokens.push(req.token.clone());
                }
                true
            }
            Some(OBSERVE_DEREGISTER) => {
                if let Some(tokens) = self.registrations.get_mut(&path) {
                    tokens.retain(|t| *t != req.token);
                    if tokens.is_empty() {
                        self.registrations.remove(&path);
                    }
                }
                false
            }
            _ => false,
        };

        let finish = |mut msg: CoapMessage| {
            if registered {
                msg.add_option(CoapOption::observe(seq));
            }
            msg.with_payload(value.clone())
        };

        match ready_at {
            None => {
                let msg = self.respond(req, Code::CONTENT);
                ServerReply {
                    immediate: Some(finish(msg)),
                    scheduled: Vec::new(),
                }
            }
            Some(when) => {
                let immediate = (req.mtype == MessageType::Confirmable)
                    .then(|| CoapMessage::empty_ack(req.message_id));
                let mtype = match req.mtype {
                    MessageType::Confirmable => MessageType::Confirmable,
                    _ => MessageType::NonConfirmable,
                };
                let separate = CoapMessage::new(mtype, Code::CONTENT, self.fresh_mid())
                    .with_token(req.token.clone());
                ServerReply {
                    immediate,
                    scheduled: vec![(when, finish(separate))],
                }
            }
        }
    }

    fn handle_put(&mut self, req: &CoapMessage, path: Vec<String>, at: u64) -> ServerReply {
        if !self.resources.contains_key(&path) {
            return ServerReply {
                immediate: Some(self.respond(req, Code::NOT_FOUND)),
                scheduled: Vec::new(),
            };
        }
        let immediate = Some(self.respond(req, Code::CHANGED));
        let notifications = self
            .update_resource(&path, req.payload.clone())
            .expect("path checked above");
        ServerReply {
            immediate,
            scheduled: notifications.into_iter().map(|n| (at, n)).collect(),
        }
    }

    /// Replaces a resource value and returns one notification per
    /// registered observer. Identical values still notify.
    pub fn update_resource(
        &mut self,
        path: &[String],
        value: impl Into<Vec<u8>>,
    ) -> Result<Vec<CoapMessage>, ServerError> {
        let resource = self
            .resources
            .get_mut(path)
            .ok_or_else(|| ServerError::UnknownPath {
                server: self.id.clone(),
                path: path.join("/"),
            })?;
        resource.value = value.into();
        let tokens = self.registrations.get(path).cloned().unwrap_or_default();
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        resource.observe_seq += 1;
        let seq = resource.observe_seq;
        let value = resource.value.clone();
        Ok(tokens
            .into_iter()
            .map(|token| {
                CoapMessage::new(MessageType::Confirmable, Code::CONTENT, self.fresh_mid())
                    .with_token(token)
                    .with_option(CoapOption::observe(seq))
                    .with_payload(value.clone())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(p: &str) -> Vec<String> {
        vec![p.to_string()]
    }

    fn get(p: &str, mid: u16, token: &[u8]) -> CoapMessage {
        CoapMessage::new(MessageType::Confirmable, Code::GET, mid)
            .with_token(token.to_vec())
            .with_option(CoapOption::uri_path(p))
    }

    fn server() -> Server {
        let mut s = Server::new("S1");
        s.add_resource(Resource::new(path("temperature"), "22").observable(true));
        s
    }

    #[test]
    fn immediate_get_is_piggybacked() {
        let mut s = server();
        let reply = s.handle(&get("temperature", 5, &[0xab]), 10);
        let msg = reply.immediate.unwrap();
        assert_eq!(msg.mtype, MessageType::Acknowledgement);
        assert_eq!(msg.code, Code::CONTENT);
        assert_eq!(msg.message_id, 5);
        assert_eq!(msg.token, vec![0xab]);
        assert_eq!(msg.payload, b"22");
        assert!(reply.scheduled.is_empty());
    }

    #[test]
    fn delayed_get_acks_then_answers_with_same_token() {
        let mut s = Server::new("S1");
        s.add_resource(Resource::new(path("temperature"), "22").ready_at(Some(60)));
        let reply = s.handle(&get("temperature", 5, &[0xab]), 10);
        assert_eq!(reply.immediate, Some(CoapMessage::empty_ack(5)));
        let [(when, sep)] = reply.scheduled.as_slice() else {
            panic!("expected one separate response")
        };
        assert_eq!(*when, 60);
        assert_eq!(sep.mtype, MessageType::Confirmable);
        assert_eq!(sep.code, Code::CONTENT);
        assert_eq!(sep.token, vec![0xab]);
        // once ready the same resource answers immediately
        assert!(s
            .handle(&get("temperature", 6, &[1]), 60)
            .scheduled
            .is_empty());
    }

    #[test]
    fn missing_resource_is_not_found() {
        let mut s = server();
        let msg = s.handle(&get("nope", 1, &[1]), 0).immediate.unwrap();
        assert_eq!(msg.code, Code::NOT_FOUND);
    }

    #[test]
    fn unsupported_method() {
        let mut s = server();
        let req = CoapMessage::new(MessageType::Confirmable, Code::DELETE, 1)
            .with_option(CoapOption::uri_path("temperature"));
        assert_eq!(
            s.handle(&req, 0).immediate.unwrap().code,
            Code::METHOD_NOT_ALLOWED
        );
    }

    #[test]
    fn observe_register_notify_deregister() {
        let mut s = server();
        let mut req = get("temperature", 1, &[7]);
        req.set_observe(Some(OBSERVE_REGISTER));
        let first = s.handle(&req, 0).immediate.unwrap();
        assert_eq!(first.observe(), Some(FIRST_OBSERVE_SEQ));
        assert_eq!(s.registrations(&path("temperature")), &[vec![7]]);

        let n1 = s.update_resource(&path("temperature"), "23").unwrap();
        let n2 = s.update_resource(&path("temperature"), "23").unwrap();
        assert_eq!(n1.len(), 1);
        assert_eq!(n2.len(), 1, "identical value still notifies");
        assert!(n2[0].observe() > n1[0].observe());
        assert!(n1[0].observe() > first.observe());
        assert_eq!(n1[0].token, vec![7]);

        let mut dereg = get("temperature", 2, &[7]);
        dereg.set_observe(Some(OBSERVE_DEREGISTER));
        let reply = s.handle(&dereg, 5).immediate.unwrap();
        assert_eq!(reply.observe(), None);
        assert_eq!(reply.code, Code::CONTENT);
        assert_eq!(s.registration_count(), 0);
    }

    #[test]
    fn unregistered_update_emits_nothing() {
        let mut s = server();
        assert!(s
            .update_resource(&path("temperature"), "1")
            .unwrap()
            .is_empty());
        assert!(s.update_resource(&path("nope"), "1").is_err());
    }

    #[test]
    fn observe_on_plain_resource_is_plain_get() {
        let mut s = Server::new("S1");
        s.add_resource(Resource::new(path("t"), "1"));
        let mut req = get("t", 1, &[1]);
        req.set_observe(Some(OBSERVE_REGISTER));
        assert_eq!(s.handle(&req, 0).immediate.unwrap().observe(), None);
        assert_eq!(s.registration_count(), 0);
    }

    #[test]
    fn put_changes_value_and_notifies() {
        let mut s = server();
        let mut reg = get("temperature", 1, &[9]);
        reg.set_observe(Some(OBSERVE_REGISTER));
        s.handle(&reg, 0);
        let put = CoapMessage::new(MessageType::Confirmable, Code::PUT, 2)
            .with_token(vec![3])
            .with_option(CoapOption::uri_path("temperature"))
            .with_payload("30");
        let reply = s.handle(&put, 4);
        assert_eq!(reply.immediate.unwrap().code, Code::CHANGED);
        assert_eq!(reply.scheduled.len(), 1);
        assert_eq!(reply.scheduled[0].0, 4);
        assert_eq!(s.resource(&path("temperature")).unwrap().value, b"30");
    }
}
