//! Network Attachment Point with a CoAP handler.
//!
//! On the client side a NAP wraps each CoAP request into one content item
//! addressed to the identifier of the request's authority, and routes the
//! answers back by a reply identifier it minted for the exchange. On the
//! server side it subscribes to its servers' FQDNs and to every group name
//! its attribute assignments produce, unwraps requests, forwards them to
//! matching servers under fresh tokens, and wraps the answers.
//!
//! Observe is aggregated at both edges. A client-side NAP keeps one
//! upstream registration per resource no matter how many local clients
//! observe it; a server-side NAP keeps one registration per (server,
//! resource) no matter how many NAPs are interested, and publishes every
//! notification once to the resource's notification identifier.
//!
//! Handlers never touch the core or other NAPs directly: they push
//! [`NapAction`]s that the simulation applies.

use std::collections::{BTreeMap, BTreeSet};

use icoap_codec::{
    encode, option, options_to_uri, CoapMessage, CoapOption, CoapUri, Code, MessageType,
    OBSERVE_DEREGISTER, OBSERVE_MODULUS, OBSERVE_REGISTER,
};
use thiserror::Error;

use crate::icn::{ContentItem, ContentKind, IcnError, NodeId};
use crate::namespace::{
    construct_names, identifier_for, matches, AttributeAssignment, AttributeHierarchy, GroupName,
    IcnIdentifier, NamespaceError,
};

/// Logical time after the last activity at which an exchange is dropped.
pub const DEFAULT_EXCHANGE_TIMEOUT: u64 = 250;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NapError {
    #[error("server {0} is already attached")]
    DuplicateServer(String),
    #[error("fqdn {0} is already used by a server on this NAP")]
    DuplicateFqdn(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no pending exchange {0}")]
    UnknownExchange(String),
    #[error("no attached server matches {0}")]
    NoMatchingServer(String),
    #[error("server {server} used unknown token {token}")]
    UnknownToken { server: String, token: String },
    #[error("client {client} is not observing {resource}")]
    NotObserving { client: String, resource: String },
    #[error(transparent)]
    Namespace(#[from] NamespaceError),
    #[error(transparent)]
    Item(#[from] IcnError),
    #[error("cannot encode message: {0}")]
    Encode(#[from] icoap_codec::EncodeError),
}

/// Effects of a NAP handler, applied in order by the caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NapAction {
    Subscribe(IcnIdentifier),
    Unsubscribe(IcnIdentifier),
    Publish(ContentItem),
    ToServer {
        server: String,
        msg: CoapMessage,
    },
    ToClient {
        client: String,
        msg: CoapMessage,
    },
    /// Ask to have [`Nap::expire`] called for the exchange at `at`.
    ArmTimer {
        exchange_id: String,
        at: u64,
    },
    /// A state transition worth recording in a trace.
    Note {
        kind: &'static str,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestOutcome {
    /// A request item was published under this exchange.
    Published(String),
    /// Answered or held locally; nothing entered the core.
    Absorbed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerAttachment {
    pub server: String,
    pub fqdn: String,
    pub resources: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NapConfig {
    pub node: NodeId,
    pub assignments: Vec<AttributeAssignment>,
    pub attached_servers: Vec<ServerAttachment>,
    pub attached_clients: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingExchange {
    pub exchange_id: String,
    pub client: String,
    pub client_token: Vec<u8>,
    pub client_mid: u16,
    pub reply_identifier: IcnIdentifier,
    pub resource: CoapUri,
    pub created_at: u64,
    pub last_activity: u64,
    pub is_observe: bool,
    acked: bool,
}

/// Client-side record of one observed resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObserveAggregation {
    pub resource: CoapUri,
    /// Observer token per local client.
    pub local_observers: BTreeMap<String, Vec<u8>>,
    pub notif_identifier: IcnIdentifier,
    pub last_seq: Option<u32>,
    pub last_notification: Option<CoapMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Waiter {
    reply_to: IcnIdentifier,
    exchange_id: String,
    terminal: bool,
}

/// Server-side record of the single registration held at a server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpstreamRegistration {
    pub resource: CoapUri,
    pub server: String,
    pub server_token: Vec<u8>,
    pub interested_naps: BTreeSet<NodeId>,
    pub last_notification: Option<CoapMessage>,
    /// NAPs that joined before the server's first answer arrived.
    waiting: Vec<Waiter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Plain,
    Register,
    Deregister,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Forwarded {
    exchange_id: String,
    reply_to: IcnIdentifier,
    resource: CoapUri,
    server_mid: u16,
    purpose: Purpose,
    terminal: bool,
}

#[derive(Debug, Clone)]
struct AttachedServer {
    fqdn: String,
    resources: Vec<Vec<String>>,
}

/// Counters for dropped or discarded traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NapStats {
    pub invalid_requests: u64,
    pub unknown_exchange: u64,
    pub no_matching_server: u64,
    pub unknown_token: u64,
    pub not_observing: u64,
    pub stale_notifications: u64,
}

/// Serial-number comparison of Observe values modulo 2^24.
pub fn is_fresher(last: u32, new: u32) -> bool {
    let (v1, v2) = (last % OBSERVE_MODULUS, new % OBSERVE_MODULUS);
    let half = OBSERVE_MODULUS / 2;
    (v1 < v2 && v2 - v1 < half) || (v1 > v2 && v1 - v2 > half)
}

#[derive(Debug, Clone)]
pub struct Nap {
    node: NodeId,
    hierarchy: AttributeHierarchy,
    assignments: Vec<AttributeAssignment>,
    servers: BTreeMap<String, AttachedServer>,
    clients: BTreeSet<String>,
    base_subscriptions: BTreeSet<IcnIdentifier>,
    subscriptions: BTreeSet<IcnIdentifier>,
    pending: BTreeMap<String, PendingExchange>,
    observations: BTreeMap<CoapUri, ObserveAggregation>,
    forwarded: BTreeMap<(String, Vec<u8>), Forwarded>,
    awaiting_ack: BTreeMap<(String, u16), Vec<u8>>,
    upstream: BTreeMap<(String, CoapUri), UpstreamRegistration>,
    exchange_timeout: u64,
    next_exchange: u64,
    next_token: u32,
    next_mid: u16,
    stats: NapStats,
}

/// A stored notification reused as the answer to a new request: the
/// client-side NAP piggybacks it on the client's own CON.
fn cached_answer(mut msg: CoapMessage) -> CoapMessage {
    msg.mtype = MessageType::Acknowledgement;
    msg
}

fn note(out: &mut Vec<NapAction>, kind: &'static str, detail: String) {
    out.push(NapAction::Note { kind, detail });
}

impl Nap {
    pub fn new(
        node: NodeId,
        hierarchy: AttributeHierarchy,
        assignments: Vec<AttributeAssignment>,
    ) -> Result<Self, NapError> {
        for a in &assignments {
            a.validate(&hierarchy)?;
        }
        Ok(Self {
            node,
            hierarchy,
            assignments,
            servers: BTreeMap::new(),
            clients: BTreeSet::new(),
            base_subscriptions: BTreeSet::new(),
            subscriptions: BTreeSet::new(),
            pending: BTreeMap::new(),
            observations: BTreeMap::new(),
            forwarded: BTreeMap::new(),
            awaiting_ack: BTreeMap::new(),
            upstream: BTreeMap::new(),
            exchange_timeout: DEFAULT_EXCHANGE_TIMEOUT,
            next_exchange: 0,
            next_token: 0,
            next_mid: 0,
            stats: NapStats::default(),
        })
    }

    /// Builds a NAP and attaches everything listed in `config`.
    pub fn from_config(
        config: &NapConfig,
        hierarchy: &AttributeHierarchy,
        out: &mut Vec<NapAction>,
    ) -> Result<Self, NapError> {
        let mut nap = Self::new(
            config.node.clone(),
            hierarchy.clone(),
            config.assignments.clone(),
        )?;
        for s in &config.attached_servers {
            nap.attach_server(&s.server, &s.fqdn, s.resources.clone(), out)?;
        }
        for c in &config.attached_clients {
            nap.attach_client(c);
        }
        Ok(nap)
    }

    pub fn with_exchange_timeout(mut self, timeout: u64) -> Self {
        self.exchange_timeout = timeout;
        self
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn stats(&self) -> NapStats {
        self.stats
    }

    pub fn subscriptions(&self) -> &BTreeSet<IcnIdentifier> {
        &self.subscriptions
    }

    /// Subscriptions made when servers were attached.
    pub fn base_subscriptions(&self) -> &BTreeSet<IcnIdentifier> {
        &self.base_subscriptions
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingExchange> {
        self.pending.values()
    }

    pub fn observations(&self) -> impl Iterator<Item = &ObserveAggregation> {
        self.observations.values()
    }

    pub fn upstream_registrations(&self) -> impl Iterator<Item = &UpstreamRegistration> {
        self.upstream.values()
    }

    pub fn attached_servers(&self) -> impl Iterator<Item = (&str, &str)> {
        self.servers
            .iter()
            .map(|(id, s)| (id.as_str(), s.fqdn.as_str()))
    }

    pub fn server_resources(&self, server: &str) -> Option<&[Vec<String>]> {
        self.servers.get(server).map(|s| s.resources.as_slice())
    }

    pub fn attach_client(&mut self, client: &str) {
        self.clients.insert(client.to_string());
    }

    fn subscribe(&mut self, id: IcnIdentifier, out: &mut Vec<NapAction>) {
        if self.subscriptions.insert(id.clone()) {
            out.push(NapAction::Subscribe(id));
        }
    }

    fn unsubscribe(&mut self, id: &IcnIdentifier, out: &mut Vec<NapAction>) {
        if !self.base_subscriptions.contains(id) && self.subscriptions.remove(id) {
            out.push(NapAction::Unsubscribe(id.clone()));
        }
    }

    fn fresh_mid(&mut self) -> u16 {
        self.next_mid = self.next_mid.wrapping_add(1);
        self.next_mid
    }

    /// Server-side tokens: a 0xA5 tag byte and a 32-bit counter.
    fn fresh_token(&mut self) -> Vec<u8> {
        self.next_token = self.next_token.wrapping_add(1);
        let mut token = vec![0xa5];
        token.extend_from_slice(&self.next_token.to_be_bytes());
        token
    }

    #[allow(clippy::too_many_arguments)]
    fn publish(
        &self,
        out: &mut Vec<NapAction>,
        identifier: IcnIdentifier,
        reply_to: Option<IcnIdentifier>,
        kind: ContentKind,
        msg: &CoapMessage,
        exchange_id: &str,
        terminal: bool,
    ) -> Result<(), NapError> {
        let item = ContentItem::new(identifier, reply_to, kind, encode(msg)?, exchange_id)?
            .terminal(terminal);
        out.push(NapAction::Publish(item));
        Ok(())
    }

    /// Copy of `msg` addressed to a client. An ACK is kept as a piggybacked
    /// reply when `piggyback_mid` is given and becomes a NON otherwise.
    fn client_copy(
        &mut self,
        msg: &CoapMessage,
        token: &[u8],
        piggyback_mid: Option<u16>,
    ) -> CoapMessage {
        let mut m = msg.clone();
        if m.is_empty_message() {
            m.message_id = piggyback_mid.unwrap_or_else(|| self.fresh_mid());
            return m;
        }
        m.token = token.to_vec();
        match (m.mtype, piggyback_mid) {
            (MessageType::Acknowledgement, Some(mid)) => m.message_id = mid,
            (MessageType::Acknowledgement, None) => {
                m.mtype = MessageType::NonConfirmable;
                m.message_id = self.fresh_mid();
            }
            _ => m.message_id = self.fresh_mid(),
        }
        m
    }

    /// Subscribes to the server's FQDN and to every group name of this
    /// NAP's assignments. Returns the identifiers that cover the server.
    pub fn attach_server(
        &mut self,
        server: &str,
        fqdn: &str,
        resources: Vec<Vec<String>>,
        out: &mut Vec<NapAction>,
    ) -> Result<BTreeSet<IcnIdentifier>, NapError> {
        if self.servers.contains_key(server) {
            return Err(NapError::DuplicateServer(server.to_string()));
        }
        let fqdn_name = GroupName::from_authority(fqdn)?;
        let fqdn = fqdn_name.to_string();
        if self.servers.values().any(|s| s.fqdn == fqdn) {
            return Err(NapError::DuplicateFqdn(fqdn));
        }
        let mut ids = BTreeSet::from([identifier_for(&fqdn_name)]);
        for a in &self.assignments {
            ids.extend(
                construct_names(&self.hierarchy, a)?
                    .iter()
                    .map(identifier_for),
            );
        }
        note(out, "attach-server", format!("{server} fqdn={fqdn}"));
        for id in &ids {
            self.base_subscriptions.insert(id.clone());
            self.subscribe(id.clone(), out);
        }
        self.servers
            .insert(server.to_string(), AttachedServer { fqdn, resources });
        Ok(ids)
    }

    fn request_uri(&mut self, msg: &CoapMessage) -> Result<CoapUri, NapError> {
        if !msg.code.is_request() {
            self.stats.invalid_requests += 1;
            return Err(NapError::InvalidRequest(format!(
                "code {} is not a request",
                msg.code
            )));
        }
        options_to_uri(msg).map_err(|e| {
            self.stats.invalid_requests += 1;
            NapError::InvalidRequest(e.to_string())
        })
    }

    fn open_exchange(
        &mut self,
        client: &str,
        msg: &CoapMessage,
        resource: CoapUri,
        is_observe: bool,
        at: u64,
        out: &mut Vec<NapAction>,
    ) -> Result<String, NapError> {
        self.next_exchange += 1;
        let exchange_id = format!("{}:{}", self.node, self.next_exchange);
        let reply = IcnIdentifier::reply(self.node.as_str(), &exchange_id);
        let target = identifier_for(&GroupName::from_authority(resource.authority())?);
        note(
            out,
            "exchange-open",
            format!("{exchange_id} client={client} resource={resource}"),
        );
        self.subscribe(reply.clone(), out);
        self.publish(
            out,
            target,
            Some(reply.clone()),
            ContentKind::Request,
            msg,
            &exchange_id,
            false,
        )?;
        out.push(NapAction::ArmTimer {
            exchange_id: exchange_id.clone(),
            at: at + self.exchange_timeout,
        });
        self.pending.insert(
            exchange_id.clone(),
            PendingExchange {
                exchange_id: exchange_id.clone(),
                client: client.to_string(),
                client_token: msg.token.clone(),
                client_mid: msg.message_id,
                reply_identifier: reply,
                resource,
                created_at: at,
                last_activity: at,
                is_observe,
                acked: false,
            },
        );
        Ok(exchange_id)
    }

    fn close_exchange(&mut self, exchange_id: &str, kind: &'static str, out: &mut Vec<NapAction>) {
        if let Some(ex) = self.pending.remove(exchange_id) {
            self.unsubscribe(&ex.reply_identifier, out);
            note(out, kind, exchange_id.to_string());
        }
    }

    /// A CoAP request from a locally attached client.
    pub fn handle_client_request(
        &mut self,
        client: &str,
        msg: &CoapMessage,
        at: u64,
        out: &mut Vec<NapAction>,
    ) -> Result<RequestOutcome, NapError> {
        let uri = self.request_uri(msg)?;
        GroupName::from_authority(uri.authority())
            .map_err(|e| NapError::InvalidRequest(e.to_string()))?;

        let observe = if msg.code == Code::GET {
            msg.observe()
        } else {
            None
        };
        match observe {
            Some(OBSERVE_DEREGISTER) => self.deregister_observe(client, msg, at, out),
            Some(OBSERVE_REGISTER) => {
                if let Some(entry) = self.observations.get_mut(&uri) {
                    entry
                        .local_observers
                        .insert(client.to_string(), msg.token.clone());
                    let cached = entry.last_notification.clone();
                    note(
                        out,
                        "observe-absorb",
                        format!(
                            "{uri} client={client} observers={}",
                            entry.local_observers.len()
                        ),
                    );
                    if let Some(last) = cached {
                        let mut reply = self.client_copy(&last, &msg.token, None);
                        reply.mtype = MessageType::Acknowledgement;
                        reply.message_id = msg.message_id;
                        out.push(NapAction::ToClient {
                            client: client.to_string(),
                            msg: reply,
                        });
                    }
                    return Ok(RequestOutcome::Absorbed);
                }
                let notif = IcnIdentifier::notification(&uri);
                self.observations.insert(
                    uri.clone(),
                    ObserveAggregation {
                        resource: uri.clone(),
                        local_observers: BTreeMap::from([(client.to_string(), msg.token.clone())]),
                        notif_identifier: notif.clone(),
                        last_seq: None,
                        last_notification: None,
                    },
                );
                note(
                    out,
                    "observe-add",
                    format!("{uri} client={client} observers=1"),
                );
                self.subscribe(notif, out);
                let id = self.open_exchange(client, msg, uri, true, at, out)?;
                Ok(RequestOutcome::Published(id))
            }
            _ => {
                let id = self.open_exchange(client, msg, uri, false, at, out)?;
                Ok(RequestOutcome::Published(id))
            }
        }
    }

    /// Removes `client` as an observer of the resource named by `request`
    /// (a GET with Observe=1). The last local observer leaving tears the
    /// registration down upstream; otherwise the NAP answers by itself.
    pub fn deregister_observe(
        &mut self,
        client: &str,
        request: &CoapMessage,
        at: u64,
        out: &mut Vec<NapAction>,
    ) -> Result<RequestOutcome, NapError> {
        let uri = self.request_uri(request)?;
        let Some(entry) = self
            .observations
            .get_mut(&uri)
            .filter(|e| e.local_observers.contains_key(client))
        else {
            self.stats.not_observing += 1;
            return Err(NapError::NotObserving {
                client: client.to_string(),
                resource: uri.to_string(),
            });
        };
        entry.local_observers.remove(client);
        let remaining = entry.local_observers.len();
        note(
            out,
            "observe-remove",
            format!("{uri} client={client} observers={remaining}"),
        );

        if remaining > 0 {
            let reply = match entry.last_notification.clone() {
                Some(mut last) => {
                    last.set_observe(None);
                    last.mtype = MessageType::Acknowledgement;
                    self.client_copy(&last, &request.token, Some(request.message_id))
                }
                None => CoapMessage::empty_ack(request.message_id),
            };
            out.push(NapAction::ToClient {
                client: client.to_string(),
                msg: reply,
            });
            return Ok(RequestOutcome::Absorbed);
        }

        let entry = self.observations.remove(&uri).expect("present above");
        self.unsubscribe(&entry.notif_identifier, out);
        note(out, "observe-drop", uri.to_string());
        let id = self.open_exchange(client, request, uri, false, at, out)?;
        Ok(RequestOutcome::Published(id))
    }

    /// An item delivered by the core to this NAP.
    pub fn handle_icn_delivery(
        &mut self,
        item: &ContentItem,
        at: u64,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        match item.kind() {
            ContentKind::Request => self.handle_request_item(item, out),
            ContentKind::Response => self.handle_response_item(item, at, out),
            ContentKind::Notification => self.handle_notification_item(item, out),
        }
    }

    /// Servers addressed by `uri`: the one whose FQDN is the authority, or
    /// every attached server when the authority is one of our group names.
    fn select_servers(&mut self, uri: &CoapUri) -> Result<(Vec<String>, bool), NapError> {
        if let Some((id, _)) = self.servers.iter().find(|(_, s)| s.fqdn == uri.authority()) {
            return Ok((vec![id.clone()], true));
        }
        let name = GroupName::from_authority(uri.authority())?;
        if !self.servers.is_empty()
            && self
                .assignments
                .iter()
                .any(|a| matches(a, &name, &self.hierarchy))
        {
            return Ok((self.servers.keys().cloned().collect(), false));
        }
        self.stats.no_matching_server += 1;
        Err(NapError::NoMatchingServer(uri.authority().to_string()))
    }

    fn handle_request_item(
        &mut self,
        item: &ContentItem,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        let msg = item.message();
        let reply_to = item
            .reply_to()
            .cloned()
            .ok_or_else(|| NapError::InvalidRequest("request without reply_to".into()))?;
        let requester = reply_to
            .reply_node()
            .map(NodeId::new)
            .ok_or_else(|| NapError::InvalidRequest(format!("bad reply identifier {reply_to}")))?;
        let uri = self.request_uri(&msg)?;
        let (servers, unicast) = self.select_servers(&uri)?;
        note(
            out,
            "request-in",
            format!(
                "exchange={} servers={}",
                item.exchange_id(),
                servers.join(",")
            ),
        );
        for server in servers {
            self.serve_request(
                &server,
                &msg,
                &uri,
                &reply_to,
                item.exchange_id(),
                &requester,
                unicast,
                out,
            )?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn serve_request(
        &mut self,
        server: &str,
        msg: &CoapMessage,
        uri: &CoapUri,
        reply_to: &IcnIdentifier,
        exchange_id: &str,
        requester: &NodeId,
        terminal: bool,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        let key = (server.to_string(), uri.clone());
        let forward = |purpose| Forwarded {
            exchange_id: exchange_id.to_string(),
            reply_to: reply_to.clone(),
            resource: uri.clone(),
            server_mid: 0,
            purpose,
            terminal,
        };
        let observe = if msg.code == Code::GET {
            msg.observe()
        } else {
            None
        };

        match observe {
            Some(OBSERVE_REGISTER) => {
                if let Some(reg) = self.upstream.get_mut(&key) {
                    reg.interested_naps.insert(requester.clone());
                    let cached = reg.last_notification.clone();
                    if cached.is_none() {
                        reg.waiting.push(Waiter {
                            reply_to: reply_to.clone(),
                            exchange_id: exchange_id.to_string(),
                            terminal,
                        });
                    }
                    note(
                        out,
                        "observe-join",
                        format!("{server} {uri} naps={}", join_nodes(&reg.interested_naps)),
                    );
                    if let Some(last) = cached {
                        let answer = cached_answer(last);
                        self.publish(
                            out,
                            reply_to.clone(),
                            None,
                            ContentKind::Response,
                            &answer,
                            exchange_id,
                            terminal,
                        )?;
                    }
                    return Ok(());
                }
                let token = self.forward(server, msg, None, forward(Purpose::Register), out);
                self.upstream.insert(
                    key,
                    UpstreamRegistration {
                        resource: uri.clone(),
                        server: server.to_string(),
                        server_token: token,
                        interested_naps: BTreeSet::from([requester.clone()]),
                        last_notification: None,
                        waiting: Vec::new(),
                    },
                );
                note(
                    out,
                    "upstream-register",
                    format!("{server} {uri} naps={requester}"),
                );
            }
            Some(OBSERVE_DEREGISTER) => {
                let Some(reg) = self.upstream.get_mut(&key) else {
                    self.forward(server, msg, None, forward(Purpose::Plain), out);
                    return Ok(());
                };
                reg.interested_naps.remove(requester);
                reg.waiting
                    .retain(|w| w.reply_to.reply_node() != Some(requester.as_str()));
                if reg.interested_naps.is_empty() {
                    let reg = self.upstream.remove(&key).expect("present");
                    note(out, "upstream-deregister", format!("{server} {uri}"));
                    self.forward(
                        server,
                        msg,
                        Some(reg.server_token),
                        forward(Purpose::Deregister),
                        out,
                    );
                    return Ok(());
                }
                note(
                    out,
                    "observe-leave",
                    format!("{server} {uri} naps={}", join_nodes(&reg.interested_naps)),
                );
                match reg.last_notification.clone() {
                    Some(last) => {
                        let mut answer = cached_answer(last);
                        answer.set_observe(None);
                        self.publish(
                            out,
                            reply_to.clone(),
                            None,
                            ContentKind::Response,
                            &answer,
                            exchange_id,
                            terminal,
                        )?;
                    }
                    None => {
                        let mut plain = msg.clone();
                        plain.set_observe(None);
                        self.forward(server, &plain, None, forward(Purpose::Plain), out);
                    }
                }
            }
            _ => {
                self.forward(server, msg, None, forward(Purpose::Plain), out);
            }
        }
        Ok(())
    }

    /// Sends `msg` to `server` under a fresh message ID and the given (or a
    /// fresh) token, with Uri-Host rewritten to the server's own FQDN.
    fn forward(
        &mut self,
        server: &str,
        msg: &CoapMessage,
        token: Option<Vec<u8>>,
        mut record: Forwarded,
        out: &mut Vec<NapAction>,
    ) -> Vec<u8> {
        let token = token.unwrap_or_else(|| self.fresh_token());
        let mid = self.fresh_mid();
        let mut m = msg.clone();
        m.token = token.clone();
        m.message_id = mid;
        m.remove_option(option::URI_HOST);
        m.add_option(CoapOption::uri_host(&self.servers[server].fqdn));
        if m.mtype == MessageType::Confirmable {
            self.awaiting_ack
                .insert((server.to_string(), mid), token.clone());
        }
        record.server_mid = mid;
        self.forwarded
            .insert((server.to_string(), token.clone()), record);
        out.push(NapAction::ToServer {
            server: server.to_string(),
            msg: m,
        });
        token
    }

    fn handle_response_item(
        &mut self,
        item: &ContentItem,
        at: u64,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        let exchange_id = item.exchange_id().to_string();
        let Some(ex) = self.pending.get_mut(&exchange_id) else {
            self.stats.unknown_exchange += 1;
            return Err(NapError::UnknownExchange(exchange_id));
        };
        ex.last_activity = at;
        let msg = item.message();

        if msg.is_empty_ack() {
            if ex.acked {
                note(out, "ack-absorb", exchange_id);
            } else {
                ex.acked = true;
                let (client, mid) = (ex.client.clone(), ex.client_mid);
                out.push(NapAction::ToClient {
                    client,
                    msg: CoapMessage::empty_ack(mid),
                });
            }
            return Ok(());
        }

        if ex.is_observe {
            let ex = ex.clone();
            self.close_exchange(&exchange_id, "exchange-close", out);
            return self.apply_observe_answer(
                &ex.resource,
                &msg,
                Some((&ex.client, ex.client_mid)),
                out,
            );
        }

        let piggyback = (!ex.acked).then_some(ex.client_mid);
        if msg.mtype == MessageType::Acknowledgement {
            ex.acked = true;
        }
        let (client, token) = (ex.client.clone(), ex.client_token.clone());
        let reply = self.client_copy(&msg, &token, piggyback);
        out.push(NapAction::ToClient { client, msg: reply });
        if item.is_terminal() {
            self.close_exchange(&exchange_id, "exchange-close", out);
        }
        Ok(())
    }

    fn handle_notification_item(
        &mut self,
        item: &ContentItem,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        let Some(uri) = self
            .observations
            .values()
            .find(|e| &e.notif_identifier == item.identifier())
            .map(|e| e.resource.clone())
        else {
            note(out, "notification-ignored", item.identifier().to_string());
            return Ok(());
        };
        self.apply_observe_answer(&uri, &item.message(), None, out)
    }

    /// Hands an observe answer to every local observer of `uri`. Answers
    /// without an Observe option end the observation.
    fn apply_observe_answer(
        &mut self,
        uri: &CoapUri,
        msg: &CoapMessage,
        piggyback: Option<(&str, u16)>,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        let Some(entry) = self.observations.get_mut(uri) else {
            note(out, "observe-orphan", uri.to_string());
            return Ok(());
        };
        let observers: Vec<(String, Vec<u8>)> = entry
            .local_observers
            .iter()
            .map(|(c, t)| (c.clone(), t.clone()))
            .collect();

        match msg.observe() {
            Some(seq) => {
                if let Some(last) = entry.last_seq.filter(|last| !is_fresher(*last, seq)) {
                    self.stats.stale_notifications += 1;
                    note(out, "stale-drop", format!("{uri} seq={seq} last={last}"));
                    return Ok(());
                }
                entry.last_seq = Some(seq);
                entry.last_notification = Some(msg.clone());
            }
            None => {
                let entry = self.observations.remove(uri).expect("present");
                self.unsubscribe(&entry.notif_identifier, out);
                note(out, "observe-drop", uri.to_string());
            }
        }

        for (client, token) in observers {
            let mid = piggyback.filter(|(c, _)| *c == client).map(|(_, m)| m);
            let reply = self.client_copy(msg, &token, mid);
            out.push(NapAction::ToClient { client, msg: reply });
        }
        Ok(())
    }

    /// A message from an attached server.
    pub fn handle_server_response(
        &mut self,
        server: &str,
        msg: &CoapMessage,
        _at: u64,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        let unknown = |this: &mut Self, token: &[u8]| {
            this.stats.unknown_token += 1;
            NapError::UnknownToken {
                server: server.to_string(),
                token: hex::encode(token),
            }
        };

        if msg.is_empty_ack() {
            let Some(token) = self
                .awaiting_ack
                .remove(&(server.to_string(), msg.message_id))
            else {
                return Err(unknown(self, &msg.token));
            };
            let Some(fwd) = self.forwarded.get(&(server.to_string(), token.clone())) else {
                return Err(unknown(self, &token));
            };
            return self.publish(
                out,
                fwd.reply_to.clone(),
                None,
                ContentKind::Response,
                msg,
                &fwd.exchange_id,
                false,
            );
        }
        if msg.mtype == MessageType::Reset || !msg.code.is_response() {
            note(out, "ignored", format!("from={server} {msg}"));
            return Ok(());
        }

        if let Some(fwd) = self
            .forwarded
            .remove(&(server.to_string(), msg.token.clone()))
        {
            self.awaiting_ack
                .remove(&(server.to_string(), fwd.server_mid));
            if fwd.purpose == Purpose::Register {
                self.settle_registration(server, &fwd.resource, msg, out)?;
            }
            return self.publish(
                out,
                fwd.reply_to,
                None,
                ContentKind::Response,
                msg,
                &fwd.exchange_id,
                fwd.terminal,
            );
        }

        let key = self
            .upstream
            .iter()
            .find(|((s, _), r)| s == server && r.server_token == msg.token)
            .map(|(k, _)| k.clone());
        let Some(key) = key else {
            return Err(unknown(self, &msg.token));
        };
        let uri = key.1.clone();
        if msg.observe().is_some() {
            self.upstream
                .get_mut(&key)
                .expect("found")
                .last_notification = Some(msg.clone());
        } else {
            self.upstream.remove(&key);
            note(out, "upstream-ended", format!("{server} {uri}"));
        }
        self.publish(
            out,
            IcnIdentifier::notification(&uri),
            None,
            ContentKind::Notification,
            msg,
            "",
            false,
        )
    }

    /// First answer to a forwarded registration: cache it and answer every
    /// NAP that joined in the meantime.
    fn settle_registration(
        &mut self,
        server: &str,
        uri: &CoapUri,
        msg: &CoapMessage,
        out: &mut Vec<NapAction>,
    ) -> Result<(), NapError> {
        let key = (server.to_string(), uri.clone());
        let Some(reg) = self
            .upstream
            .get_mut(&key)
            .filter(|r| r.server_token == msg.token)
        else {
            return Ok(());
        };
        let waiting = std::mem::take(&mut reg.waiting);
        if msg.observe().is_some() && msg.code.is_success() {
            reg.last_notification = Some(msg.clone());
            note(out, "upstream-confirmed", format!("{server} {uri}"));
        } else {
            self.upstream.remove(&key);
            note(out, "upstream-refused", format!("{server} {uri}"));
        }
        let answer = cached_answer(msg.clone());
        for w in waiting {
            self.publish(
                out,
                w.reply_to,
                None,
                ContentKind::Response,
                &answer,
                &w.exchange_id,
                w.terminal,
            )?;
        }
        Ok(())
    }

    /// Timer callback: drops the exchange if it has been idle for the
    /// timeout, otherwise re-arms.
    pub fn expire(&mut self, exchange_id: &str, now: u64, out: &mut Vec<NapAction>) {
        let Some(ex) = self.pending.get(exchange_id) else {
            return;
        };
        let due = ex.last_activity + self.exchange_timeout;
        if due <= now {
            self.close_exchange(exchange_id, "exchange-expired", out);
        } else {
            out.push(NapAction::ArmTimer {
                exchange_id: exchange_id.to_string(),
                at: due,
            });
        }
    }
}

fn join_nodes(nodes: &BTreeSet<NodeId>) -> String {
    nodes
        .iter()
        .map(NodeId::as_str)
        .collect::<Vec<_>>()
        .join(",")
}
