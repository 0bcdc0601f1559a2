//! Rendezvous and delivery fabric. Nodes subscribe to flat identifiers; a
//! publication is handed to every node subscribed at publish time, one
//! copy each. Nothing is cached, so late subscribers miss earlier items.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use icoap_codec::{decode, CoapMessage, DecodeError};
use thiserror::Error;

use crate::namespace::IcnIdentifier;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContentKind {
    Request,
    Response,
    Notification,
}

impl fmt::Display for ContentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Request => "REQUEST",
            Self::Response => "RESPONSE",
            Self::Notification => "NOTIFICATION",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IcnError {
    #[error("content item payload is not a CoAP message: {0}")]
    BadPayload(#[from] DecodeError),
    #[error("request items need a reply_to identifier")]
    MissingReplyTo,
}

/// An encapsulated CoAP message travelling through the core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentItem {
    identifier: IcnIdentifier,
    reply_to: Option<IcnIdentifier>,
    kind: ContentKind,
    payload: Vec<u8>,
    exchange_id: String,
    terminal: bool,
}

impl ContentItem {
    pub fn new(
        identifier: IcnIdentifier,
        reply_to: Option<IcnIdentifier>,
        kind: ContentKind,
        payload: Vec<u8>,
        exchange_id: impl Into<String>,
    ) -> Result<Self, IcnError> {
        decode(&payload)?;
        if kind == ContentKind::Request && reply_to.is_none() {
            return Err(IcnError::MissingReplyTo);
        }
        Ok(Self {
            identifier,
            reply_to,
            kind,
            payload,
            exchange_id: exchange_id.into(),
            terminal: false,
        })
    }

    /// Marks a response as the only one its exchange will get, which lets
    /// the requesting NAP close the exchange right away.
    pub fn terminal(mut self, terminal: bool) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn identifier(&self) -> &IcnIdentifier {
        &self.identifier
    }

    pub fn reply_to(&self) -> Option<&IcnIdentifier> {
        self.reply_to.as_ref()
    }

    pub fn kind(&self) -> ContentKind {
        self.kind
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn exchange_id(&self) -> &str {
        &self.exchange_id
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn message(&self) -> CoapMessage {
        decode(&self.payload).expect("payload validated at construction")
    }
}

impl fmt::Display for ContentItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dash = |s: &str| {
            if s.is_empty() {
                "-".to_string()
            } else {
                s.to_string()
            }
        };
        write!(
            f,
            "id={} kind={} reply_to={} exchange={}",
            self.identifier,
            self.kind,
            dash(self.reply_to.as_ref().map_or("", |r| r.as_str())),
            dash(&self.exchange_id),
        )?;
        if self.terminal {
            f.write_str(" final")?;
        }
        write!(f, " payload={}", hex::encode(&self.payload))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubscriptionTable {
    entries: BTreeMap<IcnIdentifier, BTreeSet<NodeId>>,
}

impl SubscriptionTable {
    pub fn subscribers(&self, id: &IcnIdentifier) -> Option<&BTreeSet<NodeId>> {
        self.entries.get(id)
    }

    pub fn is_subscribed(&self, node: &NodeId, id: &IcnIdentifier) -> bool {
        self.entries.get(id).is_some_and(|s| s.contains(node))
    }

    fn insert(&mut self, node: NodeId, id: IcnIdentifier) -> bool {
        self.entries.entry(id).or_default().insert(node)
    }

    fn remove(&mut self, node: &NodeId, id: &IcnIdentifier) -> bool {
        let Some(nodes) = self.entries.get_mut(id) else {
            return false;
        };
        let removed = nodes.remove(node);
        if nodes.is_empty() {
            self.entries.remove(id);
        }
        removed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub publications: u64,
    pub deliveries: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoreMetrics {
    pub publications: u64,
    pub deliveries: u64,
    pub per_identifier: BTreeMap<IcnIdentifier, Counts>,
    pub per_kind: BTreeMap<ContentKind, Counts>,
}

impl CoreMetrics {
    /// Totals agree with the per-identifier and per-kind breakdowns.
    pub fn is_consistent(&self) -> bool {
        let sum = |counts: &mut dyn Iterator<Item = &Counts>| {
            counts.fold((0, 0), |(p, d), c| (p + c.publications, d + c.deliveries))
        };
        let total = (self.publications, self.deliveries);
        sum(&mut self.per_identifier.values()) == total && sum(&mut self.per_kind.values()) == total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub at: u64,
    pub node: NodeId,
    pub item: ContentItem,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReport {
    /// Ascending by node id.
    pub subscribers: Vec<NodeId>,
    pub deliver_at: u64,
}

#[derive(Debug, Clone)]
pub struct IcnCore {
    table: SubscriptionTable,
    metrics: CoreMetrics,
    hop_latency: u64,
    outbox: VecDeque<Delivery>,
}

impl Default for IcnCore {
    fn default() -> Self {
        Self::new(1)
    }
}

impl IcnCore {
    pub fn new(hop_latency: u64) -> Self {
        Self {
            table: SubscriptionTable::default(),
            metrics: CoreMetrics::default(),
            hop_latency,
            outbox: VecDeque::new(),
        }
    }

    /// Returns true if the subscription is new.
    pub fn subscribe(&mut self, node: &NodeId, id: &IcnIdentifier) -> bool {
        self.table.insert(node.clone(), id.clone())
    }

    /// Returns true if a subscription was removed.
    pub fn unsubscribe(&mut self, node: &NodeId, id: &IcnIdentifier) -> bool {
        self.table.remove(node, id)
    }

    pub fn publish(&mut self, item: ContentItem, at: u64) -> DeliveryReport {
        let subscribers: Vec<NodeId> = self
            .table
            .subscribers(item.identifier())
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        let fanout = subscribers.len() as u64;
        let deliver_at = at + self.hop_latency;

        self.metrics.publications += 1;
        self.metrics.deliveries += fanout;
        let by_id = self
            .metrics
            .per_identifier
            .entry(item.identifier().clone())
            .or_default();
        by_id.publications += 1;
        by_id.deliveries += fanout;
        let by_kind = self.metrics.per_kind.entry(item.kind()).or_default();
        by_kind.publications += 1;
        by_kind.deliveries += fanout;

        for node in &subscribers {
            self.outbox.push_back(Delivery {
                at: deliver_at,
                node: node.clone(),
                item: item.clone(),
            });
        }
        DeliveryReport {
            subscribers,
            deliver_at,
        }
    }

    pub fn subscriber_count(&self, id: &IcnIdentifier) -> usize {
        self.table.subscribers(id).map_or(0, BTreeSet::len)
    }

    pub fn table(&self) -> &SubscriptionTable {
        &self.table
    }

    pub fn metrics(&self) -> &CoreMetrics {
        &self.metrics
    }

    /// Deliveries queued by `publish`, in publication order and ascending
    /// node order within one publication.
    pub fn drain_deliveries(&mut self) -> impl Iterator<Item = Delivery> + '_ {
        self.outbox.drain(..)
    }
}
