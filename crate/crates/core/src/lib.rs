//! CoAP carried over a publish-subscribe ICN core.
//!
//! Network attachment points (NAPs) sit between plain CoAP endpoints and a
//! rendezvous core that matches publications to subscriptions on flat
//! identifiers. Group requests are published once and reach every server
//! whose NAP carries the group name; observe registrations are aggregated
//! so a server only ever sees one observer per resource.

pub mod icn;
pub mod metrics;
pub mod namespace;
pub mod nap;
pub mod scenario;
pub mod sim;

pub use icn::{
    ContentItem, ContentKind, CoreMetrics, IcnCore, IcnError, NodeId, SubscriptionTable,
};
pub use metrics::{baseline, MetricsReport};
pub use namespace::{
    construct_names, identifier_for, matches, AttributeAssignment, AttributeHierarchy, GroupName,
    IcnIdentifier, NamespaceError,
};
pub use nap::{Nap, NapAction, NapConfig, NapError, DEFAULT_EXCHANGE_TIMEOUT};
pub use scenario::{parse_scenario, Scenario, ScenarioError, ScriptAction};
pub use sim::{run, EventTrace, RunOutput, Simulation, TraceEntry};
