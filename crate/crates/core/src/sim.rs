//! Deterministic discrete-event simulation of a scenario.
//!
//! Every link segment (client to NAP, NAP through the core to NAP, NAP to
//! server) costs one time unit. Events at equal times run in the order
//! they were scheduled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use icoap_codec::{CoapMessage, CoapUri};
use icoap_endpoints::{Client, ClientAction, Resource, Server};

use crate::icn::{ContentItem, IcnCore, NodeId};
use crate::metrics::{baseline, MetricsReport};
use crate::nap::{Nap, NapAction};
use crate::scenario::{Scenario, ScriptAction};

pub const HOP_LATENCY: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub time: u64,
    pub actor: String,
    pub kind: String,
    pub detail: String,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.time, self.actor, self.kind)?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    pub entries: Vec<TraceEntry>,
}

impl EventTrace {
    pub fn render(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }
}

#[derive(Debug, Clone)]
enum Event {
    Script(ScriptAction),
    ClientToNap { client: String, msg: CoapMessage },
    NapToServer { server: String, msg: CoapMessage },
    ServerEmit { server: String, msg: CoapMessage },
    ServerToNap { server: String, msg: CoapMessage },
    NapToClient { client: String, msg: CoapMessage },
    Delivery { node: NodeId, item: ContentItem },
    Timer { node: NodeId, exchange_id: String },
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: EventTrace,
    pub metrics: MetricsReport,
    /// Broken internal invariants; empty on a healthy run.
    pub violations: Vec<String>,
}

pub struct Simulation {
    scenario: Scenario,
    core: IcnCore,
    naps: BTreeMap<NodeId, Nap>,
    servers: BTreeMap<String, Server>,
    clients: BTreeMap<String, Client>,
    server_nap: BTreeMap<String, NodeId>,
    client_nap: BTreeMap<String, NodeId>,
    queue: BTreeMap<(u64, u64), Event>,
    seq: u64,
    now: u64,
    trace: EventTrace,
    edge_messages: u64,
    deliveries_handled: u64,
    deliveries_in_flight: u64,
    peak_registrations: usize,
    peak_per_resource: usize,
    violations: Vec<String>,
}

fn describe(msg: &CoapMessage) -> String {
    msg.to_string()
}

impl Simulation {
    /// Builds the topology and records the attachment events at time 0.
    pub fn new(scenario: &Scenario) -> Self {
        let mut sim = Self {
            scenario: scenario.clone(),
            core: IcnCore::new(HOP_LATENCY),
            naps: BTreeMap::new(),
            servers: BTreeMap::new(),
            clients: BTreeMap::new(),
            server_nap: BTreeMap::new(),
            client_nap: BTreeMap::new(),
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            trace: EventTrace::default(),
            edge_messages: 0,
            deliveries_handled: 0,
            deliveries_in_flight: 0,
            peak_registrations: 0,
            peak_per_resource: 0,
            violations: Vec::new(),
        };
        for s in &scenario.servers {
            let mut server = Server::new(s.id.clone());
            for r in scenario.resources_of(&s.id) {
                server.add_resource(
                    Resource::new(r.path.clone(), r.value.as_bytes())
                        .observable(r.observable)
                        .ready_at(r.ready_at),
                );
            }
            sim.servers.insert(s.id.clone(), server);
            sim.server_nap
                .insert(s.id.clone(), NodeId::new(s.nap.clone()));
        }
        for (i, c) in scenario.clients.iter().enumerate() {
            let ordinal = u16::try_from(i + 1).unwrap_or(u16::MAX);
            sim.clients
                .insert(c.id.clone(), Client::new(c.id.clone(), ordinal));
            sim.client_nap
                .insert(c.id.clone(), NodeId::new(c.nap.clone()));
        }
        for config in scenario.nap_configs() {
            let mut out = Vec::new();
            match Nap::from_config(&config, &scenario.hierarchy, &mut out) {
                Ok(nap) => {
                    sim.naps.insert(config.node.clone(), nap);
                    sim.apply(&config.node, out);
                }
                Err(e) => sim.violation(format!(
                    "nap {} rejected its configuration: {e}",
                    config.node
                )),
            }
        }
        for entry in &scenario.script {
            sim.schedule(entry.at, Event::Script(entry.action.clone()));
        }
        sim
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }

    pub fn core(&self) -> &IcnCore {
        &self.core
    }

    pub fn nap(&self, id: &str) -> Option<&Nap> {
        self.naps.get(&NodeId::new(id))
    }

    pub fn server(&self, id: &str) -> Option<&Server> {
        self.servers.get(id)
    }

    pub fn client(&self, id: &str) -> Option<&Client> {
        self.clients.get(id)
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    /// Time of the next event, if any.
    pub fn next_time(&self) -> Option<u64> {
        self.queue.keys().next().map(|(t, _)| *t)
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        if let Event::Delivery { .. } = event {
            self.deliveries_in_flight += 1;
        }
        self.queue.insert((at, self.seq), event);
    }

    fn record(&mut self, actor: &str, kind: &str, detail: String) {
        self.trace.entries.push(TraceEntry {
            time: self.now,
            actor: actor.to_string(),
            kind: kind.to_string(),
            detail,
        });
    }

    fn violation(&mut self, what: String) {
        self.record("sim", "invariant-violation", what.clone());
        self.violations.push(what);
    }

    /// Runs one event. Returns false once nothing is left.
    pub fn step(&mut self) -> bool {
        let Some(((at, _), event)) = self.queue.pop_first() else {
            return false;
        };
        self.now = at;
        self.dispatch(event);
        self.check_invariants();
        true
    }

    pub fn run_to_end(&mut self) {
        while self.step() {}
    }

    fn send_endpoint(&mut self, actor: &str, to: &str, msg: &CoapMessage) {
        self.edge_messages += 1;
        self.record(actor, "coap-send", format!("to={to} {}", describe(msg)));
    }

    fn dispatch(&mut self, event: Event) {
        let now = self.now;
        match event {
            Event::Script(ScriptAction::Client { client, action }) => {
                let Some(c) = self.clients.get_mut(&client) else {
                    return;
                };
                let msg = c.issue(&action, now);
                let nap = self.client_nap[&client].to_string();
                self.record(&client, "action", action_label(&action));
                self.send_endpoint(&client, &nap, &msg);
                self.schedule(now + HOP_LATENCY, Event::ClientToNap { client, msg });
            }
            Event::Script(ScriptAction::Set {
                server,
                path,
                value,
            }) => {
                let Some(s) = self.servers.get_mut(&server) else {
                    return;
                };
                let notes = s.update_resource(&path, value.as_bytes());
                self.record(&server, "set", format!("/{} value={value}", path.join("/")));
                match notes {
                    Ok(notes) => {
                        for msg in notes {
                            self.emit_from_server(&server, msg);
                        }
                    }
                    Err(e) => self.record(&server, "error", e.to_string()),
                }
            }
            Event::ClientToNap { client, msg } => {
                let node = self.client_nap[&client].clone();
                self.record(
                    node.as_str(),
                    "coap-recv",
                    format!("from={client} {}", describe(&msg)),
                );
                let mut out = Vec::new();
                let result = self
                    .naps
                    .get_mut(&node)
                    .map(|n| n.handle_client_request(&client, &msg, now, &mut out));
                self.apply(&node, out);
                if let Some(Err(e)) = result {
                    self.record(node.as_str(), "error", e.to_string());
                }
            }
            Event::NapToServer { server, msg } => {
                let node = self.server_nap[&server].to_string();
                self.record(
                    &server,
                    "coap-recv",
                    format!("from={node} {}", describe(&msg)),
                );
                let Some(s) = self.servers.get_mut(&server) else {
                    return;
                };
                let reply = s.handle(&msg, now);
                if let Some(m) = reply.immediate {
                    self.emit_from_server(&server, m);
                }
                for (at, m) in reply.scheduled {
                    self.schedule(
                        at.max(now),
                        Event::ServerEmit {
                            server: server.clone(),
                            msg: m,
                        },
                    );
                }
            }
            Event::ServerEmit { server, msg } => self.emit_from_server(&server, msg),
            Event::ServerToNap { server, msg } => {
                let node = self.server_nap[&server].clone();
                self.record(
                    node.as_str(),
                    "coap-recv",
                    format!("from={server} {}", describe(&msg)),
                );
                let mut out = Vec::new();
                let result = self
                    .naps
                    .get_mut(&node)
                    .map(|n| n.handle_server_response(&server, &msg, now, &mut out));
                self.apply(&node, out);
                if let Some(Err(e)) = result {
                    self.record(node.as_str(), "error", e.to_string());
                }
            }
            Event::NapToClient { client, msg } => {
                let node = self.client_nap[&client].to_string();
                self.record(
                    &client,
                    "coap-recv",
                    format!("from={node} {}", describe(&msg)),
                );
                let Some(c) = self.clients.get_mut(&client) else {
                    return;
                };
                if !c.receive(msg.clone(), now) {
                    self.violation(format!(
                        "{client} received unknown token {}",
                        hex::encode(&msg.token)
                    ));
                }
            }
            Event::Delivery { node, item } => {
                self.deliveries_in_flight -= 1;
                self.deliveries_handled += 1;
                self.record(
                    node.as_str(),
                    "deliver",
                    format!("id={} kind={}", item.identifier(), item.kind()),
                );
                let mut out = Vec::new();
                let result = self
                    .naps
                    .get_mut(&node)
                    .map(|n| n.handle_icn_delivery(&item, now, &mut out));
                self.apply(&node, out);
                if let Some(Err(e)) = result {
                    self.record(node.as_str(), "error", e.to_string());
                }
            }
            Event::Timer { node, exchange_id } => {
                let mut out = Vec::new();
                if let Some(n) = self.naps.get_mut(&node) {
                    n.expire(&exchange_id, now, &mut out);
                }
                self.apply(&node, out);
            }
        }
    }

    fn emit_from_server(&mut self, server: &str, msg: CoapMessage) {
        let node = self.server_nap[server].to_string();
        self.send_endpoint(server, &node, &msg);
        self.schedule(
            self.now + HOP_LATENCY,
            Event::ServerToNap {
                server: server.to_string(),
                msg,
            },
        );
    }

    fn apply(&mut self, node: &NodeId, actions: Vec<NapAction>) {
        let now = self.now;
        let actor = node.as_str();
        for action in actions {
            match action {
                NapAction::Subscribe(id) => {
                    self.core.subscribe(node, &id);
                    self.record(actor, "subscribe", id.to_string());
                }
                NapAction::Unsubscribe(id) => {
                    self.core.unsubscribe(node, &id);
                    self.record(actor, "unsubscribe", id.to_string());
                }
                NapAction::Publish(item) => {
                    let report = self.core.publish(item.clone(), now);
                    let subs: Vec<&str> = report.subscribers.iter().map(NodeId::as_str).collect();
                    self.record(
                        actor,
                        "publish",
                        format!("{item} subscribers=[{}]", subs.join(",")),
                    );
                    let deliveries: Vec<_> = self.core.drain_deliveries().collect();
                    for d in deliveries {
                        self.schedule(
                            d.at,
                            Event::Delivery {
                                node: d.node,
                                item: d.item,
                            },
                        );
                    }
                }
                NapAction::ToServer { server, msg } => {
                    self.record(
                        actor,
                        "coap-send",
                        format!("to={server} {}", describe(&msg)),
                    );
                    self.schedule(now + HOP_LATENCY, Event::NapToServer { server, msg });
                }
                NapAction::ToClient { client, msg } => {
                    self.record(
                        actor,
                        "coap-send",
                        format!("to={client} {}", describe(&msg)),
                    );
                    self.schedule(now + HOP_LATENCY, Event::NapToClient { client, msg });
                }
                NapAction::ArmTimer { exchange_id, at } => {
                    self.schedule(
                        at,
                        Event::Timer {
                            node: node.clone(),
                            exchange_id,
                        },
                    );
                }
                NapAction::Note { kind, detail } => self.record(actor, kind, detail),
            }
        }
    }

    fn check_invariants(&mut self) {
        let total: usize = self.servers.values().map(Server::registration_count).sum();
        let per_resource = self
            .servers
            .values()
            .map(Server::max_registrations_per_resource)
            .max()
            .unwrap_or(0);
        self.peak_registrations = self.peak_registrations.max(total);
        self.peak_per_resource = self.peak_per_resource.max(per_resource);
        if per_resource > 1 {
            self.violation(format!(
                "a server holds {per_resource} registrations for one resource"
            ));
        }
        let consistent = self.core.metrics().is_consistent();
        if !consistent {
            self.violation("core metrics disagree with their breakdowns".into());
        }
        let counted = self.core.metrics().deliveries;
        let delivered = self.deliveries_handled + self.deliveries_in_flight;
        if counted != delivered {
            self.violation(format!(
                "core counted {counted} deliveries, {delivered} were scheduled"
            ));
        }
    }

    pub fn report(&self) -> MetricsReport {
        let m = self.core.metrics();
        MetricsReport::new(
            m.publications,
            m.deliveries,
            self.edge_messages,
            self.peak_registrations as u64,
            self.peak_per_resource as u64,
            baseline(&self.scenario),
        )
    }

    pub fn finish(mut self) -> RunOutput {
        self.run_to_end();
        RunOutput {
            metrics: self.report(),
            trace: self.trace,
            violations: self.violations,
        }
    }
}

fn action_label(action: &ClientAction) -> String {
    match action {
        ClientAction::Get(u) => format!("GET {u}"),
        ClientAction::Put(u, p) => format!("PUT {u} {}", String::from_utf8_lossy(p)),
        ClientAction::Observe(u) => format!("OBSERVE {u}"),
        ClientAction::Unobserve(u) => format!("UNOBSERVE {u}"),
    }
}

/// Runs a scenario to quiescence.
pub fn run(scenario: &Scenario) -> RunOutput {
    Simulation::new(scenario).finish()
}

/// Servers a request for `uri` reaches: the server owning the FQDN, else
/// every server whose NAP carries the group name.
pub fn resolve_targets(scenario: &Scenario, uri: &CoapUri) -> BTreeSet<String> {
    use crate::namespace::{matches, GroupName};

    let authority = uri.authority();
    if let Some(s) = scenario.servers.iter().find(|s| s.fqdn == authority) {
        return BTreeSet::from([s.id.clone()]);
    }
    let Ok(name) = GroupName::from_authority(authority) else {
        return BTreeSet::new();
    };
    scenario
        .servers
        .iter()
        .filter(|s| {
            scenario.nap(&s.nap).is_some_and(|n| {
                n.assignments
                    .iter()
                    .any(|a| matches(a, &name, &scenario.hierarchy))
            })
        })
        .map(|s| s.id.clone())
        .collect()
}
