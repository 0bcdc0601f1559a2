//! Message counts of a run and the plain unicast CoAP cost of the same
//! script.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use icoap_endpoints::ClientAction;

use crate::scenario::{Scenario, ScriptAction};
use crate::sim::resolve_targets;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub icn_publications: u64,
    pub icn_deliveries: u64,
    /// CoAP messages sent by clients and servers.
    pub edge_coap_messages: u64,
    /// Peak of registrations held across all servers.
    pub server_observe_registrations: u64,
    /// Peak of registrations held for any single resource.
    pub peak_registrations_per_resource: u64,
    pub unicast_baseline_messages: u64,
    pub savings_ratio: f64,
}

const FIELDS: [&str; 7] = [
    "icn_publications",
    "icn_deliveries",
    "edge_coap_messages",
    "server_observe_registrations",
    "peak_registrations_per_resource",
    "unicast_baseline_messages",
    "savings_ratio",
];

impl MetricsReport {
    pub fn new(
        icn_publications: u64,
        icn_deliveries: u64,
        edge_coap_messages: u64,
        server_observe_registrations: u64,
        peak_registrations_per_resource: u64,
        unicast_baseline_messages: u64,
    ) -> Self {
        let cost = (icn_publications + icn_deliveries + edge_coap_messages).max(1);
        Self {
            icn_publications,
            icn_deliveries,
            edge_coap_messages,
            server_observe_registrations,
            peak_registrations_per_resource,
            unicast_baseline_messages,
            savings_ratio: unicast_baseline_messages as f64 / cost as f64,
        }
    }

    /// ICN-side cost in the denominator of the savings ratio.
    pub fn icn_cost(&self) -> u64 {
        self.icn_publications + self.icn_deliveries + self.edge_coap_messages
    }

    fn values(&self) -> [String; 7] {
        [
            self.icn_publications.to_string(),
            self.icn_deliveries.to_string(),
            self.edge_coap_messages.to_string(),
            self.server_observe_registrations.to_string(),
            self.peak_registrations_per_resource.to_string(),
            self.unicast_baseline_messages.to_string(),
            format!("{:.4}", self.savings_ratio),
        ]
    }

    /// Header line plus one value line.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", FIELDS.join(","), self.values().join(","))
    }

    pub fn to_table(&self) -> String {
        let width = FIELDS.iter().map(|f| f.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in FIELDS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}

/// Messages plain unicast CoAP would need for the scenario's script: a
/// request and a response per reached server, one extra message per
/// separate response, and one notification per update per observer.
pub fn baseline(scenario: &Scenario) -> u64 {
    // observers per (server, path)
    let mut observers: BTreeMap<(String, Vec<String>), Vec<String>> = BTreeMap::new();
    let mut total = 0;
    for entry in &scenario.script {
        match &entry.action {
            ScriptAction::Client { client, action } => {
                let uri = action.uri();
                for server in resolve_targets(scenario, uri) {
                    total += 2;
                    let path = uri.path().to_vec();
                    let Some(resource) = scenario.resource(&server, &path) else {
                        continue;
                    };
                    if resource.ready_at.is_some_and(|r| r > entry.at)
                        && matches!(action, ClientAction::Get(_) | ClientAction::Observe(_))
                    {
                        total += 1;
                    }
                    let key = (server, path);
                    match action {
                        ClientAction::Observe(_) if resource.observable => {
                            let list = observers.entry(key).or_default();
                            if !list.contains(client) {
                                list.push(client.clone());
                            }
                        }
                        ClientAction::Unobserve(_) => {
                            if let Some(list) = observers.get_mut(&key) {
                                list.retain(|c| c != client);
                            }
                        }
                        ClientAction::Put(..) => {
                            total += observers.get(&key).map_or(0, Vec::len) as u64;
                        }
                        _ => {}
                    }
                }
            }
            ScriptAction::Set { server, path, .. } => {
                let key = (server.clone(), path.clone());
                total += observers.get(&key).map_or(0, Vec::len) as u64;
            }
        }
    }
    total
}
