use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use icoap::sim::resolve_targets;
use icoap::{
    construct_names, parse_scenario, run, EventTrace, GroupName, RunOutput, Scenario, ScriptAction,
    Simulation,
};
use icoap_endpoints::ClientAction;

fn load(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/scenarios")
        .join(format!("{name}.scn"));
    parse_scenario(&fs::read_to_string(path).unwrap()).unwrap()
}

fn publications(trace: &EventTrace, kind: &str) -> usize {
    let tag = format!("kind={kind} ");
    trace
        .of_kind("publish")
        .filter(|e| e.detail.contains(&tag))
        .count()
}

fn deliveries(trace: &EventTrace, kind: &str) -> usize {
    let tag = format!("kind={kind}");
    trace
        .of_kind("deliver")
        .filter(|e| e.detail.ends_with(&tag))
        .count()
}

/// coap-recv entries at the given actors.
fn received_by<'a>(trace: &'a EventTrace, actors: &BTreeSet<String>) -> Vec<&'a icoap::TraceEntry> {
    trace
        .of_kind("coap-recv")
        .filter(|e| actors.contains(&e.actor))
        .collect()
}

fn ids<'a>(items: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    items.into_iter().map(String::from).collect()
}

fn clean_run(s: &Scenario) -> RunOutput {
    let out = run(s);
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    out
}

#[test]
fn group_get_to_three_servers_on_two_naps() {
    let s = load("group3");
    let out = clean_run(&s);

    // oracle: members are servers whose NAP enumerates the requested name
    let ClientAction::Get(uri) = (match &s.script[0].action {
        ScriptAction::Client { action, .. } => action.clone(),
        _ => unreachable!(),
    }) else {
        unreachable!()
    };
    let name = GroupName::from_authority(uri.authority()).unwrap();
    let mut members = BTreeSet::new();
    let mut member_naps = BTreeSet::new();
    for server in &s.servers {
        let nap = s.nap(&server.nap).unwrap();
        if nap
            .assignments
            .iter()
            .any(|a| construct_names(&s.hierarchy, a).unwrap().contains(&name))
        {
            members.insert(server.id.clone());
            member_naps.insert(nap.id.clone());
        }
    }
    assert_eq!((members.len(), member_naps.len()), (3, 2));

    assert_eq!(publications(&out.trace, "REQUEST"), 1);
    assert_eq!(deliveries(&out.trace, "REQUEST"), member_naps.len());
    assert_eq!(received_by(&out.trace, &members).len(), members.len());
    assert_eq!(publications(&out.trace, "RESPONSE"), members.len());
    let at_client = received_by(&out.trace, &ids(["C1"]));
    assert_eq!(at_client.len(), members.len());
    assert!(at_client
        .iter()
        .all(|e| e.detail.contains("2.05 ") && e.detail.contains("tok=00010001")));
    assert_eq!(out.metrics.unicast_baseline_messages, 6);
}

#[test]
fn observe_aggregation_across_three_naps() {
    let s = load("observe");
    let mut sim = Simulation::new(&s);
    let mut peak = 0;
    while sim.step() {
        let server = sim.server("S1").unwrap();
        assert!(server.max_registrations_per_resource() <= 1);
        peak = peak.max(server.registration_count());
        assert!(sim.core().metrics().is_consistent());
    }
    assert_eq!(peak, 1);
    let report = sim.report();
    assert_eq!(report.server_observe_registrations, 1);

    let updates: Vec<u64> = s
        .script
        .iter()
        .filter(|e| matches!(e.action, ScriptAction::Set { .. }))
        .map(|e| e.at)
        .collect();
    assert_eq!(updates.len(), 2);
    let observers = ids(["C1", "C2", "C3", "C4", "C5"]);
    for (i, start) in updates.iter().enumerate() {
        let end = updates.get(i + 1).copied().unwrap_or(u64::MAX);
        let window = EventTrace {
            entries: sim
                .trace()
                .entries
                .iter()
                .filter(|e| e.time >= *start && e.time < end)
                .cloned()
                .collect(),
        };
        assert_eq!(publications(&window, "NOTIFICATION"), 1);
        assert_eq!(deliveries(&window, "NOTIFICATION"), 3);
        assert_eq!(received_by(&window, &observers).len(), 5);
    }
    // M=5 observers over 2 updates, on top of 5 registrations
    assert_eq!(report.unicast_baseline_messages, 10 + 10);
}

#[test]
fn empty_script_leaves_only_attachment() {
    let out = clean_run(&load("empty"));
    assert!(out.trace.entries.iter().all(|e| e.time == 0));
    assert!(out
        .trace
        .entries
        .iter()
        .all(|e| e.kind == "attach-server" || e.kind == "subscribe"));
    let m = &out.metrics;
    assert_eq!(
        (
            m.icn_publications,
            m.icn_deliveries,
            m.edge_coap_messages,
            m.unicast_baseline_messages
        ),
        (0, 0, 0, 0)
    );
}

#[test]
fn unicast_only_baseline_equals_edge() {
    let out = clean_run(&load("unicast"));
    assert_eq!(
        out.metrics.unicast_baseline_messages,
        out.metrics.edge_coap_messages
    );
    assert!(out.metrics.edge_coap_messages > 0);
}

#[test]
fn last_departure_alone_reaches_the_server() {
    let s = load("deregister");
    let out = clean_run(&s);
    // reference-count oracle over the script: the count of observers
    // falls to zero exactly once
    let mut count = 0i32;
    let mut reached_zero = 0;
    for e in &s.script {
        if let ScriptAction::Client { action, .. } = &e.action {
            match action {
                ClientAction::Observe(_) => count += 1,
                ClientAction::Unobserve(_) => {
                    count -= 1;
                    if count == 0 {
                        reached_zero += 1;
                    }
                }
                _ => {}
            }
        }
    }
    let deregistrations = out
        .trace
        .of_kind("coap-recv")
        .filter(|e| e.actor == "S1" && e.detail.contains("Observe=1 "))
        .count();
    assert_eq!(deregistrations, reached_zero);
    assert_eq!(deregistrations, 1);
    // the update after everyone left produces no notification
    assert!(out
        .trace
        .entries
        .iter()
        .filter(|e| e.time >= 120)
        .all(|e| e.kind != "publish" && e.kind != "coap-send"));
}

#[test]
fn delayed_get_gets_empty_ack_then_separate_response() {
    let out = clean_run(&load("delayed"));
    let at_client: Vec<_> = received_by(&out.trace, &ids(["C1"]));
    assert_eq!(at_client.len(), 2);
    assert!(at_client[0].detail.contains("ACK 0.00"));
    assert!(
        at_client[1].detail.contains("CON 2.05") && at_client[1].detail.contains("tok=00010001")
    );
    assert_eq!(out.metrics.unicast_baseline_messages, 3);
}

#[test]
fn clients_only_see_their_own_tokens() {
    for name in [
        "fixture",
        "fixture3",
        "group3",
        "observe",
        "deregister",
        "unicast",
        "delayed",
    ] {
        let s = load(name);
        let mut sim = Simulation::new(&s);
        sim.run_to_end();
        assert!(sim.violations().is_empty(), "{name}");
        for c in &s.clients {
            let log = sim.client(&c.id).unwrap().log();
            let sent: BTreeSet<_> = log.sent.iter().map(|(_, m)| m.token.clone()).collect();
            for (_, m) in &log.received {
                assert!(
                    m.is_empty_message() || sent.contains(&m.token),
                    "{name} {}",
                    c.id
                );
            }
        }
    }
}

#[test]
fn baseline_dominates_publications() {
    for name in [
        "fixture",
        "fixture3",
        "group3",
        "observe",
        "deregister",
        "unicast",
        "delayed",
        "empty",
    ] {
        let s = load(name);
        let out = clean_run(&s);
        let m = &out.metrics;
        assert!(m.unicast_baseline_messages >= m.icn_publications, "{name}");

        let big_group = s.script.iter().any(|e| match &e.action {
            ScriptAction::Client { action, .. } => resolve_targets(&s, action.uri()).len() >= 2,
            _ => false,
        });
        let mut observers: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
        for e in &s.script {
            if let ScriptAction::Client {
                client,
                action: ClientAction::Observe(u),
            } = &e.action
            {
                observers.entry(u.to_string()).or_default().insert(client);
            }
        }
        if big_group || observers.values().any(|o| o.len() >= 2) {
            assert!(m.unicast_baseline_messages > m.icn_publications, "{name}");
        }
    }
}

#[test]
fn step_api_keeps_time_monotonic() {
    let mut sim = Simulation::new(&load("deregister"));
    let mut last = 0;
    while let Some(t) = sim.next_time() {
        assert!(t >= last);
        last = t;
        sim.step();
        assert_eq!(sim.now(), t);
    }
    assert!(sim.is_quiescent());
}

/// Observers concentrated on few NAPs with many updates: each update costs
/// one publication, one delivery per NAP and one server message, against one
/// message per observer for plain CoAP.
fn dense_observe(naps: usize, per_nap: usize, updates: usize) -> Scenario {
    let mut text = String::from(
        "hierarchy building wing floor\n\
         nap NS building=building6 wing=west floor=floor3\n\
         server S1 nap=NS fqdn=s1.floor3.west.building6\n\
         resource S1 /t value=0 observable\n",
    );
    for n in 0..naps {
        text.push_str(&format!(
            "nap N{n} building=building6 wing=east floor=f{n}\n"
        ));
        for c in 0..per_nap {
            text.push_str(&format!("client C{n}x{c} nap=N{n}\n"));
            text.push_str(&format!(
                "at {} C{n}x{c} OBSERVE coap://s1.floor3.west.building6/t\n",
                10 + c
            ));
        }
    }
    for u in 0..updates {
        text.push_str(&format!("at {} SET S1 /t {u}\n", 100 + 10 * u));
    }
    parse_scenario(&text).unwrap()
}

#[test]
fn savings_grow_with_observers_per_nap_and_updates() {
    let m = clean_run(&dense_observe(2, 5, 20)).metrics;
    // registrations: 10 observers at 2 each; updates: 10 per update
    assert_eq!(m.unicast_baseline_messages, 20 + 200);
    assert!(m.savings_ratio > 2.0, "{m:?}");

    let sparse = clean_run(&dense_observe(5, 1, 20)).metrics;
    assert!(sparse.savings_ratio < 1.0, "{sparse:?}");

    let few = clean_run(&dense_observe(2, 5, 1)).metrics.savings_ratio;
    let many = clean_run(&dense_observe(2, 5, 40)).metrics.savings_ratio;
    assert!(many > few);
}
