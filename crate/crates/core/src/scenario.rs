//! Scenario files: topology plus a timed script.
//!
//! ```text
//! hierarchy building wing floor
//! nap N1 building=building6 wing=west floor=floor3
//! server S1 nap=N1 fqdn=s1.floor3.west.building6
//! resource S1 /temperature value=22 observable
//! client C1 nap=N1
//! at 10 C1 GET coap://building6/temperature
//! at 20 SET S1 /temperature 23
//! ```

use std::collections::{BTreeMap, BTreeSet};

use icoap_codec::parse_uri;
use icoap_endpoints::ClientAction;
use thiserror::Error;

use crate::icn::NodeId;
use crate::namespace::{AttributeAssignment, AttributeHierarchy, GroupName, NamespaceError};
use crate::nap::{NapConfig, ServerAttachment};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown {kind} {id:?}")]
    UnknownReference {
        line: usize,
        kind: &'static str,
        id: String,
    },
    #[error("line {line}: nap {nap} does not assign the root level {root:?}")]
    UnassignedRoot {
        line: usize,
        nap: String,
        root: String,
    },
}

fn parse_err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NapSpec {
    pub id: String,
    pub assignments: Vec<AttributeAssignment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerSpec {
    pub id: String,
    pub nap: String,
    pub fqdn: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceSpec {
    pub server: String,
    pub path: Vec<String>,
    pub value: String,
    pub observable: bool,
    pub ready_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSpec {
    pub id: String,
    pub nap: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptAction {
    Client {
        client: String,
        action: ClientAction,
    },
    Set {
        server: String,
        path: Vec<String>,
        value: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub at: u64,
    pub line: usize,
    pub action: ScriptAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub hierarchy: AttributeHierarchy,
    pub naps: Vec<NapSpec>,
    pub servers: Vec<ServerSpec>,
    pub resources: Vec<ResourceSpec>,
    pub clients: Vec<ClientSpec>,
    /// Sorted by time, file order within one time.
    pub script: Vec<ScriptEntry>,
}

fn parse_path(line: usize, text: &str) -> Result<Vec<String>, ScenarioError> {
    if !text.starts_with('/') {
        return Err(parse_err(
            line,
            format!("path {text:?} must start with '/'"),
        ));
    }
    Ok(text
        .split('/')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect())
}

fn parse_time(line: usize, text: &str) -> Result<u64, ScenarioError> {
    text.parse()
        .map_err(|_| parse_err(line, format!("invalid time {text:?}")))
}

fn key_value(line: usize, token: &str) -> Result<(&str, &str), ScenarioError> {
    token
        .split_once('=')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| parse_err(line, format!("expected key=value, got {token:?}")))
}

/// Collects `key=value` tokens, rejecting unexpected or repeated keys.
fn keyed<'a>(
    line: usize,
    tokens: &[&'a str],
    allowed: &[&str],
) -> Result<BTreeMap<&'a str, &'a str>, ScenarioError> {
    let mut out = BTreeMap::new();
    for t in tokens {
        let (k, v) = key_value(line, t)?;
        if !allowed.contains(&k) {
            return Err(parse_err(line, format!("unexpected key {k:?}")));
        }
        if out.insert(k, v).is_some() {
            return Err(parse_err(line, format!("key {k:?} given twice")));
        }
    }
    Ok(out)
}

fn required<'a>(
    line: usize,
    map: &BTreeMap<&str, &'a str>,
    key: &str,
) -> Result<&'a str, ScenarioError> {
    map.get(key)
        .copied()
        .ok_or_else(|| parse_err(line, format!("missing {key}=")))
}

#[derive(Default)]
struct Builder {
    hierarchy: Option<AttributeHierarchy>,
    naps: Vec<NapSpec>,
    servers: Vec<ServerSpec>,
    resources: Vec<ResourceSpec>,
    clients: Vec<ClientSpec>,
    script: Vec<ScriptEntry>,
    /// Line of every reference to check once the whole file is read.
    refs: Vec<(usize, &'static str, String)>,
}

impl Builder {
    fn hierarchy(&self, line: usize) -> Result<&AttributeHierarchy, ScenarioError> {
        self.hierarchy
            .as_ref()
            .ok_or_else(|| parse_err(line, "missing hierarchy"))
    }

    fn directive(&mut self, line: usize, tokens: &[&str]) -> Result<(), ScenarioError> {
        match tokens[0] {
            "hierarchy" => {
                if self.hierarchy.is_some() {
                    return Err(parse_err(line, "hierarchy given twice"));
                }
                let h = AttributeHierarchy::new(&tokens[1..])
                    .map_err(|e| parse_err(line, e.to_string()))?;
                self.hierarchy = Some(h);
            }
            "nap" => self.nap(line, tokens)?,
            "server" => self.server(line, tokens)?,
            "resource" => self.resource(line, tokens)?,
            "client" => {
                let [_, id, rest @ ..] = tokens else {
                    return Err(parse_err(line, "usage: client <id> nap=<napid>"));
                };
                self.hierarchy(line)?;
                let kv = keyed(line, rest, &["nap"])?;
                let nap = required(line, &kv, "nap")?.to_string();
                if self.clients.iter().any(|c| c.id == *id) {
                    return Err(parse_err(line, format!("client {id} defined twice")));
                }
                self.refs.push((line, "nap", nap.clone()));
                self.clients.push(ClientSpec {
                    id: id.to_string(),
                    nap,
                });
            }
            "at" => self.at(line, tokens)?,
            other => return Err(parse_err(line, format!("unknown directive {other:?}"))),
        }
        Ok(())
    }

    fn nap(&mut self, line: usize, tokens: &[&str]) -> Result<(), ScenarioError> {
        let [_, id, rest @ ..] = tokens else {
            return Err(parse_err(line, "usage: nap <id> <level>=<value> ..."));
        };
        let h = self.hierarchy(line)?;
        let mut a = AttributeAssignment::new();
        let mut seen = BTreeSet::new();
        for t in rest {
            let (level, value) = key_value(line, t)?;
            if !seen.insert(level) {
                return Err(parse_err(line, format!("level {level:?} given twice")));
            }
            a.assign(level, value)
                .map_err(|e| parse_err(line, e.to_string()))?;
        }
        match a.validate(h) {
            Ok(()) => {}
            Err(NamespaceError::MissingRoot(root)) => {
                return Err(ScenarioError::UnassignedRoot {
                    line,
                    nap: id.to_string(),
                    root,
                })
            }
            Err(e) => return Err(parse_err(line, e.to_string())),
        }
        match self.naps.iter_mut().find(|n| n.id == *id) {
            Some(n) => n.assignments.push(a),
            None => self.naps.push(NapSpec {
                id: id.to_string(),
                assignments: vec![a],
            }),
        }
        Ok(())
    }

    fn server(&mut self, line: usize, tokens: &[&str]) -> Result<(), ScenarioError> {
        let [_, id, rest @ ..] = tokens else {
            return Err(parse_err(
                line,
                "usage: server <id> nap=<napid> fqdn=<dotted>",
            ));
        };
        self.hierarchy(line)?;
        let kv = keyed(line, rest, &["nap", "fqdn"])?;
        let nap = required(line, &kv, "nap")?.to_string();
        let fqdn = GroupName::from_authority(required(line, &kv, "fqdn")?)
            .map_err(|e| parse_err(line, e.to_string()))?
            .to_string();
        if self.servers.iter().any(|s| s.id == *id) {
            return Err(parse_err(line, format!("server {id} defined twice")));
        }
        if self.servers.iter().any(|s| s.fqdn == fqdn) {
            return Err(parse_err(line, format!("fqdn {fqdn} used twice")));
        }
        self.refs.push((line, "nap", nap.clone()));
        self.servers.push(ServerSpec {
            id: id.to_string(),
            nap,
            fqdn,
        });
        Ok(())
    }

    fn resource(&mut self, line: usize, tokens: &[&str]) -> Result<(), ScenarioError> {
        let [_, server, path, rest @ ..] = tokens else {
            return Err(parse_err(
                line,
                "usage: resource <serverid> </path> value=<text> [observable] [ready_at=<t>]",
            ));
        };
        self.hierarchy(line)?;
        let path = parse_path(line, path)?;
        let observable = rest.contains(&"observable");
        let kv: Vec<&str> = rest
            .iter()
            .copied()
            .filter(|t| *t != "observable")
            .collect();
        if rest.len() - kv.len() > 1 {
            return Err(parse_err(line, "observable given twice"));
        }
        let kv = keyed(line, &kv, &["value", "ready_at"])?;
        let value = required(line, &kv, "value")?.to_string();
        let ready_at = kv
            .get("ready_at")
            .map(|t| parse_time(line, t))
            .transpose()?;
        if self
            .resources
            .iter()
            .any(|r| r.server == *server && r.path == path)
        {
            return Err(parse_err(line, "resource defined twice"));
        }
        self.refs.push((line, "server", server.to_string()));
        self.resources.push(ResourceSpec {
            server: server.to_string(),
            path,
            value,
            observable,
            ready_at,
        });
        Ok(())
    }

    fn at(&mut self, line: usize, tokens: &[&str]) -> Result<(), ScenarioError> {
        self.hierarchy(line)?;
        let action = match tokens {
            [_, _, "SET", server, path, value] => {
                self.refs.push((line, "server", server.to_string()));
                ScriptAction::Set {
                    server: server.to_string(),
                    path: parse_path(line, path)?,
                    value: value.to_string(),
                }
            }
            [_, _, "SET", ..] => {
                return Err(parse_err(
                    line,
                    "usage: at <t> SET <serverid> </path> <value>",
                ))
            }
            [_, _, client, method, uri, payload @ ..] if payload.len() <= 1 => {
                let uri = parse_uri(uri).map_err(|e| parse_err(line, e.to_string()))?;
                let action = match (*method, payload) {
                    ("GET", []) => ClientAction::Get(uri),
                    ("PUT", [p]) => ClientAction::Put(uri, p.as_bytes().to_vec()),
                    ("PUT", []) => ClientAction::Put(uri, Vec::new()),
                    ("OBSERVE", []) => ClientAction::Observe(uri),
                    ("UNOBSERVE", []) => ClientAction::Unobserve(uri),
                    ("GET" | "OBSERVE" | "UNOBSERVE", _) => {
                        return Err(parse_err(line, format!("{method} takes no payload")))
                    }
                    _ => return Err(parse_err(line, format!("unknown method {method:?}"))),
                };
                self.refs.push((line, "client", client.to_string()));
                ScriptAction::Client {
                    client: client.to_string(),
                    action,
                }
            }
            _ => {
                return Err(parse_err(
                    line,
                    "usage: at <t> <clientid> GET|PUT|OBSERVE|UNOBSERVE <coap-uri> [<payload>]",
                ))
            }
        };
        let at = parse_time(line, tokens[1])?;
        self.script.push(ScriptEntry { at, line, action });
        Ok(())
    }

    fn finish(mut self) -> Result<Scenario, ScenarioError> {
        let hierarchy = self
            .hierarchy
            .take()
            .ok_or_else(|| parse_err(0, "missing hierarchy"))?;
        for (line, kind, id) in &self.refs {
            let known = match *kind {
                "nap" => self.naps.iter().any(|n| n.id == *id),
                "server" => self.servers.iter().any(|s| s.id == *id),
                _ => self.clients.iter().any(|c| c.id == *id),
            };
            if !known {
                return Err(ScenarioError::UnknownReference {
                    line: *line,
                    kind,
                    id: id.clone(),
                });
            }
        }
        for entry in &self.script {
            if let ScriptAction::Set { server, path, .. } = &entry.action {
                if !self
                    .resources
                    .iter()
                    .any(|r| r.server == *server && r.path == *path)
                {
                    return Err(ScenarioError::UnknownReference {
                        line: entry.line,
                        kind: "resource",
                        id: format!("{server} /{}", path.join("/")),
                    });
                }
            }
        }
        // stable: equal times keep file order
        self.script.sort_by_key(|e| e.at);
        Ok(Scenario {
            hierarchy,
            naps: self.naps,
            servers: self.servers,
            resources: self.resources,
            clients: self.clients,
            script: self.script,
        })
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut b = Builder::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if b.hierarchy.is_none() && tokens[0] != "hierarchy" {
            return Err(parse_err(line, "missing hierarchy"));
        }
        b.directive(line, &tokens)?;
    }
    b.finish()
}

impl Scenario {
    pub fn nap(&self, id: &str) -> Option<&NapSpec> {
        self.naps.iter().find(|n| n.id == id)
    }

    pub fn server(&self, id: &str) -> Option<&ServerSpec> {
        self.servers.iter().find(|s| s.id == id)
    }

    pub fn client(&self, id: &str) -> Option<&ClientSpec> {
        self.clients.iter().find(|c| c.id == id)
    }

    pub fn resources_of<'a>(&'a self, server: &'a str) -> impl Iterator<Item = &'a ResourceSpec> {
        self.resources.iter().filter(move |r| r.server == server)
    }

    pub fn resource(&self, server: &str, path: &[String]) -> Option<&ResourceSpec> {
        self.resources
            .iter()
            .find(|r| r.server == server && r.path == path)
    }

    /// One configuration per NAP, in file order.
    pub fn nap_configs(&self) -> Vec<NapConfig> {
        self.naps
            .iter()
            .map(|n| NapConfig {
                node: NodeId::new(n.id.clone()),
                assignments: n.assignments.clone(),
                attached_servers: self
                    .servers
                    .iter()
                    .filter(|s| s.nap == n.id)
                    .map(|s| ServerAttachment {
                        server: s.id.clone(),
                        fqdn: s.fqdn.clone(),
                        resources: self.resources_of(&s.id).map(|r| r.path.clone()).collect(),
                    })
                    .collect(),
                attached_clients: self
                    .clients
                    .iter()
                    .filter(|c| c.nap == n.id)
                    .map(|c| c.id.clone())
                    .collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
hierarchy building wing floor
nap N1 building=building6 wing=west floor=floor3
nap N2 building=building6 wing=west floor=floor2
server S1 nap=N1 fqdn=s1.floor3.west.building6
server S2 nap=N2 fqdn=s2.floor2.west.building6
resource S1 /temperature value=22 observable
resource S2 /temperature value=21 observable
client C1 nap=N2
at 10 C1 GET coap://building6/temperature
";

    #[test]
    fn parses_the_fixture() {
        let s = parse_scenario(FIXTURE).unwrap();
        assert_eq!(s.hierarchy.levels(), ["building", "wing", "floor"]);
        assert_eq!(s.naps.len(), 2);
        assert_eq!(s.servers.len(), 2);
        assert_eq!(s.resources.len(), 2);
        assert!(s
            .resources
            .iter()
            .all(|r| r.observable && r.ready_at.is_none()));
        assert_eq!(
            s.clients,
            [ClientSpec {
                id: "C1".into(),
                nap: "N2".into()
            }]
        );
        assert_eq!(s.script.len(), 1);
        assert_eq!(s.script[0].at, 10);
        let ScriptAction::Client { client, action } = &s.script[0].action else {
            panic!("expected a client action");
        };
        assert_eq!(client, "C1");
        assert_eq!(action.uri().to_string(), "coap://building6/temperature");

        let configs = s.nap_configs();
        assert_eq!(
            configs[0].attached_servers[0].fqdn,
            "s1.floor3.west.building6"
        );
        assert_eq!(configs[1].attached_clients, ["C1"]);
    }

    #[test]
    fn empty_file_lacks_a_hierarchy() {
        assert_eq!(
            parse_scenario(""),
            Err(ScenarioError::Parse {
                line: 0,
                msg: "missing hierarchy".into()
            })
        );
        assert_eq!(
            parse_scenario("# nothing\n\n"),
            Err(ScenarioError::Parse {
                line: 0,
                msg: "missing hierarchy".into()
            })
        );
    }

    #[test]
    fn directive_before_hierarchy() {
        assert!(matches!(
            parse_scenario("client C1 nap=N1\nhierarchy building\n"),
            Err(ScenarioError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unassigned_root() {
        assert_eq!(
            parse_scenario("hierarchy building wing floor\nnap N1 wing=west\n"),
            Err(ScenarioError::UnassignedRoot {
                line: 2,
                nap: "N1".into(),
                root: "building".into()
            })
        );
    }

    #[test]
    fn unknown_references_carry_lines() {
        let text = "hierarchy b\nnap N1 b=x\nclient C1 nap=N9\n";
        assert_eq!(
            parse_scenario(text),
            Err(ScenarioError::UnknownReference {
                line: 3,
                kind: "nap",
                id: "N9".into()
            })
        );
        let text = "hierarchy b\nnap N1 b=x\nat 5 C7 GET coap://x/t\n";
        assert!(matches!(
            parse_scenario(text),
            Err(ScenarioError::UnknownReference {
                line: 3,
                kind: "client",
                ..
            })
        ));
        let text = "hierarchy b\nnap N1 b=x\nserver S1 nap=N1 fqdn=s1.x\nat 5 SET S1 /t 3\n";
        assert!(matches!(
            parse_scenario(text),
            Err(ScenarioError::UnknownReference {
                line: 4,
                kind: "resource",
                ..
            })
        ));
    }

    #[test]
    fn repeated_nap_lines_add_assignments() {
        let s = parse_scenario("hierarchy b w\nnap N1 b=x w=a\nnap N1 b=x w=c\n").unwrap();
        assert_eq!(s.naps.len(), 1);
        assert_eq!(s.naps[0].assignments.len(), 2);
    }

    #[test]
    fn script_is_sorted_stably() {
        let text = "\
hierarchy b
nap N1 b=x
server S1 nap=N1 fqdn=s1.x
resource S1 /t value=1 ready_at=60
client C1 nap=N1
at 30 C1 PUT coap://s1.x/t 5
at 10 C1 GET coap://s1.x/t
at 30 SET S1 /t 7
at 10 C1 OBSERVE coap://s1.x/t   # trailing comment
";
        let s = parse_scenario(text).unwrap();
        let lines: Vec<usize> = s.script.iter().map(|e| e.line).collect();
        assert_eq!(lines, [7, 9, 6, 8]);
        assert_eq!(s.resources[0].ready_at, Some(60));
    }

    #[test]
    fn malformed_lines() {
        for (text, line) in [
            ("hierarchy b\nnap N1 b=x\nfoo\n", 3),
            ("hierarchy b\nhierarchy c\n", 2),
            ("hierarchy b\nnap N1 b=x b=y\n", 2),
            ("hierarchy b\nnap N1 b=x\nserver S1 nap=N1\n", 3),
            ("hierarchy b\nnap N1 b=x\nserver S1 nap=N1 fqdn=a..b\n", 3),
            ("hierarchy b\nnap N1 b=x\nclient C1 nap=N1\nat -1 C1 GET coap://x/t\n", 4),
            ("hierarchy b\nnap N1 b=x\nclient C1 nap=N1\nat 1 C1 FETCH coap://x/t\n", 4),
            ("hierarchy b\nnap N1 b=x\nclient C1 nap=N1\nat 1 C1 GET http://x/t\n", 4),
            ("hierarchy b\nnap N1 b=x\nclient C1 nap=N1\nat 1 C1 GET coap://x/t extra\n", 4),
            ("hierarchy b\nnap N1 b=x\nserver S1 nap=N1 fqdn=s.x\nresource S1 t value=1\n", 4),
            ("hierarchy b\nnap N1 b=x\nserver S1 nap=N1 fqdn=s.x\nresource S1 /t\n", 4),
            ("hierarchy b\nnap N1 b=x\nnap N2 b=y\nserver S1 nap=N1 fqdn=s.x\nserver S2 nap=N2 fqdn=S.x\n", 5),
        ] {
            match parse_scenario(text) {
                Err(ScenarioError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
