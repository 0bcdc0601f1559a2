//! Hierarchical group naming.
//!
//! A hierarchy lists attribute levels from most general (the root) to most
//! specific, e.g. `building > wing > floor`. A NAP configured with values
//! for some of those levels derives every group name it belongs to: one
//! name per subset of its assigned non-root values, labels ordered most
//! specific first and always ending in the root value. With
//! `building=building6, wing=west, floor=floor3` that is `building6`,
//! `west.building6`, `floor3.building6` and `floor3.west.building6`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use icoap_codec::CoapUri;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NamespaceError {
    #[error("attribute hierarchy needs at least one level")]
    EmptyHierarchy,
    #[error("invalid level name {0:?}")]
    InvalidLevel(String),
    #[error("level {0:?} appears twice in the hierarchy")]
    DuplicateLevel(String),
    #[error("level {0:?} is not part of the hierarchy")]
    UnknownLevel(String),
    #[error("invalid value {value:?} for level {level:?}")]
    InvalidValue { level: String, value: String },
    #[error("root level {0:?} is not assigned")]
    MissingRoot(String),
    #[error("invalid group name {0:?}")]
    InvalidName(String),
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && !label.contains('.') && !label.contains(char::is_whitespace)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeHierarchy {
    levels: Vec<String>,
}

impl AttributeHierarchy {
    pub fn new<S: AsRef<str>>(levels: impl IntoIterator<Item = S>) -> Result<Self, NamespaceError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for level in levels {
            let level = level.as_ref();
            if level.is_empty() || level.contains(char::is_whitespace) {
                return Err(NamespaceError::InvalidLevel(level.to_string()));
            }
            if !seen.insert(level.to_string()) {
                return Err(NamespaceError::DuplicateLevel(level.to_string()));
            }
            out.push(level.to_string());
        }
        if out.is_empty() {
            return Err(NamespaceError::EmptyHierarchy);
        }
        Ok(Self { levels: out })
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn root(&self) -> &str {
        &self.levels[0]
    }

    pub fn contains(&self, level: &str) -> bool {
        self.levels.iter().any(|l| l == level)
    }

    /// A copy with one more (most specific) level appended.
    pub fn extended(&self, level: &str) -> Result<Self, NamespaceError> {
        Self::new(self.levels.iter().map(String::as_str).chain([level]))
    }
}

/// Values a NAP is configured with, keyed by level name. Values are
/// stored lowercase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttributeAssignment {
    values: BTreeMap<String, String>,
}

impl AttributeAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, level: &str, value: &str) -> Result<Self, NamespaceError> {
        self.assign(level, value)?;
        Ok(self)
    }

    pub fn assign(&mut self, level: &str, value: &str) -> Result<(), NamespaceError> {
        if !valid_label(value) {
            return Err(NamespaceError::InvalidValue {
                level: level.to_string(),
                value: value.to_string(),
            });
        }
        self.values
            .insert(level.to_string(), value.to_ascii_lowercase());
        Ok(())
    }

    pub fn get(&self, level: &str) -> Option<&str> {
        self.values.get(level).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self, h: &AttributeHierarchy) -> Result<(), NamespaceError> {
        if let Some(level) = self.values.keys().find(|l| !h.contains(l)) {
            return Err(NamespaceError::UnknownLevel(level.clone()));
        }
        if self.get(h.root()).is_none() {
            return Err(NamespaceError::MissingRoot(h.root().to_string()));
        }
        Ok(())
    }

    /// Assigned non-root values, most specific first.
    fn specific_values<'a>(&'a self, h: &'a AttributeHierarchy) -> impl Iterator<Item = &'a str> {
        h.levels()[1..].iter().rev().filter_map(|l| self.get(l))
    }
}

/// A dotted group name, most specific label first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupName {
    labels: Vec<String>,
}

impl GroupName {
    /// Reads a URI authority as a group name, labels as written. Any
    /// well-formed authority is a name; server FQDNs use the same path.
    pub fn from_authority(authority: &str) -> Result<Self, NamespaceError> {
        let labels: Vec<String> = authority.split('.').map(str::to_ascii_lowercase).collect();
        if labels.iter().any(|l| !valid_label(l)) {
            return Err(NamespaceError::InvalidName(authority.to_string()));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// The last label, which for constructed names is the root value.
    pub fn root_label(&self) -> &str {
        self.labels.last().expect("group names are non-empty")
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.labels.join("."))
    }
}

/// Flat identifier in the ICN core's rendezvous space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IcnIdentifier(String);

impl IcnIdentifier {
    pub const GROUP_PREFIX: &'static str = "grp/";
    pub const REPLY_PREFIX: &'static str = "rsp/";
    pub const NOTIFY_PREFIX: &'static str = "ntf/";

    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Identifier a NAP publishes responses to: `rsp/<node>/<exchange>`.
    pub fn reply(node: &str, exchange_id: &str) -> Self {
        Self(format!("{}{node}/{exchange_id}", Self::REPLY_PREFIX))
    }

    /// Identifier carrying Observe notifications for `resource`.
    pub fn notification(resource: &CoapUri) -> Self {
        Self(format!("{}{resource}", Self::NOTIFY_PREFIX))
    }

    /// For a reply identifier, the node that minted it.
    pub fn reply_node(&self) -> Option<&str> {
        self.0
            .strip_prefix(Self::REPLY_PREFIX)
            .and_then(|rest| rest.split_once('/'))
            .map(|(node, _)| node)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for IcnIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn identifier_for(name: &GroupName) -> IcnIdentifier {
    IcnIdentifier(format!("{}{name}", IcnIdentifier::GROUP_PREFIX))
}

pub fn construct_names(
    h: &AttributeHierarchy,
    a: &AttributeAssignment,
) -> Result<BTreeSet<GroupName>, NamespaceError> {
    a.validate(h)?;
    let root = a.get(h.root()).expect("validated").to_string();
    // Grow names from the root outwards: each assigned level, general to
    // specific, either contributes its value as a new leading label or not.
    let mut names: Vec<Vec<String>> = vec![vec![root]];
    for level in &h.levels()[1..] {
        if let Some(value) = a.get(level) {
            let extended: Vec<Vec<String>> = names
                .iter()
                .map(|labels| {
                    let mut longer = vec![value.to_string()];
                    longer.extend(labels.iter().cloned());
                    longer
                })
                .collect();
            names.extend(extended);
        }
    }
    Ok(names
        .into_iter()
        .map(|labels| GroupName { labels })
        .collect())
}

/// True iff `n` is one of the names `a` constructs.
pub fn matches(a: &AttributeAssignment, n: &GroupName, h: &AttributeHierarchy) -> bool {
    let Some(root) = a.get(h.root()) else {
        return false;
    };
    let Some((last, leading)) = n.labels.split_last() else {
        return false;
    };
    if last != root {
        return false;
    }
    // leading labels must be a subsequence of the assigned values
    let mut values = a.specific_values(h);
    leading
        .iter()
        .all(|label| values.by_ref().any(|v| v == label))
}
