use std::fmt;

use thiserror::Error;

use crate::message::{option, CoapMessage, CoapOption};

const SCHEME: &str = "coap://";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UriError {
    #[error("invalid URI {uri:?}: {reason}")]
    InvalidUri { uri: String, reason: &'static str },
}

fn invalid(uri: &str, reason: &'static str) -> UriError {
    UriError::InvalidUri {
        uri: uri.to_string(),
        reason,
    }
}

/// A `coap://` URI reduced to what routing needs: a lowercase dotted
/// authority and the path segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoapUri {
    authority: String,
    path: Vec<String>,
}

impl CoapUri {
    pub fn new<S: Into<String>>(
        authority: &str,
        path: impl IntoIterator<Item = S>,
    ) -> Result<Self, UriError> {
        let authority = normalize_authority(authority)?;
        Ok(Self {
            authority,
            path: path.into_iter().map(Into::into).collect(),
        })
    }

    pub fn authority(&self) -> &str {
        &self.authority
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }
}

impl fmt::Display for CoapUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SCHEME}{}", self.authority)?;
        if self.path.is_empty() {
            return f.write_str("/");
        }
        for segment in &self.path {
            write!(f, "/{segment}")?;
        }
        Ok(())
    }
}

fn normalize_authority(authority: &str) -> Result<String, UriError> {
    if authority.is_empty() {
        return Err(invalid(authority, "empty authority"));
    }
    if authority.split('.').any(str::is_empty) {
        return Err(invalid(authority, "empty label"));
    }
    if authority.chars().any(|c| c.is_whitespace() || c == '/') {
        return Err(invalid(authority, "illegal character in authority"));
    }
    Ok(authority.to_ascii_lowercase())
}

/// Parses `coap://<authority>/<path>`. Empty path segments are dropped, so
/// `coap://host/` and `coap://host` both have an empty path. Query strings
/// and fragments are not supported.
pub fn parse_uri(text: &str) -> Result<CoapUri, UriError> {
    let rest = text
        .strip_prefix(SCHEME)
        .ok_or_else(|| invalid(text, "missing coap:// scheme"))?;
    if rest.contains(['?', '#']) {
        return Err(invalid(text, "query and fragment are not supported"));
    }
    let (authority, path) = rest.split_once('/').unwrap_or((rest, ""));
    let authority = normalize_authority(authority).map_err(|_| match authority {
        "" => invalid(text, "empty authority"),
        _ => invalid(text, "empty label"),
    })?;
    let path = path
        .split('/')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    Ok(CoapUri { authority, path })
}

/// Uri-Host followed by one Uri-Path option per segment.
pub fn uri_to_options(uri: &CoapUri) -> Vec<CoapOption> {
    std::iter::once(CoapOption::uri_host(&uri.authority))
        .chain(uri.path.iter().map(|s| CoapOption::uri_path(s)))
        .collect()
}

pub fn options_to_uri(msg: &CoapMessage) -> Result<CoapUri, UriError> {
    let mut hosts = msg.option_values(option::URI_HOST);
    let host = hosts
        .next()
        .ok_or_else(|| invalid("", "missing Uri-Host"))?;
    if hosts.next().is_some() {
        return Err(invalid("", "repeated Uri-Host"));
    }
    let host = std::str::from_utf8(host).map_err(|_| invalid("", "Uri-Host is not UTF-8"))?;
    let path = msg
        .option_values(option::URI_PATH)
        .map(|seg| {
            std::str::from_utf8(seg)
                .map(str::to_string)
                .map_err(|_| invalid(host, "Uri-Path is not UTF-8"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CoapUri {
        authority: normalize_authority(host)?,
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{Code, MessageType};

    #[test]
    fn parses_building_uri() {
        let uri = parse_uri("coap://floor3.building6/temperature").unwrap();
        assert_eq!(uri.authority(), "floor3.building6");
        assert_eq!(uri.path(), ["temperature"]);
        assert_eq!(uri.to_string(), "coap://floor3.building6/temperature");
    }

    #[test]
    fn lowercases_authority_and_allows_empty_path() {
        let uri = parse_uri("coap://Building6/").unwrap();
        assert_eq!(uri.authority(), "building6");
        assert!(uri.path().is_empty());
        assert_eq!(parse_uri("coap://building6").unwrap(), uri);
    }

    #[test]
    fn rejects_bad_uris() {
        for text in [
            "http://x/y",
            "coap:/x",
            "coap:///temperature",
            "coap://a..b/t",
            "coap://.a/t",
            "coap://a/t?x=1",
        ] {
            assert!(parse_uri(text).is_err(), "{text}");
        }
    }

    #[test]
    fn options_round_trip() {
        let uri = CoapUri::new("floor3.building6", ["temperature"]).unwrap();
        let opts = uri_to_options(&uri);
        assert_eq!(
            opts,
            vec![
                CoapOption::uri_host("floor3.building6"),
                CoapOption::uri_path("temperature")
            ]
        );
        let msg = CoapMessage::new(MessageType::Confirmable, Code::GET, 1).with_options(opts);
        assert_eq!(options_to_uri(&msg).unwrap(), uri);
    }

    #[test]
    fn empty_path_maps_to_host_only() {
        let uri = CoapUri::new("building6", Vec::<String>::new()).unwrap();
        assert_eq!(
            uri_to_options(&uri),
            vec![CoapOption::uri_host("building6")]
        );
    }

    #[test]
    fn segments_keep_order() {
        let uri = CoapUri::new("h", ["a", "b"]).unwrap();
        let opts = uri_to_options(&uri);
        assert_eq!(
            &opts[1..],
            &[CoapOption::uri_path("a"), CoapOption::uri_path("b")]
        );
        let msg = CoapMessage::new(MessageType::Confirmable, Code::GET, 1).with_options(opts);
        assert_eq!(options_to_uri(&msg).unwrap().path(), ["a", "b"]);
    }

    #[test]
    fn missing_or_repeated_host() {
        let msg = CoapMessage::new(MessageType::Confirmable, Code::GET, 1)
            .with_option(CoapOption::uri_path("t"));
        assert!(options_to_uri(&msg).is_err());
        let msg = msg
            .with_option(CoapOption::uri_host("a"))
            .with_option(CoapOption::uri_host("b"));
        assert!(options_to_uri(&msg).is_err());
    }
}
