use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Canonical `CVE-YYYY-NNNN...` identifier.
///
/// Candidate (`CAN-`) identifiers and lowercase spellings are accepted on
/// parse and normalized, so two ids compare equal iff they name the same
/// vulnerability.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CveId(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed CVE identifier: {0:?}")]
pub struct InvalidCveId(pub String);

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^(?:CVE|CAN)-(\d{4})-(\d{4,})$").unwrap())
}

impl CveId {
    pub(crate) fn from_parts(year: &str, number: &str) -> Self {
        CveId(format!("CVE-{year}-{number}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn year(&self) -> u32 {
        self.0[4..8].parse().expect("grammar guarantees four digits")
    }
}

impl FromStr for CveId {
    type Err = InvalidCveId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let caps = grammar()
            .captures(s.trim())
            .ok_or_else(|| InvalidCveId(s.to_string()))?;
        Ok(CveId::from_parts(&caps[1], &caps[2]))
    }
}

impl TryFrom<String> for CveId {
    type Error = InvalidCveId;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<CveId> for String {
    fn from(id: CveId) -> Self {
        id.0
    }
}

impl fmt::Display for CveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_syntax_is_canonicalized() {
        let id: CveId = "can-2004-0001".parse().unwrap();
        assert_eq!(id.as_str(), "CVE-2004-0001");
        assert_eq!(id.year(), 2004);
    }

    #[test]
    fn long_sequence_numbers_are_accepted() {
        assert!("CVE-2014-1234567".parse::<CveId>().is_ok());
    }

    #[test]
    fn malformed_ids_are_rejected() {
        for bad in ["CVE-16-1", "CVE-2016-123", "CVE2016-1234", "", "CVE-2016-12a4"] {
            assert!(bad.parse::<CveId>().is_err(), "{bad}");
        }
    }
}
