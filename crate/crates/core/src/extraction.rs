//! CVE identifiers and hyperlink domains mentioned in message bodies.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::archive::RawEmail;
use crate::cve::CveId;

/// Per-message extraction result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageFacts {
    pub message_key: String,
    pub cve_ids: BTreeSet<CveId>,
    pub domains: BTreeSet<String>,
    pub body_length_chars: usize,
}

fn cve_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:CVE|CAN)-(\d{4})-(\d{4,})\b").unwrap())
}

/// Finds `CVE-YYYY-NNNN...` and legacy `CAN-` identifiers, case-insensitively,
/// and returns them in canonical `CVE-` form.
pub fn extract_cves(text: &str) -> BTreeSet<CveId> {
    cve_pattern()
        .captures_iter(text)
        .map(|c| CveId::from_parts(&c[1], &c[2]))
        .collect()
}

/// Dotted-quad with every octet in 0..=255 (leading zeros tolerated).
fn is_ipv4(s: &str) -> bool {
    let octets: Vec<&str> = s.split('.').collect();
    octets.len() == 4
        && octets.iter().all(|o| {
            !o.is_empty() && o.len() <= 3 && o.bytes().all(|b| b.is_ascii_digit()) && o.parse::<u16>().is_ok_and(|v| v <= 255)
        })
}

/// A domain is kept when it has at least three characters, contains a dot
/// and is not an IPv4 address.
pub fn validate_domain(d: &str) -> bool {
    d.chars().count() >= 3 && d.contains('.') && !is_ipv4(d)
}

fn url_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)\b(?:https?|ftp)://([^\s/?#<>"'()\[\]{}|\\^`]+)|(?:^|[^\w.@/:-])(www\.[a-z0-9][a-z0-9.-]*)"#)
            .unwrap()
    })
}

fn normalize_host(authority: &str) -> Option<String> {
    let host = authority.rsplit('@').next()?;
    if host.starts_with('[') {
        return None;
    }
    let host = match host.rsplit_once(':') {
        Some((h, port)) if port.bytes().all(|b| b.is_ascii_digit()) => h,
        _ => host,
    };
    let host = host.trim_end_matches(['.', ',', ';', ':', '!', '>']).to_lowercase();
    (!host.is_empty()).then_some(host)
}

/// Hosts of `http`, `https` and `ftp` URLs and of bare `www.` names, lowercased
/// with userinfo and port removed, filtered through [`validate_domain`].
pub fn extract_domains(text: &str) -> BTreeSet<String> {
    url_pattern()
        .captures_iter(text)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .filter_map(|m| normalize_host(m.as_str()))
        .filter(|h| validate_domain(h))
        .collect()
}

pub fn extract_facts(email: &RawEmail) -> MessageFacts {
    let facts = MessageFacts {
        message_key: email.message_key.clone(),
        cve_ids: extract_cves(&email.body),
        domains: extract_domains(&email.body),
        body_length_chars: email.body.chars().count(),
    };
    debug_assert!(facts.domains.iter().all(|d| validate_domain(d)));
    facts
}

/// Long-format facts table: one row per CVE (empty domain) and one per domain
/// (empty CVE). Messages with neither get a single row with both empty.
pub fn write_facts_csv<W: Write>(facts: &[MessageFacts], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["message_key", "cve_id", "domain"])?;
    for f in facts {
        for c in &f.cve_ids {
            w.write_record([f.message_key.as_str(), c.as_str(), ""])?;
        }
        for d in &f.domains {
            w.write_record([f.message_key.as_str(), "", d.as_str()])?;
        }
        if f.cve_ids.is_empty() && f.domains.is_empty() {
            w.write_record([f.message_key.as_str(), "", ""])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[&str]) -> BTreeSet<CveId> {
        v.iter().map(|s| s.parse().unwrap()).collect()
    }

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cve_examples() {
        assert_eq!(extract_cves("use CVE-2016-6526"), ids(&["CVE-2016-6526"]));
        assert_eq!(
            extract_cves("CAN-2004-0001 and cve-2014-12345"),
            ids(&["CVE-2004-0001", "CVE-2014-12345"])
        );
        assert!(extract_cves("CVE-16-1").is_empty());
    }

    #[test]
    fn cve_edge_cases() {
        assert_eq!(extract_cves("(CVE-2008-0001), CVE-2008-0001."), ids(&["CVE-2008-0001"]));
        assert!(extract_cves("xCVE-2008-0001 CVE-2008-0001a CVE-2008-001").is_empty());
        assert_eq!(extract_cves("CVE-2008-0001/CVE-2008-0002"), ids(&["CVE-2008-0001", "CVE-2008-0002"]));
    }

    #[test]
    fn domain_validation() {
        assert!(validate_domain("bugs.debian.org"));
        assert!(!validate_domain("192.168.0.1"));
        assert!(!validate_domain("a."));
        assert!(validate_domain("999.1.1.1"));
        assert!(!validate_domain("localhost"));
        assert!(!validate_domain("001.002.003.004"));
    }

    #[test]
    fn ipv4_check_matches_brute_force_octet_oracle() {
        // every 0..=999 candidate octet against the plain numeric range rule
        for v in 0..1000u32 {
            for repr in [v.to_string(), format!("{v:03}")] {
                let addr = format!("10.{repr}.0.1");
                assert_eq!(is_ipv4(&addr), v <= 255, "{addr}");
                assert_eq!(validate_domain(&addr), v > 255, "{addr}");
            }
        }
    }

    #[test]
    fn domain_examples() {
        assert_eq!(extract_domains("see https://bugs.debian.org/123"), set(&["bugs.debian.org"]));
        assert_eq!(
            extract_domains("http://192.0.2.7/x and http://cvs.example.org"),
            set(&["cvs.example.org"])
        );
        assert!(extract_domains("no links here, just CVE-2008-0001").is_empty());
    }

    #[test]
    fn hosts_are_normalized() {
        let text = "HTTPS://User:pw@Git.Example.ORG:8080/p?q=1 ftp://ftp.x.org. \
                    <http://trac.foo.net/ticket/1> see www.openwall.com/lists too";
        assert_eq!(
            extract_domains(text),
            set(&["ftp.x.org", "git.example.org", "trac.foo.net", "www.openwall.com"])
        );
        assert!(extract_domains("http://[::1]:80/ mailto:www.a@b.org").is_empty());
    }

    proptest! {
        #[test]
        fn cve_sets_ignore_concatenation_order(
            a in "[a-z ]{0,5}(CVE|can)-20[0-9]{2}-[0-9]{4,6}[ ,.]",
            b in "[a-z ]{0,5}(cve|CAN)-20[0-9]{2}-[0-9]{4,6}[ ,.]",
        ) {
            let ab = extract_cves(&format!("{a}{b}"));
            let ba = extract_cves(&format!("{b}{a}"));
            prop_assert_eq!(&ab, &ba);
            prop_assert!(ab.iter().all(|c| c.as_str().starts_with("CVE-")));
        }

        #[test]
        fn extracted_domains_are_valid(text in r"(https?://[a-z0-9.:@-]{0,14}/? |www\.[a-z.]{0,6} |[a-z. ]{0,6}){0,6}") {
            for d in extract_domains(&text) {
                prop_assert!(validate_domain(&d));
            }
        }
    }
}
