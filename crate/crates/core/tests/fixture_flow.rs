//! The library stages chained by hand over the bundled fixture archive.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use coorddelay::archive::{parse_archive, resolve_identities, DateWindow};
use coorddelay::extraction::extract_facts;
use coorddelay::metrics::{
    assemble, compute_delays, earliest_mentions, MetricInputs, MetricTable, DEFAULT_TOP_CWES,
};
use coorddelay::networks::{build_domain_network, build_social_network, core_membership};
use coorddelay::vulndb::load_records;
use coorddelay::CveId;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/tests/fixtures/pipeline")
}

fn id(s: &str) -> CveId {
    s.parse().unwrap()
}

#[test]
fn fixture_delays_and_metrics() {
    let window = DateWindow::new(
        NaiveDate::from_ymd_opt(2008, 2, 1).unwrap(),
        NaiveDate::from_ymd_opt(2016, 12, 31).unwrap(),
    )
    .unwrap();
    let ingest = parse_archive(&fixture().join("archive"), &window).unwrap();
    assert_eq!(ingest.messages.len(), 20);
    assert_eq!(ingest.unknown_senders, 1);

    let names: Vec<String> = ingest.messages.iter().map(|m| m.sender_raw.clone()).collect();
    let merges = vec![("J. Bressers".to_string(), "Josh Bressers".to_string())];
    let ids = resolve_identities(&names, 0.8, &merges).unwrap();
    assert_eq!(ids.participants.len(), 8);
    assert_eq!(ids.participant_of("Steven M Christey"), ids.participant_of("Steven M. Christey"));
    assert_eq!(ids.participant_of("J. Bressers"), ids.participant_of("Josh Bressers"));

    let facts: Vec<_> = ingest.messages.iter().map(extract_facts).collect();
    // the forwarded block of the 2008-06-02 message is stripped
    let fwd = facts.iter().find(|f| f.message_key == "2008/06/02/1").unwrap();
    assert_eq!(fwd.cve_ids.iter().map(CveId::as_str).collect::<Vec<_>>(), ["CVE-2008-0005"]);

    let records = load_records(&[fixture().join("nvdcve-1.1-fixture.json")]).unwrap();
    assert_eq!(records.records.len(), 14);
    let mentions = earliest_mentions(
        ingest.messages.iter().zip(&facts).map(|(m, f)| (m.sent_at.date_naive(), &f.cve_ids)),
    );
    let delays = compute_delays(&mentions, &records.records);
    let got: Vec<(&str, u32)> = delays.samples.iter().map(|s| (s.cve_id.as_str(), s.y)).collect();
    assert_eq!(
        got,
        [
            ("CVE-2008-0001", 7),
            ("CVE-2008-0002", 18),
            ("CVE-2008-0003", 0),
            ("CVE-2008-0004", 41),
            ("CVE-2008-0005", 1),
            ("CVE-2008-0006", 48),
            ("CVE-2008-0007", 2),
            ("CVE-2008-0008", 0),
            ("CVE-2008-0009", 70),
            ("CVE-2008-4688", 2),
            ("CVE-2009-0010", 2),
            ("CVE-2009-0011", 74),
        ]
    );
    assert_eq!(delays.rejected, [id("CVE-2008-0012")]);
    assert_eq!(delays.negative, [id("CVE-2008-0013")]);
    assert_eq!(delays.missing, [id("CVE-2008-0099")]);
    // 23:30 at -0500 is the next UTC day
    assert_eq!(delays.samples[1].t_oss, NaiveDate::from_ymd_opt(2008, 3, 2).unwrap());

    let canonical: Vec<&str> = ingest
        .messages
        .iter()
        .map(|m| ids.canonical_of(&m.sender_raw).unwrap())
        .collect();
    let social = build_social_network(canonical.iter().copied().zip(facts.iter().map(|f| &f.cve_ids)));
    let domains = build_domain_network(facts.iter().map(|f| (&f.cve_ids, &f.domains)));
    let mitredev = core_membership(&social, &["Steven M. Christey".to_string(), "Kurt Seifried".to_string()]);
    let mut bodies: BTreeMap<CveId, Vec<&str>> = BTreeMap::new();
    for (m, f) in ingest.messages.iter().zip(&facts) {
        for c in &f.cve_ids {
            bodies.entry(c.clone()).or_default().push(&m.body);
        }
    }
    let table = MetricTable::compute(&MetricInputs {
        samples: &delays.samples,
        records: &records.records,
        social: &social,
        domains: &domains,
        mitredev: &mitredev,
        bodies: &bodies,
    })
    .unwrap();
    let row = |c: &str| table.rows.iter().find(|r| r.cve_id.as_str() == c).unwrap();
    let r = row("CVE-2008-4688");
    assert_eq!((r.infdeg, r.infra.vulninf, r.infra.bugs, r.infra.repos, r.infra.support), (6, 1, 1, 1, 0));
    let r = row("CVE-2008-0002");
    assert_eq!((r.socdeg, r.mitredev, r.infdeg, r.nvdrefs), (2, 1, 3, 1));
    assert_eq!(r.temporal.weekend, 1);
    let r = row("CVE-2008-0007");
    assert!(r.cvss_missing);

    assert_eq!(table.top_cwes(DEFAULT_TOP_CWES).len(), 10);
    let widths: Vec<usize> = (1..=6).map(|l| assemble(&table, l).unwrap().ncols()).collect();
    assert_eq!(widths, [21, 25, 31, 34, 37, 47]);
}
