//! Vulnerability-database records.
//!
//! Feeds are read either in the NVD JSON layouts (the 1.1 yearly feeds with a
//! `CVE_Items` array, or the 2.0 API layout with a `vulnerabilities` array) or
//! in a flat CSV layout:
//!
//! ```text
//! cve_id,published_at,summary,cvss_vector,cwes,references
//! CVE-2008-4688,2008-10-22,"Buffer overflow ...",AV:N/AC:L/Au:N/C:P/I:P/A:P,CWE-119,http://a;http://b
//! ```
//!
//! with `cwes` and `references` semicolon-separated.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::cve::CveId;

#[derive(Debug, thiserror::Error)]
pub enum VulnDbError {
    #[error("cannot read feed {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse feed {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("unknown CVSS v2 {field} value {value:?}")]
    UnknownLevel { field: &'static str, value: String },
    #[error("malformed CVSS v2 vector {0:?}")]
    BadVector(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Write(#[from] std::io::Error),
}

macro_rules! cvss_enum {
    ($name:ident, $field:literal, { $($variant:ident => $word:literal, $abbr:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "SCREAMING_SNAKE_CASE")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            fn from_abbrev(s: &str) -> Option<Self> {
                match s {
                    $($abbr => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl FromStr for $name {
            type Err = VulnDbError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let upper = s.trim().to_ascii_uppercase();
                // CVSS v2 documents spell the adjacent access vector both ways
                let upper = if upper == "ADJACENT" { "ADJACENT_NETWORK".to_string() } else { upper };
                match upper.as_str() {
                    $($word => Ok($name::$variant),)+
                    _ => Err(VulnDbError::UnknownLevel { field: $field, value: s.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

cvss_enum!(AccessVector, "access vector", {
    Local => "LOCAL", "L",
    AdjacentNetwork => "ADJACENT_NETWORK", "A",
    Network => "NETWORK", "N",
});

cvss_enum!(AccessComplexity, "access complexity", {
    Low => "LOW", "L",
    Medium => "MEDIUM", "M",
    High => "HIGH", "H",
});

cvss_enum!(Authentication, "authentication", {
    None => "NONE", "N",
    Single => "SINGLE", "S",
    Multiple => "MULTIPLE", "M",
});

cvss_enum!(Impact, "impact", {
    None => "NONE", "N",
    Partial => "PARTIAL", "P",
    Complete => "COMPLETE", "C",
});

/// Categorical CVSS v2 base vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvssV2 {
    pub access_vector: AccessVector,
    pub access_complexity: AccessComplexity,
    pub authentication: Authentication,
    pub conf_impact: Impact,
    pub integ_impact: Impact,
    pub avail_impact: Impact,
}

impl CvssV2 {
    /// Parses a vector such as `AV:N/AC:L/Au:N/C:P/I:P/A:P`, optionally
    /// wrapped in parentheses.
    pub fn parse_vector(vector: &str) -> Result<Self, VulnDbError> {
        let bad = || VulnDbError::BadVector(vector.to_string());
        let body = vector.trim().trim_start_matches('(').trim_end_matches(')');
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for part in body.split('/') {
            let (k, v) = part.split_once(':').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        Ok(CvssV2 {
            access_vector: AccessVector::from_abbrev(get("AV")?).ok_or_else(bad)?,
            access_complexity: AccessComplexity::from_abbrev(get("AC")?).ok_or_else(bad)?,
            authentication: Authentication::from_abbrev(get("Au")?).ok_or_else(bad)?,
            conf_impact: Impact::from_abbrev(get("C")?).ok_or_else(bad)?,
            integ_impact: Impact::from_abbrev(get("I")?).ok_or_else(bad)?,
            avail_impact: Impact::from_abbrev(get("A")?).ok_or_else(bad)?,
        })
    }

    pub fn vector_string(&self) -> String {
        let ab = |s: &str| s[..1].to_string();
        format!(
            "AV:{}/AC:{}/Au:{}/C:{}/I:{}/A:{}",
            ab(self.access_vector.as_str()),
            ab(self.access_complexity.as_str()),
            ab(self.authentication.as_str()),
            ab(self.conf_impact.as_str()),
            ab(self.integ_impact.as_str()),
            ab(self.avail_impact.as_str()),
        )
    }
}

/// One vulnerability-database entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CveRecord {
    pub cve_id: CveId,
    pub published_at: NaiveDate,
    pub summary: String,
    pub cvss: Option<CvssV2>,
    pub cwes: Vec<String>,
    pub reference_urls: Vec<String>,
    pub rejected: bool,
}

/// True iff the summary carries the literal `REJECT` token used by the
/// database's rejection banner.
pub fn is_rejected(summary: &str) -> bool {
    summary.contains("REJECT")
}

/// Collapses an impact level to a presence flag: NONE is 0, PARTIAL and
/// COMPLETE are 1.
pub fn recode_impact(level: Impact) -> u8 {
    match level {
        Impact::None => 0,
        Impact::Partial | Impact::Complete => 1,
    }
}

/// Impact recoding from the textual level, failing on unknown levels.
pub fn recode_impact_str(level: &str) -> Result<u8, VulnDbError> {
    level.parse().map(recode_impact)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ImpactFlags {
    pub conf: u8,
    pub integ: u8,
    pub avail: u8,
}

pub fn impact_flags(cvss: &CvssV2) -> ImpactFlags {
    ImpactFlags {
        conf: recode_impact(cvss.conf_impact),
        integ: recode_impact(cvss.integ_impact),
        avail: recode_impact(cvss.avail_impact),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ExploitFlags {
    /// Exploitable only with network access.
    pub network: u8,
    /// Medium or high access complexity.
    pub complex: u8,
    /// Exploitation requires authentication.
    pub auth: u8,
}

pub fn exploit_flags(cvss: &CvssV2) -> ExploitFlags {
    ExploitFlags {
        network: u8::from(cvss.access_vector == AccessVector::Network),
        complex: u8::from(matches!(
            cvss.access_complexity,
            AccessComplexity::Medium | AccessComplexity::High
        )),
        auth: u8::from(matches!(
            cvss.authentication,
            Authentication::Single | Authentication::Multiple
        )),
    }
}

/// Number of reference URLs as listed; duplicates are counted.
pub fn reference_count(record: &CveRecord) -> usize {
    record.reference_urls.len()
}

/// Records keyed by CVE id plus load diagnostics.
#[derive(Debug, Clone, Default)]
pub struct RecordSet {
    pub records: BTreeMap<CveId, CveRecord>,
    pub duplicates: usize,
    pub skipped: usize,
}

impl RecordSet {
    pub fn get(&self, id: &CveId) -> Option<&CveRecord> {
        self.records.get(id)
    }

    pub fn rejected_count(&self) -> usize {
        self.records.values().filter(|r| r.rejected).count()
    }

    fn insert(&mut self, record: CveRecord) {
        if self.records.contains_key(&record.cve_id) {
            log::warn!("duplicate record for {}, keeping the first", record.cve_id);
            self.duplicates += 1;
        } else {
            self.records.insert(record.cve_id.clone(), record);
        }
    }
}

/// Loads and merges feed files. Records missing an id or a publication date
/// are skipped; for duplicate ids the first occurrence wins.
pub fn load_records<P: AsRef<Path>>(feeds: &[P]) -> Result<RecordSet, VulnDbError> {
    let mut set = RecordSet::default();
    for feed in feeds {
        let path = feed.as_ref();
        let text = fs::read_to_string(path).map_err(|e| VulnDbError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let is_csv = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let parsed = if is_csv {
            parse_csv_feed(&text)
        } else {
            parse_json_feed(&text)
        }
        .map_err(|reason| VulnDbError::Parse {
            path: path.to_path_buf(),
            reason,
        })?;
        for item in parsed {
            match item {
                Ok(record) => set.insert(record),
                Err(reason) => {
                    log::warn!("{}: skipping record: {reason}", path.display());
                    set.skipped += 1;
                }
            }
        }
    }
    Ok(set)
}

type Parsed = Vec<Result<CveRecord, String>>;

fn parse_date_prefix(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.get(..10)?, "%Y-%m-%d").ok()
}

fn build_record(
    id: Option<&str>,
    published: Option<&str>,
    summary: String,
    cvss: Option<CvssV2>,
    cwes: Vec<String>,
    reference_urls: Vec<String>,
) -> Result<CveRecord, String> {
    let id = id.ok_or("missing CVE id")?;
    let cve_id: CveId = id.parse().map_err(|e| format!("{e}"))?;
    let published = published.ok_or_else(|| format!("{cve_id}: missing publication date"))?;
    let published_at = parse_date_prefix(published)
        .ok_or_else(|| format!("{cve_id}: bad publication date {published:?}"))?;
    Ok(CveRecord {
        cve_id,
        published_at,
        rejected: is_rejected(&summary),
        summary,
        cvss,
        cwes,
        reference_urls,
    })
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct LangString {
    lang: String,
    value: String,
}

#[derive(Deserialize, Default)]
#[serde(default, rename_all = "camelCase")]
struct CvssData {
    vector_string: Option<String>,
    access_vector: Option<String>,
    access_complexity: Option<String>,
    authentication: Option<String>,
    confidentiality_impact: Option<String>,
    integrity_impact: Option<String>,
    availability_impact: Option<String>,
}

impl CvssData {
    fn to_cvss(&self) -> Result<CvssV2, VulnDbError> {
        if let Some(v) = &self.vector_string {
            return CvssV2::parse_vector(v);
        }
        let req = |f: &Option<String>, name: &'static str| {
            f.clone().ok_or(VulnDbError::UnknownLevel {
                field: name,
                value: String::new(),
            })
        };
        Ok(CvssV2 {
            access_vector: req(&self.access_vector, "access vector")?.parse()?,
            access_complexity: req(&self.access_complexity, "access complexity")?.parse()?,
            authentication: req(&self.authentication, "authentication")?.parse()?,
            conf_impact: req(&self.confidentiality_impact, "impact")?.parse()?,
            integ_impact: req(&self.integrity_impact, "impact")?.parse()?,
            avail_impact: req(&self.availability_impact, "impact")?.parse()?,
        })
    }
}

fn english(items: &[LangString]) -> String {
    items
        .iter()
        .find(|d| d.lang == "en")
        .or_else(|| items.first())
        .map(|d| d.value.clone())
        .unwrap_or_default()
}

fn cwe_values<'a>(groups: impl Iterator<Item = &'a Vec<LangString>>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for group in groups {
        for d in group {
            if !out.contains(&d.value) {
                out.push(d.value.clone());
            }
        }
    }
    out
}

mod v11 {
    use super::{CvssData, LangString};
    use serde::Deserialize;

    #[derive(Deserialize)]
    pub struct Feed {
        #[serde(rename = "CVE_Items")]
        pub items: Vec<serde_json::Value>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default, rename_all = "camelCase")]
    pub struct Item {
        pub cve: Cve,
        pub impact: Impact,
        pub published_date: Option<String>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct Cve {
        #[serde(rename = "CVE_data_meta")]
        pub meta: Meta,
        pub problemtype: ProblemType,
        pub references: References,
        pub description: Description,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct Meta {
        #[serde(rename = "ID")]
        pub id: Option<String>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct ProblemType {
        pub problemtype_data: Vec<ProblemTypeData>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct ProblemTypeData {
        pub description: Vec<LangString>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct References {
        pub reference_data: Vec<Reference>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct Reference {
        pub url: String,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct Description {
        pub description_data: Vec<LangString>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default, rename_all = "camelCase")]
    pub struct Impact {
        pub base_metric_v2: Option<BaseMetricV2>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default, rename_all = "camelCase")]
    pub struct BaseMetricV2 {
        pub cvss_v2: CvssData,
    }
}

mod v20 {
    use super::{CvssData, LangString};
    use serde::Deserialize;

    #[derive(Deserialize)]
    pub struct Feed {
        pub vulnerabilities: Vec<serde_json::Value>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct Item {
        pub cve: Cve,
    }

    #[derive(Deserialize, Default)]
    #[serde(default, rename_all = "camelCase")]
    pub struct Cve {
        pub id: Option<String>,
        pub published: Option<String>,
        pub descriptions: Vec<LangString>,
        pub metrics: Metrics,
        pub weaknesses: Vec<Weakness>,
        pub references: Vec<Reference>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default, rename_all = "camelCase")]
    pub struct Metrics {
        pub cvss_metric_v2: Vec<MetricV2>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default, rename_all = "camelCase")]
    pub struct MetricV2 {
        #[serde(rename = "type")]
        pub kind: Option<String>,
        pub cvss_data: CvssData,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct Weakness {
        pub description: Vec<LangString>,
    }

    #[derive(Deserialize, Default)]
    #[serde(default)]
    pub struct Reference {
        pub url: String,
    }
}

fn cvss_or_log(id: Option<&str>, data: Option<&CvssData>) -> Option<CvssV2> {
    let data = data?;
    match data.to_cvss() {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("{}: ignoring CVSS v2 data: {e}", id.unwrap_or("?"));
            None
        }
    }
}

fn parse_json_feed(text: &str) -> Result<Parsed, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if value.get("CVE_Items").is_some() {
        let feed: v11::Feed = serde_json::from_value(value).map_err(|e| e.to_string())?;
        Ok(feed
            .items
            .into_iter()
            .map(|raw| {
                let item: v11::Item = serde_json::from_value(raw).map_err(|e| e.to_string())?;
                let id = item.cve.meta.id.as_deref();
                build_record(
                    id,
                    item.published_date.as_deref(),
                    english(&item.cve.description.description_data),
                    cvss_or_log(id, item.impact.base_metric_v2.as_ref().map(|m| &m.cvss_v2)),
                    cwe_values(item.cve.problemtype.problemtype_data.iter().map(|p| &p.description)),
                    item.cve.references.reference_data.into_iter().map(|r| r.url).collect(),
                )
            })
            .collect())
    } else if value.get("vulnerabilities").is_some() {
        let feed: v20::Feed = serde_json::from_value(value).map_err(|e| e.to_string())?;
        Ok(feed
            .vulnerabilities
            .into_iter()
            .map(|raw| {
                let item: v20::Item = serde_json::from_value(raw).map_err(|e| e.to_string())?;
                let cve = item.cve;
                let id = cve.id.as_deref();
                let metric = cve
                    .metrics
                    .cvss_metric_v2
                    .iter()
                    .find(|m| m.kind.as_deref() == Some("Primary"))
                    .or_else(|| cve.metrics.cvss_metric_v2.first());
                build_record(
                    id,
                    cve.published.as_deref(),
                    english(&cve.descriptions),
                    cvss_or_log(id, metric.map(|m| &m.cvss_data)),
                    cwe_values(cve.weaknesses.iter().map(|w| &w.description)),
                    cve.references.into_iter().map(|r| r.url).collect(),
                )
            })
            .collect())
    } else {
        Err("neither a CVE_Items nor a vulnerabilities array".into())
    }
}

#[derive(Deserialize)]
struct CsvRow {
    cve_id: Option<String>,
    published_at: Option<String>,
    #[serde(default)]
    summary: String,
    #[serde(default)]
    cvss_vector: String,
    #[serde(default)]
    cwes: String,
    #[serde(default)]
    references: String,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(';')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}

fn parse_csv_feed(text: &str) -> Result<Parsed, String> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.push(Err(e.to_string()));
                continue;
            }
        };
        let nonempty = |s: &Option<String>| s.as_deref().map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        let cvss = if row.cvss_vector.trim().is_empty() {
            None
        } else {
            match CvssV2::parse_vector(&row.cvss_vector) {
                Ok(c) => Some(c),
                Err(e) => {
                    out.push(Err(e.to_string()));
                    continue;
                }
            }
        };
        out.push(build_record(
            nonempty(&row.cve_id).as_deref(),
            nonempty(&row.published_at).as_deref(),
            row.summary,
            cvss,
            split_list(&row.cwes),
            split_list(&row.references),
        ));
    }
    Ok(out)
}

/// Writes the flat records table
/// (`cve_id,published_at,refs,av,ac,au,c,i,a,cwes,rejected`).
pub fn write_records_csv<W: Write>(set: &RecordSet, out: W) -> Result<(), VulnDbError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cve_id", "published_at", "refs", "av", "ac", "au", "c", "i", "a", "cwes", "rejected"])?;
    for r in set.records.values() {
        let c = r.cvss.as_ref();
        w.write_record([
            r.cve_id.to_string(),
            r.published_at.to_string(),
            reference_count(r).to_string(),
            c.map(|c| c.access_vector.to_string()).unwrap_or_default(),
            c.map(|c| c.access_complexity.to_string()).unwrap_or_default(),
            c.map(|c| c.authentication.to_string()).unwrap_or_default(),
            c.map(|c| c.conf_impact.to_string()).unwrap_or_default(),
            c.map(|c| c.integ_impact.to_string()).unwrap_or_default(),
            c.map(|c| c.avail_impact.to_string()).unwrap_or_default(),
            r.cwes.join(";"),
            u8::from(r.rejected).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
