//! Per-CVE delays and the explanatory metrics of the nested models M1..M6.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::cve::CveId;
use crate::networks::{classify_infrastructure, DomainGraph, InfraFlags, SocialGraph};
use crate::vulndb::{exploit_flags, impact_flags, reference_count, CveRecord, ExploitFlags, ImpactFlags};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("model level must be 1..=6, got {0}")]
    InvalidLevel(u8),
    #[error("{cve} is in the sample but missing from {input}")]
    MissingInput { cve: CveId, input: &'static str },
}

/// Reference year: no dummy column.
pub const BASE_YEAR: i32 = 2008;
pub const LAST_YEAR: i32 = 2016;
pub const YEARS: usize = (LAST_YEAR - BASE_YEAR) as usize;
const MONTHS: [&str; 11] = ["Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

/// Continuous metrics entered as log(x + 1).
pub const LOG_COLUMNS: [&str; 5] = ["SOCDEG", "MSGSLEN", "MSGSENT", "INFDEG", "NVDREFS"];

/// Number of CWE dummies in M6.
pub const DEFAULT_TOP_CWES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoordinationSample {
    pub cve_id: CveId,
    pub t_oss: NaiveDate,
    pub t_nvd: NaiveDate,
    pub y: u32,
}

/// Retained samples plus the CVEs dropped on the way. Every mentioned CVE
/// ends up in exactly one of the four lists.
#[derive(Debug, Clone, Default)]
pub struct DelayReport {
    pub samples: Vec<CoordinationSample>,
    pub missing: Vec<CveId>,
    pub rejected: Vec<CveId>,
    pub negative: Vec<CveId>,
}

impl DelayReport {
    pub fn dropped(&self) -> usize {
        self.missing.len() + self.rejected.len() + self.negative.len()
    }
}

/// Earliest UTC date at which each CVE was mentioned.
pub fn earliest_mentions<'a, I>(mentions: I) -> BTreeMap<CveId, NaiveDate>
where
    I: IntoIterator<Item = (NaiveDate, &'a BTreeSet<CveId>)>,
{
    let mut out: BTreeMap<CveId, NaiveDate> = BTreeMap::new();
    for (day, cves) in mentions {
        for cve in cves {
            out.entry(cve.clone())
                .and_modify(|d| *d = (*d).min(day))
                .or_insert(day);
        }
    }
    out
}

/// Days from first list mention to database publication.
///
/// CVEs missing from `records`, rejected ones, and those published before
/// they were mentioned are dropped and listed in the report.
pub fn compute_delays(mentions: &BTreeMap<CveId, NaiveDate>, records: &BTreeMap<CveId, CveRecord>) -> DelayReport {
    let mut report = DelayReport::default();
    for (cve, &t_oss) in mentions {
        let Some(rec) = records.get(cve) else {
            log::debug!("{cve} mentioned but absent from the vulnerability database");
            report.missing.push(cve.clone());
            continue;
        };
        if rec.rejected {
            report.rejected.push(cve.clone());
            continue;
        }
        let days = (rec.published_at - t_oss).num_days();
        if days < 0 {
            report.negative.push(cve.clone());
            continue;
        }
        report.samples.push(CoordinationSample {
            cve_id: cve.clone(),
            t_oss,
            t_nvd: rec.published_at,
            y: days as u32,
        });
    }
    if !report.missing.is_empty() {
        log::warn!("{} mentioned CVEs have no database record", report.missing.len());
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TemporalDummies {
    /// 2009..=2016.
    pub years: [u8; YEARS],
    /// February..=December.
    pub months: [u8; 11],
    pub weekend: u8,
}

pub fn temporal_dummies(t_oss: NaiveDate) -> TemporalDummies {
    let mut d = TemporalDummies::default();
    let year = t_oss.year();
    if year > BASE_YEAR && year <= LAST_YEAR {
        d.years[(year - BASE_YEAR - 1) as usize] = 1;
    } else if year != BASE_YEAR {
        log::warn!("{t_oss} lies outside the modeled years {BASE_YEAR}..={LAST_YEAR}");
    }
    let month = t_oss.month0() as usize;
    if month > 0 {
        d.months[month - 1] = 1;
    }
    d.weekend = u8::from(matches!(t_oss.weekday(), Weekday::Sat | Weekday::Sun));
    d
}

/// Shannon entropy in bits of the character distribution of `text`.
pub fn shannon_entropy(text: &str) -> f64 {
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut total = 0usize;
    for c in text.chars() {
        *counts.entry(c).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Returns (MSGSLEN, MSGSENT) for the bodies of the messages mentioning a CVE:
/// total characters over 100, and the entropy of their concatenation.
pub fn message_stats(bodies: &[&str]) -> (f64, f64) {
    let joined = bodies.concat();
    let chars = joined.chars().count();
    if chars == 0 {
        return (0.0, 0.0);
    }
    (chars as f64 / 100.0, shannon_entropy(&joined))
}

fn cwe_number(label: &str) -> Option<u32> {
    label.strip_prefix("CWE-")?.parse().ok()
}

/// The `k` CWEs assigned to most sampled CVEs, ties by numeric id. Labels
/// such as `NVD-CWE-Other` are ignored.
pub fn top_cwes<'a, I>(cwe_lists: I, k: usize) -> Vec<String>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for list in cwe_lists {
        let distinct: BTreeSet<u32> = list.iter().filter_map(|c| cwe_number(c)).collect();
        for id in distinct {
            *counts.entry(id).or_default() += 1;
        }
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(id, _)| format!("CWE-{id}")).collect()
}

/// Raw (untransformed) metric values for one sampled CVE.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub cve_id: CveId,
    pub t_oss: NaiveDate,
    pub y: u32,
    pub temporal: TemporalDummies,
    pub socdeg: usize,
    pub mitredev: u8,
    pub msgslen: f64,
    pub msgsent: f64,
    pub infdeg: usize,
    pub nvdrefs: usize,
    pub infra: InfraFlags,
    pub impact: ImpactFlags,
    pub exploit: ExploitFlags,
    /// No CVSS vector in the record; impact and exploit flags are then 0.
    pub cvss_missing: bool,
    pub cwes: Vec<String>,
}

/// Everything needed to compute the metric rows of a sample.
pub struct MetricInputs<'a> {
    pub samples: &'a [CoordinationSample],
    pub records: &'a BTreeMap<CveId, CveRecord>,
    pub social: &'a SocialGraph,
    pub domains: &'a DomainGraph,
    pub mitredev: &'a BTreeMap<CveId, u8>,
    /// Cleaned bodies of the messages mentioning each CVE.
    pub bodies: &'a BTreeMap<CveId, Vec<&'a str>>,
}

#[derive(Debug, Clone, Default)]
pub struct MetricTable {
    /// Sorted by CVE id.
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn compute(inputs: &MetricInputs<'_>) -> Result<Self, MetricsError> {
        use rayon::prelude::*;
        let missing = |cve: &CveId, input| MetricsError::MissingInput { cve: cve.clone(), input };
        let mut rows = inputs
            .samples
            .par_iter()
            .map(|s| {
                let cve = &s.cve_id;
                let rec = inputs.records.get(cve).ok_or_else(|| missing(cve, "records"))?;
                let socdeg = inputs.social.right_degree(cve).map_err(|_| missing(cve, "social network"))?;
                let bodies = inputs.bodies.get(cve).map(Vec::as_slice).unwrap_or(&[]);
                let (msgslen, msgsent) = message_stats(bodies);
                let (infdeg, infra) = match inputs.domains.right_neighbors(cve) {
                    Some(ds) => (ds.len(), classify_infrastructure(ds)),
                    None => (0, InfraFlags::default()),
                };
                let (impact, exploit) = match &rec.cvss {
                    Some(v) => (impact_flags(v), exploit_flags(v)),
                    None => (ImpactFlags::default(), ExploitFlags::default()),
                };
                Ok(MetricRow {
                    cve_id: cve.clone(),
                    t_oss: s.t_oss,
                    y: s.y,
                    temporal: temporal_dummies(s.t_oss),
                    socdeg,
                    mitredev: inputs.mitredev.get(cve).copied().unwrap_or(0),
                    msgslen,
                    msgsent,
                    infdeg,
                    nvdrefs: reference_count(rec),
                    infra,
                    impact,
                    exploit,
                    cvss_missing: rec.cvss.is_none(),
                    cwes: rec.cwes.clone(),
                })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        rows.sort_by(|a, b| a.cve_id.cmp(&b.cve_id));
        Ok(MetricTable { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn delays(&self) -> Vec<f64> {
        self.rows.iter().map(|r| f64::from(r.y)).collect()
    }

    pub fn top_cwes(&self, k: usize) -> Vec<String> {
        top_cwes(self.rows.iter().map(|r| r.cwes.as_slice()), k)
    }

    /// Raw values, one row per CVE, including the diagnostic CVSS and CWE
    /// missingness flags that never enter a model.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "cve_id", "t_oss", "y", "SOCDEG", "MITREDEV", "MSGSLEN", "MSGSENT", "INFDEG", "NVDREFS", "VULNINF",
            "BUGS", "REPOS", "SUPPORT", "IMPC", "IMPI", "IMPA", "EXPNET", "EXPCPLX", "EXPAUTH", "cvss_missing",
            "cwe_missing", "cwes",
        ])?;
        for r in &self.rows {
            let cwe_missing = !r.cwes.iter().any(|c| cwe_number(c).is_some());
            w.write_record([
                r.cve_id.to_string(),
                r.t_oss.to_string(),
                r.y.to_string(),
                r.socdeg.to_string(),
                r.mitredev.to_string(),
                r.msgslen.to_string(),
                r.msgsent.to_string(),
                r.infdeg.to_string(),
                r.nvdrefs.to_string(),
                r.infra.vulninf.to_string(),
                r.infra.bugs.to_string(),
                r.infra.repos.to_string(),
                r.infra.support.to_string(),
                r.impact.conf.to_string(),
                r.impact.integ.to_string(),
                r.impact.avail.to_string(),
                r.exploit.network.to_string(),
                r.exploit.complex.to_string(),
                r.exploit.auth.to_string(),
                u8::from(r.cvss_missing).to_string(),
                u8::from(cwe_missing).to_string(),
                r.cwes.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A design matrix with its column names and the CVE of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrix {
    pub level: u8,
    pub column_names: Vec<String>,
    pub rows: DMatrix<f64>,
    pub transform_log: BTreeSet<String>,
    pub row_ids: Vec<CveId>,
}

impl ModelMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.rows.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Same rows without the year dummies, for single-year subsets.
    pub fn without_year_dummies(&self) -> ModelMatrix {
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|&j| !is_year_column(&self.column_names[j]))
            .collect();
        self.select_columns(&keep)
    }

    pub fn select_columns(&self, keep: &[usize]) -> ModelMatrix {
        let names: Vec<String> = keep.iter().map(|&j| self.column_names[j].clone()).collect();
        ModelMatrix {
            level: self.level,
            rows: self.rows.select_columns(keep),
            transform_log: self
                .transform_log
                .iter()
                .filter(|c| names.contains(c))
                .cloned()
                .collect(),
            column_names: names,
            row_ids: self.row_ids.clone(),
        }
    }

    pub fn select_rows(&self, keep: &[usize]) -> ModelMatrix {
        ModelMatrix {
            level: self.level,
            column_names: self.column_names.clone(),
            rows: self.rows.select_rows(keep),
            transform_log: self.transform_log.clone(),
            row_ids: keep.iter().map(|&i| self.row_ids[i].clone()).collect(),
        }
    }

    /// Header `cve_id,<columns>`, one line per row.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["cve_id".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.row_ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.rows.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_year_column(name: &str) -> bool {
    name.len() == 4 && name.parse::<i32>().is_ok_and(|y| y > BASE_YEAR && y <= LAST_YEAR)
}

/// Column names of a model level, in order, before any CWE dummies.
pub fn level_columns(level: u8) -> Result<Vec<String>, MetricsError> {
    if !(1..=6).contains(&level) {
        return Err(MetricsError::InvalidLevel(level));
    }
    let mut cols = vec!["(Intercept)".to_string()];
    cols.extend((BASE_YEAR + 1..=LAST_YEAR).map(|y| y.to_string()));
    cols.extend(MONTHS.iter().map(|m| m.to_string()));
    cols.push("WEEKEND".into());
    let blocks: [&[&str]; 4] = [
        &["SOCDEG", "MITREDEV", "MSGSLEN", "MSGSENT"],
        &["INFDEG", "NVDREFS", "VULNINF", "BUGS", "REPOS", "SUPPORT"],
        &["IMPC", "IMPI", "IMPA"],
        &["EXPNET", "EXPCPLX", "EXPAUTH"],
    ];
    for block in blocks.iter().take(usize::from(level.min(5)) - 1) {
        cols.extend(block.iter().map(|c| c.to_string()));
    }
    Ok(cols)
}

fn log1p_usize(x: usize) -> f64 {
    (x as f64).ln_1p()
}

fn row_values(r: &MetricRow) -> BTreeMap<&'static str, f64> {
    let f = |v: u8| f64::from(v);
    BTreeMap::from([
        ("WEEKEND", f(r.temporal.weekend)),
        ("SOCDEG", log1p_usize(r.socdeg)),
        ("MITREDEV", f(r.mitredev)),
        ("MSGSLEN", r.msgslen.ln_1p()),
        ("MSGSENT", r.msgsent.ln_1p()),
        ("INFDEG", log1p_usize(r.infdeg)),
        ("NVDREFS", log1p_usize(r.nvdrefs)),
        ("VULNINF", f(r.infra.vulninf)),
        ("BUGS", f(r.infra.bugs)),
        ("REPOS", f(r.infra.repos)),
        ("SUPPORT", f(r.infra.support)),
        ("IMPC", f(r.impact.conf)),
        ("IMPI", f(r.impact.integ)),
        ("IMPA", f(r.impact.avail)),
        ("EXPNET", f(r.exploit.network)),
        ("EXPCPLX", f(r.exploit.complex)),
        ("EXPAUTH", f(r.exploit.auth)),
    ])
}

fn build_matrix(table: &MetricTable, level: u8, columns: Vec<String>, cwes: &[String]) -> ModelMatrix {
    let n = table.len();
    let mut cols = columns;
    cols.extend(cwes.iter().cloned());
    let k = cols.len();
    let mut m = DMatrix::<f64>::zeros(n, k);
    for (i, r) in table.rows.iter().enumerate() {
        let named = row_values(r);
        for (j, name) in cols.iter().enumerate() {
            let v = if j == 0 {
                1.0
            } else if is_year_column(name) {
                let y: i32 = name.parse().unwrap();
                f64::from(r.temporal.years[(y - BASE_YEAR - 1) as usize])
            } else if let Some(mi) = MONTHS.iter().position(|mm| mm == name) {
                f64::from(r.temporal.months[mi])
            } else if let Some(v) = named.get(name.as_str()) {
                *v
            } else {
                f64::from(u8::from(r.cwes.iter().any(|c| c == name)))
            };
            m[(i, j)] = v;
        }
    }
    ModelMatrix {
        level,
        transform_log: cols
            .iter()
            .filter(|c| LOG_COLUMNS.contains(&c.as_str()))
            .cloned()
            .collect(),
        column_names: cols,
        rows: m,
        row_ids: table.rows.iter().map(|r| r.cve_id.clone()).collect(),
    }
}

/// Design matrix of model `level` (1..=6). Level 6 adds dummies for the ten
/// most frequent CWEs of the sample.
pub fn assemble(table: &MetricTable, level: u8) -> Result<ModelMatrix, MetricsError> {
    let columns = level_columns(level)?;
    let cwes = if level == 6 { table.top_cwes(DEFAULT_TOP_CWES) } else { Vec::new() };
    Ok(build_matrix(table, level, columns, &cwes))
}

/// Model 5 plus dummies for the `m` most frequent CWEs.
pub fn assemble_with_cwes(table: &MetricTable, m: usize) -> ModelMatrix {
    let columns = level_columns(5).expect("level 5 is valid");
    let cwes = table.top_cwes(m);
    build_matrix(table, 6, columns, &cwes)
}

/// `cve_id,t_oss,t_nvd,y`.
pub fn write_delays_csv<W: Write>(samples: &[CoordinationSample], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cve_id", "t_oss", "t_nvd", "y"])?;
    let mut sorted: Vec<&CoordinationSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.cve_id.cmp(&b.cve_id));
    for s in sorted {
        w.write_record([s.cve_id.to_string(), s.t_oss.to_string(), s.t_nvd.to_string(), s.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{build_domain_network, build_social_network};
    use rand::{Rng, SeedableRng};

    fn day(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn cve(s: &str) -> CveId {
        s.parse().unwrap()
    }

    fn record(id: &str, published: &str, rejected: bool) -> CveRecord {
        CveRecord {
            cve_id: cve(id),
            published_at: day(published),
            summary: String::new(),
            cvss: None,
            cwes: Vec::new(),
            reference_urls: Vec::new(),
            rejected,
        }
    }

    #[test]
    fn delays_and_drops() {
        let mentions = BTreeMap::from([
            (cve("CVE-2008-0001"), day("2008-03-01")),
            (cve("CVE-2008-0002"), day("2008-03-01")),
            (cve("CVE-2008-0003"), day("2008-03-10")),
            (cve("CVE-2008-0004"), day("2008-03-10")),
            (cve("CVE-2008-0005"), day("2008-03-10")),
        ]);
        let records = BTreeMap::from([
            (cve("CVE-2008-0001"), record("CVE-2008-0001", "2008-03-01", false)),
            (cve("CVE-2008-0002"), record("CVE-2008-0002", "2008-03-16", false)),
            (cve("CVE-2008-0003"), record("CVE-2008-0003", "2008-03-09", false)),
            (cve("CVE-2008-0004"), record("CVE-2008-0004", "2008-04-01", true)),
        ]);
        let r = compute_delays(&mentions, &records);
        let ys: Vec<u32> = r.samples.iter().map(|s| s.y).collect();
        assert_eq!(ys, vec![0, 15]);
        assert_eq!(r.negative, vec![cve("CVE-2008-0003")]);
        assert_eq!(r.rejected, vec![cve("CVE-2008-0004")]);
        assert_eq!(r.missing, vec![cve("CVE-2008-0005")]);
        assert_eq!(r.samples.len() + r.dropped(), mentions.len());
    }

    #[test]
    fn earliest_mention_wins() {
        let a = BTreeSet::from([cve("CVE-2009-0001")]);
        let m = earliest_mentions([(day("2009-05-02"), &a), (day("2009-04-30"), &a), (day("2009-06-01"), &a)]);
        assert_eq!(m[&cve("CVE-2009-0001")], day("2009-04-30"));
    }

    #[test]
    fn dummy_examples() {
        let d = temporal_dummies(day("2008-03-05"));
        assert_eq!(d.years, [0; YEARS]);
        assert_eq!(d.months[1], 1);
        assert_eq!(d.months.iter().sum::<u8>(), 1);
        assert_eq!(d.weekend, 0);

        let d = temporal_dummies(day("2011-01-09"));
        assert_eq!(d.years[2], 1);
        assert_eq!(d.months, [0; 11]);
        assert_eq!(d.weekend, 1);

        let d = temporal_dummies(day("2016-12-31"));
        assert_eq!(d.years[7], 1);
        assert_eq!(d.months[10], 1);
        assert_eq!(d.weekend, 1);
    }

    // Zeller's congruence; 0 = Saturday, 1 = Sunday.
    fn zeller(y: i32, m: u32, d: u32) -> i32 {
        let (y, m) = if m < 3 { (y - 1, m as i32 + 12) } else { (y, m as i32) };
        let k = y % 100;
        let j = y / 100;
        (d as i32 + (13 * (m + 1)) / 5 + k + k / 4 + j / 4 + 5 * j).rem_euclid(7)
    }

    #[test]
    fn weekend_flag_matches_zeller_on_random_dates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let start = day("2008-01-01");
        for _ in 0..1000 {
            let t = start + chrono::Days::new(rng.gen_range(0..3288));
            let z = zeller(t.year(), t.month(), t.day());
            let d = temporal_dummies(t);
            assert_eq!(d.weekend == 1, z == 0 || z == 1, "{t}");
            assert!(d.years.iter().sum::<u8>() <= 1);
            assert!(d.months.iter().sum::<u8>() <= 1);
        }
    }

    fn entropy_oracle(text: &str) -> f64 {
        // counts via a sorted copy rather than a map
        let mut cs: Vec<char> = text.chars().collect();
        cs.sort_unstable();
        let n = cs.len() as f64;
        let mut h = 0.0;
        let mut i = 0;
        while i < cs.len() {
            let j = cs[i..].iter().take_while(|&&c| c == cs[i]).count();
            let p = j as f64 / n;
            h -= p * p.ln() / std::f64::consts::LN_2;
            i += j;
        }
        h
    }

    #[test]
    fn message_stat_examples() {
        assert_eq!(message_stats(&["aaaa"]), (0.04, 0.0));
        assert!((message_stats(&["abcd"]).1 - 2.0).abs() < 1e-15);
        let (len, ent) = message_stats(&["ab", "ab"]);
        assert!((len - 0.04).abs() < 1e-15);
        assert!((ent - 1.0).abs() < 1e-15);
        assert_eq!(message_stats(&[]), (0.0, 0.0));
        assert_eq!(message_stats(&[""]), (0.0, 0.0));
    }

    #[test]
    fn entropy_matches_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = rng.gen_range(1..200);
            let s: String = (0..len).map(|_| rng.gen_range('a'..='k')).collect();
            assert!((shannon_entropy(&s) - entropy_oracle(&s)).abs() < 1e-12);
        }
        assert!((shannon_entropy("äöüß") - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cwe_ranking() {
        let lists: Vec<Vec<String>> = [
            vec!["CWE-79"],
            vec!["CWE-79", "CWE-20"],
            vec!["CWE-20"],
            vec!["CWE-119"],
            vec!["NVD-CWE-Other"],
            vec![],
        ]
        .into_iter()
        .map(|v| v.into_iter().map(String::from).collect())
        .collect();
        let slices = || lists.iter().map(Vec::as_slice);
        assert_eq!(top_cwes(slices(), 2), vec!["CWE-20", "CWE-79"]);
        assert_eq!(top_cwes(slices(), 99), vec!["CWE-20", "CWE-79", "CWE-119"]);
    }

    #[test]
    fn column_counts_and_nesting() {
        let counts: Vec<usize> = (1..=5).map(|l| level_columns(l).unwrap().len()).collect();
        assert_eq!(counts, vec![21, 25, 31, 34, 37]);
        for l in 1..5 {
            let a = level_columns(l).unwrap();
            let b = level_columns(l + 1).unwrap();
            assert_eq!(&b[..a.len()], &a[..]);
        }
        assert!(level_columns(0).is_err());
        assert!(level_columns(7).is_err());
    }

    fn fixture_table() -> MetricTable {
        let a = BTreeSet::from([cve("CVE-2008-4688")]);
        let b = BTreeSet::from([cve("CVE-2009-0001")]);
        let doms: BTreeSet<String> = ["cve.mitre.org", "bugzilla.redhat.com", "cvs.fedoraproject.org", "a.org", "b.org", "c.org"]
            .into_iter()
            .map(String::from)
            .collect();
        let none = BTreeSet::new();
        let social = build_social_network([("alice", &a), ("bob", &a), ("bob", &b)]);
        let domains = build_domain_network([(&a, &doms), (&b, &none)]);
        let mut r1 = record("CVE-2008-4688", "2008-10-20", false);
        r1.cwes = vec!["CWE-79".into()];
        r1.reference_urls = vec!["u".into(); 3];
        let r2 = record("CVE-2009-0001", "2009-02-01", false);
        let records = BTreeMap::from([(r1.cve_id.clone(), r1), (r2.cve_id.clone(), r2)]);
        let samples = vec![
            CoordinationSample { cve_id: cve("CVE-2009-0001"), t_oss: day("2009-01-31"), t_nvd: day("2009-02-01"), y: 1 },
            CoordinationSample { cve_id: cve("CVE-2008-4688"), t_oss: day("2008-10-19"), t_nvd: day("2008-10-20"), y: 1 },
        ];
        let mitredev = BTreeMap::new();
        let bodies = BTreeMap::from([(cve("CVE-2008-4688"), vec!["abcd"])]);
        MetricTable::compute(&MetricInputs {
            samples: &samples,
            records: &records,
            social: &social,
            domains: &domains,
            mitredev: &mitredev,
            bodies: &bodies,
        })
        .unwrap()
    }

    #[test]
    fn assembled_values() {
        let t = fixture_table();
        let m3 = assemble(&t, 3).unwrap();
        assert_eq!(m3.ncols(), 31);
        assert_eq!(m3.row_ids[0], cve("CVE-2008-4688"));
        let at = |m: &ModelMatrix, i: usize, c: &str| m.rows[(i, m.column_index(c).unwrap())];
        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        assert!(close(at(&m3, 0, "INFDEG"), 7f64.ln()));
        assert_eq!(at(&m3, 0, "VULNINF"), 1.0);
        assert_eq!(at(&m3, 0, "BUGS"), 1.0);
        assert_eq!(at(&m3, 0, "REPOS"), 1.0);
        assert_eq!(at(&m3, 0, "SUPPORT"), 0.0);
        assert!(close(at(&m3, 0, "SOCDEG"), 3f64.ln()));
        assert!(close(at(&m3, 0, "NVDREFS"), 4f64.ln()));
        assert!(close(at(&m3, 0, "MSGSENT"), 3f64.ln()));
        assert_eq!(at(&m3, 1, "INFDEG"), 0.0);
        assert_eq!(at(&m3, 1, "2009"), 1.0);
        assert_eq!(at(&m3, 0, "Oct"), 1.0);
        assert!(m3.rows.column(0).iter().all(|&v| v == 1.0));

        let m6 = assemble(&t, 6).unwrap();
        assert_eq!(m6.ncols(), 38);
        assert_eq!(m6.column_names.last().unwrap(), "CWE-79");
        assert_eq!(at(&m6, 0, "CWE-79"), 1.0);
        assert_eq!(at(&m6, 1, "CWE-79"), 0.0);
        assert_eq!(m6.without_year_dummies().ncols(), 30);
        assert_eq!(m6.transform_log.len(), 5);
    }

    #[test]
    fn missing_graph_vertex_is_an_error() {
        let samples = vec![CoordinationSample { cve_id: cve("CVE-2010-0001"), t_oss: day("2010-01-01"), t_nvd: day("2010-01-01"), y: 0 }];
        let records = BTreeMap::from([(cve("CVE-2010-0001"), record("CVE-2010-0001", "2010-01-01", false))]);
        let empty = SocialGraph::new();
        let r = MetricTable::compute(&MetricInputs {
            samples: &samples,
            records: &records,
            social: &empty,
            domains: &DomainGraph::new(),
            mitredev: &BTreeMap::new(),
            bodies: &BTreeMap::new(),
        });
        assert!(matches!(r, Err(MetricsError::MissingInput { .. })));
    }
}
