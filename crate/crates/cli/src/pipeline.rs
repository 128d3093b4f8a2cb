//! Stage orchestration for `coorddelay run`.
//!
//! Stages always execute in order up to the last requested one; stages that
//! were not requested still run in memory when a later stage needs their
//! output, but only requested stages write artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use chrono::Datelike;
use coorddelay::archive::{parse_archive, resolve_identities, DateWindow, Identities, IngestReport};
use coorddelay::classify::{derive_seed, median_split, train_and_evaluate, train_test_split, EvalConfig, ForestParams};
use coorddelay::extraction::{extract_facts, write_facts_csv, MessageFacts};
use coorddelay::metrics::{
    assemble, assemble_with_cwes, compute_delays, earliest_mentions, write_delays_csv, DelayReport, MetricInputs,
    MetricTable, ModelMatrix,
};
use coorddelay::networks::{build_domain_network, build_social_network, core_membership, DomainGraph, SocialGraph};
use coorddelay::regress::{
    aic, between_quantile_test, bootstrap_draws, nested_wald_from_draws, ols_fit, ols_nested_wald_test, qr_fit,
    qr_lasso_fit, BootstrapDraws, FitResult, TestResult,
};
use coorddelay::vulndb::{load_records, write_records_csv, RecordSet};
use coorddelay::CveId;
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{read_merges, PipelineConfig};
use crate::error::CliError;
use crate::report::{fmt_delta, fmt_opt, summarize_delays, write_annual_delays, write_delay_summary};
use crate::tables::{count_rows, message_rows, write_messages, write_participants, MessageRow};

const MODEL_LEVELS: [u8; 6] = [1, 2, 3, 4, 5, 6];
const SWEEP_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Nvd,
    Extract,
    Networks,
    Metrics,
    Regress,
    Classify,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Nvd,
        Stage::Extract,
        Stage::Networks,
        Stage::Metrics,
        Stage::Regress,
        Stage::Classify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Nvd => "nvd",
            Stage::Extract => "extract",
            Stage::Networks => "networks",
            Stage::Metrics => "metrics",
            Stage::Regress => "regress",
            Stage::Classify => "classify",
        }
    }

    /// Files a stage writes, relative to the output directory.
    pub fn artifacts(self) -> Vec<String> {
        let fixed: &[&str] = match self {
            Stage::Ingest => &["messages.csv", "participants.csv"],
            Stage::Nvd => &["records.csv"],
            Stage::Extract => &["facts.csv"],
            Stage::Networks => &["graphs/social_edges.csv", "graphs/domain_edges.csv"],
            Stage::Metrics => &["delays.csv", "dropped_cves.csv", "delay_summary.csv", "annual_delays.csv", "metrics.csv"],
            Stage::Regress => &[
                "coefficients.csv",
                "model_comparison.csv",
                "nested_tests.csv",
                "between_quantile_tests.csv",
                "lasso_path.csv",
                "annual_subset_ols.csv",
                "cwe_sweep.csv",
            ],
            Stage::Classify => &["classification.csv"],
        };
        let mut out: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
        if self == Stage::Metrics {
            out.extend(MODEL_LEVELS.iter().map(|j| format!("model_matrix_M{j}.csv")));
        }
        out
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

/// Parses a comma-separated stage list.
pub fn parse_stages(list: &str) -> Result<BTreeSet<Stage>, CliError> {
    let set = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<BTreeSet<Stage>, _>>()?;
    if set.is_empty() {
        return Err(CliError::Config("empty stage list".into()));
    }
    Ok(set)
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub bootstrap: u64,
    pub split: u64,
    pub forest: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Seeds {
            master,
            bootstrap: derive_seed(master, 1),
            split: derive_seed(master, 2),
            forest: derive_seed(master, 3),
        }
    }
}

/// A model, quantile or subset that could not be estimated.
#[derive(Debug, Clone, Serialize)]
pub struct Skipped {
    pub stage: &'static str,
    pub item: String,
    pub reason: String,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub status: &'static str,
    pub error: Option<String>,
    pub stages_requested: Vec<Stage>,
    pub stages_executed: Vec<Stage>,
    pub seeds: Seeds,
    pub counts: BTreeMap<String, usize>,
    /// Data rows of every artifact written in this run.
    pub rows: BTreeMap<String, usize>,
    pub timings_ms: BTreeMap<String, f64>,
    pub skipped: Vec<Skipped>,
    pub stale_artifacts: Vec<String>,
    pub config: PipelineConfig,
}

struct MetricsOut {
    table: MetricTable,
    matrices: Vec<ModelMatrix>,
}

#[derive(Default)]
struct State {
    messages: Option<Vec<MessageRow>>,
    records: Option<RecordSet>,
    facts: Option<Vec<MessageFacts>>,
    networks: Option<(SocialGraph, DomainGraph)>,
    metrics: Option<MetricsOut>,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    requested: BTreeSet<Stage>,
    seeds: Seeds,
    counts: BTreeMap<String, usize>,
    rows: BTreeMap<String, usize>,
    skipped: Vec<Skipped>,
}

impl Run<'_> {
    fn writes(&self, stage: Stage) -> bool {
        self.requested.contains(&stage)
    }

    fn count(&mut self, key: &str, v: usize) {
        self.counts.insert(key.to_string(), v);
    }

    fn skip(&mut self, stage: Stage, item: impl Into<String>, reason: impl Display) {
        let item = item.into();
        log::warn!("{}: skipping {item}: {reason}", stage.name());
        self.skipped.push(Skipped {
            stage: stage.name(),
            item,
            reason: reason.to_string(),
        });
    }

    /// Renders a table into memory, then writes it and records its row count.
    fn emit<E: Display>(
        &mut self,
        stage: Stage,
        rel: &str,
        render: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        render(&mut buf).map_err(|e| CliError::stage(stage.name(), format!("{rel}: {e}")))?;
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::stage(stage.name(), format!("{}: {e}", dir.display())))?;
        }
        fs::write(&path, &buf).map_err(|e| CliError::stage(stage.name(), format!("{}: {e}", path.display())))?;
        self.rows.insert(rel.to_string(), count_rows(&buf));
        Ok(())
    }
}

/// Runs the requested stages (all when `stages` is empty) and writes
/// `run.json`, also when a stage fails.
pub fn run(cfg: &PipelineConfig, stages: &BTreeSet<Stage>) -> Result<RunReport, CliError> {
    let requested: BTreeSet<Stage> = if stages.is_empty() {
        Stage::ALL.into_iter().collect()
    } else {
        stages.clone()
    };
    let last = *requested.iter().next_back().expect("non-empty");
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Config(format!("field `out_dir`: {}: {e}", cfg.out_dir.display())))?;

    let mut run = Run {
        cfg,
        out: cfg.out_dir.clone(),
        requested: requested.clone(),
        seeds: Seeds::from_master(cfg.seed),
        counts: BTreeMap::new(),
        rows: BTreeMap::new(),
        skipped: Vec::new(),
    };
    let mut state = State::default();
    let mut executed = Vec::new();
    let mut timings = BTreeMap::new();
    let mut failure: Option<(Stage, CliError)> = None;

    for stage in Stage::ALL.into_iter().take_while(|s| *s <= last) {
        let started = Instant::now();
        log::info!("stage {}", stage.name());
        let result = match stage {
            Stage::Ingest => stage_ingest(&mut run, &mut state),
            Stage::Nvd => stage_nvd(&mut run, &mut state),
            Stage::Extract => stage_extract(&mut run, &mut state),
            Stage::Networks => stage_networks(&mut run, &mut state),
            Stage::Metrics => stage_metrics(&mut run, &mut state),
            Stage::Regress => stage_regress(&mut run, &state),
            Stage::Classify => stage_classify(&mut run, &state),
        };
        timings.insert(stage.name().to_string(), started.elapsed().as_secs_f64() * 1e3);
        executed.push(stage);
        if let Err(e) = result {
            failure = Some((stage, e));
            break;
        }
    }

    let stale = match &failure {
        Some((failed, _)) => requested
            .iter()
            .filter(|s| *s >= failed)
            .flat_map(|s| s.artifacts())
            .filter(|rel| cfg.out_dir.join(rel).exists())
            .collect(),
        None => Vec::new(),
    };
    let report = RunReport {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        status: if failure.is_some() { "failed" } else { "ok" },
        error: failure.as_ref().map(|(_, e)| e.to_string()),
        stages_requested: requested.into_iter().collect(),
        stages_executed: executed,
        seeds: run.seeds.clone(),
        counts: run.counts,
        rows: run.rows,
        timings_ms: timings,
        skipped: run.skipped,
        stale_artifacts: stale,
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = cfg.out_dir.join("run.json");
    fs::write(&path, json + "\n").map_err(|e| CliError::stage("report", format!("{}: {e}", path.display())))?;
    match failure {
        Some((_, e)) => Err(e),
        None => Ok(report),
    }
}

/// Parses the archive and resolves sender identities.
pub fn ingest_archive(
    archive: &Path,
    window: &DateWindow,
    delta: f64,
    merges: &[(String, String)],
) -> Result<(IngestReport, Identities, Vec<MessageRow>), CliError> {
    let report = parse_archive(archive, window).map_err(|e| CliError::stage("ingest", e))?;
    let names: Vec<String> = report.messages.iter().map(|m| m.sender_raw.clone()).collect();
    let mut identities = resolve_identities(&names, delta, merges).map_err(|e| CliError::stage("ingest", e))?;
    identities.attach_messages(&report.messages);
    let rows = message_rows(&report.messages, &identities);
    Ok((report, identities, rows))
}

fn stage_ingest(run: &mut Run<'_>, state: &mut State) -> Result<(), CliError> {
    let cfg = run.cfg;
    let window = DateWindow::new(cfg.from, cfg.to).map_err(|e| CliError::Config(format!("field `from`: {e}")))?;
    let merges = match &cfg.merges {
        Some(p) => read_merges(p)?,
        None => Vec::new(),
    };
    let (report, identities, messages) = ingest_archive(&cfg.archive, &window, cfg.delta, &merges)?;
    if messages.is_empty() {
        return Err(CliError::stage("ingest", "no messages inside the date window"));
    }
    run.count("messages", messages.len());
    run.count("messages_outside_window", report.outside_window);
    run.count("messages_malformed", report.malformed);
    run.count("unknown_senders", report.unknown_senders);
    run.count("participants", identities.participants.len());
    if run.writes(Stage::Ingest) {
        run.emit(Stage::Ingest, "messages.csv", |b| write_messages(&messages, b))?;
        run.emit(Stage::Ingest, "participants.csv", |b| write_participants(&identities, b))?;
    }
    state.messages = Some(messages);
    Ok(())
}

fn stage_nvd(run: &mut Run<'_>, state: &mut State) -> Result<(), CliError> {
    let set = load_records(&run.cfg.feeds).map_err(|e| CliError::stage("nvd", e))?;
    if set.records.is_empty() {
        return Err(CliError::stage("nvd", "the feeds contain no usable records"));
    }
    run.count("records", set.records.len());
    run.count("records_rejected", set.rejected_count());
    run.count("records_duplicate", set.duplicates);
    run.count("records_skipped", set.skipped);
    if run.writes(Stage::Nvd) {
        run.emit(Stage::Nvd, "records.csv", |b| write_records_csv(&set, b))?;
    }
    state.records = Some(set);
    Ok(())
}

fn stage_extract(run: &mut Run<'_>, state: &mut State) -> Result<(), CliError> {
    let messages = state.messages.as_ref().expect("ingest runs first");
    let facts: Vec<MessageFacts> = messages.iter().map(|m| extract_facts(&m.email)).collect();
    let cves: BTreeSet<&CveId> = facts.iter().flat_map(|f| &f.cve_ids).collect();
    run.count("cves_mentioned", cves.len());
    run.count("messages_with_cves", facts.iter().filter(|f| !f.cve_ids.is_empty()).count());
    if run.writes(Stage::Extract) {
        run.emit(Stage::Extract, "facts.csv", |b| write_facts_csv(&facts, b))?;
    }
    state.facts = Some(facts);
    Ok(())
}

/// Builds both bipartite networks from messages and their facts (in the
/// same order).
pub fn build_networks(messages: &[MessageRow], facts: &[MessageFacts]) -> (SocialGraph, DomainGraph) {
    let social = build_social_network(
        messages
            .iter()
            .zip(facts)
            .map(|(m, f)| (m.participant.as_str(), &f.cve_ids)),
    );
    let domains = build_domain_network(facts.iter().map(|f| (&f.cve_ids, &f.domains)));
    (social, domains)
}

fn stage_networks(run: &mut Run<'_>, state: &mut State) -> Result<(), CliError> {
    let messages = state.messages.as_ref().expect("ingest runs first");
    let facts = state.facts.as_ref().expect("extract runs first");
    let (social, domains) = build_networks(messages, facts);
    run.count("social_participants", social.left_count());
    run.count("social_cves", social.right_count());
    run.count("social_edges", social.edge_count());
    run.count("domains", domains.left_count());
    run.count("domain_cves", domains.right_count());
    run.count("domain_edges", domains.edge_count());
    if run.writes(Stage::Networks) {
        run.emit(Stage::Networks, "graphs/social_edges.csv", |b| social.write_edges_csv("participant", b))?;
        run.emit(Stage::Networks, "graphs/domain_edges.csv", |b| domains.write_edges_csv("domain", b))?;
    }
    state.networks = Some((social, domains));
    Ok(())
}

fn write_dropped<W: std::io::Write>(d: &DelayReport, out: W) -> csv::Result<()> {
    let mut rows: Vec<(&CveId, &str)> = Vec::new();
    rows.extend(d.missing.iter().map(|c| (c, "missing")));
    rows.extend(d.rejected.iter().map(|c| (c, "rejected")));
    rows.extend(d.negative.iter().map(|c| (c, "negative_delay")));
    rows.sort();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cve_id", "reason"])?;
    for (c, r) in rows {
        w.write_record([c.as_str(), r])?;
    }
    w.flush()?;
    Ok(())
}

fn stage_metrics(run: &mut Run<'_>, state: &mut State) -> Result<(), CliError> {
    let messages = state.messages.as_ref().expect("ingest runs first");
    let facts = state.facts.as_ref().expect("extract runs first");
    let records = state.records.as_ref().expect("nvd runs first");
    let (social, domains) = state.networks.as_ref().expect("networks run first");

    let mentions = earliest_mentions(
        messages
            .iter()
            .zip(facts)
            .map(|(m, f)| (m.email.sent_at.date_naive(), &f.cve_ids)),
    );
    let delays = compute_delays(&mentions, &records.records);
    run.count("samples", delays.samples.len());
    run.count("dropped_missing", delays.missing.len());
    run.count("dropped_rejected", delays.rejected.len());
    run.count("dropped_negative", delays.negative.len());
    if delays.samples.is_empty() {
        return Err(CliError::stage("metrics", "no mentioned CVE has a usable database record"));
    }

    let mut bodies: BTreeMap<CveId, Vec<&str>> = BTreeMap::new();
    for (m, f) in messages.iter().zip(facts) {
        for c in &f.cve_ids {
            bodies.entry(c.clone()).or_default().push(m.email.body.as_str());
        }
    }
    let mitredev = core_membership(social, &run.cfg.core_names);
    let table = MetricTable::compute(&MetricInputs {
        samples: &delays.samples,
        records: &records.records,
        social,
        domains,
        mitredev: &mitredev,
        bodies: &bodies,
    })
    .map_err(|e| CliError::stage("metrics", e))?;
    let matrices = MODEL_LEVELS
        .iter()
        .map(|&j| assemble(&table, j))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::stage("metrics", e))?;

    if run.writes(Stage::Metrics) {
        run.emit(Stage::Metrics, "delays.csv", |b| write_delays_csv(&delays.samples, b))?;
        run.emit(Stage::Metrics, "dropped_cves.csv", |b| write_dropped(&delays, b))?;
        let summary = summarize_delays(&delays.samples, &run.cfg.taus).expect("non-empty sample");
        run.emit(Stage::Metrics, "delay_summary.csv", |b| write_delay_summary(&summary, b))?;
        run.emit(Stage::Metrics, "annual_delays.csv", |b| write_annual_delays(&summary, b))?;
        run.emit(Stage::Metrics, "metrics.csv", |b| table.write_csv(b))?;
        for m in &matrices {
            run.emit(Stage::Metrics, &format!("model_matrix_M{}.csv", m.level), |b| m.write_csv(b))?;
        }
    }
    state.metrics = Some(MetricsOut {
        table,
        matrices,
    });
    Ok(())
}

fn tau_label(tau: f64) -> String {
    format!("{tau}")
}

fn model_label(level: u8) -> String {
    format!("M{level}")
}

fn finite_aic(fit: &FitResult) -> Option<f64> {
    aic(fit).ok()
}

struct QrCell {
    fit: FitResult,
    draws: Option<BootstrapDraws>,
}

struct LevelFits {
    ols: Option<FitResult>,
    qr: Vec<Option<QrCell>>,
}

#[derive(Default)]
struct CoefTable {
    rows: Vec<[String; 8]>,
}

impl CoefTable {
    fn push(&mut self, model: &str, fit: &FitResult, names: &[String], se: &DVector<f64>, source: &str) {
        let p = fit.p_values(se);
        let method = serde_json::to_value(fit.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        for (j, name) in names.iter().enumerate() {
            self.rows.push([
                model.to_string(),
                method.clone(),
                fmt_opt(fit.tau),
                name.clone(),
                fit.coefficients[j].to_string(),
                se[j].to_string(),
                p[j].to_string(),
                source.to_string(),
            ]);
        }
    }

    fn write<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "method", "tau", "term", "estimate", "se", "p_value", "se_source"])?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn test_row(small: &str, large: &str, method: &str, tau: Option<f64>, t: &TestResult) -> Vec<String> {
    vec![
        small.to_string(),
        large.to_string(),
        method.to_string(),
        fmt_opt(tau),
        t.statistic.to_string(),
        t.df1.to_string(),
        fmt_opt(t.df2),
        t.replicates.map(|r| r.to_string()).unwrap_or_default(),
        t.p_value.to_string(),
    ]
}

fn write_rows<W: std::io::Write>(header: &[&str], rows: &[Vec<String>], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn stage_regress(run: &mut Run<'_>, state: &State) -> Result<(), CliError> {
    let cfg = run.cfg;
    let m = state.metrics.as_ref().expect("metrics run first");
    let y = DVector::from_vec(m.table.delays());
    let y_log = y.map(f64::ln_1p);
    let taus = cfg.taus.clone();

    // Full-sample fits for every level and quantile.
    let mut coefs = CoefTable::default();
    let mut fits: Vec<LevelFits> = Vec::new();
    for (li, mm) in m.matrices.iter().enumerate() {
        let label = model_label(mm.level);
        let ols = match ols_fit(&mm.rows, &y_log, cfg.hc) {
            Ok(f) => {
                coefs.push(&label, &f, &mm.column_names, &f.standard_errors(), &format!("{:?}", cfg.hc).to_uppercase());
                Some(f)
            }
            Err(e) => {
                run.skip(Stage::Regress, format!("{label} OLS"), e);
                None
            }
        };
        let mut qr = Vec::new();
        for (ti, &tau) in taus.iter().enumerate() {
            let item = format!("{label} QR tau={}", tau_label(tau));
            let fit = match qr_fit(&mm.rows, &y, tau) {
                Ok(f) => f,
                Err(e) => {
                    run.skip(Stage::Regress, item, e);
                    qr.push(None);
                    continue;
                }
            };
            let seed = derive_seed(run.seeds.bootstrap, (li * taus.len() + ti) as u64);
            let draws = match bootstrap_draws(&mm.rows, &y, tau, cfg.bootstrap_reps, seed) {
                Ok(d) => {
                    coefs.push(&label, &fit, &mm.column_names, &d.standard_errors(), "bootstrap");
                    Some(d)
                }
                Err(e) => {
                    run.skip(Stage::Regress, format!("{item} bootstrap"), &e);
                    coefs.push(&label, &fit, &mm.column_names, &fit.standard_errors(), "iid");
                    None
                }
            };
            qr.push(Some(QrCell { fit, draws }));
        }
        fits.push(LevelFits { ols, qr });
    }
    run.count("coefficient_rows", coefs.rows.len());
    run.emit(Stage::Regress, "coefficients.csv", |b| coefs.write(b))?;

    // Comparison table: adjusted R2 and AIC for OLS, AIC per quantile.
    let mut header = vec![
        "model".to_string(),
        "k".to_string(),
        "n".to_string(),
        "adj_r2_ols".to_string(),
        "aic_ols".to_string(),
        "delta_aic_ols".to_string(),
    ];
    for &t in &taus {
        header.push(format!("aic_qr_{}", tau_label(t)));
        header.push(format!("delta_aic_qr_{}", tau_label(t)));
    }
    let mut comparison = Vec::new();
    for (li, (mm, lf)) in m.matrices.iter().zip(&fits).enumerate() {
        let prev = li.checked_sub(1).map(|p| &fits[p]);
        let ols_aic = lf.ols.as_ref().and_then(finite_aic);
        let prev_ols = prev.and_then(|p| p.ols.as_ref()).and_then(finite_aic);
        let mut row = vec![
            model_label(mm.level),
            mm.ncols().to_string(),
            mm.nrows().to_string(),
            fmt_opt(lf.ols.as_ref().and_then(|f| f.adj_r2)),
            fmt_opt(ols_aic),
            fmt_delta(ols_aic, prev_ols),
        ];
        for ti in 0..taus.len() {
            let cur = lf.qr[ti].as_ref().and_then(|c| finite_aic(&c.fit));
            let before = prev.and_then(|p| p.qr[ti].as_ref()).and_then(|c| finite_aic(&c.fit));
            row.push(fmt_opt(cur));
            row.push(fmt_delta(cur, before));
        }
        comparison.push(row);
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    run.emit(Stage::Regress, "model_comparison.csv", |b| write_rows(&header_refs, &comparison, b))?;

    // Nested tests of M(j-1) against M(j).
    let mut nested = Vec::new();
    for li in 1..m.matrices.len() {
        let (small, large) = (&m.matrices[li - 1], &m.matrices[li]);
        let (ls, ll) = (model_label(small.level), model_label(large.level));
        match ols_nested_wald_test(&small.rows, &large.rows, &y_log, cfg.hc) {
            Ok(t) => nested.push(test_row(&ls, &ll, "OLS", None, &t)),
            Err(e) => run.skip(Stage::Regress, format!("{ls} vs {ll} OLS test"), e),
        }
        for (ti, &tau) in taus.iter().enumerate() {
            let Some(QrCell { fit, draws: Some(draws) }) = &fits[li].qr[ti] else {
                run.skip(Stage::Regress, format!("{ls} vs {ll} QR test tau={}", tau_label(tau)), "larger model has no bootstrap");
                continue;
            };
            match nested_wald_from_draws(fit, draws, small.ncols()) {
                Ok(t) => nested.push(test_row(&ls, &ll, "QR", Some(tau), &t)),
                Err(e) => run.skip(Stage::Regress, format!("{ls} vs {ll} QR test tau={}", tau_label(tau)), e),
            }
        }
    }
    run.emit(Stage::Regress, "nested_tests.csv", |b| {
        write_rows(&["small", "large", "method", "tau", "statistic", "df1", "df2", "replicates", "p_value"], &nested, b)
    })?;

    // Equality of each M6 slope across nested sets of quantiles.
    let full = m.matrices.last().expect("six levels");
    let full_fits = fits.last().expect("six levels");
    let mut between = Vec::new();
    for s in 2..=taus.len() {
        let set: Vec<FitResult> = full_fits.qr[..s].iter().filter_map(|c| c.as_ref().map(|c| c.fit.clone())).collect();
        let set_label = format!("S{}", s - 1);
        if set.len() < s {
            run.skip(Stage::Regress, format!("between-quantile set {set_label}"), "a quantile fit is missing");
            continue;
        }
        let set_taus: Vec<String> = taus[..s].iter().map(|&t| tau_label(t)).collect();
        for j in 1..full.ncols() {
            match between_quantile_test(&full.rows, &set, j) {
                Ok(t) => between.push(vec![
                    model_label(full.level),
                    set_label.clone(),
                    set_taus.join(";"),
                    full.column_names[j].clone(),
                    t.statistic.to_string(),
                    t.df1.to_string(),
                    t.p_value.to_string(),
                    u8::from(t.p_value >= 0.05).to_string(),
                ]),
                Err(e) => run.skip(Stage::Regress, format!("between-quantile {set_label} {}", full.column_names[j]), e),
            }
        }
    }
    run.emit(Stage::Regress, "between_quantile_tests.csv", |b| {
        write_rows(&["model", "set", "taus", "term", "statistic", "df", "p_value", "equal_at_5pct"], &between, b)
    })?;

    // LASSO path of the full model.
    let mut path = Vec::new();
    for &lambda in &cfg.lambdas {
        match qr_lasso_fit(&full.rows, &y, cfg.lasso_tau, lambda) {
            Ok(f) => {
                for (j, name) in full.column_names.iter().enumerate() {
                    path.push(vec![lambda.to_string(), name.clone(), f.coefficients[j].to_string()]);
                }
            }
            Err(e) => run.skip(Stage::Regress, format!("QR-LASSO lambda={lambda}"), e),
        }
    }
    run.emit(Stage::Regress, "lasso_path.csv", |b| write_rows(&["lambda", "term", "value"], &path, b))?;

    // OLS within single years, without the year dummies.
    let years: BTreeSet<i32> = m.table.rows.iter().map(|r| r.t_oss.year()).collect();
    let mut annual = Vec::new();
    for &year in &years {
        let idx: Vec<usize> = (0..m.table.len()).filter(|&i| m.table.rows[i].t_oss.year() == year).collect();
        let ys = DVector::from_fn(idx.len(), |i, _| y_log[idx[i]]);
        for mm in &m.matrices {
            let sub = mm.without_year_dummies().select_rows(&idx);
            let label = model_label(mm.level);
            let (adj, a, status) = match ols_fit(&sub.rows, &ys, cfg.hc) {
                Ok(f) => (f.adj_r2, finite_aic(&f), "ok".to_string()),
                Err(e) => {
                    run.skip(Stage::Regress, format!("{year} {label} subset OLS"), &e);
                    (None, None, e.to_string())
                }
            };
            annual.push(vec![
                year.to_string(),
                label,
                sub.nrows().to_string(),
                sub.ncols().to_string(),
                fmt_opt(adj),
                fmt_opt(a),
                status,
            ]);
        }
    }
    run.emit(Stage::Regress, "annual_subset_ols.csv", |b| {
        write_rows(&["year", "model", "n", "k", "adj_r2", "aic", "status"], &annual, b)
    })?;

    // M5 plus the m most frequent CWEs.
    let distinct = m.table.top_cwes(usize::MAX).len();
    let base = &m.matrices[4];
    let base_ols = fits[4].ols.as_ref().and_then(finite_aic);
    let base_qr = match taus.iter().position(|&t| (t - SWEEP_TAU).abs() < 1e-12) {
        Some(ti) => fits[4].qr[ti].as_ref().and_then(|c| finite_aic(&c.fit)),
        None => qr_fit(&base.rows, &y, SWEEP_TAU).ok().as_ref().and_then(finite_aic),
    };
    let mut sweep = Vec::new();
    for &mc in &cfg.cwe_steps {
        if mc > distinct {
            log::info!("CWE sweep stops at {mc}: only {distinct} distinct CWEs");
            break;
        }
        let mm = assemble_with_cwes(&m.table, mc);
        let ols = ols_fit(&mm.rows, &y_log, cfg.hc);
        let qr = qr_fit(&mm.rows, &y, SWEEP_TAU);
        if let Err(e) = &ols {
            run.skip(Stage::Regress, format!("CWE sweep m={mc} OLS"), e);
        }
        if let Err(e) = &qr {
            run.skip(Stage::Regress, format!("CWE sweep m={mc} QR"), e);
        }
        let ols_aic = ols.as_ref().ok().and_then(finite_aic);
        let qr_aic = qr.as_ref().ok().and_then(finite_aic);
        sweep.push(vec![
            mc.to_string(),
            mm.ncols().to_string(),
            fmt_opt(ols.as_ref().ok().and_then(|f| f.adj_r2)),
            fmt_opt(ols_aic),
            fmt_delta(ols_aic, base_ols),
            fmt_opt(qr_aic),
            fmt_delta(qr_aic, base_qr),
        ]);
    }
    run.emit(Stage::Regress, "cwe_sweep.csv", |b| {
        write_rows(
            &["cwes", "k", "adj_r2_ols", "aic_ols", "delta_aic_ols", "aic_qr_0.5", "delta_aic_qr_0.5"],
            &sweep,
            b,
        )
    })?;
    Ok(())
}

fn stage_classify(run: &mut Run<'_>, state: &State) -> Result<(), CliError> {
    let cfg = run.cfg;
    let m = state.metrics.as_ref().expect("metrics run first");
    let split = median_split(&m.table.delays()).map_err(|e| CliError::stage("classify", e))?;
    run.count("class_low", split.count(coorddelay::classify::LOW));
    run.count("class_high", split.count(coorddelay::classify::HIGH));
    let (train, test) = train_test_split(&split.labels, cfg.classify.test_fraction, cfg.classify.stratified, run.seeds.split);
    let eval = EvalConfig {
        test_fraction: cfg.classify.test_fraction,
        folds: cfg.classify.folds,
        forest: ForestParams {
            n_trees: cfg.classify.trees,
            min_leaf: 1,
        },
        stratified: cfg.classify.stratified,
        seed: run.seeds.forest,
    };
    let mut rows = Vec::new();
    for mm in &m.matrices {
        match train_and_evaluate(&mm.rows, &split.labels, &train, &test, &eval) {
            Ok(r) => rows.push(vec![
                mm.level.to_string(),
                r.mtry.to_string(),
                r.cv_accuracy.to_string(),
                r.test_accuracy.to_string(),
                run.seeds.master.to_string(),
            ]),
            Err(e) => run.skip(Stage::Classify, model_label(mm.level), e),
        }
    }
    run.emit(Stage::Classify, "classification.csv", |b| {
        write_rows(&["model_level", "mtry", "cv_accuracy", "test_accuracy", "seed"], &rows, b)
    })?;
    Ok(())
}
