//! Mailing-list archive ingestion.
//!
//! Two archive layouts are understood: a directory of per-message files
//! (HTML pages as served by web archives, or raw RFC 822 / mbox text) and a
//! single mbox file. Every message is reduced to a [`RawEmail`] carrying its
//! UTC timestamp, the sender display name, the subject and a cleaned body
//! (quotations and forwarded material removed, see [`strip_message`]).

mod identity;
mod message;
mod strip;

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use identity::{resolve_identities, similarity, Identities, Participant, DEFAULT_THRESHOLD};
pub use message::{extract_sender, parse_message, split_mbox, ParsedMessage, UNKNOWN_SENDER};
pub use strip::strip_message;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("cannot read archive {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("similarity undefined for two empty names")]
    EmptyNames,
    #[error("threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("invalid date window: {from} is after {to}")]
    InvalidWindow { from: NaiveDate, to: NaiveDate },
}

/// Inclusive range of UTC calendar dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

impl DateWindow {
    pub fn new(from: NaiveDate, to: NaiveDate) -> Result<Self, ArchiveError> {
        if from > to {
            return Err(ArchiveError::InvalidWindow { from, to });
        }
        Ok(DateWindow { from, to })
    }

    pub fn contains(&self, at: &DateTime<Utc>) -> bool {
        let day = at.date_naive();
        self.from <= day && day <= self.to
    }
}

/// One archived message after cleaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEmail {
    pub message_key: String,
    pub sent_at: DateTime<Utc>,
    pub sender_raw: String,
    pub subject: String,
    pub body: String,
}

/// Outcome of ingesting an archive.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub messages: Vec<RawEmail>,
    /// Parsed fine but dated outside the window.
    pub outside_window: usize,
    /// Skipped: no usable Date or From header, or unparseable text.
    pub malformed: usize,
    /// Messages whose From header carried no display name.
    pub unknown_senders: usize,
}

enum Source {
    Html(String),
    Mbox(String),
}

/// Parses every message in `source` (a directory or an mbox file) and keeps
/// the ones dated inside `window`.
///
/// A message that cannot be parsed is skipped and counted; only an unreadable
/// source aborts the ingest.
pub fn parse_archive(source: &Path, window: &DateWindow) -> Result<IngestReport, ArchiveError> {
    let meta = fs::metadata(source).map_err(|e| ArchiveError::Io {
        path: source.to_path_buf(),
        source: e,
    })?;

    let mut units: Vec<(String, Source)> = Vec::new();
    if meta.is_dir() {
        for path in list_files(source)? {
            let text = read_lossy(&path)?;
            let rel = path
                .strip_prefix(source)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            let key = strip_extension(&rel);
            let is_html = matches!(
                path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("html" | "htm")
            );
            units.push((key, if is_html { Source::Html(text) } else { Source::Mbox(text) }));
        }
    } else {
        let text = read_lossy(source)?;
        let stem = source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "mbox".to_string());
        units.push((stem, Source::Mbox(text)));
    }

    let parsed: Vec<Vec<Result<(String, ParsedMessage), String>>> = units
        .par_iter()
        .map(|(key, unit)| match unit {
            Source::Html(html) => vec![message::html_to_text(html)
                .and_then(|text| parse_message(&text))
                .map(|m| (key.clone(), m))
                .map_err(|e| format!("{key}: {e}"))],
            Source::Mbox(text) => {
                let entries = split_mbox(text);
                let single = entries.len() == 1;
                entries
                    .into_iter()
                    .enumerate()
                    .map(|(i, entry)| {
                        let entry_key = if single && !text.starts_with("From ") {
                            key.clone()
                        } else {
                            format!("{key}#{:05}", i + 1)
                        };
                        parse_message(&entry)
                            .map(|m| (entry_key.clone(), m))
                            .map_err(|e| format!("{entry_key}: {e}"))
                    })
                    .collect()
            }
        })
        .collect();

    let mut report = IngestReport::default();
    for result in parsed.into_iter().flatten() {
        match result {
            Ok((key, msg)) => {
                if !window.contains(&msg.sent_at) {
                    report.outside_window += 1;
                    continue;
                }
                if msg.sender == UNKNOWN_SENDER {
                    report.unknown_senders += 1;
                }
                report.messages.push(RawEmail {
                    message_key: key,
                    sent_at: msg.sent_at,
                    sender_raw: msg.sender,
                    subject: msg.subject,
                    body: strip_message(&msg.body),
                });
            }
            Err(reason) => {
                log::warn!("skipping message {reason}");
                report.malformed += 1;
            }
        }
    }
    report
        .messages
        .sort_by(|a, b| (a.sent_at, &a.message_key).cmp(&(b.sent_at, &b.message_key)));
    Ok(report)
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>, ArchiveError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| ArchiveError::Io {
            path: d.clone(),
            source: e,
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| ArchiveError::Io {
                path: d.clone(),
                source: e,
            })?;
            let path = entry.path();
            let name = entry.file_name();
            if name.to_string_lossy().starts_with('.') {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_lossy(path: &Path) -> Result<String, ArchiveError> {
    let bytes = fs::read(path).map_err(|e| ArchiveError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn strip_extension(rel: &str) -> String {
    match rel.rfind('.') {
        Some(dot) if !rel[dot..].contains('/') => rel[..dot].to_string(),
        _ => rel.to_string(),
    }
}
