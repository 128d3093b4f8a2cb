//! CSV tables exchanged between stages and the standalone subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use coorddelay::archive::{Identities, RawEmail};
use coorddelay::extraction::MessageFacts;
use coorddelay::CveId;

/// A message together with its resolved participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRow {
    pub email: RawEmail,
    pub participant_id: usize,
    pub participant: String,
}

/// Pairs each message with its participant; messages whose sender did not
/// resolve (which cannot happen for names given to the resolver) are skipped.
pub fn message_rows(emails: &[RawEmail], ids: &Identities) -> Vec<MessageRow> {
    emails
        .iter()
        .filter_map(|e| {
            let pid = ids.participant_of(&e.sender_raw)?;
            Some(MessageRow {
                email: e.clone(),
                participant_id: pid,
                participant: ids.participants[pid].canonical_name.clone(),
            })
        })
        .collect()
}

/// `message_key,sent_at,participant_id,participant,subject,body`; the body
/// is the cleaned text, so later stages can run from this file alone.
pub fn write_messages<W: Write>(rows: &[MessageRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["message_key", "sent_at", "participant_id", "participant", "subject", "body"])?;
    for r in rows {
        w.write_record([
            r.email.message_key.as_str(),
            &r.email.sent_at.to_rfc3339_opts(SecondsFormat::Secs, true),
            &r.participant_id.to_string(),
            &r.participant,
            &r.email.subject,
            &r.email.body,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_messages<R: Read>(input: R) -> Result<Vec<MessageRow>, String> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("messages table lacks a `{name}` column"))
    };
    let (ik, it, ip, iname, is, ib) = (
        col("message_key")?,
        col("sent_at")?,
        col("participant_id")?,
        col("participant")?,
        col("subject")?,
        col("body")?,
    );
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let sent_at = DateTime::parse_from_rfc3339(&field(it))
            .map_err(|e| format!("row {}: bad sent_at: {e}", line + 2))?
            .with_timezone(&Utc);
        let participant_id = field(ip)
            .parse()
            .map_err(|e| format!("row {}: bad participant_id: {e}", line + 2))?;
        let participant = field(iname);
        out.push(MessageRow {
            email: RawEmail {
                message_key: field(ik),
                sent_at,
                sender_raw: participant.clone(),
                subject: field(is),
                body: field(ib),
            },
            participant_id,
            participant,
        });
    }
    Ok(out)
}

/// `participant_id,canonical_name,aliases,messages` with `;`-joined aliases.
pub fn write_participants<W: Write>(ids: &Identities, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["participant_id", "canonical_name", "aliases", "messages"])?;
    for (i, p) in ids.participants.iter().enumerate() {
        let aliases: Vec<&str> = p.aliases.iter().map(String::as_str).collect();
        w.write_record([
            i.to_string(),
            p.canonical_name.clone(),
            aliases.join(";"),
            p.message_keys.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`coorddelay::extraction::write_facts_csv`]. Body lengths are
/// not part of the table and read back as zero.
pub fn read_facts<R: Read>(input: R) -> Result<Vec<MessageFacts>, String> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut order: Vec<String> = Vec::new();
    let mut by_key: BTreeMap<String, (BTreeSet<CveId>, BTreeSet<String>)> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let key = rec.get(0).unwrap_or("").to_string();
        let entry = by_key.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Default::default()
        });
        if let Some(c) = rec.get(1).filter(|c| !c.is_empty()) {
            let id: CveId = c.parse().map_err(|e| format!("row {}: {e}", line + 2))?;
            entry.0.insert(id);
        }
        if let Some(d) = rec.get(2).filter(|d| !d.is_empty()) {
            entry.1.insert(d.to_string());
        }
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let (cve_ids, domains) = by_key.remove(&k).unwrap_or_default();
            MessageFacts {
                message_key: k,
                cve_ids,
                domains,
                body_length_chars: 0,
            }
        })
        .collect())
}

/// Number of data rows in a CSV text with a header line.
pub fn count_rows(bytes: &[u8]) -> usize {
    csv::Reader::from_reader(bytes).records().count()
}
