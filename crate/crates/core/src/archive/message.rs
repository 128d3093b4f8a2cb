use std::sync::OnceLock;

use base64::Engine;
use chrono::{DateTime, NaiveDateTime, Utc};
use regex::Regex;

use super::ArchiveError;

/// Participant name used when a From header carries only an address.
pub const UNKNOWN_SENDER: &str = "unknown";

/// Header fields and decoded plain-text body of one message, before cleaning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMessage {
    pub sent_at: DateTime<Utc>,
    pub sender: String,
    pub subject: String,
    pub body: String,
}

/// Parses one RFC 822 style message (header block, blank line, body).
///
/// `Date` and `From` are mandatory. Multipart bodies are reduced to their
/// first `text/plain` part; quoted-printable and base64 transfer encodings
/// are decoded.
pub fn parse_message(text: &str) -> Result<ParsedMessage, ArchiveError> {
    let text = text.replace("\r\n", "\n");
    let text = text.trim_start_matches('\n');
    let (head, body) = match text.find("\n\n") {
        Some(i) => (&text[..i], &text[i + 2..]),
        None => (text, ""),
    };
    let headers = parse_headers(head);

    let date = header(&headers, "date").ok_or_else(|| malformed("missing Date header"))?;
    let sent_at = parse_date(date).ok_or_else(|| malformed(format!("unparseable date {date:?}")))?;
    let from = header(&headers, "from").ok_or_else(|| malformed("missing From header"))?;
    let subject = header(&headers, "subject").map(decode_words).unwrap_or_default();

    let body = decode_body(&headers, body);
    Ok(ParsedMessage {
        sent_at,
        sender: extract_sender(from),
        subject: subject.trim().to_string(),
        body,
    })
}

fn malformed(msg: impl Into<String>) -> ArchiveError {
    ArchiveError::Malformed(msg.into())
}

fn parse_headers(head: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in head.lines() {
        if line.starts_with([' ', '\t']) {
            if let Some((_, value)) = out.last_mut() {
                value.push(' ');
                value.push_str(line.trim());
            }
            continue;
        }
        if let Some((name, value)) = line.split_once(':') {
            let name = name.trim();
            if !name.is_empty() && !name.contains(' ') {
                out.push((name.to_ascii_lowercase(), value.trim().to_string()));
            }
        }
    }
    out
}

fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v.as_str())
}

/// Lenient RFC 2822 date parsing, normalized to UTC.
pub(crate) fn parse_date(raw: &str) -> Option<DateTime<Utc>> {
    static COMMENT: OnceLock<Regex> = OnceLock::new();
    let comment = COMMENT.get_or_init(|| Regex::new(r"\([^)]*\)").unwrap());
    let cleaned = comment.replace_all(raw, " ");
    let cleaned = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");

    if let Ok(dt) = DateTime::parse_from_rfc2822(&cleaned) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in [
        "%a, %d %b %Y %H:%M:%S %z",
        "%d %b %Y %H:%M:%S %z",
        "%a, %d %b %Y %H:%M %z",
        "%d %b %Y %H:%M %z",
        "%Y-%m-%dT%H:%M:%S%z",
    ] {
        if let Ok(dt) = DateTime::parse_from_str(&cleaned, fmt) {
            return Some(dt.with_timezone(&Utc));
        }
    }
    // asctime style and zone-less forms are taken as UTC
    for fmt in ["%a %b %e %H:%M:%S %Y", "%a, %d %b %Y %H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(&cleaned, fmt) {
            return Some(dt.and_utc());
        }
    }
    None
}

/// Returns the display name of a From header.
///
/// The address part is ignored since archives obfuscate it. Headers without a
/// display name (a bare or bracketed address) yield [`UNKNOWN_SENDER`].
pub fn extract_sender(from_header: &str) -> String {
    static NAME: OnceLock<Regex> = OnceLock::new();
    static COMMENT_NAME: OnceLock<Regex> = OnceLock::new();
    let name_re = NAME.get_or_init(|| Regex::new(r"^\s*([^<]*?)\s*<[^>]*>").unwrap());
    let comment_re = COMMENT_NAME.get_or_init(|| Regex::new(r"\(([^)]+)\)").unwrap());

    let decoded = decode_words(from_header);
    let candidate = if let Some(caps) = name_re.captures(&decoded) {
        caps[1].to_string()
    } else if let Some(caps) = comment_re.captures(&decoded) {
        caps[1].to_string()
    } else {
        decoded.clone()
    };
    let name = candidate
        .trim()
        .trim_matches('"')
        .trim_matches('\'')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    if name.is_empty() || looks_like_address(&name) {
        UNKNOWN_SENDER.to_string()
    } else {
        name
    }
}

fn looks_like_address(s: &str) -> bool {
    !s.contains(' ') && s.contains('@')
}

/// Decodes RFC 2047 encoded words (`=?charset?Q|B?text?=`). Only UTF-8 and
/// Latin-1 charsets are decoded; anything else is left as is.
pub(crate) fn decode_words(raw: &str) -> String {
    static WORD: OnceLock<Regex> = OnceLock::new();
    static GAP: OnceLock<Regex> = OnceLock::new();
    if !raw.contains("=?") {
        return raw.to_string();
    }
    let re = WORD.get_or_init(|| Regex::new(r"=\?([^?]+)\?([bBqQ])\?([^?]*)\?=").unwrap());
    // whitespace between adjacent encoded words is not significant
    let gap = GAP.get_or_init(|| Regex::new(r"\?=\s+=\?").unwrap());
    let joined = gap.replace_all(raw, "?==?");
    re.replace_all(&joined, |caps: &regex::Captures| {
        let charset = caps[1].to_ascii_lowercase();
        let bytes = match &caps[2] {
            "b" | "B" => base64::engine::general_purpose::STANDARD
                .decode(caps[3].as_bytes())
                .ok(),
            _ => Some(decode_qp(&caps[3].replace('_', " "), false)),
        };
        bytes
            .and_then(|b| decode_charset(&charset, &b))
            .unwrap_or_else(|| caps[0].to_string())
    })
    .into_owned()
}

fn decode_charset(charset: &str, bytes: &[u8]) -> Option<String> {
    match charset {
        "utf-8" | "utf8" | "us-ascii" => Some(String::from_utf8_lossy(bytes).into_owned()),
        "iso-8859-1" | "latin1" | "iso-8859-15" | "windows-1252" => {
            Some(bytes.iter().map(|&b| b as char).collect())
        }
        _ => None,
    }
}

fn decode_qp(text: &str, soft_breaks: bool) -> Vec<u8> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'=' {
            if soft_breaks && bytes.get(i + 1) == Some(&b'\n') {
                i += 2;
                continue;
            }
            if i + 2 < bytes.len()
                && bytes[i + 1].is_ascii_hexdigit()
                && bytes[i + 2].is_ascii_hexdigit()
            {
                let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).unwrap();
                out.push(u8::from_str_radix(hex, 16).unwrap());
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    out
}

fn decode_body(headers: &[(String, String)], body: &str) -> String {
    let content_type = header(headers, "content-type").unwrap_or("text/plain");
    let encoding = header(headers, "content-transfer-encoding").unwrap_or("7bit");

    if content_type.to_ascii_lowercase().starts_with("multipart/") {
        if let Some(boundary) = param(content_type, "boundary") {
            for part in split_parts(body, &boundary) {
                let part = part.trim_start_matches('\n');
                let (head, part_body) = match part.find("\n\n") {
                    Some(i) => (&part[..i], &part[i + 2..]),
                    None => ("", part),
                };
                let part_headers = parse_headers(head);
                let ct = header(&part_headers, "content-type").unwrap_or("text/plain");
                let ct_lower = ct.to_ascii_lowercase();
                if ct_lower.starts_with("text/plain") || ct_lower.starts_with("multipart/") {
                    return decode_body(&part_headers, part_body);
                }
            }
            return String::new();
        }
    }

    let charset = param(content_type, "charset")
        .unwrap_or_else(|| "utf-8".to_string())
        .to_ascii_lowercase();
    let bytes = match encoding.trim().to_ascii_lowercase().as_str() {
        "quoted-printable" => decode_qp(body, true),
        "base64" => {
            let compact: String = body.split_whitespace().collect();
            base64::engine::general_purpose::STANDARD
                .decode(compact.as_bytes())
                .unwrap_or_else(|_| body.as_bytes().to_vec())
        }
        _ => return body.to_string(),
    };
    decode_charset(&charset, &bytes).unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned())
}

fn param(header_value: &str, name: &str) -> Option<String> {
    header_value.split(';').skip(1).find_map(|p| {
        let (k, v) = p.split_once('=')?;
        (k.trim().eq_ignore_ascii_case(name)).then(|| v.trim().trim_matches('"').to_string())
    })
}

fn split_parts<'a>(body: &'a str, boundary: &str) -> Vec<&'a str> {
    let delimiter = format!("--{boundary}");
    let mut parts = Vec::new();
    let mut rest = body;
    // preamble
    match rest.find(&delimiter) {
        Some(i) => rest = &rest[i + delimiter.len()..],
        None => return parts,
    }
    loop {
        if rest.starts_with("--") {
            break;
        }
        match rest.find(&format!("\n{delimiter}")) {
            Some(i) => {
                parts.push(&rest[..i]);
                rest = &rest[i + 1 + delimiter.len()..];
            }
            None => {
                parts.push(rest);
                break;
            }
        }
    }
    parts
}

/// Splits mbox text into message texts (without the `From ` separator line).
///
/// Text that does not start with a separator is treated as a single message.
/// `>From ` escaping (mboxrd) is undone.
pub fn split_mbox(text: &str) -> Vec<String> {
    let text = text.replace("\r\n", "\n");
    if !text.starts_with("From ") {
        return vec![unescape_from(&text)];
    }
    let mut messages = Vec::new();
    let mut current: Option<String> = None;
    let mut prev_blank = true;
    for line in text.split_inclusive('\n') {
        if line.starts_with("From ") && prev_blank {
            if let Some(done) = current.take() {
                messages.push(unescape_from(&done));
            }
            current = Some(String::new());
            prev_blank = false;
            continue;
        }
        if let Some(buf) = current.as_mut() {
            buf.push_str(line);
        }
        prev_blank = line.trim_end_matches('\n').is_empty();
    }
    if let Some(done) = current {
        messages.push(unescape_from(&done));
    }
    messages
}

fn unescape_from(msg: &str) -> String {
    static ESCAPED: OnceLock<Regex> = OnceLock::new();
    let re = ESCAPED.get_or_init(|| Regex::new(r"(?m)^>(>*From )").unwrap());
    re.replace_all(msg, "$1").into_owned()
}

/// Extracts the message text from an archive HTML page.
///
/// Web archives render the message (headers and body) inside the first
/// `<pre>` block; when there is none the whole document is used. Tags are
/// removed and character entities decoded.
pub(crate) fn html_to_text(html: &str) -> Result<String, ArchiveError> {
    static PRE: OnceLock<Regex> = OnceLock::new();
    static TAG: OnceLock<Regex> = OnceLock::new();
    static BREAK: OnceLock<Regex> = OnceLock::new();
    let pre = PRE.get_or_init(|| Regex::new(r"(?is)<pre[^>]*>(.*?)</pre>").unwrap());
    let tag = TAG.get_or_init(|| Regex::new(r"(?s)<[^>]*>").unwrap());
    let brk = BREAK.get_or_init(|| Regex::new(r"(?i)<br\s*/?>").unwrap());

    let inner = match pre.captures(html) {
        Some(c) => c.get(1).unwrap().as_str().to_string(),
        None => {
            let no_script = Regex::new(r"(?is)<(script|style|head)[^>]*>.*?</(script|style|head)>")
                .unwrap()
                .replace_all(html, "");
            brk.replace_all(&no_script, "\n").into_owned()
        }
    };
    let text = tag.replace_all(&inner, "");
    let decoded = decode_entities(&text);
    if decoded.trim().is_empty() {
        return Err(malformed("empty HTML message"));
    }
    Ok(decoded)
}

fn decode_entities(text: &str) -> String {
    static ENTITY: OnceLock<Regex> = OnceLock::new();
    let re = ENTITY.get_or_init(|| Regex::new(r"&(#[0-9]+|#[xX][0-9a-fA-F]+|[a-zA-Z]+);").unwrap());
    re.replace_all(text, |caps: &regex::Captures| {
        let name = &caps[1];
        let ch = if let Some(hex) = name.strip_prefix("#x").or_else(|| name.strip_prefix("#X")) {
            u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
        } else if let Some(dec) = name.strip_prefix('#') {
            dec.parse().ok().and_then(char::from_u32)
        } else {
            match name {
                "lt" => Some('<'),
                "gt" => Some('>'),
                "amp" => Some('&'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                _ => None,
            }
        };
        ch.map(String::from).unwrap_or_else(|| caps[0].to_string())
    })
    .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn sender_examples() {
        assert_eq!(extract_sender("John Doe <jd@...>"), "John Doe");
        assert_eq!(extract_sender("Christey, Steven M."), "Christey, Steven M.");
        assert_eq!(extract_sender("<only@addr>"), UNKNOWN_SENDER);
    }

    #[test]
    fn sender_variants() {
        assert_eq!(extract_sender("\"Doe, John\" <jd@example.org>"), "Doe, John");
        assert_eq!(extract_sender("jd@example.org (John Doe)"), "John Doe");
        assert_eq!(extract_sender("cve-assign@...re.org"), UNKNOWN_SENDER);
        assert_eq!(extract_sender("   "), UNKNOWN_SENDER);
        assert_eq!(extract_sender("=?UTF-8?Q?J=C3=B6rg_Meier?= <j@x>"), "Jörg Meier");
        assert_eq!(extract_sender("=?ISO-8859-1?B?SvZyZw==?= <j@x>"), "Jörg");
    }

    #[test]
    fn dates_normalize_to_utc() {
        let expected = Utc.with_ymd_and_hms(2008, 2, 5, 14, 11, 0).unwrap();
        assert_eq!(parse_date("Tue, 5 Feb 2008 09:11:00 -0500"), Some(expected));
        assert_eq!(parse_date("Tue, 5 Feb 2008 14:11:00 +0000 (UTC)"), Some(expected));
        assert_eq!(parse_date("5 Feb 2008 14:11:00 GMT"), Some(expected));
        assert_eq!(parse_date("Tue Feb  5 14:11:00 2008"), Some(expected));
        assert_eq!(parse_date("yesterday"), None);
    }

    #[test]
    fn message_requires_date_and_from() {
        let ok = "Date: Tue, 5 Feb 2008 14:11:00 +0000\nFrom: A B <a@b>\nSubject: hi\n\nbody\n";
        let m = parse_message(ok).unwrap();
        assert_eq!(m.sender, "A B");
        assert_eq!(m.subject, "hi");
        assert_eq!(m.body, "body\n");
        assert!(parse_message("From: A <a@b>\n\nbody").is_err());
        assert!(parse_message("Date: Tue, 5 Feb 2008 14:11:00 +0000\n\nbody").is_err());
    }

    #[test]
    fn folded_headers_are_joined() {
        let text = "Date: Tue, 5 Feb 2008 14:11:00 +0000\nFrom: A B <a@b>\nSubject: CVE request:\n  libfoo overflow\n\nx";
        assert_eq!(parse_message(text).unwrap().subject, "CVE request: libfoo overflow");
    }

    #[test]
    fn multipart_takes_first_plain_part() {
        let text = "Date: Tue, 5 Feb 2008 14:11:00 +0000\nFrom: A <a@b>\n\
Content-Type: multipart/mixed; boundary=\"XX\"\n\npreamble\n--XX\n\
Content-Type: text/html\n\n<p>html</p>\n--XX\n\
Content-Type: text/plain; charset=utf-8\nContent-Transfer-Encoding: quoted-printable\n\n\
use CVE-2008-0001 caf=C3=A9 soft=\nbreak\n--XX--\n";
        let m = parse_message(text).unwrap();
        assert_eq!(m.body, "use CVE-2008-0001 café softbreak");
    }

    #[test]
    fn base64_body_is_decoded() {
        let text = "Date: Tue, 5 Feb 2008 14:11:00 +0000\nFrom: A <a@b>\n\
Content-Transfer-Encoding: base64\n\naGVsbG8gd29y\nbGQK\n";
        assert_eq!(parse_message(text).unwrap().body, "hello world\n");
    }

    #[test]
    fn mbox_split_and_unescape() {
        let mbox = "From a@b Tue Feb  5 14:11:00 2008\nDate: x\n\n>From here\n\nFrom c@d Wed Feb  6 14:11:00 2008\nDate: y\n\nbody\n";
        let parts = split_mbox(mbox);
        assert_eq!(parts.len(), 2);
        assert!(parts[0].contains("\nFrom here"));
        assert!(parts[1].starts_with("Date: y"));
    }

    #[test]
    fn html_page_is_reduced_to_pre_block() {
        let html = "<html><head><title>t</title></head><body><a href=\"/\">nav</a>\n\
<pre style=\"white-space: pre-wrap\">\nDate: Tue, 5 Feb 2008 14:11:00 +0000\n\
From: Steven M. Christey &lt;coley@...re.org&gt;\nSubject: Re: CVE request\n\n\
use <a href=\"x\">CVE-2008-0001</a> &amp; more\n</pre></body></html>";
        let text = html_to_text(html).unwrap();
        let m = parse_message(&text).unwrap();
        assert_eq!(m.sender, "Steven M. Christey");
        assert_eq!(m.body, "use CVE-2008-0001 & more\n");
    }
}
