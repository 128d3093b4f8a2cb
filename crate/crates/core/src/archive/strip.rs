use std::sync::OnceLock;

use regex::Regex;

fn forward_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:-{2,}\s*(?:begin\s+)?(?:forwarded message|original message)\s*-{2,}|begin forwarded message:)\s*$",
        )
        .unwrap()
    })
}

fn is_quotation(line: &str) -> bool {
    line.trim_start().starts_with('>')
}

/// Removes quoted lines and forwarded material from a message body.
///
/// A quoted line is one whose first non-blank character is `>`. Everything
/// from the first unquoted forward delimiter ("Forwarded message",
/// "Original Message") onward is dropped. Line terminators of kept lines are
/// preserved, so the function is idempotent.
pub fn strip_message(raw_body: &str) -> String {
    let mut out = String::with_capacity(raw_body.len());
    for line in raw_body.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if is_quotation(content) {
            continue;
        }
        if forward_marker().is_match(content) {
            break;
        }
        out.push_str(line);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quotes_are_removed() {
        assert_eq!(strip_message("fix is out\n> old text\n"), "fix is out\n");
        assert_eq!(strip_message("a\n  >> nested\nb"), "a\nb");
    }

    #[test]
    fn empty_input() {
        assert_eq!(strip_message(""), "");
    }

    #[test]
    fn forward_markers_truncate() {
        let body = "see below\n\n---------- Forwarded message ----------\nFrom: x\nsecret\n";
        assert_eq!(strip_message(body), "see below\n\n");
        let body = "hi\n-----Original Message-----\nold\n";
        assert_eq!(strip_message(body), "hi\n");
        let body = "hi\nBegin forwarded message:\n\nold\n";
        assert_eq!(strip_message(body), "hi\n");
    }

    #[test]
    fn marker_words_inside_prose_do_not_truncate() {
        let body = "the forwarded message had no CVE\nmore\n";
        assert_eq!(strip_message(body), body);
    }

    proptest! {
        #[test]
        fn idempotent(body in "(([ >a-z-]|Forwarded message|-----|\r|\n){0,12}\n?){0,12}") {
            let once = strip_message(&body);
            prop_assert_eq!(strip_message(&once), once.clone());
            for line in once.lines() {
                prop_assert!(!is_quotation(line));
            }
        }
    }
}
