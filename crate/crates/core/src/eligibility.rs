//! Rule-based inclusion/exclusion grouping of eligibility narratives.
//!
//! The text is cut at newlines, `*`/`•` bullets and sentence terminators. A
//! segment that is a header (`Exclusion Criteria:`) or begins with a trigger
//! phrase switches the current group; later segments inherit it. Segments seen
//! before any trigger count as inclusion.

use std::sync::OnceLock;

use regex::Regex;

use crate::text::sentences;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Inclusion,
    Exclusion,
}

const TRIGGERS: &[(&str, Group)] = &[
    ("not eligible", Group::Exclusion),
    ("exclusion", Group::Exclusion),
    ("exclude", Group::Exclusion),
    ("inclusion", Group::Inclusion),
    ("include", Group::Inclusion),
];

/// Longest header prefix (in tokens) before a colon that may carry a trigger.
const MAX_HEADER_TOKENS: usize = 4;

fn trigger_in(text: &str) -> Option<Group> {
    let lower = text.to_lowercase();
    // the trigger that appears last wins ("inclusion ... exclusion:" headers are rare, but deterministic)
    TRIGGERS
        .iter()
        .filter_map(|&(t, g)| lower.rfind(t).map(|pos| (pos, g)))
        .max_by_key(|&(pos, _)| pos)
        .map(|(_, g)| g)
}

fn trigger_at_start(text: &str) -> Option<Group> {
    let lower = text.to_lowercase();
    TRIGGERS
        .iter()
        .find(|(t, _)| lower.starts_with(t))
        .map(|&(_, g)| g)
}

fn split_bullets(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth: i32 = 0;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth = (depth - 1).max(0),
            '\n' | '\r' => {
                out.push(&text[start..i]);
                start = i + c.len_utf8();
                depth = 0;
            }
            '*' | '•' if depth == 0 => {
                out.push(&text[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&text[start..]);
    out
}

/// Leading list marker of a line: `-`, `1.`, `(2)`, `a)`.
fn list_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-\u{2013}\u{2022}]|\(?[0-9]{1,3}[.)]|\(?[a-zA-Z][.)])\s+").unwrap()
    })
}

fn clean(segment: &str) -> String {
    let trimmed = segment.trim().trim_end_matches([',', ';']).trim_end();
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sentence segments of a criteria text, each tagged with its group.
pub fn tagged_sentences(criteria: &str) -> Vec<(Group, String)> {
    let mut group = Group::Inclusion;
    let mut out = Vec::new();
    for chunk in split_bullets(criteria) {
        let chunk = match list_marker().find(chunk) {
            Some(m) => &chunk[m.end()..],
            None => chunk,
        };
        for sentence in sentences(chunk) {
            let mut s = clean(sentence);
            if s.is_empty() || !s.chars().any(char::is_alphanumeric) {
                continue;
            }
            if let Some(colon) = s.find(':') {
                let head = &s[..colon];
                if head.split_whitespace().count() <= MAX_HEADER_TOKENS {
                    if let Some(g) = trigger_in(head) {
                        group = g;
                        s = clean(&s[colon + 1..]);
                        if s.is_empty() || !s.chars().any(char::is_alphanumeric) {
                            continue;
                        }
                    }
                }
            }
            if let Some(g) = trigger_at_start(&s) {
                group = g;
            }
            out.push((group, s));
        }
    }
    out
}

/// Inclusion and exclusion sentences, in text order.
pub fn split_eligibility(criteria: &str) -> (Vec<String>, Vec<String>) {
    let mut inclusion = Vec::new();
    let mut exclusion = Vec::new();
    for (g, s) in tagged_sentences(criteria) {
        match g {
            Group::Inclusion => inclusion.push(s),
            Group::Exclusion => exclusion.push(s),
        }
    }
    (inclusion, exclusion)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text() {
        assert_eq!(split_eligibility(""), (vec![], vec![]));
    }

    #[test]
    fn exclusion_header_only() {
        let (inc, exc) =
            split_eligibility("Exclusion Criteria: Pregnancy. Active infection. Prior surgery.");
        assert!(inc.is_empty());
        assert_eq!(exc, ["Pregnancy.", "Active infection.", "Prior surgery."]);
    }

    #[test]
    fn default_is_inclusion() {
        let (inc, exc) = split_eligibility("Adults aged 18 or older. Exclude smokers.");
        assert_eq!(inc, ["Adults aged 18 or older."]);
        assert_eq!(exc, ["Exclude smokers."]);
    }

    #[test]
    fn trigger_mid_sentence_does_not_switch() {
        let (inc, exc) = split_eligibility("Score >1 in the 7 days preceding inclusion. Stable dose. Exclusion Criteria: * Pregnancy");
        assert_eq!(inc.len(), 2);
        assert_eq!(exc, ["Pregnancy"]);
    }
}
