//! Sentence segmentation and whitespace-token helpers.
//!
//! A sentence ends at `.`, `!` or `?` outside brackets when followed by
//! whitespace or end of text, unless the period closes a listed abbreviation.
//! Segments returned by [`sentence_pieces`] partition the input exactly.

/// Abbreviations whose trailing period never ends a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "vs.", "etc.", "approx.", "incl.", "cf.", "dr.", "mr.", "mrs.", "ms.", "fig.",
    "al.",
];

fn ends_with_abbreviation(before: &str) -> bool {
    let lower = before.to_lowercase();
    ABBREVIATIONS.iter().any(|abbr| {
        lower.ends_with(abbr)
            && lower[..lower.len() - abbr.len()]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric())
    })
}

/// Byte offsets just past each sentence terminator.
pub fn terminator_ends(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut depth: i32 = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth = (depth - 1).max(0),
            '.' | '!' | '?' if depth == 0 => {
                let end = i + c.len_utf8();
                let next = chars.peek().map(|&(_, n)| n);
                if next.is_some_and(|n| !n.is_whitespace()) {
                    continue;
                }
                if c == '.' && ends_with_abbreviation(&text[..end]) {
                    continue;
                }
                out.push(end);
            }
            _ => {}
        }
    }
    out
}

/// Splits text into consecutive pieces whose concatenation is the input.
/// Whitespace after a terminator belongs to the preceding piece.
pub fn sentence_pieces(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for end in terminator_ends(text) {
        let rest = &text[end..];
        let ws = rest.len() - rest.trim_start().len();
        let stop = end + ws;
        pieces.push(&text[start..stop]);
        start = stop;
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

/// Non-blank trimmed sentences.
pub fn sentences(text: &str) -> Vec<&str> {
    sentence_pieces(text)
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn count_terminators(text: &str) -> usize {
    terminator_ends(text).len()
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// First `n` whitespace tokens joined by single spaces.
pub fn take_tokens(text: &str, n: usize) -> String {
    text.split_whitespace()
        .take(n)
        .collect::<Vec<_>>()
        .join(" ")
}

fn brackets_balanced(text: &str) -> bool {
    let mut stack = Vec::new();
    for c in text.chars() {
        match c {
            '(' | '[' | '{' => stack.push(c),
            ')' | ']' | '}' => {
                let open = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                if stack.pop() != Some(open) {
                    return false;
                }
            }
            _ => {}
        }
    }
    stack.is_empty()
}

/// Removes characters that would end a sentence (and unbalanced brackets), so
/// a value can be embedded inside a template sentence.
pub fn inline(text: &str) -> String {
    let owned;
    let text = if brackets_balanced(text) {
        text
    } else {
        owned = text.replace(['(', ')', '[', ']', '{', '}'], " ");
        &owned
    };
    let ends = terminator_ends(text);
    let mut out = String::with_capacity(text.len());
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') && ends.contains(&(i + c.len_utf8())) {
            continue;
        }
        out.push(c);
    }
    let out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    // removing "x.." leaves "x." which terminates again
    if count_terminators(&out) > 0 {
        return inline(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_partition_text() {
        let t = "First one. Second (a. b) here! e.g. not split. Third?";
        let pieces = sentence_pieces(t);
        assert_eq!(pieces.concat(), t);
        assert_eq!(
            sentences(t),
            [
                "First one.",
                "Second (a. b) here!",
                "e.g. not split.",
                "Third?"
            ]
        );
    }

    #[test]
    fn decimals_are_not_terminators() {
        assert_eq!(count_terminators("Dose 2.5 mg daily."), 1);
        assert_eq!(count_terminators("no terminator"), 0);
    }

    #[test]
    fn inline_strips_terminators() {
        assert_eq!(inline("PFS at 12 mo. Overall"), "PFS at 12 mo Overall");
        assert_eq!(inline("2.5 mg."), "2.5 mg");
        assert_eq!(inline("dose (mg. Daily"), "dose mg Daily");
        assert_eq!(count_terminators(&inline("x.. y?! z")), 0);
    }
}
