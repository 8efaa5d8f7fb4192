//! Sentence-level atomic fact extraction.
//!
//! A response is first normalized block by block: markdown headings, list
//! markers and emphasis are stripped, wrapped lines are joined, whitespace
//! is collapsed. Each block is then split into sentences by a rule-based
//! splitter that knows about abbreviations, initials and quoted or
//! parenthesized spans. List items and headings always start a new sentence.
//!
//! Joining the emitted fact texts with single spaces yields exactly
//! [`normalize_response`] of the input.

use thiserror::Error;

use crate::types::{AtomicFact, ResponseSample};

/// Facts with fewer whitespace-delimited words than this are excluded from
/// clustering and score zero.
pub const MIN_FACT_WORDS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AtomizeError {
    #[error("response {question_id}#{sample_index} has no sentences after normalization")]
    NoSentences {
        question_id: String,
        sample_index: usize,
    },
}

/// Abbreviations that never end a sentence.
const PREFIX_ABBREVIATIONS: &[&str] = &[
    "Dr.", "Mr.", "Mrs.", "Ms.", "St.", "vs.", "e.g.", "i.e.", "No.", "Fig.", "Prof.", "Mt.",
    "Gen.", "Col.", "Lt.", "Capt.", "Rev.", "Gov.", "Sen.", "Rep.", "cf.", "approx.", "ca.",
    "Jan.", "Feb.", "Aug.", "Sept.", "Oct.", "Nov.", "Dec.", "Nos.", "Figs.", "Vol.", "pp.",
];

/// Abbreviations that may close a sentence when followed by a capitalized
/// word.
const TERMINAL_ABBREVIATIONS: &[&str] = &[
    "etc.", "p.m.", "a.m.", "Inc.", "Ltd.", "Co.", "Corp.", "Jr.", "Sr.", "al.",
];

/// Words that open a new sentence after a dotted acronym such as "U.S.".
const SENTENCE_STARTERS: &[&str] = &[
    "A", "After", "Also", "Although", "An", "As", "At", "Before", "But", "By", "During", "For",
    "From", "He", "Her", "His", "However", "I", "In", "It", "Its", "Many", "Most", "On", "Our",
    "Since", "She", "Some", "That", "The", "Their", "There", "These", "They", "This", "Those",
    "Today", "We", "When", "While", "You",
];

/// Splits one response into ordered facts.
pub fn split_into_facts(response: &ResponseSample) -> Result<Vec<AtomicFact>, AtomizeError> {
    let sentences = split_sentences(&response.text);
    if sentences.is_empty() {
        return Err(AtomizeError::NoSentences {
            question_id: response.question_id.clone(),
            sample_index: response.sample_index,
        });
    }
    Ok(sentences
        .into_iter()
        .enumerate()
        .map(|(position, text)| {
            let excluded = text.split_whitespace().count() < MIN_FACT_WORDS;
            AtomicFact::new(
                &response.question_id,
                response.sample_index,
                position,
                text,
                excluded,
            )
        })
        .collect())
}

/// Normalized sentences of `text`, in order.
pub fn split_sentences(text: &str) -> Vec<String> {
    normalize_blocks(text)
        .iter()
        .flat_map(|b| split_block(b))
        .collect()
}

/// The normalized response that the fact texts jointly cover.
pub fn normalize_response(text: &str) -> String {
    normalize_blocks(text).join(" ")
}

/// Normalizes markdown into sentence-bearing blocks. A block is a paragraph,
/// a list item or a heading, with whitespace collapsed.
pub fn normalize_blocks(text: &str) -> Vec<String> {
    let mut blocks: Vec<String> = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, blocks: &mut Vec<String>| {
        let collapsed = collapse_whitespace(current);
        if collapsed.chars().any(char::is_alphanumeric) {
            blocks.push(collapsed);
        }
        current.clear();
    };

    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut current, &mut blocks);
            continue;
        }
        let (rest, heading) = strip_heading(line);
        let (rest, item) = if heading {
            (rest, false)
        } else {
            strip_list_marker(strip_blockquote(rest))
        };
        let rest = strip_emphasis(rest);
        if heading || item {
            flush(&mut current, &mut blocks);
        }
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(&rest);
        if heading {
            flush(&mut current, &mut blocks);
        }
    }
    flush(&mut current, &mut blocks);
    blocks
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_heading(line: &str) -> (&str, bool) {
    let hashes = line.chars().take_while(|&c| c == '#').count();
    if (1..=6).contains(&hashes) {
        let rest = &line[hashes..];
        if rest.starts_with(char::is_whitespace) {
            return (rest.trim_start(), true);
        }
    }
    (line, false)
}

fn strip_blockquote(line: &str) -> &str {
    match line.strip_prefix('>') {
        Some(rest) => rest.trim_start(),
        None => line,
    }
}

/// Strips one leading `1.`, `2)`, `-`, `*`, `+` or `•` marker.
fn strip_list_marker(line: &str) -> (&str, bool) {
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if (1..=3).contains(&digits) {
        let rest = &line[digits..];
        if let Some(after) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if after.starts_with(char::is_whitespace) {
                return (after.trim_start(), true);
            }
        }
    }
    for marker in ['-', '*', '+', '•'] {
        if let Some(after) = line.strip_prefix(marker) {
            if after.starts_with(char::is_whitespace) {
                return (after.trim_start(), true);
            }
        }
    }
    (line, false)
}

fn strip_emphasis(line: &str) -> String {
    line.replace("**", "").replace("__", "").replace('*', "")
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201d}' | '\u{2019}' | ')' | ']')
}

fn opens_sentence(c: char) -> bool {
    c.is_uppercase()
        || c.is_ascii_digit()
        || matches!(c, '"' | '\'' | '\u{201c}' | '\u{2018}' | '(' | '[')
}

/// Nesting depth after each char, counting only balanced `()`, `[]`,
/// curly double quotes and paired ASCII double quotes.
fn nesting_depth(chars: &[char]) -> Vec<i32> {
    let mut delta = vec![0i32; chars.len()];
    let mut stack: Vec<(char, usize)> = Vec::new();
    let mut open_ascii: Option<usize> = None;
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '(' | '[' | '\u{201c}' => stack.push((c, i)),
            ')' | ']' | '\u{201d}' => {
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '\u{201c}',
                };
                if let Some(pos) = stack.iter().rposition(|&(o, _)| o == want) {
                    let (_, at) = stack[pos];
                    stack.truncate(pos);
                    delta[at] += 1;
                    delta[i] -= 1;
                }
            }
            '"' => match open_ascii.take() {
                Some(at) => {
                    delta[at] += 1;
                    delta[i] -= 1;
                }
                None => open_ascii = Some(i),
            },
            _ => {}
        }
    }
    let mut depth = 0;
    delta
        .into_iter()
        .map(|d| {
            depth += d;
            depth
        })
        .collect()
}

/// The whitespace-delimited token ending at `end` (inclusive), without
/// leading opening punctuation.
fn token_ending_at(chars: &[char], end: usize) -> String {
    let mut start = end;
    while start > 0 && !chars[start - 1].is_whitespace() {
        start -= 1;
    }
    chars[start..=end]
        .iter()
        .skip_while(|c| matches!(c, '(' | '[' | '"' | '\'' | '\u{201c}' | '\u{2018}'))
        .collect()
}

fn next_word(chars: &[char], from: usize) -> String {
    chars[from..]
        .iter()
        .skip_while(|c| c.is_whitespace())
        .take_while(|c| c.is_alphanumeric())
        .collect()
}

fn matches_abbreviation(token: &str, list: &[&str]) -> bool {
    list.iter().any(|a| {
        *a == token || (a.chars().next().is_some_and(char::is_lowercase) && token.to_lowercase() == *a)
    })
}

/// "U.S.", "D.C.", "J.R.R.": single letters each followed by a period.
fn is_dotted_acronym(token: &str) -> bool {
    let parts: Vec<&str> = token.split('.').collect();
    parts.len() >= 3
        && parts.last() == Some(&"")
        && parts[..parts.len() - 1]
            .iter()
            .all(|p| p.chars().count() == 1 && p.chars().all(char::is_alphabetic))
}

fn is_initial(token: &str) -> bool {
    let mut it = token.chars();
    matches!((it.next(), it.next(), it.next()), (Some(c), Some('.'), None) if c.is_uppercase())
}

/// Whether a single period closing `token` ends the sentence, given the next
/// word.
fn period_ends_sentence(token: &str, next: &str) -> bool {
    if matches_abbreviation(token, PREFIX_ABBREVIATIONS) || is_initial(token) {
        return false;
    }
    let next_capitalized = next.chars().next().is_some_and(char::is_uppercase);
    if matches_abbreviation(token, TERMINAL_ABBREVIATIONS) {
        return next_capitalized;
    }
    if is_dotted_acronym(token) {
        return SENTENCE_STARTERS.contains(&next);
    }
    true
}

/// Splits one normalized block into sentences.
fn split_block(block: &str) -> Vec<String> {
    let chars: Vec<char> = block.chars().collect();
    let depth = nesting_depth(&chars);
    let mut sentences: Vec<String> = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if !is_terminator(chars[i]) {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < chars.len() && is_terminator(chars[end]) {
            end += 1;
        }
        let run = end - i;
        while end < chars.len() && is_closer(chars[end]) {
            end += 1;
        }
        // `end` is one past the candidate sentence's last char.
        let boundary = end < chars.len()
            && chars[end].is_whitespace()
            && depth[end - 1] == 0
            && chars[end..]
                .iter()
                .find(|c| !c.is_whitespace())
                .is_some_and(|&c| opens_sentence(c))
            && (run > 1
                || chars[i] != '.'
                || period_ends_sentence(&token_ending_at(&chars, i), &next_word(&chars, end)));
        if boundary {
            push_sentence(&mut sentences, chars[start..end].iter().collect());
            start = end;
        }
        i = end;
    }
    if start < chars.len() {
        push_sentence(&mut sentences, chars[start..].iter().collect());
    }
    fold_leading_fragment(&mut sentences);
    sentences
}

/// Appends a trimmed sentence, folding punctuation-only fragments into the
/// previous sentence.
fn push_sentence(sentences: &mut Vec<String>, raw: String) {
    let s = raw.trim();
    if s.is_empty() {
        return;
    }
    if !s.chars().any(char::is_alphanumeric) {
        if let Some(last) = sentences.last_mut() {
            last.push(' ');
            last.push_str(s);
            return;
        }
    }
    sentences.push(s.to_string());
}

/// A block that opens with terminators ("?! Right.") leaves a leading
/// punctuation-only fragment; merge it into the next sentence.
fn fold_leading_fragment(sentences: &mut Vec<String>) {
    if sentences.len() > 1 && !sentences[0].chars().any(char::is_alphanumeric) {
        let first = sentences.remove(0);
        sentences[0] = format!("{first} {}", sentences[0]);
    }
}
