//! Complexity score of a minimal driver.
//!
//! The score is the sum of four counts taken over the driver source:
//!
//! 1. unique project APIs called;
//! 2. unique common API usage patterns (see [`COMMON_PATTERNS`]);
//! 3. unique non-zero literals and project symbols used as values, outside
//!    common-usage lines;
//! 4. condition and loop constructs outside common-usage lines, where an
//!    `if`/`else if`/`else` chain or a `switch` counts once.
//!
//! `0`, `NULL` and `""` are naive values and never counted. The project
//! symbol set holds API names plus any project globals or macros; types
//! should not be listed in it.

use std::collections::{BTreeSet, HashSet};

use crate::clex::{self, Token, TokenKind};
use crate::dataset::DatasetError;

/// A standard-library idiom counted once regardless of how many calls it takes.
#[derive(Debug, Clone, Copy)]
pub struct CommonPattern {
    pub name: &'static str,
    /// The pattern is present when every group has at least one call.
    pub requires: &'static [&'static [&'static str]],
    /// Calls whose lines belong to the pattern's usage code.
    pub members: &'static [&'static str],
}

pub const COMMON_PATTERNS: &[CommonPattern] = &[
    CommonPattern {
        name: "copy-into-allocated-buffer",
        requires: &[&["malloc", "calloc", "realloc"], &["memcpy", "memmove"]],
        members: &["malloc", "calloc", "realloc", "memcpy", "memmove", "memset", "free"],
    },
    CommonPattern {
        name: "temp-file-write",
        requires: &[&["mkstemp", "mkstemps", "tmpfile", "tmpnam"], &["write", "fwrite", "fputs", "fprintf", "fputc"]],
        members: &[
            "mkstemp", "mkstemps", "tmpfile", "tmpnam", "write", "fwrite", "fputs", "fprintf", "fputc", "fflush",
            "close", "fclose", "unlink", "remove", "fdopen", "snprintf", "sprintf",
        ],
    },
    CommonPattern {
        name: "string-duplicate",
        requires: &[&["strdup", "strndup"]],
        members: &["strdup", "strndup", "free"],
    },
    CommonPattern {
        name: "file-open-read",
        requires: &[&["fopen", "open"], &["fread", "read", "fgets", "getline"]],
        members: &["fopen", "open", "fread", "read", "fgets", "getline", "fclose", "close"],
    },
];

pub fn complexity_score(source: &str, project_symbols: &HashSet<String>) -> Result<u32, DatasetError> {
    clex::function_definitions(source).map_err(|e| DatasetError::Parse(e.to_string()))?;
    let lexed = clex::lex(source);
    let toks: Vec<Token<'_>> = lexed.tokens.into_iter().filter(|t| t.kind != TokenKind::Directive).collect();

    let called: Vec<(&str, usize)> = clex::call_sites(&toks).map(|t| (t.text, t.line)).collect();
    let called_names: HashSet<&str> = called.iter().map(|(n, _)| *n).collect();

    let apis: BTreeSet<&str> = called_names.iter().copied().filter(|n| project_symbols.contains(*n)).collect();

    let present: Vec<&CommonPattern> = COMMON_PATTERNS
        .iter()
        .filter(|p| p.requires.iter().all(|group| group.iter().any(|f| called_names.contains(f))))
        .collect();
    let usage_lines: HashSet<usize> = called
        .iter()
        .filter(|(name, _)| present.iter().any(|p| p.members.contains(name)))
        .map(|(_, line)| *line)
        .collect();

    let mut identifiers: BTreeSet<&str> = BTreeSet::new();
    for (i, t) in toks.iter().enumerate() {
        if usage_lines.contains(&t.line) {
            continue;
        }
        let counted = match t.kind {
            TokenKind::Number => !is_zero_number(t.text),
            TokenKind::Str => t.text.trim_start_matches(['L', 'u', 'U', '8']) != "\"\"",
            TokenKind::Char => !is_zero_char(t.text),
            TokenKind::Ident => {
                project_symbols.contains(t.text) && !toks.get(i + 1).is_some_and(|n| n.is_punct('('))
            }
            _ => false,
        };
        if counted {
            identifiers.insert(t.text);
        }
    }

    let branches = count_control_flow(&toks, &usage_lines);

    Ok((apis.len() + present.len() + identifiers.len()) as u32 + branches)
}

fn count_control_flow(toks: &[Token<'_>], usage_lines: &HashSet<usize>) -> u32 {
    let mut count = 0;
    // one entry per open brace: was it opened directly after `do`?
    let mut braces: Vec<bool> = Vec::new();
    let mut skip_next_while = false;
    // brace/paren depth at which an unbraced `do` body ends with `;`
    let mut unbraced_do: Vec<(usize, usize)> = Vec::new();
    let mut parens = 0usize;

    for (i, t) in toks.iter().enumerate() {
        let outside_usage = !usage_lines.contains(&t.line);
        match (t.kind, t.text) {
            (TokenKind::Ident, "if") => {
                let chained = i > 0 && toks[i - 1].is_ident("else");
                if !chained && outside_usage {
                    count += 1;
                }
            }
            (TokenKind::Ident, "switch" | "for") if outside_usage => count += 1,
            (TokenKind::Ident, "do") => {
                if outside_usage {
                    count += 1;
                }
                if !toks.get(i + 1).is_some_and(|n| n.is_punct('{')) {
                    unbraced_do.push((braces.len(), parens));
                }
            }
            (TokenKind::Ident, "while") => {
                if skip_next_while {
                    skip_next_while = false;
                } else if outside_usage {
                    count += 1;
                }
            }
            (TokenKind::Punct, "?") if outside_usage => count += 1,
            (TokenKind::Punct, "(") => parens += 1,
            (TokenKind::Punct, ")") => parens = parens.saturating_sub(1),
            (TokenKind::Punct, "{") => {
                let after_do = i > 0 && toks[i - 1].is_ident("do");
                braces.push(after_do);
            }
            (TokenKind::Punct, "}") => {
                if braces.pop() == Some(true) {
                    skip_next_while = toks.get(i + 1).is_some_and(|n| n.is_ident("while"));
                }
            }
            (TokenKind::Punct, ";") => {
                if unbraced_do.last() == Some(&(braces.len(), parens)) {
                    unbraced_do.pop();
                    skip_next_while = toks.get(i + 1).is_some_and(|n| n.is_ident("while"));
                }
            }
            _ => {}
        }
    }
    count
}

fn is_zero_number(text: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    let (digits, hex) = match lower.strip_prefix("0x") {
        Some(rest) => (rest.to_string(), true),
        None => (lower.strip_prefix("0b").unwrap_or(&lower).to_string(), false),
    };
    let mantissa = if hex {
        digits.split('p').next().unwrap_or("")
    } else {
        digits.split('e').next().unwrap_or("")
    };
    let significant: String = mantissa
        .chars()
        .filter(|c| c.is_ascii_hexdigit() || c.is_ascii_digit())
        .filter(|c| hex || c.is_ascii_digit())
        .collect();
    significant.chars().all(|c| c == '0')
}

fn is_zero_char(text: &str) -> bool {
    let inner = text.trim_start_matches(['L', 'u', 'U', '8']).trim_matches('\'');
    match inner.strip_prefix('\\') {
        Some(esc) => {
            let digits = esc.strip_prefix('x').unwrap_or(esc);
            !digits.is_empty() && digits.chars().all(|c| c == '0')
        }
        None => false,
    }
}
