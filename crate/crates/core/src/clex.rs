//! Lightweight C lexing and brace-balancing scans.
//!
//! This is not a C parser. It understands just enough of the surface syntax
//! (comments, string and character literals, preprocessor lines, bracket
//! nesting) to find function definitions, call sites and literals reliably in
//! driver-sized sources and usage snippets.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Ident,
    Number,
    Str,
    Char,
    Punct,
    /// A whole preprocessor line, continuations included.
    Directive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    pub offset: usize,
    /// 1-based line of the first character.
    pub line: usize,
}

impl Token<'_> {
    pub fn is_punct(&self, c: char) -> bool {
        self.kind == TokenKind::Punct && self.text.len() == c.len_utf8() && self.text.starts_with(c)
    }

    pub fn is_ident(&self, name: &str) -> bool {
        self.kind == TokenKind::Ident && self.text == name
    }
}

#[derive(Debug, Clone, Default)]
pub struct Lexed<'a> {
    pub tokens: Vec<Token<'a>>,
    /// Input ended inside a comment, string or character literal.
    pub unterminated: bool,
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_ident_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

pub fn lex(src: &str) -> Lexed<'_> {
    let bytes = src.as_bytes();
    let mut out = Lexed::default();
    let mut i = 0;
    let mut line = 1;
    // true while only whitespace has been seen since the last newline
    let mut line_start = true;

    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'\n' => {
                line += 1;
                line_start = true;
                i += 1;
            }
            b' ' | b'\t' | b'\r' | 0x0b | 0x0c => i += 1,
            b'/' if bytes.get(i + 1) == Some(&b'/') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                loop {
                    if i + 1 >= bytes.len() {
                        out.unterminated = true;
                        i = bytes.len();
                        break;
                    }
                    if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                        i += 2;
                        break;
                    }
                    if bytes[i] == b'\n' {
                        line += 1;
                    }
                    i += 1;
                }
            }
            b'#' if line_start => {
                let start = i;
                let start_line = line;
                while i < bytes.len() {
                    if bytes[i] == b'\\' && bytes.get(i + 1) == Some(&b'\n') {
                        line += 1;
                        i += 2;
                        continue;
                    }
                    if bytes[i] == b'\n' {
                        break;
                    }
                    i += 1;
                }
                out.tokens.push(Token {
                    kind: TokenKind::Directive,
                    text: &src[start..i],
                    offset: start,
                    line: start_line,
                });
            }
            b'"' | b'\'' => {
                let quote = b;
                let start = i;
                let start_line = line;
                i += 1;
                let mut closed = false;
                while i < bytes.len() {
                    match bytes[i] {
                        b'\\' => i += 2,
                        b'\n' => break,
                        c if c == quote => {
                            i += 1;
                            closed = true;
                            break;
                        }
                        _ => i += 1,
                    }
                }
                i = i.min(bytes.len());
                if !closed {
                    out.unterminated = true;
                }
                out.tokens.push(Token {
                    kind: if quote == b'"' { TokenKind::Str } else { TokenKind::Char },
                    text: &src[start..i],
                    offset: start,
                    line: start_line,
                });
                line_start = false;
            }
            b if is_ident_start(b) => {
                let start = i;
                while i < bytes.len() && is_ident_char(bytes[i]) {
                    i += 1;
                }
                // string literal prefixes such as L"..." or u8"..."
                if i < bytes.len() && (bytes[i] == b'"' || bytes[i] == b'\'') {
                    let prefix = &src[start..i];
                    if matches!(prefix, "L" | "u" | "U" | "u8") {
                        line_start = false;
                        continue_literal(src, &mut i, &mut out, start, line);
                        continue;
                    }
                }
                out.tokens.push(Token { kind: TokenKind::Ident, text: &src[start..i], offset: start, line });
                line_start = false;
            }
            b if b.is_ascii_digit() || (b == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) => {
                let start = i;
                let hex = src[start..].starts_with("0x") || src[start..].starts_with("0X");
                while i < bytes.len() {
                    let c = bytes[i];
                    let exponent_sign = (c == b'+' || c == b'-')
                        && if hex {
                            matches!(bytes[i - 1], b'p' | b'P')
                        } else {
                            matches!(bytes[i - 1], b'e' | b'E')
                        };
                    if is_ident_char(c) || c == b'.' || exponent_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.tokens.push(Token { kind: TokenKind::Number, text: &src[start..i], offset: start, line });
                line_start = false;
            }
            _ => {
                let ch_len = src[i..].chars().next().map_or(1, char::len_utf8);
                out.tokens.push(Token { kind: TokenKind::Punct, text: &src[i..i + ch_len], offset: i, line });
                i += ch_len;
                line_start = false;
            }
        }
    }
    out
}

fn continue_literal<'a>(src: &'a str, i: &mut usize, out: &mut Lexed<'a>, start: usize, line: usize) {
    let bytes = src.as_bytes();
    let quote = bytes[*i];
    *i += 1;
    let mut closed = false;
    while *i < bytes.len() {
        match bytes[*i] {
            b'\\' => *i += 2,
            b'\n' => break,
            c if c == quote => {
                *i += 1;
                closed = true;
                break;
            }
            _ => *i += 1,
        }
    }
    *i = (*i).min(bytes.len());
    if !closed {
        out.unterminated = true;
    }
    out.tokens.push(Token {
        kind: if quote == b'"' { TokenKind::Str } else { TokenKind::Char },
        text: &src[start..*i],
        offset: start,
        line,
    });
}

/// Replaces comments with spaces, keeping newlines and all other bytes in place.
pub fn strip_comments(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut last = 0;
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'"' | b'\'' => {
                let quote = bytes[i];
                i += 1;
                while i < bytes.len() && bytes[i] != quote && bytes[i] != b'\n' {
                    if bytes[i] == b'\\' {
                        i += 1;
                    }
                    i += 1;
                }
                i += 1;
            }
            b'/' if bytes.get(i + 1) == Some(&b'/') => {
                out.push_str(&src[last..i]);
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                out.push(' ');
                last = i;
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                out.push_str(&src[last..i]);
                let end = src[i + 2..].find("*/").map_or(src.len(), |p| i + 2 + p + 2);
                for c in src[i..end].chars() {
                    out.push(if c == '\n' { '\n' } else { ' ' });
                }
                i = end;
                last = i;
            }
            _ => i += 1,
        }
    }
    if last < src.len() {
        out.push_str(&src[last.min(src.len())..]);
    }
    out
}

/// Brackets of all three kinds nest properly and no literal or comment is left open.
pub fn is_balanced(src: &str) -> bool {
    let lexed = lex(src);
    if lexed.unterminated {
        return false;
    }
    let mut stack = Vec::new();
    for tok in &lexed.tokens {
        if tok.kind != TokenKind::Punct {
            continue;
        }
        match tok.text {
            "(" | "[" | "{" => stack.push(tok.text),
            ")" | "]" | "}" => {
                let want = match tok.text {
                    ")" => "(",
                    "]" => "[",
                    _ => "{",
                };
                if stack.pop() != Some(want) {
                    return false;
                }
            }
            _ => {}
        }
    }
    stack.is_empty()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionDef {
    pub name: String,
    /// Byte range from the first token of the signature to the closing brace.
    pub span: Range<usize>,
    pub body: Range<usize>,
    pub start_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScanError {
    #[error("unbalanced braces near line {0}")]
    Unbalanced(usize),
    #[error("source ends inside a comment or literal")]
    Unterminated,
}

/// Finds top-level function definitions.
pub fn function_definitions(src: &str) -> Result<Vec<FunctionDef>, ScanError> {
    let lexed = lex(src);
    if lexed.unterminated {
        return Err(ScanError::Unterminated);
    }
    let toks = &lexed.tokens;
    let mut defs = Vec::new();
    let mut depth = 0usize;
    // index of the first token of the current top-level declaration
    let mut decl_start = 0usize;
    let mut open_at: Option<(usize, Option<(String, usize)>)> = None;

    for (idx, tok) in toks.iter().enumerate() {
        if tok.kind == TokenKind::Directive {
            if depth == 0 {
                decl_start = idx + 1;
            }
            continue;
        }
        if tok.kind != TokenKind::Punct {
            continue;
        }
        match tok.text {
            "{" => {
                if depth == 0 {
                    let candidate = function_name_before(toks, decl_start, idx);
                    open_at = Some((idx, candidate.map(|name| (name, decl_start))));
                }
                depth += 1;
            }
            "}" => {
                if depth == 0 {
                    return Err(ScanError::Unbalanced(tok.line));
                }
                depth -= 1;
                if depth == 0 {
                    if let Some((open_idx, Some((name, start_idx)))) = open_at.take() {
                        let first = &toks[start_idx];
                        defs.push(FunctionDef {
                            name,
                            span: first.offset..tok.offset + 1,
                            body: toks[open_idx].offset..tok.offset + 1,
                            start_line: first.line,
                        });
                        decl_start = idx + 1;
                    }
                }
            }
            ";" if depth == 0 => decl_start = idx + 1,
            _ => {}
        }
    }
    if depth != 0 {
        let line = toks.last().map_or(1, |t| t.line);
        return Err(ScanError::Unbalanced(line));
    }
    Ok(defs)
}

fn function_name_before(toks: &[Token<'_>], start: usize, brace: usize) -> Option<String> {
    if brace == 0 || start >= brace {
        return None;
    }
    let head = &toks[start..brace];
    if head.iter().any(|t| t.is_punct('=')) {
        return None;
    }
    if let Some(first) = head.first() {
        if first.kind == TokenKind::Ident && matches!(first.text, "struct" | "union" | "enum" | "typedef")
            && !head.iter().any(|t| t.is_punct('('))
        {
            return None;
        }
    }
    // the signature's parameter list is the last top-level parenthesised group;
    // trailing attributes or K&R declarations are tolerated
    let mut close = None;
    for (i, t) in head.iter().enumerate().rev() {
        if t.is_punct(')') {
            close = Some(i);
            break;
        }
    }
    let close = close?;
    let mut level = 0i32;
    let mut open = None;
    for i in (0..=close).rev() {
        if head[i].is_punct(')') {
            level += 1;
        } else if head[i].is_punct('(') {
            level -= 1;
            if level == 0 {
                open = Some(i);
                break;
            }
        }
    }
    let open = open?;
    // skip over `__attribute__((...))` groups placed before the parameter list
    let mut name_idx = open.checked_sub(1)?;
    while head[name_idx].is_punct(')') {
        let mut level = 0i32;
        let mut j = name_idx;
        loop {
            if head[j].is_punct(')') {
                level += 1;
            } else if head[j].is_punct('(') {
                level -= 1;
                if level == 0 {
                    break;
                }
            }
            j = j.checked_sub(1)?;
        }
        name_idx = j.checked_sub(1)?;
    }
    let name = head[name_idx];
    if name.kind != TokenKind::Ident || is_keyword(name.text) {
        return None;
    }
    Some(name.text.to_string())
}

/// Identifiers immediately followed by `(` that are not keywords, in source order.
pub fn call_sites<'t, 'a>(tokens: &'t [Token<'a>]) -> impl Iterator<Item = &'t Token<'a>> + 't {
    tokens.windows(2).filter_map(|w| {
        (w[0].kind == TokenKind::Ident && w[1].is_punct('(') && !is_keyword(w[0].text)).then_some(&w[0])
    })
}

/// Does `src` contain a call to `name` outside comments and literals?
pub fn calls(src: &str, name: &str) -> bool {
    let lexed = lex(src);
    let found = call_sites(&lexed.tokens).any(|t| t.text == name);
    found
}

/// Does `src` mention the identifier `name` outside comments and literals?
pub fn mentions(src: &str, name: &str) -> bool {
    lex(src).tokens.iter().any(|t| t.is_ident(name))
}

pub fn is_keyword(word: &str) -> bool {
    matches!(
        word,
        "auto"
            | "break"
            | "case"
            | "char"
            | "const"
            | "continue"
            | "default"
            | "do"
            | "double"
            | "else"
            | "enum"
            | "extern"
            | "float"
            | "for"
            | "goto"
            | "if"
            | "inline"
            | "int"
            | "long"
            | "register"
            | "restrict"
            | "return"
            | "short"
            | "signed"
            | "sizeof"
            | "static"
            | "struct"
            | "switch"
            | "typedef"
            | "union"
            | "unsigned"
            | "void"
            | "volatile"
            | "while"
            | "_Bool"
            | "_Alignof"
            | "_Static_assert"
            | "__attribute__"
            | "__typeof__"
            | "typeof"
    )
}

/// Line `n` (1-based) of `src`, without its terminator.
pub fn line_text(src: &str, n: usize) -> Option<&str> {
    if n == 0 {
        return None;
    }
    src.lines().nth(n - 1)
}

/// Collapses every run of whitespace to a single space and trims the ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
