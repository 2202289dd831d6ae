//! Approximate token counting.
//!
//! The rule: every run of identifier characters (`[A-Za-z0-9_]`) costs one
//! token per started group of four characters, every other non-whitespace
//! character costs one token, and whitespace is free. It is a stand-in for a
//! provider tokenizer, close enough for budgets and cost reports.

pub fn count_tokens(text: &str) -> usize {
    let mut total = 0;
    let mut run = 0usize;
    for c in text.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            run += 1;
            continue;
        }
        total += run.div_ceil(4);
        run = 0;
        if !c.is_whitespace() {
            total += 1;
        }
    }
    total + run.div_ceil(4)
}
