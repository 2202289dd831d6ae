mod common;

use drivergen::dataset::load_questions;
use drivergen::knowledge::{
    build_knowledge, collect_snippets, dedup_snippets, jaccard, LocalCorpus, Origin, Snippet, SnippetKind,
    SourceClassifier,
};
use proptest::prelude::*;

fn corpus_root() -> std::path::PathBuf {
    common::fixtures().join("snippets")
}

/// Jaccard by plain enumeration of every token in either text.
fn brute_jaccard(a: &str, b: &str) -> f64 {
    let toks = |s: &str| -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut cur = String::new();
        for c in s.chars().chain(std::iter::once(' ')) {
            if c.is_ascii_alphanumeric() || c == '_' {
                cur.push(c);
            } else if !cur.is_empty() {
                if !out.contains(&cur) {
                    out.push(cur.clone());
                }
                cur.clear();
            }
        }
        out
    };
    let (ta, tb) = (toks(a), toks(b));
    let mut universe = ta.clone();
    universe.extend(tb.iter().filter(|t| !ta.contains(t)).cloned());
    if universe.is_empty() {
        return 1.0;
    }
    let both = universe.iter().filter(|t| ta.contains(t) && tb.contains(t)).count();
    both as f64 / universe.len() as f64
}

fn snip(text: String) -> Snippet {
    Snippet { text, source_path: "demo/a.c".into(), origin: Origin::Internal, kind: SnippetKind::Other }
}

/// Two texts sharing `shared` tokens, the first with `extra` more.
fn pair(shared: usize, extra: usize) -> (String, String) {
    let base: Vec<String> = (0..shared).map(|i| format!("t{i}")).collect();
    let mut a = base.clone();
    a.extend((0..extra).map(|i| format!("x{i}")));
    (a.join(" "), base.join(" "))
}

#[test]
fn jaccard_matches_enumeration_on_the_example() {
    assert_eq!(jaccard("a b c", "a b d"), 0.5);
    assert_eq!(brute_jaccard("a b c", "a b d"), 0.5);
}

#[test]
fn threshold_boundary() {
    let (a, b) = pair(47, 3);
    assert_eq!(jaccard(&a, &b), 0.94);
    assert_eq!(dedup_snippets(vec![snip(a), snip(b)], 0.95).len(), 2);
    let (a, b) = pair(19, 1);
    assert_eq!(jaccard(&a, &b), 0.95);
    assert_eq!(dedup_snippets(vec![snip(a), snip(b)], 0.95).len(), 1);
}

#[test]
fn corpus_scan_skips_fuzz_drivers_and_classifies() {
    let classifier = SourceClassifier::new("demo");
    let found = collect_snippets(&corpus_root(), "demo_parse", &classifier);
    let mut got: Vec<(&str, Origin, SnippetKind)> =
        found.iter().map(|s| (s.source_path.as_str(), s.origin, s.kind)).collect();
    got.sort();
    assert_eq!(
        got,
        [
            ("demo/tests/parse_test.c", Origin::Internal, SnippetKind::TestExample),
            ("demo/tools/dump.c", Origin::Internal, SnippetKind::Other),
            ("demo/tools/dump_copy.c", Origin::Internal, SnippetKind::Other),
            ("otherproj/src/app.c", Origin::External, SnippetKind::Other),
        ]
    );
    assert!(found.iter().all(|s| !s.text.contains("LLVMFuzzerTestOneInput") && !s.text.contains("consume")));
}

#[test]
fn knowledge_for_a_question_dedups_snippets() {
    let qs = load_questions(&common::fixtures().join("corpus.json")).unwrap();
    let corpus = LocalCorpus::new(corpus_root());
    let k = build_knowledge(qs.get(1).unwrap(), &common::fixtures(), Some(&corpus), &SourceClassifier::new("demo"))
        .unwrap();
    assert_eq!(k.header_include, "#include \"demo.h\"");
    assert!(k.declaration.starts_with("demo_handle *demo_parse("));
    assert_eq!(k.snippets.len(), 3);
    assert_eq!(dedup_snippets(k.snippets.clone(), 0.95), k.snippets);
}

proptest! {
    #[test]
    fn jaccard_agrees_with_enumeration(a in "[a-e_ ]{0,16}", b in "[a-e_ ]{0,16}") {
        prop_assert_eq!(jaccard(&a, &b), brute_jaccard(&a, &b));
    }

    #[test]
    fn dedup_is_idempotent(texts in proptest::collection::vec("[a-f]( [a-f]){0,6}", 0..10)) {
        let once = dedup_snippets(texts.into_iter().map(snip).collect(), 0.95);
        prop_assert_eq!(dedup_snippets(once.clone(), 0.95), once);
    }
}
