//! Per-API knowledge: declaration, documentation and mined usage snippets.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::clex::{self, TokenKind};
use crate::dataset::Question;
use crate::tokens::count_tokens;

pub const DEFAULT_ENTRYPOINTS: &[&str] = &["LLVMFuzzerTestOneInput"];
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiKnowledge {
    pub api_name: String,
    pub header_include: String,
    pub declaration: String,
    pub documentation: Option<String>,
    pub snippets: Vec<Snippet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SnippetKind {
    TestExample,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub text: String,
    pub source_path: String,
    pub origin: Origin,
    pub kind: SnippetKind,
}

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("no prototype for `{0}` in header")]
    NotFound(String),
    #[error("conflicting prototypes for `{api}`: {candidates:?}")]
    Ambiguous { api: String, candidates: Vec<String> },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which snippet sources count as the target project itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceClassifier {
    pub project: String,
    /// Repository names treated as variants (forks, mirrors) of the project.
    #[serde(default)]
    pub variants: Vec<String>,
}

impl SourceClassifier {
    pub fn new(project: impl Into<String>) -> Self {
        Self { project: project.into(), variants: Vec::new() }
    }

    pub fn with_variants(mut self, variants: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.variants = variants.into_iter().map(Into::into).collect();
        self
    }

    pub fn classify(&self, source_path: &str) -> (Origin, SnippetKind) {
        classify_source(source_path, &self.project, &self.variants)
    }
}

struct Prototype {
    start: usize,
    end: usize,
}

fn prototypes(header: &str, api_name: &str) -> Vec<Prototype> {
    let toks = clex::lex(header).tokens;
    let mut found = Vec::new();
    let mut depth = 0usize;
    // token index where the current top-level declaration begins
    let mut decl_start = 0usize;
    for (i, t) in toks.iter().enumerate() {
        match t.kind {
            TokenKind::Directive => {
                decl_start = i + 1;
                continue;
            }
            TokenKind::Punct if t.text == "{" => {
                // `extern "C" {` opens a linkage block, not a scope
                let linkage = i >= 2 && toks[i - 2].is_ident("extern") && toks[i - 1].kind == TokenKind::Str;
                if linkage {
                    decl_start = i + 1;
                } else {
                    depth += 1;
                }
                continue;
            }
            TokenKind::Punct if t.text == "}" => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    decl_start = i + 1;
                }
                continue;
            }
            TokenKind::Punct if t.text == ";" && depth == 0 => {
                decl_start = i + 1;
                continue;
            }
            _ => {}
        }
        if depth != 0 || !t.is_ident(api_name) || !toks.get(i + 1).is_some_and(|n| n.is_punct('(')) {
            continue;
        }
        // a call inside an initializer or macro-like expression is not a prototype
        if toks[decl_start..i].iter().any(|p| p.is_punct('=') || p.is_punct('(')) {
            continue;
        }
        let mut nesting = 0usize;
        let mut close = None;
        for (j, p) in toks.iter().enumerate().skip(i + 1) {
            if p.is_punct('(') {
                nesting += 1;
            } else if p.is_punct(')') {
                nesting -= 1;
                if nesting == 0 {
                    close = Some(j);
                    break;
                }
            }
        }
        let Some(close) = close else { continue };
        if decl_start < toks.len() {
            found.push(Prototype { start: toks[decl_start].offset, end: toks[close].offset + 1 });
        }
    }
    found
}

fn normalize_prototype(text: &str) -> String {
    let flat = clex::normalize_ws(&clex::strip_comments(text));
    flat.replace("( ", "(").replace(" )", ")").replace(" ,", ",")
}

/// The prototype of `api_name` in `header_source`, parameter names kept,
/// comments stripped and whitespace collapsed, without the trailing `;`.
pub fn extract_declaration(header_source: &str, api_name: &str) -> Result<String, KnowledgeError> {
    let mut candidates: Vec<String> = Vec::new();
    for p in prototypes(header_source, api_name) {
        let proto = normalize_prototype(&header_source[p.start..p.end]);
        if !candidates.contains(&proto) {
            candidates.push(proto);
        }
    }
    match candidates.len() {
        0 => Err(KnowledgeError::NotFound(api_name.to_string())),
        1 => Ok(candidates.remove(0)),
        _ => Err(KnowledgeError::Ambiguous { api: api_name.to_string(), candidates }),
    }
}

/// Names of all functions prototyped in `header_source`, sorted.
pub fn declared_functions(header_source: &str) -> BTreeSet<String> {
    let lexed = clex::lex(header_source);
    let toks = &lexed.tokens;
    let mut names = BTreeSet::new();
    for (i, t) in toks.iter().enumerate() {
        if t.kind != TokenKind::Ident || clex::is_keyword(t.text) || names.contains(t.text) {
            continue;
        }
        if toks.get(i + 1).is_some_and(|n| n.is_punct('(')) && !prototypes(header_source, t.text).is_empty() {
            names.insert(t.text.to_string());
        }
    }
    names
}

/// The comment block directly above the first prototype of `api_name`, if any.
pub fn extract_documentation(header_source: &str, api_name: &str) -> Option<String> {
    let proto = prototypes(header_source, api_name).into_iter().next()?;
    let before = header_source[..proto.start].trim_end();
    let raw = if let Some(stripped) = before.strip_suffix("*/") {
        let open = stripped.rfind("/*")?;
        stripped[open + 2..].to_string()
    } else {
        let mut lines: Vec<&str> = before
            .lines()
            .rev()
            .map(str::trim)
            .take_while(|l| l.starts_with("//"))
            .map(|l| l.trim_start_matches('/'))
            .collect();
        if lines.is_empty() {
            return None;
        }
        lines.reverse();
        lines.join("\n")
    };
    let cleaned: Vec<&str> = raw
        .lines()
        .map(|l| {
            let l = l.trim();
            let l = l.strip_prefix('*').unwrap_or(l);
            l.trim()
        })
        .collect();
    let text = cleaned.join("\n").trim_matches(['\n', '*', ' ']).to_string();
    (!text.is_empty()).then_some(text)
}

/// Token set used by [`jaccard`]: maximal runs of `[A-Za-z0-9_]`, case-sensitive.
pub fn token_set(text: &str) -> BTreeSet<&str> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).filter(|s| !s.is_empty()).collect()
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let (sa, sb) = (token_set(a), token_set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Greedy in-order near-duplicate removal.
pub fn dedup_snippets(snips: Vec<Snippet>, threshold: f64) -> Vec<Snippet> {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0, 1]");
    let mut kept: Vec<Snippet> = Vec::new();
    for s in snips {
        if !kept.iter().any(|k| jaccard(&k.text, &s.text) >= threshold) {
            kept.push(s);
        }
    }
    kept
}

/// Drops whole lines from the end until the text fits `token_budget`.
pub fn truncate_snippet(snippet: &str, token_budget: usize) -> String {
    let lines: Vec<&str> = snippet.split_inclusive('\n').collect();
    for keep in (1..=lines.len()).rev() {
        let candidate: String = lines[..keep].concat();
        if count_tokens(&candidate) <= token_budget {
            return candidate;
        }
    }
    String::new()
}

pub fn classify_source(source_path: &str, project: &str, variants: &[String]) -> (Origin, SnippetKind) {
    let segments: Vec<&str> = source_path.split(['/', '\\']).filter(|s| !s.is_empty() && *s != ".").collect();
    let repo = segments.first().copied().unwrap_or("");
    let internal = repo.eq_ignore_ascii_case(project) || variants.iter().any(|v| v.eq_ignore_ascii_case(repo));
    let test_like = segments.iter().any(|s| {
        let lower = s.to_ascii_lowercase();
        lower.contains("test") || lower.contains("example")
    });
    (
        if internal { Origin::Internal } else { Origin::External },
        if test_like { SnippetKind::TestExample } else { SnippetKind::Other },
    )
}

/// A place to search for usage snippets of an API.
pub trait SnippetSource: Send + Sync {
    fn search(&self, api_name: &str, classifier: &SourceClassifier) -> Vec<Snippet>;
}

/// Scans `.c` files under a directory tree. The first path segment below
/// the root is taken as the repository name.
#[derive(Debug, Clone)]
pub struct LocalCorpus {
    pub root: PathBuf,
    pub entrypoints: Vec<String>,
}

impl LocalCorpus {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), entrypoints: DEFAULT_ENTRYPOINTS.iter().map(|s| s.to_string()).collect() }
    }
}

impl SnippetSource for LocalCorpus {
    fn search(&self, api_name: &str, classifier: &SourceClassifier) -> Vec<Snippet> {
        let mut files: Vec<PathBuf> = WalkDir::new(&self.root)
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "c"))
            .map(|e| e.into_path())
            .collect();
        files.sort();

        let per_file: Vec<Vec<Snippet>> = files
            .par_iter()
            .map(|path| {
                let Ok(src) = fs::read_to_string(path) else { return Vec::new() };
                if self.entrypoints.iter().any(|e| clex::mentions(&src, e)) || !clex::calls(&src, api_name) {
                    return Vec::new();
                }
                let rel = relative_display(&self.root, path);
                let (origin, kind) = classifier.classify(&rel);
                let Ok(defs) = clex::function_definitions(&src) else { return Vec::new() };
                defs.into_iter()
                    .filter(|d| clex::calls(&src[d.body.clone()], api_name))
                    .map(|d| Snippet { text: src[d.span].to_string(), source_path: rel.clone(), origin, kind })
                    .collect()
            })
            .collect();
        per_file.into_iter().flatten().collect()
    }
}

fn relative_display(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// Every function under `corpus_root` that directly calls `api_name`,
/// skipping fuzz driver files. Not deduplicated.
pub fn collect_snippets(corpus_root: &Path, api_name: &str, classifier: &SourceClassifier) -> Vec<Snippet> {
    LocalCorpus::new(corpus_root).search(api_name, classifier)
}

/// Assembles knowledge for a question from its project workspace and an
/// optional snippet source.
pub fn build_knowledge(
    question: &Question,
    workspaces_root: &Path,
    snippets: Option<&dyn SnippetSource>,
    classifier: &SourceClassifier,
) -> Result<ApiKnowledge, KnowledgeError> {
    let header_path = question.project_dir(workspaces_root).join(&question.header_path);
    let header = fs::read_to_string(&header_path).map_err(|source| KnowledgeError::Io { path: header_path, source })?;
    let declaration = match &question.declaration_override {
        Some(d) => d.clone(),
        None => extract_declaration(&header, &question.api_name)?,
    };
    let documentation = question.doc_override.clone().or_else(|| extract_documentation(&header, &question.api_name));
    let snippets = snippets
        .map(|s| dedup_snippets(s.search(&question.api_name, classifier), DEFAULT_DEDUP_THRESHOLD))
        .unwrap_or_default();
    Ok(ApiKnowledge {
        api_name: question.api_name.clone(),
        header_include: header_include(&question.header_path),
        declaration,
        documentation,
        snippets,
    })
}

/// `#include "<file>"`; workspaces are expected to put the header's directory on the include path.
pub fn header_include(header_path: &Path) -> String {
    let name = header_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("#include \"{name}\"")
}
