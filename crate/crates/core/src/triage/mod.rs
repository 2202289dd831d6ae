//! Failure classification and routing to fix templates.
//!
//! # Pattern table
//!
//! Build failures are classified by an ordered table of regular expressions
//! over the primary error message. The first matching rule wins; messages
//! matching none get the fallback category. The shipped table targets clang
//! and GNU ld and can be replaced per toolchain:
//!
//! ```json
//! {"rules": [{"category": "G3_NONEXIST_ID", "pattern": "unknown type name"}], "fallback": "G2_LANG_BASICS"}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::clex::{self, TokenKind};
use crate::knowledge::{truncate_snippet, ApiKnowledge, Origin, SnippetKind};
use crate::prompting::{FixTemplateId, Placeholder, PlaceholderMap, DEFAULT_SNIPPET_TOKEN_BUDGET, FUZZ_ENTRYPOINT};
use crate::sandbox::{BuildResult, Diagnostic, ExitKind, Frame, FuzzResult, Severity, DRIVER_FILE};
use crate::validate::{FailedStep, FilterDecision, SemanticLabel, ValidationReport};

const SHIPPED_PATTERNS: &str = include_str!("patterns.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "G1_CORRUPTED")]
    G1Corrupted,
    #[serde(rename = "G2_LANG_BASICS")]
    G2LangBasics,
    #[serde(rename = "G3_NONEXIST_ID")]
    G3NonexistId,
    #[serde(rename = "G4_TYPE_ERROR")]
    G4TypeError,
    #[serde(rename = "LINKAGE")]
    Linkage,
    #[serde(rename = "RT_MEMLEAK")]
    RtMemleak,
    #[serde(rename = "RT_OOM")]
    RtOom,
    #[serde(rename = "RT_TIMEOUT")]
    RtTimeout,
    #[serde(rename = "RT_CRASH")]
    RtCrash,
    #[serde(rename = "RT_NONEFF")]
    RtNoneff,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::G1Corrupted,
        Category::G2LangBasics,
        Category::G3NonexistId,
        Category::G4TypeError,
        Category::Linkage,
        Category::RtMemleak,
        Category::RtOom,
        Category::RtTimeout,
        Category::RtCrash,
        Category::RtNoneff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::G1Corrupted => "G1_CORRUPTED",
            Category::G2LangBasics => "G2_LANG_BASICS",
            Category::G3NonexistId => "G3_NONEXIST_ID",
            Category::G4TypeError => "G4_TYPE_ERROR",
            Category::Linkage => "LINKAGE",
            Category::RtMemleak => "RT_MEMLEAK",
            Category::RtOom => "RT_OOM",
            Category::RtTimeout => "RT_TIMEOUT",
            Category::RtCrash => "RT_CRASH",
            Category::RtNoneff => "RT_NONEFF",
        }
    }

    /// The fix template each category is routed to.
    pub fn fix_template(self) -> FixTemplateId {
        match self {
            Category::G1Corrupted | Category::G2LangBasics | Category::G3NonexistId | Category::G4TypeError => {
                FixTemplateId::PrseErr
            }
            Category::Linkage => FixTemplateId::LinkErr,
            Category::RtMemleak => FixTemplateId::FuzzMemleak,
            Category::RtOom => FixTemplateId::FuzzOom,
            Category::RtTimeout => FixTemplateId::FuzzTimeout,
            Category::RtCrash => FixTemplateId::FuzzCrash,
            Category::RtNoneff => FixTemplateId::FuzzNoneff,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Category::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown category '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageVerdict {
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_label: Option<SemanticLabel>,
    /// 1-based driver line the error points at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err_line: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err_line_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err_description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub err_stack: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_symptom: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_cause_api: Option<String>,
    /// The symbol a link error could not resolve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undefined_symbol: Option<String>,
}

impl TriageVerdict {
    pub fn new(category: Category) -> Self {
        TriageVerdict {
            category,
            semantic_label: None,
            err_line: None,
            err_line_code: None,
            err_description: None,
            err_stack: Vec::new(),
            crash_symptom: None,
            root_cause_api: None,
            undefined_symbol: None,
        }
    }

    /// Fills `root_cause_api` from the error line.
    pub fn attach_root_cause(&mut self, driver_source: &str, project_apis: &BTreeSet<String>) {
        if let Some(line) = self.err_line {
            self.root_cause_api = locate_root_cause_api(driver_source, line as usize, project_apis);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TriageError {
    #[error("not a failure: the run is clean and coverage grew")]
    NotAFailure,
    #[error("{template} needs {placeholder} but the evidence has none")]
    MissingEvidence { template: FixTemplateId, placeholder: Placeholder },
    #[error("invalid pattern table: {0}")]
    PatternTable(String),
}

// ---------------------------------------------------------------------------
// Build failures

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatternRule {
    category: Category,
    pattern: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatternFile {
    rules: Vec<PatternRule>,
    fallback: Category,
}

/// Ordered message patterns for compile diagnostics.
#[derive(Debug, Clone)]
pub struct PatternTable {
    rules: Vec<(Category, Regex)>,
    fallback: Category,
}

impl PatternTable {
    pub fn parse(text: &str) -> Result<Self, TriageError> {
        let file: PatternFile = serde_json::from_str(text).map_err(|e| TriageError::PatternTable(e.to_string()))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for r in file.rules {
            if !matches!(r.category, Category::G2LangBasics | Category::G3NonexistId | Category::G4TypeError) {
                return Err(TriageError::PatternTable(format!("rule category {} is not a compile category", r.category)));
            }
            let re = Regex::new(&r.pattern).map_err(|e| TriageError::PatternTable(format!("{}: {e}", r.pattern)))?;
            rules.push((r.category, re));
        }
        Ok(PatternTable { rules, fallback: file.fallback })
    }

    pub fn load(path: &Path) -> Result<Self, TriageError> {
        let text = fs::read_to_string(path).map_err(|e| TriageError::PatternTable(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The table shipped with the crate.
    pub fn shipped() -> &'static PatternTable {
        static TABLE: LazyLock<PatternTable> =
            LazyLock::new(|| PatternTable::parse(SHIPPED_PATTERNS).expect("shipped pattern table is valid"));
        &TABLE
    }

    pub fn classify_message(&self, message: &str) -> Category {
        let message = strip_flag_suffix(message);
        self.rules.iter().find(|(_, re)| re.is_match(message)).map(|(c, _)| *c).unwrap_or(self.fallback)
    }
}

/// Drops a trailing `[-Werror,-Wfoo]` group.
fn strip_flag_suffix(message: &str) -> &str {
    match message.rfind(" [-W") {
        Some(i) if message.ends_with(']') => &message[..i],
        _ => message,
    }
}

fn is_driver_file(file: &str) -> bool {
    Path::new(file).file_name().is_some_and(|n| n == DRIVER_FILE)
}

/// Unbalanced brackets, an unterminated literal or comment, or a last
/// token that cannot end a translation unit.
pub fn is_corrupted(source: &str) -> bool {
    let lexed = clex::lex(source);
    if lexed.unterminated || !clex::is_balanced(source) {
        return true;
    }
    match lexed.tokens.last() {
        None => true,
        Some(t) => !(t.is_punct('}') || t.is_punct(';') || t.kind == TokenKind::Directive),
    }
}

/// Classifies a failed build with the shipped pattern table.
pub fn classify_build_failure(br: &BuildResult, driver_source: &str) -> TriageVerdict {
    classify_build_failure_with(br, driver_source, PatternTable::shipped())
}

pub fn classify_build_failure_with(br: &BuildResult, driver_source: &str, table: &PatternTable) -> TriageVerdict {
    let errors: Vec<&Diagnostic> = br.error_lines.iter().filter(|d| d.is_error()).collect();
    let primary = errors.iter().find(|d| is_driver_file(&d.file)).or(errors.first()).copied();
    let only_link = !errors.is_empty() && errors.iter().all(|d| d.severity == Severity::Link);
    let category = if is_corrupted(driver_source) {
        Category::G1Corrupted
    } else if only_link {
        Category::Linkage
    } else {
        primary.map(|d| table.classify_message(&d.message)).unwrap_or(Category::G2LangBasics)
    };
    let mut v = TriageVerdict::new(category);
    if category == Category::Linkage {
        v.undefined_symbol = errors.iter().find_map(|d| d.symbol.clone());
    }
    match primary {
        Some(d) => {
            v.err_description = Some(d.message.clone());
            if is_driver_file(&d.file) || d.file.is_empty() {
                v.err_line = d.line;
            }
            v.err_line_code = match v.err_line.and_then(|l| clex::line_text(driver_source, l as usize)) {
                Some(text) => Some(text.trim().to_string()),
                None => d.line.map(|l| format!("{}:{l}", d.file)),
            };
        }
        None => {
            let tail = br.compiler_output.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("build failed");
            v.err_description = Some(tail.trim().to_string());
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Runtime failures

fn is_runtime_internal(function: &str) -> bool {
    function.starts_with("__sanitizer")
        || function.starts_with("fuzzer::")
        || function.starts_with("__GI_")
        || function.starts_with("__sigaction")
        || function.is_empty()
}

/// Frames from the first non-runtime frame through the fuzz entrypoint.
pub fn driver_stack(stack: &[Frame]) -> Vec<Frame> {
    let start = stack.iter().position(|f| !is_runtime_internal(&f.function)).unwrap_or(stack.len());
    let mut out = Vec::new();
    for f in &stack[start..] {
        out.push(f.clone());
        if f.function == FUZZ_ENTRYPOINT {
            break;
        }
    }
    out
}

/// `#<n> <function> <file>:<line>` per frame.
pub fn format_stack(frames: &[Frame]) -> String {
    frames.iter().enumerate().map(|(i, f)| format!("#{i} {f}")).collect::<Vec<_>>().join("\n")
}

/// Classifies a failed fuzzing session. The driver's file is the file of the
/// entrypoint frame; `driver_source`, when given, supplies the error line text.
pub fn classify_runtime_failure(fr: &FuzzResult, driver_source: Option<&str>) -> Result<TriageVerdict, TriageError> {
    let category = match fr.exit_kind {
        ExitKind::Leak => Category::RtMemleak,
        ExitKind::Oom => Category::RtOom,
        ExitKind::Timeout => Category::RtTimeout,
        ExitKind::Crash => Category::RtCrash,
        ExitKind::Clean if fr.has_coverage_progress() => return Err(TriageError::NotAFailure),
        ExitKind::Clean => Category::RtNoneff,
    };
    let mut v = TriageVerdict::new(category);
    if category == Category::RtNoneff {
        v.err_description = Some(match (fr.initial_coverage, fr.final_coverage()) {
            (Some(a), Some(b)) => format!("coverage stayed at {b} edges (started at {a})"),
            _ => "no coverage reported".to_string(),
        });
        return Ok(v);
    }
    v.err_stack = driver_stack(&fr.crash_stack);
    v.err_description = fr.sanitizer_summary.clone();
    if category == Category::RtCrash {
        v.crash_symptom = Some(fr.crash_symptom().unwrap_or_else(|| "crash".into()));
    }
    let driver_file = fr.crash_stack.iter().find(|f| f.function == FUZZ_ENTRYPOINT).and_then(|f| f.file.clone());
    let frame = driver_file.and_then(|file| fr.crash_stack.iter().find(|f| f.file.as_deref() == Some(&file) && f.line.is_some()));
    if let Some(f) = frame {
        v.err_line = f.line;
        let text = driver_source.and_then(|s| clex::line_text(s, f.line.unwrap_or(0) as usize));
        v.err_line_code = Some(match text {
            Some(t) => t.trim().to_string(),
            None => format!("{}:{}", f.file.as_deref().unwrap_or(""), f.line.unwrap_or(0)),
        });
    }
    Ok(v)
}

/// The triage verdict for a failed validation.
pub fn triage_report(
    report: &ValidationReport,
    driver_source: &str,
    project_apis: &BTreeSet<String>,
) -> Result<TriageVerdict, TriageError> {
    let mut v = match report.failed_step {
        None => return Err(TriageError::NotAFailure),
        Some(FailedStep::Compile) => match &report.evidence.build {
            Some(br) => classify_build_failure(br, driver_source),
            None => TriageVerdict::new(Category::G2LangBasics),
        },
        Some(FailedStep::FuzzBehavior) => match (&report.evidence.fuzz, &report.evidence.filter) {
            // every bug was a known library bug, so only coverage is at issue
            (_, Some(FilterDecision::TrueBug(name))) => {
                let mut v = TriageVerdict::new(Category::RtNoneff);
                v.err_description = Some(format!("only the known bug '{name}' was found and coverage did not grow"));
                v
            }
            (Some(fr), _) => classify_runtime_failure(fr, Some(driver_source))?,
            (None, _) => TriageVerdict::new(Category::RtNoneff),
        },
        Some(FailedStep::Semantic) => {
            let mut v = TriageVerdict::new(Category::RtNoneff);
            if let Some(c) = report.failed_checks().next() {
                v.semantic_label = c.check.label();
                v.err_description = Some(c.evidence.clone());
            }
            v
        }
    };
    v.attach_root_cause(driver_source, project_apis);
    Ok(v)
}

/// Scans from `error_line` up to line 1 for the nearest call to a project API.
pub fn locate_root_cause_api(driver_source: &str, error_line: usize, project_apis: &BTreeSet<String>) -> Option<String> {
    let lexed = clex::lex(driver_source);
    clex::call_sites(&lexed.tokens)
        .filter(|t| t.line <= error_line && project_apis.contains(t.text))
        .max_by_key(|t| t.offset)
        .map(|t| t.text.to_string())
}

// ---------------------------------------------------------------------------
// Routing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouteMode {
    /// Error information only.
    BasicOnly,
    /// Random supplemental knowledge about the root-cause API.
    AllOptions,
}

/// Which knowledge went into `SUPPLEMENTAL_INFO`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Supplemental {
    Declaration { api: String },
    Documentation { api: String },
    Snippet { api: String, source_path: String, origin: Origin, snippet_kind: SnippetKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixRoute {
    pub template: FixTemplateId,
    pub fields: PlaceholderMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplemental: Option<Supplemental>,
}

fn supplemental_options(k: &ApiKnowledge) -> Vec<usize> {
    let mut opts = vec![0];
    if k.documentation.as_deref().is_some_and(|d| !d.trim().is_empty()) {
        opts.push(1);
    }
    if !k.snippets.is_empty() {
        opts.push(2);
    }
    opts
}

fn compose_supplemental<R: Rng + ?Sized>(k: &ApiKnowledge, rng: &mut R) -> (String, Supplemental) {
    let api = k.api_name.clone();
    match *supplemental_options(k).choose(rng).expect("declaration is always available") {
        0 => (
            format!("The API {api} is declared as follows:\n```c\n{}\n\n{};\n```", k.header_include, k.declaration),
            Supplemental::Declaration { api },
        ),
        1 => (
            format!("The documentation of the API {api}:\n{}", k.documentation.as_deref().unwrap_or("").trim_end()),
            Supplemental::Documentation { api },
        ),
        _ => {
            let s = k.snippets.choose(rng).expect("snippets are present");
            let text = truncate_snippet(&s.text, DEFAULT_SNIPPET_TOKEN_BUDGET);
            (
                format!("Here is an example of how the API {api} is used:\n```c\n{}\n```", text.trim_end()),
                Supplemental::Snippet { api, source_path: s.source_path.clone(), origin: s.origin, snippet_kind: s.kind },
            )
        }
    }
}

/// Picks the fix template for a verdict and fills its placeholders other
/// than `DRIVER_CODE`. Fails rather than leave a required placeholder empty.
pub fn route_fix<R: Rng + ?Sized>(
    verdict: &TriageVerdict,
    knowledge_for_root_cause: Option<&ApiKnowledge>,
    rng: &mut R,
    mode: RouteMode,
) -> Result<FixRoute, TriageError> {
    let template = verdict.category.fix_template();
    let mut fields = PlaceholderMap::new();
    let mut put = |p: Placeholder, v: Option<String>| {
        if let Some(v) = v {
            fields.insert(p, v);
        }
    };
    match template {
        FixTemplateId::PrseErr => {
            put(Placeholder::ErrLineCode, verdict.err_line_code.clone());
            put(Placeholder::ErrDescription, verdict.err_description.clone());
        }
        FixTemplateId::LinkErr => put(Placeholder::ApiName, verdict.undefined_symbol.clone()),
        FixTemplateId::FuzzTimeout => {
            put(Placeholder::ErrLineCode, verdict.err_line_code.clone());
            put(Placeholder::ErrStack, (!verdict.err_stack.is_empty()).then(|| format_stack(&verdict.err_stack)));
        }
        FixTemplateId::FuzzCrash => {
            put(Placeholder::CrashSymptom, verdict.crash_symptom.clone());
            put(Placeholder::ErrLineCode, verdict.err_line_code.clone());
            put(Placeholder::ErrDescription, (!verdict.err_stack.is_empty()).then(|| format_stack(&verdict.err_stack)));
        }
        FixTemplateId::FuzzMemleak | FixTemplateId::FuzzOom | FixTemplateId::FuzzNoneff => {}
    }
    if let Some(&placeholder) =
        template.required().iter().find(|p| **p != Placeholder::DriverCode && !fields.contains_key(p))
    {
        return Err(TriageError::MissingEvidence { template, placeholder });
    }
    let mut supplemental = None;
    if mode == RouteMode::AllOptions && template.accepts_supplemental() {
        if let Some(k) = knowledge_for_root_cause {
            let (text, which) = compose_supplemental(k, rng);
            fields.insert(Placeholder::SupplementalInfo, text);
            supplemental = Some(which);
        }
    }
    Ok(FixRoute { template, fields, supplemental })
}
