//! Driver effectiveness: build, short fuzz, true-bug filtering, and
//! semantic checks through the hook shim.
//!
//! # Hook event file
//!
//! When `DRIVERGEN_HOOK_LOG` names a file, the shim appends one event per
//! line. Byte strings are lowercase hex, `-` for empty.
//!
//! ```text
//! call <api>
//! arg <api> <index> <hex bytes|->
//! int <api> <index> <decimal>
//! file <api> <index> <hex path> <hex content|->
//! ctx <name>
//! ```
//!
//! # Bug filter file
//!
//! One filter object or an array of them. Patterns are anchored globs
//! (`*`, `?`); `summary` patterns match the sanitizer summary, `frame`
//! patterns match stack frame function names. A filter matches when all its
//! patterns match the evidence `[summary, frame 0, frame 1, ...]` as an
//! ordered subsequence.
//!
//! ```json
//! {"name": "planted", "patterns": [{"summary": "*heap-buffer-overflow*"}, {"frame": "demo_copy_tag"}]}
//! ```
//!
//! # Semantic check file
//!
//! ```json
//! {
//!   "required_calls": ["demo_parse"],
//!   "data_flow_probes": [{"api": "demo_parse", "arg": 0, "expect": "FUZZ_BYTES_REACH"}],
//!   "required_dependent_calls": ["demo_free"],
//!   "context_probes": []
//! }
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{Question, QuestionSet};
use crate::sandbox::{self, BuildResult, ExitKind, FuzzOptions, FuzzResult, SandboxError, Toolchain, Workspace};

/// Environment variable naming the hook event file.
pub const HOOK_LOG_ENV: &str = "DRIVERGEN_HOOK_LOG";

/// Marker stamped into every probe input.
pub const SENTINEL: &[u8] = b"drivergen-probe-5f3c9a71";

#[derive(Debug, thiserror::Error)]
pub enum ValidateError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("hook channel error: {0}")]
    HookChannel(String),
    #[error("invalid check specification: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Effective,
    Ineffective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailedStep {
    Compile,
    FuzzBehavior,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValidationMode {
    Automated,
    Full,
}

impl std::str::FromStr for ValidationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "AUTOMATED" => Ok(ValidationMode::Automated),
            "FULL" => Ok(ValidationMode::Full),
            _ => Err(format!("unknown validation mode '{s}' (expected AUTOMATED or FULL)")),
        }
    }
}

// ---------------------------------------------------------------------------
// Bug filters

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Summary(String),
    Frame(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugFilter {
    pub name: String,
    pub patterns: Vec<MatchRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterDecision {
    TrueBug(String),
    DriverFault,
}

/// Anchored glob match with `*` and `?`.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let mut re = String::from("(?s)^");
    for c in pattern.chars() {
        match c {
            '*' => re.push_str(".*"),
            '?' => re.push('.'),
            c => re.push_str(&regex::escape(c.encode_utf8(&mut [0; 4]))),
        }
    }
    re.push('$');
    Regex::new(&re).map(|r| r.is_match(text)).unwrap_or(false)
}

enum EvidenceItem<'a> {
    Summary(&'a str),
    Frame(&'a str),
}

impl BugFilter {
    pub fn matches(&self, fr: &FuzzResult) -> bool {
        let mut evidence = Vec::new();
        if let Some(s) = &fr.sanitizer_summary {
            evidence.push(EvidenceItem::Summary(s));
        }
        evidence.extend(fr.crash_stack.iter().map(|f| EvidenceItem::Frame(&f.function)));
        let mut items = evidence.iter();
        self.patterns.iter().all(|rule| {
            items.any(|item| match (rule, item) {
                (MatchRule::Summary(p), EvidenceItem::Summary(s)) => glob_match(p, s),
                (MatchRule::Frame(p), EvidenceItem::Frame(f)) => glob_match(p, f),
                _ => false,
            })
        })
    }
}

/// TRUE_BUG with the first matching filter's name, else DRIVER_FAULT.
pub fn apply_bug_filters(fr: &FuzzResult, filters: &[BugFilter]) -> FilterDecision {
    filters
        .iter()
        .find(|f| !f.patterns.is_empty() && f.matches(fr))
        .map(|f| FilterDecision::TrueBug(f.name.clone()))
        .unwrap_or(FilterDecision::DriverFault)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FilterFile {
    One(BugFilter),
    Many(Vec<BugFilter>),
}

pub fn parse_bug_filters(text: &str) -> Result<Vec<BugFilter>, ValidateError> {
    let filters = match serde_json::from_str(text).map_err(|e| ValidateError::Spec(e.to_string()))? {
        FilterFile::One(f) => vec![f],
        FilterFile::Many(v) => v,
    };
    if let Some(f) = filters.iter().find(|f| f.patterns.is_empty()) {
        return Err(ValidateError::Spec(format!("bug filter '{}' has no patterns", f.name)));
    }
    Ok(filters)
}

pub fn load_bug_filters(path: &Path) -> Result<Vec<BugFilter>, ValidateError> {
    let text = fs::read_to_string(path).map_err(|e| ValidateError::Spec(format!("{}: {e}", path.display())))?;
    parse_bug_filters(&text)
}

// ---------------------------------------------------------------------------
// Semantic checks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Expectation {
    FuzzBytesReach,
    FileContentNotName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFlowProbe {
    pub api: String,
    pub arg: u32,
    pub expect: Expectation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticCheckSpec {
    #[serde(default)]
    pub required_calls: Vec<String>,
    #[serde(default)]
    pub data_flow_probes: Vec<DataFlowProbe>,
    #[serde(default)]
    pub required_dependent_calls: Vec<String>,
    #[serde(default)]
    pub context_probes: Vec<String>,
}

impl SemanticCheckSpec {
    pub fn check_count(&self) -> usize {
        self.required_calls.len()
            + self.data_flow_probes.len()
            + self.required_dependent_calls.len()
            + self.context_probes.len()
    }

    /// Every API the checks observe.
    pub fn apis(&self) -> Vec<&str> {
        let mut apis: Vec<&str> = self
            .required_calls
            .iter()
            .chain(&self.required_dependent_calls)
            .map(String::as_str)
            .chain(self.data_flow_probes.iter().map(|p| p.api.as_str()))
            .collect();
        apis.sort_unstable();
        apis.dedup();
        apis
    }
}

pub fn parse_semantic_spec(text: &str) -> Result<SemanticCheckSpec, ValidateError> {
    let spec: SemanticCheckSpec = serde_json::from_str(text).map_err(|e| ValidateError::Spec(e.to_string()))?;
    if spec.check_count() == 0 {
        return Err(ValidateError::Spec("semantic check spec has no checks".into()));
    }
    Ok(spec)
}

pub fn load_semantic_spec(path: &Path) -> Result<SemanticCheckSpec, ValidateError> {
    let text = fs::read_to_string(path).map_err(|e| ValidateError::Spec(format!("{}: {e}", path.display())))?;
    parse_semantic_spec(&text)
}

/// Semantic mistake classes a probe can witness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticLabel {
    S1,
    S2,
    S3,
    S4,
    S5,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    RequiredCall { api: String },
    DataFlow { api: String, arg: u32, expect: Expectation },
    DependentCall { api: String },
    Context { name: String },
}

impl Check {
    /// The mistake class a failure of this check indicates.
    pub fn label(&self) -> Option<SemanticLabel> {
        match self {
            Check::RequiredCall { .. } => None,
            Check::DataFlow { expect: Expectation::FuzzBytesReach, .. } => Some(SemanticLabel::S1),
            Check::DataFlow { expect: Expectation::FileContentNotName, .. } => Some(SemanticLabel::S5),
            Check::DependentCall { .. } => Some(SemanticLabel::S3),
            Check::Context { .. } => Some(SemanticLabel::S2),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Check::RequiredCall { api } => write!(f, "required_call {api}"),
            Check::DataFlow { api, arg, expect } => {
                let e = serde_json::to_value(expect).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                write!(f, "data_flow {api} arg {arg} {e}")
            }
            Check::DependentCall { api } => write!(f, "dependent_call {api}"),
            Check::Context { name } => write!(f, "context {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: Check,
    pub passed: bool,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HookEvent {
    Call { api: String },
    Arg { api: String, index: u32, bytes: Vec<u8> },
    Int { api: String, index: u32, value: i64 },
    File { api: String, index: u32, path: Vec<u8>, content: Vec<u8> },
    Ctx { name: String },
}

fn hex_field(s: &str) -> Result<Vec<u8>, String> {
    if s == "-" {
        return Ok(Vec::new());
    }
    hex::decode(s).map_err(|e| format!("bad hex '{s}': {e}"))
}

/// Parses a hook event file.
pub fn parse_hook_events(text: &str) -> Result<Vec<HookEvent>, ValidateError> {
    let mut events = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: String| ValidateError::HookChannel(format!("line {}: {why}: {line:?}", n + 1));
        let f: Vec<&str> = line.split(' ').collect();
        let index = |s: &str| s.parse::<u32>().map_err(|e| bad(e.to_string()));
        let event = match f.as_slice() {
            ["call", api] => HookEvent::Call { api: api.to_string() },
            ["ctx", name] => HookEvent::Ctx { name: name.to_string() },
            ["arg", api, i, bytes] => {
                HookEvent::Arg { api: api.to_string(), index: index(i)?, bytes: hex_field(bytes).map_err(bad)? }
            }
            ["int", api, i, v] => HookEvent::Int {
                api: api.to_string(),
                index: index(i)?,
                value: v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            },
            ["file", api, i, path, content] => HookEvent::File {
                api: api.to_string(),
                index: index(i)?,
                path: hex_field(path).map_err(bad)?,
                content: hex_field(content).map_err(bad)?,
            },
            _ => return Err(bad("unrecognized event".into())),
        };
        events.push(event);
    }
    Ok(events)
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// The documented probe inputs: a well-formed `S` record whose payload is
/// the sentinel, and the bare sentinel.
pub fn probe_inputs() -> Vec<Vec<u8>> {
    let mut record = vec![b'S', SENTINEL.len() as u8];
    record.extend_from_slice(SENTINEL);
    vec![record, SENTINEL.to_vec()]
}

/// Evaluates a spec against the events of all probe runs.
pub fn evaluate_checks(spec: &SemanticCheckSpec, events: &[HookEvent]) -> Vec<CheckResult> {
    let called = |api: &str| events.iter().any(|e| matches!(e, HookEvent::Call { api: a } if a == api));
    let count = |api: &str| events.iter().filter(|e| matches!(e, HookEvent::Call { api: a } if a == api)).count();
    let mut out = Vec::new();
    for api in &spec.required_calls {
        let passed = called(api);
        out.push(CheckResult {
            check: Check::RequiredCall { api: api.clone() },
            passed,
            evidence: format!("{api} called {} times", count(api)),
        });
    }
    for p in &spec.data_flow_probes {
        let check = Check::DataFlow { api: p.api.clone(), arg: p.arg, expect: p.expect };
        let args: Vec<&[u8]> = events
            .iter()
            .filter_map(|e| match e {
                HookEvent::Arg { api, index, bytes } if *api == p.api && *index == p.arg => Some(bytes.as_slice()),
                _ => None,
            })
            .collect();
        let files: Vec<(&[u8], &[u8])> = events
            .iter()
            .filter_map(|e| match e {
                HookEvent::File { api, index, path, content } if *api == p.api && *index == p.arg => {
                    Some((path.as_slice(), content.as_slice()))
                }
                _ => None,
            })
            .collect();
        let (passed, evidence) = match p.expect {
            Expectation::FuzzBytesReach => {
                let in_args = args.iter().any(|b| contains(b, SENTINEL));
                let in_files = files.iter().any(|(_, c)| contains(c, SENTINEL));
                let observed = args.len() + files.len();
                if observed == 0 {
                    (false, format!("no argument {} of {} observed", p.arg, p.api))
                } else if in_args || in_files {
                    (true, format!("fuzz bytes reached argument {} of {}", p.arg, p.api))
                } else {
                    (false, format!("fuzz bytes absent from {observed} observations of argument {} of {}", p.arg, p.api))
                }
            }
            Expectation::FileContentNotName => {
                let in_name = files.iter().any(|(path, _)| contains(path, SENTINEL));
                let in_content = files.iter().any(|(_, c)| contains(c, SENTINEL));
                if files.is_empty() {
                    (false, format!("{} never received a file argument {}", p.api, p.arg))
                } else if in_name {
                    (false, format!("fuzz bytes used as the file name passed to {}", p.api))
                } else if !in_content {
                    (false, format!("file read by {} does not contain fuzz bytes", p.api))
                } else {
                    (true, format!("fuzz bytes reached the content of the file read by {}", p.api))
                }
            }
        };
        out.push(CheckResult { check, passed, evidence });
    }
    for api in &spec.required_dependent_calls {
        out.push(CheckResult {
            check: Check::DependentCall { api: api.clone() },
            passed: called(api),
            evidence: format!("{api} called {} times", count(api)),
        });
    }
    for name in &spec.context_probes {
        let passed = events.iter().any(|e| matches!(e, HookEvent::Ctx { name: n } if n == name));
        out.push(CheckResult {
            check: Check::Context { name: name.clone() },
            passed,
            evidence: format!("context {name} {}", if passed { "prepared" } else { "not observed" }),
        });
    }
    out
}

/// Runs `binary` once on `input` with the hook log enabled and returns the
/// recorded events.
pub fn run_with_hooks(binary: &Path, input: &[u8], tc: &Toolchain) -> Result<Vec<HookEvent>, ValidateError> {
    let dir = tempfile::Builder::new().prefix("drivergen-hooks-").tempdir().map_err(SandboxError::from)?;
    let log = dir.path().join("events");
    fs::write(&log, "").map_err(SandboxError::from)?;
    let env = [(HOOK_LOG_ENV.to_string(), log.display().to_string())];
    sandbox::run_input(binary, input, &env, Duration::from_secs(30), tc)?;
    let text = fs::read_to_string(&log).map_err(|e| ValidateError::HookChannel(format!("event file missing: {e}")))?;
    parse_hook_events(&text)
}

/// Executes the hooked driver on every probe input and evaluates the spec.
pub fn run_semantic_checks(
    binary_with_hooks: &Path,
    spec: &SemanticCheckSpec,
    tc: &Toolchain,
) -> Result<Vec<CheckResult>, ValidateError> {
    let mut events = Vec::new();
    for input in probe_inputs() {
        events.extend(run_with_hooks(binary_with_hooks, &input, tc)?);
    }
    Ok(evaluate_checks(spec, &events))
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build: Option<BuildResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuzz: Option<FuzzResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub semantic: Vec<CheckResult>,
    /// Why the failed step failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub failed_step: Option<FailedStep>,
    pub evidence: Evidence,
    /// Semantic checks did not run.
    pub automated_only: bool,
}

impl ValidationReport {
    pub fn is_effective(&self) -> bool {
        self.verdict == Verdict::Effective
    }

    /// Failed semantic checks.
    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckResult> {
        self.evidence.semantic.iter().filter(|c| !c.passed)
    }

    fn fail(step: FailedStep, evidence: Evidence, automated_only: bool) -> Self {
        ValidationReport { verdict: Verdict::Ineffective, failed_step: Some(step), evidence, automated_only }
    }
}

/// Per-question inputs to validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationContext {
    pub filters: Vec<BugFilter>,
    pub semantic: Option<SemanticCheckSpec>,
}

impl ValidationContext {
    /// Loads the question's filter and semantic spec files.
    pub fn for_question(qs: &QuestionSet, q: &Question) -> Result<Self, ValidateError> {
        Ok(ValidationContext {
            filters: match &q.bug_filter_spec {
                Some(p) => load_bug_filters(&qs.resolve(p))?,
                None => Vec::new(),
            },
            semantic: q.semantic_check_spec.as_ref().map(|p| load_semantic_spec(&qs.resolve(p))).transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub fuzz: FuzzOptions,
    pub toolchain: Toolchain,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions { fuzz: FuzzOptions::default(), toolchain: Toolchain::detect() }
    }
}

/// Steps 2 and 3 on a fuzz result: the automated fuzzing verdict.
pub fn judge_fuzz(fr: &FuzzResult, filters: &[BugFilter]) -> (Option<FilterDecision>, Option<String>) {
    if fr.reports_bug() {
        let decision = apply_bug_filters(fr, filters);
        if decision == FilterDecision::DriverFault {
            let what = match fr.exit_kind {
                ExitKind::Leak => "memory leak".to_string(),
                ExitKind::Oom => "out-of-memory".to_string(),
                ExitKind::Timeout => "timeout".to_string(),
                _ => fr.crash_symptom().unwrap_or_else(|| "crash".into()),
            };
            return (Some(decision), Some(format!("fuzzing reported a bug not matched by any filter: {what}")));
        }
        if !fr.has_coverage_progress() {
            return (Some(decision), Some("no coverage progress".into()));
        }
        return (Some(decision), None);
    }
    if !fr.has_coverage_progress() {
        return (None, Some("no coverage progress".into()));
    }
    (None, None)
}

/// Runs the validation pipeline on one candidate driver.
pub fn validate(
    driver_source: &str,
    ctx: &ValidationContext,
    workspace: &Workspace,
    mode: ValidationMode,
    opts: &ValidateOptions,
) -> Result<ValidationReport, ValidateError> {
    let semantic = match mode {
        ValidationMode::Full => ctx.semantic.as_ref(),
        ValidationMode::Automated => None,
    };
    let automated_only = semantic.is_none();
    let dir = tempfile::Builder::new().prefix("drivergen-validate-").tempdir().map_err(SandboxError::from)?;
    let tc = &opts.toolchain;

    let br = sandbox::build(driver_source, workspace, &dir.path().join("plain"), false, tc)?;
    if !br.success {
        let reason = br.error_lines.first().map(|d| d.message.clone()).or_else(|| Some("build failed".into()));
        let evidence = Evidence { build: Some(br), reason, ..Default::default() };
        return Ok(ValidationReport::fail(FailedStep::Compile, evidence, automated_only));
    }
    let binary = br.binary_path.clone().expect("successful build has a binary");
    let fr = sandbox::fuzz(&binary, &opts.fuzz, tc)?;
    let (filter, reason) = judge_fuzz(&fr, &ctx.filters);
    let mut evidence = Evidence { build: Some(br), fuzz: Some(fr), filter, reason, semantic: Vec::new() };
    if evidence.reason.is_some() {
        return Ok(ValidationReport::fail(FailedStep::FuzzBehavior, evidence, automated_only));
    }

    if let Some(spec) = semantic {
        let unhooked: Vec<&str> = spec.apis().into_iter().filter(|a| !workspace.hook_wraps.iter().any(|w| w == a)).collect();
        if !unhooked.is_empty() {
            return Err(ValidateError::Spec(format!("workspace does not hook {}", unhooked.join(", "))));
        }
        let hooked = sandbox::build(driver_source, workspace, &dir.path().join("hooked"), true, tc)?;
        let Some(hooked_bin) = hooked.binary_path else {
            return Err(ValidateError::HookChannel(format!("hooked build failed: {}", hooked.compiler_output)));
        };
        evidence.semantic = run_semantic_checks(&hooked_bin, spec, tc)?;
        if let Some(first) = evidence.semantic.iter().find(|c| !c.passed) {
            evidence.reason = Some(format!("semantic check failed: {}", first.check));
            return Ok(ValidationReport::fail(FailedStep::Semantic, evidence, false));
        }
    }
    Ok(ValidationReport { verdict: Verdict::Effective, failed_step: None, evidence, automated_only })
}

/// Validation as the orchestrator sees it.
pub trait DriverValidator: Send + Sync {
    /// `fuzz_seed` makes the fuzzing session reproducible.
    fn validate(&self, driver_source: &str, mode: ValidationMode, fuzz_seed: Option<u64>)
        -> Result<ValidationReport, ValidateError>;
}

/// Validation against a real workspace.
pub struct SandboxValidator {
    pub workspace: Workspace,
    pub context: ValidationContext,
    pub options: ValidateOptions,
}

impl DriverValidator for SandboxValidator {
    fn validate(
        &self,
        driver_source: &str,
        mode: ValidationMode,
        fuzz_seed: Option<u64>,
    ) -> Result<ValidationReport, ValidateError> {
        let mut options = self.options.clone();
        if fuzz_seed.is_some() {
            options.fuzz.seed = fuzz_seed;
        }
        validate(driver_source, &self.context, &self.workspace, mode, &options)
    }
}
