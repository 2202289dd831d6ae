//! Parsing of compiler diagnostics and libFuzzer/sanitizer logs.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Error,
    Fatal,
    Warning,
    Note,
    /// An undefined reference reported by the linker.
    Link,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    pub line: Option<u32>,
    pub column: Option<u32>,
    pub severity: Severity,
    pub message: String,
    /// The missing symbol, for [`Severity::Link`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol: Option<String>,
}

impl Diagnostic {
    pub fn is_error(&self) -> bool {
        matches!(self.severity, Severity::Error | Severity::Fatal | Severity::Link)
    }
}

static CC_DIAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?P<file>[^:\s][^:]*):(?P<line>\d+):(?P<col>\d+): (?P<sev>fatal error|error|warning|note): (?P<msg>.*)$")
        .unwrap()
});
static UNDEFINED_REF: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:(?P<file>[^:\s]+):(?P<line>\d+): )?undefined reference to [`'](?P<sym>[^`']+)'").unwrap()
});
static LLD_UNDEFINED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"error: undefined symbol: (?P<sym>\S+)").unwrap());

/// Every diagnostic in a compiler/linker transcript, in order.
pub fn parse_diagnostics(output: &str) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for line in output.lines() {
        if let Some(c) = CC_DIAG.captures(line) {
            let severity = match &c["sev"] {
                "fatal error" => Severity::Fatal,
                "error" => Severity::Error,
                "warning" => Severity::Warning,
                _ => Severity::Note,
            };
            out.push(Diagnostic {
                file: c["file"].to_string(),
                line: c["line"].parse().ok(),
                column: c["col"].parse().ok(),
                severity,
                message: c["msg"].to_string(),
                symbol: None,
            });
        } else if let Some(c) = UNDEFINED_REF.captures(line) {
            out.push(Diagnostic {
                file: c.name("file").map(|m| m.as_str().to_string()).unwrap_or_default(),
                line: c.name("line").and_then(|m| m.as_str().parse().ok()),
                column: None,
                severity: Severity::Link,
                message: format!("undefined reference to `{}'", &c["sym"]),
                symbol: Some(c["sym"].to_string()),
            });
        } else if let Some(c) = LLD_UNDEFINED.captures(line) {
            out.push(Diagnostic {
                file: String::new(),
                line: None,
                column: None,
                severity: Severity::Link,
                message: format!("undefined symbol: {}", &c["sym"]),
                symbol: Some(c["sym"].to_string()),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
}

impl Frame {
    pub fn has_source(&self) -> bool {
        self.file.is_some() && self.line.is_some()
    }
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.file, self.line) {
            (Some(file), Some(line)) => write!(f, "{} {}:{}", self.function, file, line),
            _ => f.write_str(&self.function),
        }
    }
}

static FRAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*#(?P<n>\d+) 0x[0-9a-fA-F]+(?: in (?P<rest>.*))?").unwrap());
static LOCATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(?P<file>.*?[^:?]):(?P<line>\d+)(?::\d+)?$").unwrap());

/// Parses one `#N 0xADDR in func file:line` line.
pub fn parse_frame(line: &str) -> Option<Frame> {
    let c = FRAME.captures(line)?;
    let Some(rest) = c.name("rest").map(|m| m.as_str().trim()) else {
        return Some(Frame { function: String::new(), file: None, line: None });
    };
    let (function, location) = match rest.rsplit_once(' ') {
        Some((func, loc)) if !func.is_empty() && !loc.ends_with(')') => (func.trim(), Some(loc)),
        _ => (rest, None),
    };
    let parsed = location.and_then(|loc| LOCATION.captures(loc));
    Some(Frame {
        function: function.to_string(),
        file: parsed.as_ref().map(|p| p["file"].to_string()),
        line: parsed.and_then(|p| p["line"].parse().ok()),
    })
}

/// The first stack trace in the log, starting at the first `#0` frame.
pub fn first_stack(log: &str) -> Vec<Frame> {
    let mut frames = Vec::new();
    let mut started = false;
    for line in log.lines() {
        match FRAME.captures(line) {
            Some(c) => {
                let n: usize = c["n"].parse().unwrap_or(0);
                if started && n == 0 {
                    break;
                }
                if n == 0 {
                    started = true;
                }
                if started {
                    frames.extend(parse_frame(line));
                }
            }
            None if started => break,
            None => {}
        }
    }
    frames
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExitKind {
    Clean,
    Crash,
    Timeout,
    Oom,
    Leak,
}

/// Log markers, checked in order: leak, out-of-memory, timeout, then any
/// sanitizer `SUMMARY:` line as a crash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerTable {
    pub leak: Vec<String>,
    pub oom: Vec<String>,
    pub timeout: Vec<String>,
    pub crash: Vec<String>,
}

impl Default for MarkerTable {
    fn default() -> Self {
        MarkerTable {
            leak: vec!["detected memory leaks".into()],
            oom: vec!["out-of-memory".into()],
            timeout: vec!["ERROR: libFuzzer: timeout".into(), "SUMMARY: libFuzzer: timeout".into()],
            crash: vec!["SUMMARY: ".into()],
        }
    }
}

impl MarkerTable {
    pub fn classify(&self, log: &str) -> ExitKind {
        let any = |markers: &[String]| markers.iter().any(|m| log.contains(m.as_str()));
        if any(&self.leak) {
            ExitKind::Leak
        } else if any(&self.oom) {
            ExitKind::Oom
        } else if any(&self.timeout) {
            ExitKind::Timeout
        } else if any(&self.crash) {
            ExitKind::Crash
        } else {
            ExitKind::Clean
        }
    }
}

/// Text after `SUMMARY: `, e.g. `AddressSanitizer: heap-buffer-overflow /x.c:3 in f`.
pub fn sanitizer_summary(log: &str) -> Option<String> {
    log.lines().find_map(|l| l.trim().strip_prefix("SUMMARY: ").map(|s| s.trim().to_string()))
}

/// The defect kind named by a summary: `heap-buffer-overflow`, `SEGV`, `timeout`.
pub fn summary_kind(summary: &str) -> String {
    let body = summary.split_once(": ").map(|(_, b)| b).unwrap_or(summary).trim();
    if body.starts_with("deadly signal") {
        return "deadly signal".to_string();
    }
    if body.contains(" leaked in ") {
        return "memory-leak".to_string();
    }
    body.split_whitespace().next().unwrap_or("").to_string()
}

static STATUS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^#(?P<iter>\d+)\s+(?P<event>INITED|NEW|REDUCE|pulse|DONE|RELOAD)\s+cov: (?P<cov>\d+)").unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusEvent {
    Inited,
    Other,
}

/// Parses a libFuzzer status line into `(event, cov)`.
pub fn parse_status(line: &str) -> Option<(StatusEvent, u64)> {
    let c = STATUS.captures(line.trim_end())?;
    let event = if &c["event"] == "INITED" { StatusEvent::Inited } else { StatusEvent::Other };
    Some((event, c["cov"].parse().ok()?))
}
