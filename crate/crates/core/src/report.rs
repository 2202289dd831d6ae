//! Metrics over session logs, result tables, merged drivers for comparison
//! fuzzing, and crash deduplication.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clex;
use crate::dataset::QuestionSet;
use crate::knowledge::{Origin, SnippetKind};
use crate::orchestrator::{SessionLog, Strategy};
use crate::prompting::FUZZ_ENTRYPOINT;
use crate::sandbox::{ExitKind, Frame, FuzzResult};
use crate::triage::Supplemental;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("round 1 solved nothing, so gains are undefined")]
    DegenerateBaseline,
    #[error("round {round} is out of range 2..={available}")]
    InvalidRound { round: usize, available: usize },
    #[error("solved counts decrease at round {0}")]
    NotMonotone(usize),
    #[error("no drivers to merge")]
    EmptyList,
    #[error("driver {index} has no {FUZZ_ENTRYPOINT} definition")]
    NoEntrypoint { index: usize },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

/// Queries spent per effective driver; infinite when nothing was solved.
pub fn question_cost(s: &SessionLog) -> f64 {
    cost(s.queries, s.solutions)
}

pub fn cost(queries: u32, solutions: u32) -> f64 {
    if solutions == 0 {
        f64::INFINITY
    } else {
        queries as f64 / solutions as f64
    }
}

/// Share of the round-1 result gained by round `x`, where `rslt[i]` is the
/// solved count after `i + 1` rounds.
pub fn round_gain(rslt: &[u32], x: usize) -> Result<f64, ReportError> {
    if x < 2 || x > rslt.len() {
        return Err(ReportError::InvalidRound { round: x, available: rslt.len() });
    }
    if let Some(i) = rslt.windows(2).position(|w| w[1] < w[0]) {
        return Err(ReportError::NotMonotone(i + 2));
    }
    if rslt[0] == 0 {
        return Err(ReportError::DegenerateBaseline);
    }
    Ok((rslt[x - 1] - rslt[x - 2]) as f64 / rslt[0] as f64)
}

/// Questions solved within the first `x` repetitions, for `x` in 1..=k.
pub fn solved_by_round<'a>(logs: impl IntoIterator<Item = &'a SessionLog>, k: u32) -> Vec<u32> {
    let mut first: BTreeMap<u32, u32> = BTreeMap::new();
    for log in logs {
        if let Some(r) = log.repetitions.iter().filter(|r| r.solved).map(|r| r.round).min() {
            let e = first.entry(log.question_id).or_insert(r);
            *e = (*e).min(r);
        }
    }
    (1..=k).map(|x| first.values().filter(|&&r| r <= x).count() as u32).collect()
}

/// Reads every `*.json` session log in a directory, in file name order.
pub fn load_logs(dir: &Path) -> Result<Vec<SessionLog>, ReportError> {
    let io = |e: std::io::Error| ReportError::Io { path: dir.display().to_string(), message: e.to_string() };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let err = |message: String| ReportError::Io { path: p.display().to_string(), message };
            let text = fs::read_to_string(p).map_err(|e| err(e.to_string()))?;
            SessionLog::from_json(&text).map_err(|e| err(e.to_string()))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Solve tables

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigKey {
    pub strategy: Strategy,
    pub model: String,
    /// Temperature as written in the log.
    pub temperature: String,
}

impl ConfigKey {
    pub fn of(log: &SessionLog) -> Self {
        ConfigKey {
            strategy: log.strategy.strategy,
            model: log.model.model_name.clone(),
            temperature: log.model.temperature.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionStat {
    pub effective: u32,
    pub queries: u32,
}

impl QuestionStat {
    pub fn solved(&self) -> bool {
        self.effective > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub key: ConfigKey,
    pub per_question: BTreeMap<u32, QuestionStat>,
    pub solved: u32,
    pub total: u32,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
}

impl ConfigRow {
    /// Logs exist for every question of the set.
    pub fn is_complete(&self) -> bool {
        self.per_question.len() as u32 == self.total
    }

    /// `X/Y`, or `-` when some question has no log.
    pub fn cell(&self) -> String {
        if self.is_complete() {
            format!("{}/{}", self.solved, self.total)
        } else {
            "-".to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub questions: Vec<u32>,
    pub rows: Vec<ConfigRow>,
}

/// Aggregates logs per configuration. A question counts as solved when any
/// of its logs produced an effective driver. Logs for questions outside
/// `qs` are ignored.
pub fn solve_table<'a>(logs: impl IntoIterator<Item = &'a SessionLog>, qs: &QuestionSet) -> MetricsTable {
    let questions: Vec<u32> = qs.questions.iter().map(|q| q.id).collect();
    let known: BTreeSet<u32> = questions.iter().copied().collect();
    let mut rows: BTreeMap<ConfigKey, ConfigRow> = BTreeMap::new();
    for log in logs {
        if !known.contains(&log.question_id) {
            continue;
        }
        let key = ConfigKey::of(log);
        let row = rows.entry(key.clone()).or_insert_with(|| ConfigRow {
            key,
            per_question: BTreeMap::new(),
            solved: 0,
            total: questions.len() as u32,
            prompt_tokens: 0,
            response_tokens: 0,
        });
        let stat = row.per_question.entry(log.question_id).or_default();
        stat.effective += log.solutions;
        stat.queries += log.queries;
        row.prompt_tokens += log.tokens_total.prompt;
        row.response_tokens += log.tokens_total.response;
    }
    let rows = rows
        .into_values()
        .map(|mut r| {
            r.solved = r.per_question.values().filter(|s| s.solved()).count() as u32;
            r
        })
        .collect();
    MetricsTable { questions, rows }
}

impl MetricsTable {
    pub fn row(&self, key: &ConfigKey) -> Option<&ConfigRow> {
        self.rows.iter().find(|r| &r.key == key)
    }

    fn grid(&self) -> (Vec<Strategy>, Vec<(String, String)>, Vec<Vec<String>>) {
        let strategies: Vec<Strategy> =
            self.rows.iter().map(|r| r.key.strategy).collect::<BTreeSet<_>>().into_iter().collect();
        let lines: Vec<(String, String)> = self
            .rows
            .iter()
            .map(|r| (r.key.model.clone(), r.key.temperature.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cells = lines
            .iter()
            .map(|(m, t)| {
                strategies
                    .iter()
                    .map(|&s| {
                        let key = ConfigKey { strategy: s, model: m.clone(), temperature: t.clone() };
                        self.row(&key).map_or_else(|| "-".to_string(), ConfigRow::cell)
                    })
                    .collect()
            })
            .collect();
        (strategies, lines, cells)
    }

    /// Models and temperatures down, strategies across.
    pub fn to_text(&self) -> String {
        let (strategies, lines, cells) = self.grid();
        let mut header = vec!["model".to_string(), "temperature".to_string()];
        header.extend(strategies.iter().map(|s| s.to_string()));
        let mut table = vec![header];
        for ((m, t), row) in lines.into_iter().zip(cells) {
            let mut line = vec![m, t];
            line.extend(row);
            table.push(line);
        }
        let widths: Vec<usize> =
            (0..table[0].len()).map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &table {
            let cols: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            out.push_str(cols.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let (strategies, lines, cells) = self.grid();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "temperature".to_string()];
        header.extend(strategies.iter().map(|s| s.to_string()));
        w.write_record(&header).expect("in-memory csv");
        for ((m, t), row) in lines.into_iter().zip(cells) {
            let mut line = vec![m, t];
            line.extend(row);
            w.write_record(&line).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    /// One row per question and one column per configuration; cells are
    /// `effective/queries`, `-` for missing logs.
    pub fn per_question_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["question".to_string()];
        header.extend(self.rows.iter().map(|r| format!("{}|{}|{}", r.key.strategy, r.key.model, r.key.temperature)));
        w.write_record(&header).expect("in-memory csv");
        for q in &self.questions {
            let mut line = vec![q.to_string()];
            line.extend(self.rows.iter().map(|r| match r.per_question.get(q) {
                Some(s) => format!("{}/{}", s.effective, s.queries),
                None => "-".to_string(),
            }));
            w.write_record(&line).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Per-log cost lines: question, configuration, queries, solutions, cost.
pub fn cost_lines<'a>(logs: impl IntoIterator<Item = &'a SessionLog>) -> String {
    let mut out = String::from("question,strategy,model,temperature,seed,queries,solutions,cost\n");
    for l in logs {
        let c = question_cost(l);
        let c = if c.is_finite() { format!("{c:.4}") } else { "inf".to_string() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.question_id,
            l.strategy.strategy,
            l.model.model_name,
            l.model.temperature,
            l.strategy.rng_seed,
            l.queries,
            l.solutions,
            c
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Snippet sources

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceRate {
    pub queries: u32,
    pub effective: u32,
    pub questions: u32,
    pub questions_solved: u32,
}

impl SourceRate {
    pub fn query_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.effective as f64 / self.queries as f64
        }
    }

    pub fn question_rate(&self) -> f64 {
        if self.questions == 0 {
            0.0
        } else {
            self.questions_solved as f64 / self.questions as f64
        }
    }
}

/// Success rates of queries whose prompt carried a usage snippet, by the
/// snippet's origin and kind.
pub fn snippet_source_breakdown<'a>(
    logs: impl IntoIterator<Item = &'a SessionLog>,
) -> BTreeMap<(Origin, SnippetKind), SourceRate> {
    let mut out: BTreeMap<(Origin, SnippetKind), SourceRate> = BTreeMap::new();
    let mut questions: BTreeMap<(Origin, SnippetKind), BTreeMap<u32, bool>> = BTreeMap::new();
    for log in logs {
        for a in log.attempts.iter().filter(|a| a.exchange.is_some()) {
            let cat = match (&a.snippet, &a.supplemental) {
                (Some(s), _) => (s.origin, s.kind),
                (None, Some(Supplemental::Snippet { origin, snippet_kind, .. })) => (*origin, *snippet_kind),
                _ => continue,
            };
            let r = out.entry(cat).or_default();
            r.queries += 1;
            r.effective += a.is_effective() as u32;
            *questions.entry(cat).or_default().entry(log.question_id).or_default() |= a.is_effective();
        }
    }
    for (cat, qs) in questions {
        let r = out.get_mut(&cat).expect("same categories");
        r.questions = qs.len() as u32;
        r.questions_solved = qs.values().filter(|&&s| s).count() as u32;
    }
    out
}

// ---------------------------------------------------------------------------
// Merged drivers

pub const MERGED_ENTRY_PREFIX: &str = "drivergen_merged_entry_";
const INIT_SYMBOL: &str = "LLVMFuzzerInitialize";

/// Combines drivers into one whose entrypoint picks driver `data[0] % N`
/// and hands it the remaining bytes. Each driver's text is kept verbatim;
/// its entrypoint, its `LLVMFuzzerInitialize` and its other function
/// definitions are renamed by macros scoped to that driver.
pub fn merge_drivers(drivers: &[String]) -> Result<String, ReportError> {
    if drivers.is_empty() {
        return Err(ReportError::EmptyList);
    }
    let mut out = String::from("#include <stddef.h>\n#include <stdint.h>\n\n");
    let mut inits = Vec::new();
    for (i, src) in drivers.iter().enumerate() {
        let defs: Vec<String> = clex::function_definitions(src)
            .map(|d| d.into_iter().map(|d| d.name).collect())
            .unwrap_or_default();
        if !defs.iter().any(|d| d == FUZZ_ENTRYPOINT) && !clex::mentions(src, FUZZ_ENTRYPOINT) {
            return Err(ReportError::NoEntrypoint { index: i });
        }
        let mut renames: Vec<(String, String)> = vec![(FUZZ_ENTRYPOINT.into(), format!("{MERGED_ENTRY_PREFIX}{i}"))];
        if defs.iter().any(|d| d == INIT_SYMBOL) {
            renames.push((INIT_SYMBOL.into(), format!("drivergen_merged_init_{i}")));
            inits.push(i);
        }
        let helpers: BTreeSet<&String> = defs.iter().filter(|d| *d != FUZZ_ENTRYPOINT && *d != INIT_SYMBOL).collect();
        renames.extend(helpers.into_iter().map(|h| (h.clone(), format!("drivergen_merged_{i}_{h}"))));

        let _ = writeln!(out, "/* merged driver {i} */");
        for (from, to) in &renames {
            let _ = writeln!(out, "#define {from} {to}");
        }
        out.push_str(src.trim_end());
        out.push('\n');
        for (from, _) in renames.iter().rev() {
            let _ = writeln!(out, "#undef {from}");
        }
        out.push('\n');
    }
    for i in 0..drivers.len() {
        let _ = writeln!(out, "int {MERGED_ENTRY_PREFIX}{i}(const uint8_t *data, size_t size);");
    }
    out.push('\n');
    if !inits.is_empty() {
        for i in &inits {
            let _ = writeln!(out, "int drivergen_merged_init_{i}(int *argc, char ***argv);");
        }
        let _ = writeln!(out, "\nint {INIT_SYMBOL}(int *argc, char ***argv) {{");
        for i in &inits {
            let _ = writeln!(out, "  drivergen_merged_init_{i}(argc, argv);");
        }
        out.push_str("  return 0;\n}\n\n");
    }
    let _ = writeln!(out, "int {FUZZ_ENTRYPOINT}(const uint8_t *data, size_t size) {{");
    out.push_str("  if (size == 0) {\n    return 0;\n  }\n");
    let _ = writeln!(out, "  switch (data[0] % {}) {{", drivers.len());
    for i in 0..drivers.len() {
        let _ = writeln!(out, "  case {i}:\n    return {MERGED_ENTRY_PREFIX}{i}(data + 1, size - 1);");
    }
    out.push_str("  }\n  return 0;\n}\n");
    Ok(out)
}

/// The driver a merged entrypoint runs for an input starting with `first_byte`.
pub fn dispatch_index(first_byte: u8, n: usize) -> usize {
    first_byte as usize % n
}

// ---------------------------------------------------------------------------
// Unique crashes

/// Crashes are considered the same when they share the sanitizer kind and
/// the innermost frame inside the library.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrashKey {
    pub kind: String,
    pub frame: Option<String>,
}

/// `None` for runs that did not fail.
pub fn crash_key(fr: &FuzzResult, in_library: impl Fn(&Frame) -> bool) -> Option<CrashKey> {
    let kind = match fr.exit_kind {
        ExitKind::Clean => return None,
        ExitKind::Crash => fr.crash_symptom().unwrap_or_else(|| "crash".into()),
        ExitKind::Leak => "memory-leak".into(),
        ExitKind::Oom => "out-of-memory".into(),
        ExitKind::Timeout => "timeout".into(),
    };
    let frame = fr.crash_stack.iter().find(|f| in_library(f)).map(|f| f.function.clone());
    Some(CrashKey { kind, frame })
}

/// A predicate selecting frames whose source file lies under `dir`.
pub fn frames_under(dir: &Path) -> impl Fn(&Frame) -> bool + '_ {
    move |f| f.file.as_deref().is_some_and(|file| Path::new(file).starts_with(dir))
}

pub fn unique_crashes<'a>(
    results: impl IntoIterator<Item = &'a FuzzResult>,
    in_library: impl Fn(&Frame) -> bool,
) -> BTreeSet<CrashKey> {
    results.into_iter().filter_map(|fr| crash_key(fr, &in_library)).collect()
}
