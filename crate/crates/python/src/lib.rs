//! Python bindings: log triage, driver scoring, session reports and driver merging.
//! Structured results are returned as JSON-decoded Python objects.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use drivergen::dataset::{QuestionSet, Question};
use drivergen::knowledge;
use drivergen::orchestrator::SessionLog;
use drivergen::report;
use drivergen::sandbox::{parse_fuzz_log, BuildResult};
use drivergen::triage;

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Complexity score of a driver given the project's API names.
#[pyfunction]
fn complexity_score(source: &str, project_symbols: Vec<String>) -> PyResult<u32> {
    let symbols: HashSet<String> = project_symbols.into_iter().collect();
    drivergen::dataset::complexity_score(source, &symbols).map_err(value_error)
}

/// Function names declared in a header.
#[pyfunction]
fn declared_functions(header_source: &str) -> Vec<String> {
    knowledge::declared_functions(header_source).into_iter().collect()
}

/// Token-set Jaccard similarity of two snippets.
#[pyfunction]
fn jaccard(a: &str, b: &str) -> f64 {
    knowledge::jaccard(a, b)
}

/// Triage verdict for a failed build log.
#[pyfunction]
#[pyo3(signature = (driver_source, log, project_apis = Vec::new()))]
fn classify_build_log<'py>(
    py: Python<'py>,
    driver_source: &str,
    log: &str,
    project_apis: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut v = triage::classify_build_failure(&BuildResult::failed_from_log(log), driver_source);
    v.attach_root_cause(driver_source, &project_apis.into_iter().collect::<BTreeSet<_>>());
    to_py(py, &v)
}

/// Triage verdict for a fuzzer log; raises ValueError when the log shows no failure.
#[pyfunction]
#[pyo3(signature = (driver_source, log, project_apis = Vec::new()))]
fn classify_fuzz_log<'py>(
    py: Python<'py>,
    driver_source: &str,
    log: &str,
    project_apis: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut v = triage::classify_runtime_failure(&parse_fuzz_log(log), Some(driver_source)).map_err(value_error)?;
    v.attach_root_cause(driver_source, &project_apis.into_iter().collect::<BTreeSet<_>>());
    to_py(py, &v)
}

/// Merges drivers into one that dispatches on the first input byte.
#[pyfunction]
fn merge_drivers(sources: Vec<String>) -> PyResult<String> {
    report::merge_drivers(&sources).map_err(value_error)
}

/// Relative gain of round `x` over round 1.
#[pyfunction]
fn round_gain(solved_by_round: Vec<u32>, x: usize) -> PyResult<f64> {
    report::round_gain(&solved_by_round, x).map_err(value_error)
}

/// Queries per solution of one session log (JSON text); infinity when unsolved.
#[pyfunction]
fn session_cost(log_json: &str) -> PyResult<f64> {
    Ok(report::question_cost(&SessionLog::from_json(log_json).map_err(value_error)?))
}

/// Solve table over the session logs in `results_dir`, as text or CSV.
#[pyfunction]
#[pyo3(signature = (results_dir, csv = false))]
fn solve_table(results_dir: &str, csv: bool) -> PyResult<String> {
    let logs = report::load_logs(Path::new(results_dir)).map_err(value_error)?;
    let mut seen = BTreeSet::new();
    let questions = logs
        .iter()
        .filter(|l| seen.insert(l.question_id))
        .map(|l| Question {
            id: l.question_id,
            project: String::new(),
            api_name: l.api_name.clone(),
            header_path: Default::default(),
            build_script: Default::default(),
            declaration_override: None,
            doc_override: None,
            complexity_score: None,
            semantic_check_spec: None,
            bug_filter_spec: None,
        })
        .collect();
    let mut qs = QuestionSet { questions, corpus_root: Default::default() };
    qs.questions.sort_by_key(|q| q.id);
    let t = report::solve_table(&logs, &qs);
    Ok(if csv { t.to_csv() } else { t.to_text() })
}

#[pymodule]
fn drivergen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(complexity_score, m)?)?;
    m.add_function(wrap_pyfunction!(declared_functions, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(classify_build_log, m)?)?;
    m.add_function(wrap_pyfunction!(classify_fuzz_log, m)?)?;
    m.add_function(wrap_pyfunction!(merge_drivers, m)?)?;
    m.add_function(wrap_pyfunction!(round_gain, m)?)?;
    m.add_function(wrap_pyfunction!(session_cost, m)?)?;
    m.add_function(wrap_pyfunction!(solve_table, m)?)?;
    Ok(())
}
