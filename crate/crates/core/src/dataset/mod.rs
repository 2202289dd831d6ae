//! The question corpus: which APIs to generate drivers for.
//!
//! A corpus is a JSON document with a `questions` array:
//!
//! ```json
//! {
//!   "questions": [
//!     {
//!       "id": 1,
//!       "project": "demo",
//!       "api_name": "demo_parse",
//!       "header_path": "include/demo.h",
//!       "build_script": "build.sh",
//!       "complexity_score": 2,
//!       "bug_filter_spec": "filters/planted.json",
//!       "semantic_check_spec": "semantic/demo_parse.json"
//!     }
//!   ]
//! }
//! ```
//!
//! `header_path` and `build_script` are relative to the project workspace
//! (`<workspaces_root>/<project>/`). Filter and semantic spec paths are
//! relative to the directory holding the corpus file.

mod complexity;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use complexity::{complexity_score, CommonPattern, COMMON_PATTERNS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    pub project: String,
    pub api_name: String,
    pub header_path: PathBuf,
    pub build_script: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declaration_override: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_override: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity_score: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_check_spec: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bug_filter_spec: Option<PathBuf>,
}

impl Question {
    /// Directory of this question's project under `workspaces_root`.
    pub fn project_dir(&self, workspaces_root: &Path) -> PathBuf {
        workspaces_root.join(&self.project)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionSet {
    pub questions: Vec<Question>,
    pub corpus_root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaViolation {
    pub question_id: Option<u32>,
    pub message: String,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.question_id {
            Some(id) => write!(f, "question {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Schema(Vec<SchemaViolation>),
}

impl QuestionSet {
    pub fn get(&self, id: u32) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Resolves a corpus-relative path (filter and semantic specs).
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.corpus_root.join(rel)
        }
    }

    pub fn to_json(&self) -> String {
        let file = CorpusFile { questions: self.questions.clone() };
        let mut s = serde_json::to_string_pretty(&file).expect("corpus serializes");
        s.push('\n');
        s
    }

    /// Checks that every header and build script exists in its project workspace.
    pub fn check_workspaces(&self, workspaces_root: &Path) -> Result<(), DatasetError> {
        let mut violations = Vec::new();
        for q in &self.questions {
            let dir = q.project_dir(workspaces_root);
            for (what, rel) in [("header_path", &q.header_path), ("build_script", &q.build_script)] {
                let p = dir.join(rel);
                if !p.is_file() {
                    violations.push(SchemaViolation {
                        question_id: Some(q.id),
                        message: format!("{what} {} does not exist", p.display()),
                    });
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Schema(violations))
        }
    }
}

pub fn load_questions(path: &Path) -> Result<QuestionSet, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let corpus_root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_questions(&text, corpus_root)
}

pub fn parse_questions(text: &str, corpus_root: PathBuf) -> Result<QuestionSet, DatasetError> {
    if text.trim().is_empty() {
        return Err(DatasetError::Parse("empty corpus file".into()));
    }
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| DatasetError::Parse(e.to_string()))?;
    let entries = value
        .get("questions")
        .and_then(|q| q.as_array())
        .ok_or_else(|| DatasetError::Parse("missing `questions` array".into()))?;

    let mut violations = Vec::new();
    let mut questions = Vec::with_capacity(entries.len());
    for (idx, entry) in entries.iter().enumerate() {
        let id = entry.get("id").and_then(|v| v.as_u64()).and_then(|v| u32::try_from(v).ok());
        match serde_json::from_value::<Question>(entry.clone()) {
            Ok(q) => questions.push(q),
            Err(e) => violations.push(SchemaViolation {
                question_id: id,
                message: format!("entry #{idx}: {e}"),
            }),
        }
    }

    let mut seen = BTreeSet::new();
    for q in &questions {
        let mut bad = |message: String| violations.push(SchemaViolation { question_id: Some(q.id), message });
        if !seen.insert(q.id) {
            bad(format!("duplicate id {}", q.id));
        }
        if q.api_name.trim().is_empty() {
            bad("api_name is empty".into());
        }
        if q.project.trim().is_empty() {
            bad("project is empty".into());
        }
        if q.header_path.as_os_str().is_empty() || q.header_path.is_absolute() {
            bad("header_path must be a non-empty relative path".into());
        }
        if q.build_script.as_os_str().is_empty() {
            bad("build_script is empty".into());
        }
        if q.complexity_score == Some(0) {
            bad("complexity_score must be >= 1".into());
        }
    }
    if questions.is_empty() && violations.is_empty() {
        violations.push(SchemaViolation { question_id: None, message: "corpus has no questions".into() });
    }
    if !violations.is_empty() {
        return Err(DatasetError::Schema(violations));
    }
    questions.sort_by_key(|q| q.id);
    Ok(QuestionSet { questions, corpus_root })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_rows() -> &'static str {
        r#"{"questions": [
            {"id": 1, "project": "coturn", "api_name": "stun_is_command_message_full_check_str",
             "header_path": "include/stun.h", "build_script": "build.sh", "complexity_score": 1},
            {"id": 86, "project": "tmux", "api_name": "input_parse_buffer",
             "header_path": "tmux.h", "build_script": "build.sh", "complexity_score": 42}
        ]}"#
    }

    #[test]
    fn loads_table_rows() {
        let qs = parse_questions(table_rows(), PathBuf::from("/corpus")).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs.questions[0].api_name, "stun_is_command_message_full_check_str");
        assert_eq!(qs.questions[1].complexity_score, Some(42));
        assert_eq!(qs.get(86).unwrap().project, "tmux");
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(parse_questions("", PathBuf::new()), Err(DatasetError::Parse(_))));
        assert!(matches!(parse_questions("{ nope", PathBuf::new()), Err(DatasetError::Parse(_))));
    }

    #[test]
    fn duplicate_ids_are_named() {
        let text = r#"{"questions": [
            {"id": 5, "project": "p", "api_name": "a", "header_path": "a.h", "build_script": "b.sh"},
            {"id": 5, "project": "p", "api_name": "b", "header_path": "a.h", "build_script": "b.sh"}
        ]}"#;
        match parse_questions(text, PathBuf::new()) {
            Err(DatasetError::Schema(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].question_id, Some(5));
                assert!(v[0].to_string().contains("duplicate id 5"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn lists_every_violation() {
        let text = r#"{"questions": [
            {"id": 1, "project": "p", "api_name": "", "header_path": "a.h", "build_script": "b.sh", "complexity_score": 0},
            {"id": 2, "project": "p", "header_path": "a.h", "build_script": "b.sh"}
        ]}"#;
        let Err(DatasetError::Schema(v)) = parse_questions(text, PathBuf::new()) else {
            panic!("expected schema error");
        };
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v.iter().any(|x| x.question_id == Some(2) && x.message.contains("api_name")));
    }

    #[test]
    fn ids_come_out_sorted() {
        let text = r#"{"questions": [
            {"id": 9, "project": "p", "api_name": "b", "header_path": "a.h", "build_script": "b.sh"},
            {"id": 3, "project": "p", "api_name": "a", "header_path": "a.h", "build_script": "b.sh"}
        ]}"#;
        let qs = parse_questions(text, PathBuf::new()).unwrap();
        assert_eq!(qs.questions.iter().map(|q| q.id).collect::<Vec<_>>(), [3, 9]);
    }

    #[test]
    fn json_round_trip() {
        let qs = parse_questions(table_rows(), PathBuf::from("/c")).unwrap();
        assert_eq!(parse_questions(&qs.to_json(), PathBuf::from("/c")).unwrap(), qs);
    }
}
