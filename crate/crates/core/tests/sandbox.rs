mod common;

use std::path::Path;

use drivergen::sandbox::{
    build, fuzz, parse_fuzz_log, prepare_workspace, ExitKind, FuzzOptions, SandboxError, Workspace,
};

const SHORT: u64 = 3;

#[test]
fn effective_driver_builds_and_makes_progress() {
    let ws = require_workspace!();
    let dir = tempfile::tempdir().unwrap();
    let br = build(&common::demo_driver("effective.c"), ws, dir.path(), false, &common::toolchain()).unwrap();
    assert!(br.success, "{}", br.compiler_output);
    let bin = br.binary_path.unwrap();
    let fr = fuzz(&bin, &FuzzOptions::with_duration(SHORT), &common::toolchain()).unwrap();
    assert_eq!(fr.exit_kind, ExitKind::Clean, "{}", fr.log_text);
    assert!(fr.has_coverage_progress(), "{:?}", fr.coverage_series);
    assert!(fr.duration < SHORT as f64 + 10.0);
    assert!(fr.coverage_series.windows(2).all(|w| w[0].edges <= w[1].edges));
}

#[test]
fn undeclared_call_is_a_failed_build() {
    let ws = require_workspace!();
    let src = common::demo_driver("undeclared.c");
    let dir = tempfile::tempdir().unwrap();
    let br = build(&src, ws, dir.path(), false, &common::toolchain()).unwrap();
    assert!(!br.success);
    assert!(br.binary_path.is_none());
    assert_eq!(br.error_lines.len(), 1, "{:?}", br.error_lines);
    let d = &br.error_lines[0];
    assert!(d.message.contains("demo_dump"));
    let line = src.lines().nth(d.line.unwrap() as usize - 1).unwrap();
    assert!(line.contains("demo_dump("));
    // the driver source on disk is exactly what was passed in
    assert_eq!(std::fs::read_to_string(dir.path().join("driver.c")).unwrap(), src);
}

#[test]
fn missing_archive_is_a_workspace_error() {
    let ws = require_workspace!();
    let broken = Workspace { archive: ws.archive.with_file_name("nope.a"), ..ws.clone() };
    let dir = tempfile::tempdir().unwrap();
    let err = build("int x;", &broken, dir.path(), false, &common::toolchain()).unwrap_err();
    assert!(matches!(err, SandboxError::Workspace(_)));
}

#[test]
fn failing_build_script_is_a_workspace_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("build.sh"), "echo broken >&2\nexit 3\n").unwrap();
    let err = prepare_workspace(dir.path(), Path::new("build.sh"), &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, SandboxError::Workspace(m) if m.contains("broken")));
    let err = prepare_workspace(dir.path(), Path::new("missing.sh"), &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, SandboxError::Workspace(_)));
    std::fs::write(dir.path().join("build.sh"), "echo archive=$1/none.a\n").unwrap();
    let err = prepare_workspace(dir.path(), Path::new("build.sh"), &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, SandboxError::Workspace(m) if m.contains("does not exist")));
}

#[test]
fn noop_driver_is_clean_and_flat() {
    let ws = require_workspace!();
    let dir = tempfile::tempdir().unwrap();
    let br = build(&common::demo_driver("noop.c"), ws, dir.path(), false, &common::toolchain()).unwrap();
    let bin = br.binary_path.unwrap();
    let a = fuzz(&bin, &FuzzOptions::with_duration(2), &common::toolchain()).unwrap();
    let b = fuzz(&bin, &FuzzOptions::with_duration(2), &common::toolchain()).unwrap();
    assert_eq!(a.exit_kind, ExitKind::Clean);
    assert_eq!(a.exit_kind, b.exit_kind);
    assert!(!a.has_coverage_progress());
    assert!(a.initial_coverage.is_some());
}

#[test]
fn driver_overflow_is_a_crash_with_stack() {
    let ws = require_workspace!();
    let dir = tempfile::tempdir().unwrap();
    let br = build(&common::demo_driver("driver_crash.c"), ws, dir.path(), false, &common::toolchain()).unwrap();
    let fr = fuzz(&br.binary_path.unwrap(), &FuzzOptions::with_duration(SHORT), &common::toolchain()).unwrap();
    assert_eq!(fr.exit_kind, ExitKind::Crash);
    assert!(fr.sanitizer_summary.as_deref().unwrap().contains("heap-buffer-overflow"));
    assert_eq!(fr.crash_symptom().as_deref(), Some("heap-buffer-overflow"));
    let top = &fr.crash_stack[0];
    assert_eq!(top.function, "LLVMFuzzerTestOneInput");
    assert!(top.file.as_deref().unwrap().ends_with("driver.c"));
    assert!(fr.crash_artifact.is_some());
}

#[test]
fn planted_bug_is_found() {
    let ws = require_workspace!();
    let dir = tempfile::tempdir().unwrap();
    let br = build(&common::demo_driver("planted_bug.c"), ws, dir.path(), false, &common::toolchain()).unwrap();
    let fr = fuzz(&br.binary_path.unwrap(), &FuzzOptions::with_duration(10), &common::toolchain()).unwrap();
    assert_eq!(fr.exit_kind, ExitKind::Crash, "{}", fr.log_text);
    let functions: Vec<&str> = fr.crash_stack.iter().map(|f| f.function.as_str()).collect();
    assert!(functions.contains(&"demo_copy_tag"), "{functions:?}");
}

#[test]
fn watchdog_stops_overrunning_sessions() {
    let ws = require_workspace!();
    let src = "#include <stdint.h>\n#include <stddef.h>\n#include <unistd.h>\n\
               int LLVMFuzzerTestOneInput(const uint8_t *d, size_t n) { if (n > 0) sleep(100); return 0; }\n";
    let dir = tempfile::tempdir().unwrap();
    let br = build(src, ws, dir.path(), false, &common::toolchain()).unwrap();
    assert!(br.success, "{}", br.compiler_output);
    let opts = FuzzOptions {
        duration: std::time::Duration::from_secs(1),
        grace: std::time::Duration::from_secs(1),
        ..Default::default()
    };
    let fr = fuzz(&br.binary_path.unwrap(), &opts, &common::toolchain()).unwrap();
    assert!(fr.watchdog_fired);
    assert_eq!(fr.exit_kind, ExitKind::Timeout);
    assert!(fr.duration < 15.0);
}

#[test]
fn saved_logs_parse() {
    let dir = common::fixtures().join("triage/fuzz");
    let read = |n: &str| std::fs::read_to_string(dir.join(n)).unwrap();
    let flat = parse_fuzz_log(&read("noeff_flat.log"));
    assert_eq!((flat.exit_kind, flat.has_coverage_progress()), (ExitKind::Clean, false));
    let clean = parse_fuzz_log(&read("clean_progress.log"));
    assert_eq!((clean.exit_kind, clean.has_coverage_progress()), (ExitKind::Clean, true));
    assert_eq!(parse_fuzz_log(&read("leak.log")).exit_kind, ExitKind::Leak);
    assert_eq!(parse_fuzz_log(&read("oom.log")).exit_kind, ExitKind::Oom);
    let timeout = parse_fuzz_log(&read("timeout.log"));
    assert_eq!(timeout.exit_kind, ExitKind::Timeout);
    assert!(timeout.crash_stack.iter().any(|f| f.function == "LLVMFuzzerTestOneInput" && f.line == Some(8)));
    let crash = parse_fuzz_log(&read("crash_driver.log"));
    assert_eq!(crash.exit_kind, ExitKind::Crash);
    // every frame with a file:line location parses to a triple
    for f in &crash.crash_stack {
        if f.file.is_some() {
            assert!(f.line.is_some());
        }
    }
    assert_eq!(crash.crash_stack.len(), 9);
}
