//! Building drivers against a project workspace and running bounded
//! libFuzzer sessions.
//!
//! # Workspace contract
//!
//! A project's build script is run as `sh <build_script> <outdir>` from the
//! project directory. It must print `key=value` lines on stdout:
//!
//! | key          | meaning                                                   |
//! |--------------|-----------------------------------------------------------|
//! | `archive`    | static library to link (required, must exist)             |
//! | `cflags`     | extra compile flags, whitespace separated                 |
//! | `ldflags`    | extra link flags, whitespace separated                    |
//! | `hook_shim`  | object file with `__wrap_<api>` hooks (optional)          |
//! | `hook_wraps` | comma-separated APIs to interpose with `-Wl,--wrap=<api>` |
//!
//! Other lines are ignored. Flags do not support shell quoting.

pub mod logparse;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use logparse::{Diagnostic, ExitKind, Frame, MarkerTable, Severity};

pub const DEFAULT_FUZZ_FLAGS: [&str; 3] = ["-close_fd_mask=3", "-rss_limit_mb=2048", "-timeout=30"];
pub const DEFAULT_FUZZ_SECONDS: u64 = 60;
pub const DRIVER_FILE: &str = "driver.c";

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("workspace error: {0}")]
    Workspace(String),
    #[error("could not launch {what}: {source}")]
    Launch {
        what: String,
        #[source]
        source: std::io::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Compiler and symbolizer used for builds and runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Toolchain {
    pub cc: String,
    pub symbolizer: Option<PathBuf>,
}

impl Default for Toolchain {
    fn default() -> Self {
        Toolchain::detect()
    }
}

fn which(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path).map(|d| d.join(name)).find(|p| p.is_file())
}

impl Toolchain {
    /// `DRIVERGEN_CC` or `clang`; symbolizer from `ASAN_SYMBOLIZER_PATH`,
    /// else `llvm-symbolizer`, else `addr2line`.
    pub fn detect() -> Self {
        let cc = std::env::var("DRIVERGEN_CC").unwrap_or_else(|_| "clang".to_string());
        let symbolizer = std::env::var_os("ASAN_SYMBOLIZER_PATH")
            .map(PathBuf::from)
            .or_else(|| ["llvm-symbolizer", "llvm-symbolizer-14", "addr2line"].into_iter().find_map(which));
        Toolchain { cc, symbolizer }
    }

    /// Can this toolchain build and run a libFuzzer binary? Cached per process.
    pub fn supports_libfuzzer(&self) -> bool {
        static OK: OnceLock<bool> = OnceLock::new();
        *OK.get_or_init(|| {
            let Ok(dir) = tempfile::tempdir() else { return false };
            let src = dir.path().join("probe.c");
            let bin = dir.path().join("probe");
            let probe = "#include <stdint.h>\n#include <stddef.h>\n\
                         int LLVMFuzzerTestOneInput(const uint8_t *d, size_t n) { return 0; }\n";
            if fs::write(&src, probe).is_err() {
                return false;
            }
            Command::new(&self.cc)
                .args(["-fsanitize=fuzzer,address"])
                .arg(&src)
                .arg("-o")
                .arg(&bin)
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .is_ok_and(|s| s.success())
        })
    }

    fn apply_env(&self, cmd: &mut Command) {
        if std::env::var_os("ASAN_SYMBOLIZER_PATH").is_none() {
            if let Some(s) = &self.symbolizer {
                cmd.env("ASAN_SYMBOLIZER_PATH", s);
            }
        }
    }
}

/// A prepared project: library archive and the flags to build against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub project_dir: PathBuf,
    pub archive: PathBuf,
    pub cflags: Vec<String>,
    pub ldflags: Vec<String>,
    pub hook_shim: Option<PathBuf>,
    pub hook_wraps: Vec<String>,
}

/// Parses the build script's `key=value` output.
pub fn parse_workspace_manifest(project_dir: &Path, stdout: &str) -> Result<Workspace, SandboxError> {
    let mut archive = None;
    let mut ws = Workspace {
        project_dir: project_dir.to_path_buf(),
        archive: PathBuf::new(),
        cflags: Vec::new(),
        ldflags: Vec::new(),
        hook_shim: None,
        hook_wraps: Vec::new(),
    };
    let resolve = |v: &str| {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            project_dir.join(p)
        }
    };
    for line in stdout.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        let value = value.trim();
        match key.trim() {
            "archive" => archive = Some(resolve(value)),
            "cflags" => ws.cflags = value.split_whitespace().map(str::to_string).collect(),
            "ldflags" => ws.ldflags = value.split_whitespace().map(str::to_string).collect(),
            "hook_shim" if !value.is_empty() => ws.hook_shim = Some(resolve(value)),
            "hook_wraps" => {
                ws.hook_wraps = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
            }
            _ => {}
        }
    }
    let archive = archive.ok_or_else(|| SandboxError::Workspace("build script printed no `archive=` line".into()))?;
    if !archive.is_file() {
        return Err(SandboxError::Workspace(format!("library archive {} does not exist", archive.display())));
    }
    if let Some(shim) = &ws.hook_shim {
        if !shim.is_file() {
            return Err(SandboxError::Workspace(format!("hook shim {} does not exist", shim.display())));
        }
    }
    ws.archive = archive;
    Ok(ws)
}

/// Runs the project's build script into `out_dir` and reads its manifest.
pub fn prepare_workspace(project_dir: &Path, build_script: &Path, out_dir: &Path) -> Result<Workspace, SandboxError> {
    let script = project_dir.join(build_script);
    if !script.is_file() {
        return Err(SandboxError::Workspace(format!("build script {} does not exist", script.display())));
    }
    fs::create_dir_all(out_dir)?;
    let output = Command::new("sh")
        .arg(&script)
        .arg(out_dir)
        .current_dir(project_dir)
        .output()
        .map_err(|source| SandboxError::Launch { what: script.display().to_string(), source })?;
    if !output.status.success() {
        return Err(SandboxError::Workspace(format!(
            "build script {} failed ({}):\n{}",
            script.display(),
            output.status,
            String::from_utf8_lossy(&output.stderr)
        )));
    }
    parse_workspace_manifest(project_dir, &String::from_utf8_lossy(&output.stdout))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildResult {
    pub success: bool,
    pub binary_path: Option<PathBuf>,
    pub compiler_output: String,
    /// Error diagnostics (compiler errors and undefined references) in order.
    pub error_lines: Vec<Diagnostic>,
}

impl BuildResult {
    /// A failed build reconstructed from a saved compiler transcript.
    pub fn failed_from_log(compiler_output: &str) -> Self {
        BuildResult {
            success: false,
            binary_path: None,
            compiler_output: compiler_output.to_string(),
            error_lines: logparse::parse_diagnostics(compiler_output).into_iter().filter(Diagnostic::is_error).collect(),
        }
    }
}

/// Compiles `driver_source` as `<out_dir>/driver.c` into `<out_dir>/driver`.
/// With `hooks`, the workspace's hook shim is linked with `--wrap` for each
/// hooked API.
pub fn build(
    driver_source: &str,
    ws: &Workspace,
    out_dir: &Path,
    hooks: bool,
    tc: &Toolchain,
) -> Result<BuildResult, SandboxError> {
    if !ws.archive.is_file() {
        return Err(SandboxError::Workspace(format!("library archive {} does not exist", ws.archive.display())));
    }
    fs::create_dir_all(out_dir)?;
    let out_dir = out_dir.canonicalize()?;
    let src = out_dir.join(DRIVER_FILE);
    let bin = out_dir.join("driver");
    fs::write(&src, driver_source)?;
    let mut cmd = Command::new(&tc.cc);
    cmd.args(["-fsanitize=fuzzer,address", "-gdwarf-4", "-Werror=implicit-function-declaration"])
        .arg(format!("-fdebug-prefix-map={}=.", out_dir.display()))
        .args(&ws.cflags)
        .arg(DRIVER_FILE);
    if hooks {
        if let Some(shim) = &ws.hook_shim {
            cmd.arg(shim);
            for api in &ws.hook_wraps {
                cmd.arg(format!("-Wl,--wrap={api}"));
            }
        }
    }
    cmd.arg(&ws.archive).args(&ws.ldflags).arg("-o").arg(&bin).current_dir(&out_dir);
    let output = cmd.output().map_err(|source| SandboxError::Launch { what: tc.cc.clone(), source })?;
    let mut compiler_output = String::from_utf8_lossy(&output.stderr).into_owned();
    compiler_output.push_str(&String::from_utf8_lossy(&output.stdout));
    let success = output.status.success() && bin.is_file();
    let error_lines = if success {
        Vec::new()
    } else {
        logparse::parse_diagnostics(&compiler_output).into_iter().filter(Diagnostic::is_error).collect()
    };
    Ok(BuildResult { success, binary_path: success.then_some(bin), compiler_output, error_lines })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    /// Seconds since launch.
    pub time: f64,
    pub edges: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzResult {
    /// Wall seconds.
    pub duration: f64,
    pub exit_kind: ExitKind,
    /// Running maximum of libFuzzer's `cov:` counter.
    pub coverage_series: Vec<CoveragePoint>,
    /// `cov:` at the end of startup (the INITED line).
    pub initial_coverage: Option<u64>,
    pub log_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_artifact: Option<Vec<u8>>,
    pub sanitizer_summary: Option<String>,
    pub crash_stack: Vec<Frame>,
    /// The session overran its budget and was stopped by the watchdog.
    pub watchdog_fired: bool,
}

impl FuzzResult {
    pub fn final_coverage(&self) -> Option<u64> {
        self.coverage_series.last().map(|p| p.edges)
    }

    /// Coverage grew after startup.
    pub fn has_coverage_progress(&self) -> bool {
        match (self.initial_coverage, self.final_coverage()) {
            (Some(init), Some(last)) => last > init,
            _ => false,
        }
    }

    pub fn reports_bug(&self) -> bool {
        self.exit_kind != ExitKind::Clean
    }

    /// The defect kind from the sanitizer summary, e.g. `heap-buffer-overflow`.
    pub fn crash_symptom(&self) -> Option<String> {
        self.sanitizer_summary.as_deref().map(logparse::summary_kind)
    }
}

/// Builds a [`FuzzResult`] from a complete log whose lines carry timestamps.
pub fn analyze_fuzz_log(
    lines: &[(f64, String)],
    duration: f64,
    watchdog_fired: bool,
    markers: &MarkerTable,
) -> FuzzResult {
    let log_text: String = lines.iter().map(|(_, l)| format!("{l}\n")).collect();
    let mut series: Vec<CoveragePoint> = Vec::new();
    let mut initial = None;
    for (t, line) in lines {
        if let Some((event, cov)) = logparse::parse_status(line) {
            if event == logparse::StatusEvent::Inited && initial.is_none() {
                initial = Some(cov);
            }
            let edges = series.last().map_or(cov, |p| p.edges.max(cov));
            series.push(CoveragePoint { time: *t, edges });
        }
    }
    let exit_kind = if watchdog_fired { ExitKind::Timeout } else { markers.classify(&log_text) };
    let sanitizer_summary = logparse::sanitizer_summary(&log_text);
    let crash_stack = if exit_kind == ExitKind::Clean { Vec::new() } else { logparse::first_stack(&log_text) };
    FuzzResult {
        duration,
        exit_kind,
        coverage_series: series,
        initial_coverage: initial,
        log_text,
        crash_artifact: None,
        sanitizer_summary,
        crash_stack,
        watchdog_fired,
    }
}

/// Parses a saved log without timing information.
pub fn parse_fuzz_log(log: &str) -> FuzzResult {
    let lines: Vec<(f64, String)> = log.lines().map(|l| (0.0, l.to_string())).collect();
    analyze_fuzz_log(&lines, 0.0, false, &MarkerTable::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzOptions {
    pub duration: Duration,
    pub flags: Vec<String>,
    /// libFuzzer `-seed`; `None` lets libFuzzer pick.
    pub seed: Option<u64>,
    /// Extra time past `duration` before the watchdog aborts the run.
    pub grace: Duration,
    pub env: Vec<(String, String)>,
    pub markers: MarkerTable,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions {
            duration: Duration::from_secs(DEFAULT_FUZZ_SECONDS),
            flags: DEFAULT_FUZZ_FLAGS.iter().map(|s| s.to_string()).collect(),
            seed: None,
            grace: Duration::from_secs(15),
            env: Vec::new(),
            markers: MarkerTable::default(),
        }
    }
}

impl FuzzOptions {
    pub fn with_duration(secs: u64) -> Self {
        FuzzOptions { duration: Duration::from_secs(secs), ..Default::default() }
    }
}

fn signal(pid: u32, sig: libc::c_int) {
    // SAFETY: plain kill(2) on a child we spawned and have not yet reaped.
    unsafe {
        libc::kill(pid as libc::pid_t, sig);
    }
}

/// Runs one fuzzing session from an empty corpus in a fresh directory.
pub fn fuzz(binary: &Path, opts: &FuzzOptions, tc: &Toolchain) -> Result<FuzzResult, SandboxError> {
    let dir = tempfile::Builder::new().prefix("drivergen-fuzz-").tempdir()?;
    let corpus = dir.path().join("corpus");
    let artifacts = dir.path().join("artifacts");
    fs::create_dir_all(&corpus)?;
    fs::create_dir_all(&artifacts)?;

    let secs = opts.duration.as_secs_f64().ceil().max(1.0) as u64;
    let mut cmd = Command::new(binary);
    cmd.args(&opts.flags)
        .arg(format!("-max_total_time={secs}"))
        .arg(format!("-artifact_prefix={}/", artifacts.display()));
    if let Some(seed) = opts.seed {
        cmd.arg(format!("-seed={seed}"));
    }
    cmd.arg(&corpus).current_dir(dir.path()).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::piped());
    tc.apply_env(&mut cmd);
    for (k, v) in &opts.env {
        cmd.env(k, v);
    }

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|source| SandboxError::Launch { what: binary.display().to_string(), source })?;
    let stderr = child.stderr.take().expect("stderr piped");
    let reader = thread::spawn(move || {
        let mut lines = Vec::new();
        let mut r = BufReader::new(stderr);
        let mut buf = Vec::new();
        while r.read_until(b'\n', &mut buf).unwrap_or(0) > 0 {
            let line = String::from_utf8_lossy(&buf).trim_end_matches(['\n', '\r']).to_string();
            lines.push((started.elapsed().as_secs_f64(), line));
            buf.clear();
        }
        lines
    });

    let deadline = opts.duration + opts.grace;
    let mut watchdog_fired = false;
    let mut aborted_at = None;
    loop {
        if child.try_wait()?.is_some() {
            break;
        }
        let elapsed = started.elapsed();
        match aborted_at {
            None if elapsed >= deadline => {
                watchdog_fired = true;
                signal(child.id(), libc::SIGABRT);
                aborted_at = Some(elapsed);
            }
            Some(at) if elapsed >= at + Duration::from_secs(5) => {
                let _ = child.kill();
                child.wait()?;
                break;
            }
            _ => {}
        }
        thread::sleep(Duration::from_millis(20));
    }
    let lines = reader.join().unwrap_or_default();
    let duration = started.elapsed().as_secs_f64();

    let mut result = analyze_fuzz_log(&lines, duration, watchdog_fired, &opts.markers);
    if result.exit_kind != ExitKind::Clean {
        let mut entries: Vec<PathBuf> = fs::read_dir(&artifacts)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        result.crash_artifact = entries.first().and_then(|p| fs::read(p).ok());
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub exit_code: Option<i32>,
    pub stderr: String,
    pub timed_out: bool,
}

/// Executes the fuzz binary once on a single input file (no fuzzing).
pub fn run_input(
    binary: &Path,
    input: &[u8],
    env: &[(String, String)],
    timeout: Duration,
    tc: &Toolchain,
) -> Result<RunOutput, SandboxError> {
    let dir = tempfile::Builder::new().prefix("drivergen-run-").tempdir()?;
    let input_path = dir.path().join("input");
    fs::write(&input_path, input)?;
    let mut cmd = Command::new(binary);
    cmd.arg(format!("-timeout={}", timeout.as_secs().max(1)))
        .arg(&input_path)
        .current_dir(dir.path())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    tc.apply_env(&mut cmd);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().map_err(|source| SandboxError::Launch { what: binary.display().to_string(), source })?;
    let stderr = child.stderr.take().expect("stderr piped");
    let reader = thread::spawn(move || {
        let mut s = String::new();
        let _ = std::io::Read::read_to_string(&mut BufReader::new(stderr), &mut s);
        s
    });
    let started = Instant::now();
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() > timeout + Duration::from_secs(5) {
            timed_out = true;
            let _ = child.kill();
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(10));
    };
    Ok(RunOutput { exit_code: status.code(), stderr: reader.join().unwrap_or_default(), timed_out })
}
