#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use drivergen::sandbox::{prepare_workspace, Toolchain, Workspace};

pub mod fake;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn demo_dir() -> PathBuf {
    fixtures().join("demo")
}

pub fn demo_driver(name: &str) -> String {
    std::fs::read_to_string(demo_dir().join("drivers").join(name)).unwrap()
}

pub fn toolchain() -> Toolchain {
    Toolchain::detect()
}

/// The demo workspace, built once per test binary; `None` (with a loud
/// notice) when no libFuzzer-capable clang is installed.
pub fn demo_workspace() -> Option<&'static Workspace> {
    static WS: OnceLock<Option<Workspace>> = OnceLock::new();
    WS.get_or_init(|| {
        if !toolchain().supports_libfuzzer() {
            eprintln!("SKIPPED: clang with -fsanitize=fuzzer is not available");
            return None;
        }
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("demo-ws-{}", std::process::id()));
        Some(prepare_workspace(&demo_dir(), Path::new("build.sh"), &out).expect("demo workspace builds"))
    })
    .as_ref()
}

#[macro_export]
macro_rules! require_workspace {
    () => {
        match common::demo_workspace() {
            Some(ws) => ws,
            None => {
                eprintln!("SKIPPED {}: no libFuzzer toolchain", module_path!());
                return;
            }
        }
    };
}
