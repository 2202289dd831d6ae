//! Run manifest loading and flag/manifest/environment precedence.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::Failure;

/// Optional TOML file naming the inputs of a run. Relative paths are
/// resolved against the manifest's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub corpus: Option<PathBuf>,
    pub workspaces: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub snippets: Option<PathBuf>,
    pub build_dir: Option<PathBuf>,
    pub backend: Option<String>,
    pub seed: Option<u64>,
    pub fuzz_seconds: Option<u64>,
    pub validation_mode: Option<String>,
    pub parallelism: Option<usize>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("reading manifest {}: {e}", path.display())))?;
        let mut m: RunManifest =
            toml::from_str(&text).map_err(|e| Failure::Config(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut m.corpus, &mut m.workspaces, &mut m.results, &mut m.snippets, &mut m.build_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    Manifest,
    Env,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::Manifest => "manifest",
            Source::Env => "env",
            Source::Default => "default",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Setting<T> {
    pub value: T,
    pub source: Source,
}

/// First of flag, manifest, environment, default.
pub fn pick<T>(flag: Option<T>, manifest: Option<T>, env: Option<T>, default: Option<T>) -> Option<Setting<T>> {
    [(flag, Source::Flag), (manifest, Source::Manifest), (env, Source::Env), (default, Source::Default)]
        .into_iter()
        .find_map(|(v, source)| v.map(|value| Setting { value, source }))
}

pub const BACKEND_ENV: &str = "DRIVERGEN_BACKEND";

/// Global settings after precedence is applied.
#[derive(Debug)]
pub struct Settings {
    pub corpus: Option<Setting<PathBuf>>,
    pub workspaces: Option<Setting<PathBuf>>,
    pub results: Setting<PathBuf>,
    pub snippets: Option<Setting<PathBuf>>,
    pub build_dir: Setting<PathBuf>,
    pub backend: Setting<String>,
    pub seed: Setting<u64>,
    pub fuzz_seconds: Setting<u64>,
    pub validation_mode: Setting<String>,
    pub parallelism: Setting<usize>,
}

#[derive(Debug, Default, Clone, clap::Args)]
pub struct GlobalFlags {
    /// Run manifest (TOML) with defaults for the flags below.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Question corpus JSON.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Directory holding one subdirectory per project.
    #[arg(long, global = true)]
    pub workspaces: Option<PathBuf>,
    /// Where session logs are written.
    #[arg(long, global = true)]
    pub results: Option<PathBuf>,
    /// Source tree searched for usage snippets.
    #[arg(long, global = true)]
    pub snippets: Option<PathBuf>,
    /// Where project libraries are built.
    #[arg(long, global = true)]
    pub build_dir: Option<PathBuf>,
    /// `mock:<scenario.json>` or `openai`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fuzzing budget of one validation.
    #[arg(long, global = true)]
    pub fuzz_seconds: Option<u64>,
    /// AUTOMATED or FULL.
    #[arg(long, global = true)]
    pub validation_mode: Option<String>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
}

impl Settings {
    pub fn resolve(flags: &GlobalFlags) -> Result<Self, Failure> {
        let m = match &flags.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        let results = pick(flags.results.clone(), m.results, None, Some(PathBuf::from("results"))).expect("default");
        let build_default = results.value.join(".build");
        let s = Settings {
            corpus: pick(flags.corpus.clone(), m.corpus, None, None),
            workspaces: pick(flags.workspaces.clone(), m.workspaces, None, None),
            snippets: pick(flags.snippets.clone(), m.snippets, None, None),
            build_dir: pick(flags.build_dir.clone(), m.build_dir, None, Some(build_default)).expect("default"),
            results,
            backend: pick(flags.backend.clone(), m.backend, std::env::var(BACKEND_ENV).ok(), Some("openai".into()))
                .expect("default"),
            seed: pick(flags.seed, m.seed, None, Some(0)).expect("default"),
            fuzz_seconds: pick(flags.fuzz_seconds, m.fuzz_seconds, None, Some(60)).expect("default"),
            validation_mode: pick(flags.validation_mode.clone(), m.validation_mode, None, Some("AUTOMATED".into()))
                .expect("default"),
            parallelism: pick(flags.parallelism, m.parallelism, None, Some(1)).expect("default"),
        };
        if s.parallelism.value == 0 {
            return Err(Failure::Config("parallelism must be at least 1".into()));
        }
        if s.fuzz_seconds.value == 0 {
            return Err(Failure::Config("fuzz-seconds must be at least 1".into()));
        }
        Ok(s)
    }

    /// One `config:` line per setting, for stderr.
    pub fn describe(&self) -> String {
        fn line<T: fmt::Debug>(out: &mut String, name: &str, s: &Option<Setting<T>>) {
            match s {
                Some(s) => out.push_str(&format!("config: {name}={:?} ({})\n", s.value, s.source)),
                None => out.push_str(&format!("config: {name} unset\n")),
            }
        }
        let mut out = String::new();
        line(&mut out, "corpus", &self.corpus);
        line(&mut out, "workspaces", &self.workspaces);
        line(&mut out, "results", &Some(self.results.clone()));
        line(&mut out, "snippets", &self.snippets);
        line(&mut out, "build_dir", &Some(self.build_dir.clone()));
        line(&mut out, "backend", &Some(self.backend.clone()));
        line(&mut out, "seed", &Some(self.seed.clone()));
        line(&mut out, "fuzz_seconds", &Some(self.fuzz_seconds.clone()));
        line(&mut out, "validation_mode", &Some(self.validation_mode.clone()));
        line(&mut out, "parallelism", &Some(self.parallelism.clone()));
        out
    }

    pub fn corpus(&self) -> Result<&Path, Failure> {
        self.corpus.as_ref().map(|s| s.value.as_path()).ok_or_else(|| Failure::Config("no corpus given (--corpus)".into()))
    }

    /// Defaults to the corpus file's directory.
    pub fn workspaces(&self) -> Result<PathBuf, Failure> {
        match &self.workspaces {
            Some(s) => Ok(s.value.clone()),
            None => Ok(self.corpus()?.parent().unwrap_or(Path::new(".")).to_path_buf()),
        }
    }
}
