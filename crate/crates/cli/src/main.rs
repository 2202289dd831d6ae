//! `drivergen`: generate, validate, repair and evaluate fuzz drivers.
//!
//! Exit codes: 0 success (a session that solved nothing still succeeds),
//! 1 other failure, 2 configuration or usage error, 3 workspace error,
//! 4 backend error, 130 interrupted.

mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use config::{GlobalFlags, Settings};
use drivergen::dataset::{complexity_score, load_questions, Question, QuestionSet};
use drivergen::knowledge::{build_knowledge, declared_functions, LocalCorpus, SnippetSource, SourceClassifier};
use drivergen::orchestrator::{
    k_preset, run_question, run_sweep, session_file_name, write_atomic, PairStatus, QuestionEnv, SessionLog,
    SessionOptions, Strategy, StrategyConfig, SweepOptions, K_PRESETS,
};
use drivergen::prompting::{LlmClient, MockBackend, MockScenario, ModelConfig, OpenAiBackend, RetryPolicy};
use drivergen::report;
use drivergen::sandbox::{parse_fuzz_log, prepare_workspace, BuildResult, FuzzOptions, Toolchain, Workspace};
use drivergen::triage::{classify_build_failure, classify_runtime_failure, route_fix, RouteMode};
use drivergen::validate::{validate, ValidateOptions, ValidationContext, ValidationMode};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Workspace(String),
    Backend(String),
    Interrupted,
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Workspace(_) => 3,
            Failure::Backend(_) => 4,
            Failure::Interrupted => 130,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) => format!("configuration error: {m}"),
            Failure::Workspace(m) => format!("workspace error: {m}"),
            Failure::Backend(m) => format!("backend error: {m}"),
            Failure::Interrupted => "interrupted".into(),
            Failure::Other(m) => m.clone(),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "drivergen", version, about = "LLM-based fuzz driver generation and evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the question corpus.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Show the knowledge assembled for a question.
    #[command(subcommand)]
    Knowledge(KnowledgeCmd),
    /// Run one strategy on one question and write its session log.
    Generate(GenerateArgs),
    /// Validate a driver against a question's workspace.
    Validate(ValidateArgs),
    /// Classify a saved compiler or fuzzer log and show the fix route.
    Triage(TriageArgs),
    /// Run a grid of configurations over the corpus, resuming finished pairs.
    Sweep(SweepArgs),
    /// Tables and utilities over session logs.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Check the corpus schema and that every workspace exists.
    Validate,
    /// Complexity score of a driver.
    Score {
        driver: PathBuf,
        /// Header whose declarations count as project APIs.
        #[arg(long)]
        header: PathBuf,
    },
}

#[derive(Subcommand)]
enum KnowledgeCmd {
    /// Print declaration, documentation and snippets of a question's API as JSON.
    Snippets {
        #[arg(long)]
        question: u32,
        /// Repository names treated as the project itself.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse()
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    question: u32,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Repetitions; overrides --preset.
    #[arg(long)]
    k: Option<u32>,
    /// single (1), recommended (6) or paper (40).
    #[arg(long, default_value = "single")]
    preset: String,
    #[arg(long, default_value_t = drivergen::orchestrator::DEFAULT_MAX_FIX_ITERATIONS)]
    max_fix_iterations: u32,
}

#[derive(clap::Args)]
struct ValidateArgs {
    driver: PathBuf,
    #[arg(long)]
    question: u32,
    /// Print the whole report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct TriageArgs {
    #[arg(long)]
    driver: PathBuf,
    #[arg(long, required_unless_present = "fuzz_log", conflicts_with = "fuzz_log")]
    build_log: Option<PathBuf>,
    #[arg(long)]
    fuzz_log: Option<PathBuf>,
    /// Header whose declarations count as project APIs.
    #[arg(long)]
    header: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// TOML grid of strategies, models, temperatures and seeds.
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Solved questions per configuration.
    SolveTable {
        dir: PathBuf,
        #[arg(long)]
        csv: bool,
        /// One row per question instead.
        #[arg(long)]
        per_question: bool,
    },
    /// Queries per solution for every session.
    Costs { dir: PathBuf },
    /// Merge drivers into one that dispatches on the first input byte.
    Merge {
        #[arg(required = true)]
        drivers: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Success rates by snippet origin and kind.
    Snippets { dir: PathBuf },
    /// Questions solved within each number of rounds, and the gain per round.
    Rounds {
        dir: PathBuf,
        #[arg(long)]
        k: u32,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    questions: Option<Vec<u32>>,
    strategies: Vec<String>,
    models: Vec<String>,
    temperatures: Vec<f64>,
    seeds: Option<Vec<u64>>,
    k: Option<u32>,
    preset: Option<String>,
    max_fix_iterations: Option<u32>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("drivergen: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::resolve(&cli.global)?;
    eprint!("{}", settings.describe());
    match cli.cmd {
        Command::Dataset(c) => dataset(&settings, c),
        Command::Knowledge(c) => knowledge(&settings, c),
        Command::Generate(a) => generate(&settings, a),
        Command::Validate(a) => validate_cmd(&settings, a),
        Command::Triage(a) => triage(a),
        Command::Sweep(a) => sweep(&settings, a),
        Command::Report(c) => report_cmd(&settings, c),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))
}

fn corpus(settings: &Settings) -> Result<QuestionSet> {
    load_questions(settings.corpus()?).map_err(|e| Failure::Config(e.to_string()))
}

fn question<'a>(qs: &'a QuestionSet, id: u32) -> Result<&'a Question> {
    qs.get(id).ok_or_else(|| Failure::Config(format!("question {id} is not in the corpus")))
}

fn validation_mode(settings: &Settings) -> Result<ValidationMode> {
    settings.validation_mode.value.parse().map_err(Failure::Config)
}

fn project_apis(header: Option<&Path>) -> Result<std::collections::BTreeSet<String>> {
    match header {
        Some(h) => Ok(declared_functions(&read(h)?)),
        None => Ok(Default::default()),
    }
}

fn dataset(settings: &Settings, cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Validate => {
            let qs = corpus(settings)?;
            qs.check_workspaces(&settings.workspaces()?).map_err(|e| Failure::Workspace(e.to_string()))?;
            println!("{} questions ok", qs.len());
        }
        DatasetCmd::Score { driver, header } => {
            let symbols: HashSet<String> = project_apis(Some(&header))?.into_iter().collect();
            let score = complexity_score(&read(&driver)?, &symbols).map_err(|e| Failure::Config(e.to_string()))?;
            println!("{score}");
        }
    }
    Ok(())
}

fn knowledge(settings: &Settings, cmd: KnowledgeCmd) -> Result<()> {
    let KnowledgeCmd::Snippets { question: id, variants } = cmd;
    let qs = corpus(settings)?;
    let q = question(&qs, id)?;
    let classifier = SourceClassifier::new(q.project.clone()).with_variants(variants);
    let source = settings.snippets.as_ref().map(|s| LocalCorpus::new(s.value.clone()));
    let k = build_knowledge(q, &settings.workspaces()?, source.as_ref().map(|c| c as &dyn SnippetSource), &classifier)
        .map_err(|e| Failure::Workspace(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&k).expect("knowledge serializes"));
    Ok(())
}

fn client(spec: &str) -> Result<(LlmClient, String)> {
    if let Some(path) = spec.strip_prefix("mock:") {
        let scenario = MockScenario::load(Path::new(path)).map_err(Failure::Config)?;
        let c = LlmClient::new(RetryPolicy::default(), 8).with_backend("mock", Arc::new(MockBackend::new(scenario)));
        return Ok((c, "mock".into()));
    }
    if spec == "openai" {
        let b = OpenAiBackend::from_env().map_err(|e| Failure::Backend(e.to_string()))?;
        return Ok((LlmClient::new(RetryPolicy::default(), 8).with_backend("openai", Arc::new(b)), "openai".into()));
    }
    Err(Failure::Config(format!("unknown backend '{spec}' (expected mock:<scenario.json> or openai)")))
}

fn toolchain() -> Result<Toolchain> {
    let tc = Toolchain::detect();
    if !tc.supports_libfuzzer() {
        return Err(Failure::Workspace(format!("{} cannot build libFuzzer binaries", tc.cc)));
    }
    Ok(tc)
}

fn workspace(settings: &Settings, q: &Question) -> Result<Workspace> {
    let project_dir = q.project_dir(&settings.workspaces()?);
    if !project_dir.is_dir() {
        return Err(Failure::Workspace(format!("project directory {} does not exist", project_dir.display())));
    }
    let out = settings.build_dir.value.join(&q.project);
    fs::create_dir_all(&out).map_err(|e| Failure::Workspace(format!("{}: {e}", out.display())))?;
    let out = out.canonicalize().map_err(|e| Failure::Workspace(e.to_string()))?;
    prepare_workspace(&project_dir, &q.build_script, &out).map_err(|e| Failure::Workspace(e.to_string()))
}

fn validate_options(settings: &Settings, tc: Toolchain) -> ValidateOptions {
    ValidateOptions { fuzz: FuzzOptions::with_duration(settings.fuzz_seconds.value), toolchain: tc }
}

fn question_env(settings: &Settings, qs: &QuestionSet, q: &Question, ws: Workspace) -> Result<QuestionEnv> {
    let source = settings.snippets.as_ref().map(|s| LocalCorpus::new(s.value.clone()));
    let options = validate_options(settings, toolchain()?);
    QuestionEnv::sandboxed(qs, q, &settings.workspaces()?, ws, source.as_ref().map(|c| c as &dyn SnippetSource), options)
        .map_err(Failure::Workspace)
}

fn repeat_k(k: Option<u32>, preset: &str) -> Result<u32> {
    match k {
        Some(k) => Ok(k),
        None => k_preset(preset).ok_or_else(|| {
            let names: Vec<&str> = K_PRESETS.iter().map(|(n, _)| *n).collect();
            Failure::Config(format!("unknown preset '{preset}' (expected one of {})", names.join(", ")))
        }),
    }
}

fn all_aborted_by_backend(log: &SessionLog) -> bool {
    !log.repetitions.is_empty()
        && log.repetitions.iter().all(|r| r.aborted.as_deref().is_some_and(|a| a.starts_with("backend error")))
}

fn generate(settings: &Settings, a: GenerateArgs) -> Result<()> {
    let qs = corpus(settings)?;
    let q = question(&qs, a.question)?;
    let mut sc = StrategyConfig::new(a.strategy, repeat_k(a.k, &a.preset)?, settings.seed.value);
    sc.max_fix_iterations = a.max_fix_iterations;
    sc.validate().map_err(Failure::Config)?;
    let mode = validation_mode(settings)?;
    let (client, backend_id) = client(&settings.backend.value)?;
    let mc = ModelConfig::new(&backend_id, &a.model, a.temperature);
    mc.validate().map_err(Failure::Config)?;
    let ws = workspace(settings, q)?;
    let env = question_env(settings, &qs, q, ws)?;
    let opts = SessionOptions { validation_mode: mode, ..Default::default() };
    let log = run_question(q, &env, &sc, &mc, &client, &opts);
    let dir = &settings.results.value;
    fs::create_dir_all(dir).map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))?;
    let path = dir.join(session_file_name(q.id, &sc, &mc));
    write_atomic(&path, &log.to_json()).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
    println!("{} log={}", log.summary_line(), path.display());
    if all_aborted_by_backend(&log) {
        return Err(Failure::Backend(log.repetitions[0].aborted.clone().unwrap_or_default()));
    }
    Ok(())
}

fn validate_cmd(settings: &Settings, a: ValidateArgs) -> Result<()> {
    let qs = corpus(settings)?;
    let q = question(&qs, a.question)?;
    let source = read(&a.driver)?;
    let mode = validation_mode(settings)?;
    let ctx = ValidationContext::for_question(&qs, q).map_err(|e| Failure::Config(e.to_string()))?;
    let ws = workspace(settings, q)?;
    let mut options = validate_options(settings, toolchain()?);
    options.fuzz.seed = Some(settings.seed.value).filter(|s| *s != 0);
    let r = validate(&source, &ctx, &ws, mode, &options).map_err(|e| Failure::Workspace(e.to_string()))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    } else {
        let step = r.failed_step.map(|s| format!("{s:?}")).unwrap_or_else(|| "-".into());
        let reason = r.evidence.reason.clone().unwrap_or_else(|| "-".into());
        println!("verdict={:?} failed_step={step} automated_only={} reason={reason:?}", r.verdict, r.automated_only);
    }
    Ok(())
}

fn triage(a: TriageArgs) -> Result<()> {
    let source = read(&a.driver)?;
    let apis = project_apis(a.header.as_deref())?;
    let mut verdict = match (&a.build_log, &a.fuzz_log) {
        (Some(log), _) => classify_build_failure(&BuildResult::failed_from_log(&read(log)?), &source),
        (_, Some(log)) => classify_runtime_failure(&parse_fuzz_log(&read(log)?), Some(&source))
            .map_err(|e| Failure::Config(e.to_string()))?,
        _ => unreachable!("clap requires one log"),
    };
    verdict.attach_root_cause(&source, &apis);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let route = route_fix(&verdict, None, &mut rng, RouteMode::BasicOnly).map_err(|e| Failure::Other(e.to_string()))?;
    let out = serde_json::json!({ "verdict": verdict, "route": route });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn load_grid(path: &Path, settings: &Settings, backend_id: &str) -> Result<(Grid, Vec<(StrategyConfig, ModelConfig)>)> {
    let grid: Grid = toml::from_str(&read(path)?).map_err(|e| Failure::Config(format!("grid {}: {e}", path.display())))?;
    let k = repeat_k(grid.k, grid.preset.as_deref().unwrap_or("single"))?;
    let seeds = grid.seeds.clone().unwrap_or_else(|| vec![settings.seed.value]);
    if grid.strategies.is_empty() || grid.models.is_empty() || grid.temperatures.is_empty() || seeds.is_empty() {
        return Err(Failure::Config(format!("grid {} has an empty axis", path.display())));
    }
    let mut configs = Vec::new();
    for s in &grid.strategies {
        let strategy: Strategy = s.parse().map_err(Failure::Config)?;
        for m in &grid.models {
            for &t in &grid.temperatures {
                for &seed in &seeds {
                    let mut sc = StrategyConfig::new(strategy, k, seed);
                    if let Some(x) = grid.max_fix_iterations {
                        sc.max_fix_iterations = x;
                    }
                    sc.validate().map_err(Failure::Config)?;
                    let mc = ModelConfig::new(backend_id, m, t);
                    mc.validate().map_err(Failure::Config)?;
                    configs.push((sc, mc));
                }
            }
        }
    }
    Ok((grid, configs))
}

fn sweep(settings: &Settings, a: SweepArgs) -> Result<()> {
    let mut qs = corpus(settings)?;
    let (client, backend_id) = client(&settings.backend.value)?;
    let (grid, configs) = load_grid(&a.grid, settings, &backend_id)?;
    if let Some(ids) = &grid.questions {
        for id in ids {
            question(&qs, *id)?;
        }
        qs.questions.retain(|q| ids.contains(&q.id));
    }
    let mode = validation_mode(settings)?;
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = cancel.clone();
        let _ = ctrlc::set_handler(move || {
            eprintln!("drivergen: interrupt received, finishing running sessions");
            cancel.store(true, Ordering::SeqCst);
        });
    }
    let workspaces: Mutex<HashMap<String, std::result::Result<Workspace, String>>> = Mutex::new(HashMap::new());
    let prepare = |q: &Question| -> std::result::Result<QuestionEnv, String> {
        let ws = {
            let mut cache = workspaces.lock().unwrap();
            cache.entry(q.project.clone()).or_insert_with(|| workspace(settings, q).map_err(|f| f.message())).clone()?
        };
        question_env(settings, &qs, q, ws).map_err(|f| f.message())
    };
    let opts = SweepOptions {
        results_dir: &settings.results.value,
        parallelism: settings.parallelism.value,
        session: SessionOptions { validation_mode: mode, ..Default::default() },
        cancel: Some(&cancel),
        on_session: None,
    };
    let report = run_sweep(&qs, &configs, &client, prepare, &opts)
        .map_err(|e| Failure::Other(format!("results directory: {e}")))?;
    for p in &report.pairs {
        match (&p.status, &p.log) {
            (PairStatus::Failed(e), _) => {
                println!("question={} config={} status=failed error={e:?}", p.question_id, p.config_index)
            }
            (status, Some(log)) => {
                let s = if *status == PairStatus::Executed { "executed" } else { "skipped" };
                println!("{} status={s} log={}", log.summary_line(), p.path.display());
            }
            (_, None) => {}
        }
    }
    let executed = report.count(|s| *s == PairStatus::Executed);
    let skipped = report.count(|s| *s == PairStatus::Skipped);
    let failed = report.count(|s| matches!(s, PairStatus::Failed(_)));
    eprintln!("sweep: pairs={} executed={executed} skipped={skipped} failed={failed}", report.pairs.len());
    if cancel.load(Ordering::SeqCst) {
        return Err(Failure::Interrupted);
    }
    Ok(())
}

/// The configured corpus, or one synthesized from the question ids in the logs.
fn table_questions(settings: &Settings, logs: &[SessionLog]) -> Result<QuestionSet> {
    if settings.corpus.is_some() {
        return corpus(settings);
    }
    let mut ids: Vec<(u32, String)> = logs.iter().map(|l| (l.question_id, l.api_name.clone())).collect();
    ids.sort();
    ids.dedup_by_key(|(id, _)| *id);
    let questions = ids
        .into_iter()
        .map(|(id, api_name)| Question {
            id,
            project: String::new(),
            api_name,
            header_path: PathBuf::new(),
            build_script: PathBuf::new(),
            declaration_override: None,
            doc_override: None,
            complexity_score: None,
            semantic_check_spec: None,
            bug_filter_spec: None,
        })
        .collect();
    Ok(QuestionSet { questions, corpus_root: PathBuf::from(".") })
}

fn logs(dir: &Path) -> Result<Vec<SessionLog>> {
    report::load_logs(dir).map_err(|e| Failure::Config(e.to_string()))
}

fn report_cmd(settings: &Settings, cmd: ReportCmd) -> Result<()> {
    match cmd {
        ReportCmd::SolveTable { dir, csv, per_question } => {
            let logs = logs(&dir)?;
            let qs = table_questions(settings, &logs)?;
            let t = report::solve_table(&logs, &qs);
            let out = match (per_question, csv) {
                (true, _) => t.per_question_csv(),
                (false, true) => t.to_csv(),
                (false, false) => t.to_text(),
            };
            print!("{out}");
        }
        ReportCmd::Costs { dir } => print!("{}", report::cost_lines(&logs(&dir)?)),
        ReportCmd::Merge { drivers, output } => {
            let sources = drivers.iter().map(|d| read(d)).collect::<Result<Vec<_>>>()?;
            let merged = report::merge_drivers(&sources).map_err(|e| Failure::Config(e.to_string()))?;
            fs::write(&output, merged).map_err(|e| Failure::Other(format!("{}: {e}", output.display())))?;
            println!("merged {} drivers into {}", sources.len(), output.display());
        }
        ReportCmd::Snippets { dir } => {
            println!("origin,kind,queries,effective,query_rate,questions,questions_solved,question_rate");
            for ((origin, kind), r) in report::snippet_source_breakdown(&logs(&dir)?) {
                println!(
                    "{origin:?},{kind:?},{},{},{:.4},{},{},{:.4}",
                    r.queries,
                    r.effective,
                    r.query_rate(),
                    r.questions,
                    r.questions_solved,
                    r.question_rate()
                );
            }
        }
        ReportCmd::Rounds { dir, k } => {
            let logs = logs(&dir)?;
            let mut groups: BTreeMap<report::ConfigKey, Vec<&SessionLog>> = BTreeMap::new();
            for l in &logs {
                groups.entry(report::ConfigKey::of(l)).or_default().push(l);
            }
            println!("strategy,model,temperature,round,solved,gain");
            for (key, group) in groups {
                let rslt = report::solved_by_round(group, k);
                for (i, solved) in rslt.iter().enumerate() {
                    let gain = match report::round_gain(&rslt, i + 1) {
                        Ok(g) => format!("{g:.4}"),
                        Err(_) => "-".into(),
                    };
                    println!("{},{},{},{},{solved},{gain}", key.strategy, key.model, key.temperature, i + 1);
                }
            }
        }
    }
    Ok(())
}
