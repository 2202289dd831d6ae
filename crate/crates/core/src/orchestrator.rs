//! Running prompt strategies over questions: generation, validation and the
//! iterative fix loop, with per-repetition seeded randomness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Question, QuestionSet};
use crate::knowledge::{
    build_knowledge, declared_functions, extract_declaration, extract_documentation, ApiKnowledge, Origin,
    SnippetKind, SnippetSource, SourceClassifier,
};
use crate::prompting::{
    extract_code, render_fix_prompt, render_generation_prompt, BackendError, GenerationKind, LlmClient, LlmExchange,
    ModelConfig, Prompt, PromptSettings,
};
use crate::triage::{route_fix, triage_report, RouteMode, Supplemental, TriageVerdict};
use crate::sandbox::{ExitKind, Workspace};
use crate::validate::{
    DriverValidator, FailedStep, FilterDecision, SandboxValidator, ValidateOptions, ValidationContext, ValidationMode,
    ValidationReport, Verdict,
};

pub const DEFAULT_MAX_FIX_ITERATIONS: u32 = 5;

/// Named repetition counts: one shot, the recommended six, and paper scale.
pub const K_PRESETS: [(&str, u32); 3] = [("single", 1), ("recommended", 6), ("paper", 40)];

pub fn k_preset(name: &str) -> Option<u32> {
    K_PRESETS.iter().find(|(n, _)| *n == name).map(|(_, k)| *k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "NAIVE_K")]
    NaiveK,
    #[serde(rename = "BACTX_K")]
    BactxK,
    #[serde(rename = "DOCTX_K")]
    DoctxK,
    #[serde(rename = "UGCTX_K")]
    UgctxK,
    #[serde(rename = "BA_ITER_K")]
    BaIterK,
    #[serde(rename = "ALL_ITER_K")]
    AllIterK,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::NaiveK, Strategy::BactxK, Strategy::DoctxK, Strategy::UgctxK, Strategy::BaIterK, Strategy::AllIterK];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NaiveK => "NAIVE_K",
            Strategy::BactxK => "BACTX_K",
            Strategy::DoctxK => "DOCTX_K",
            Strategy::UgctxK => "UGCTX_K",
            Strategy::BaIterK => "BA_ITER_K",
            Strategy::AllIterK => "ALL_ITER_K",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, Strategy::BaIterK | Strategy::AllIterK)
    }

    fn route_mode(self) -> RouteMode {
        match self {
            Strategy::AllIterK => RouteMode::AllOptions,
            _ => RouteMode::BasicOnly,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    /// Accepts `BA_ITER_K`, `ba-iter-k`, `ba_iter` and similar spellings.
    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        let norm = norm.strip_suffix("_K").unwrap_or(&norm);
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().strip_suffix("_K") == Some(norm))
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
                format!("unknown strategy '{s}' (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub repeat_k: u32,
    pub max_fix_iterations: u32,
    pub rng_seed: u64,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, repeat_k: u32, rng_seed: u64) -> Self {
        StrategyConfig { strategy, repeat_k, max_fix_iterations: DEFAULT_MAX_FIX_ITERATIONS, rng_seed }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.repeat_k == 0 {
            return Err("repeat_k must be at least 1".into());
        }
        if self.max_fix_iterations == 0 {
            return Err("max_fix_iterations must be at least 1".into());
        }
        Ok(())
    }

    /// Most queries one repetition may issue.
    pub fn query_budget(&self) -> u32 {
        if self.strategy.is_iterative() {
            1 + self.max_fix_iterations
        } else {
            1
        }
    }

    /// The generator for repetition `index`: one ChaCha stream per repetition.
    pub fn repetition_rng(&self, index: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Where a usage snippet came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetRef {
    pub source_path: String,
    pub origin: Origin,
    pub kind: SnippetKind,
}

/// The reproducible part of a validation report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_step: Option<FailedStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_kind: Option<ExitKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triage: Option<TriageVerdict>,
}

impl AttemptOutcome {
    fn from_report(r: &ValidationReport) -> Self {
        AttemptOutcome {
            verdict: r.verdict,
            failed_step: r.failed_step,
            exit_kind: r.evidence.fuzz.as_ref().map(|f| f.exit_kind),
            filter: r.evidence.filter.clone(),
            reason: r.evidence.reason.clone(),
            triage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    /// 1-based repetition.
    pub round: u32,
    /// 0 for the generation query, then 1.. for fix queries.
    pub iteration: u32,
    pub prompt: Prompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<LlmExchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<AttemptOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<SnippetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplemental: Option<Supplemental>,
    /// Backend, extraction or validation failure that ended the repetition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Attempt {
    pub fn is_effective(&self) -> bool {
        self.outcome.as_ref().is_some_and(|o| o.verdict == Verdict::Effective)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repetition {
    pub round: u32,
    pub queries: u32,
    pub solved: bool,
    /// Iteration whose candidate was effective, counting the generation query as 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solved_at_iteration: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub prompt: u64,
    pub response: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub question_id: u32,
    pub api_name: String,
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub validation_mode: ValidationMode,
    pub attempts: Vec<Attempt>,
    pub repetitions: Vec<Repetition>,
    pub solved: bool,
    pub solutions: u32,
    pub queries: u32,
    pub tokens_total: TokenTotals,
}

impl SessionLog {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("session log serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Attempts of one repetition.
    pub fn round(&self, round: u32) -> impl Iterator<Item = &Attempt> {
        self.attempts.iter().filter(move |a| a.round == round)
    }

    /// The stdout summary line.
    pub fn summary_line(&self) -> String {
        let cost = if self.solutions == 0 {
            "inf".to_string()
        } else {
            format!("{:.2}", self.queries as f64 / self.solutions as f64)
        };
        format!(
            "question={} strategy={} model={} temperature={} solved={} solutions={} queries={} cost={}",
            self.question_id,
            self.strategy.strategy,
            self.model.model_name,
            self.model.temperature,
            self.solved,
            self.solutions,
            self.queries,
            cost
        )
    }
}

/// Everything a session needs about one question.
pub struct QuestionEnv {
    pub knowledge: ApiKnowledge,
    /// Knowledge about other project APIs, for fix supplemental info.
    pub related: BTreeMap<String, ApiKnowledge>,
    pub project_apis: BTreeSet<String>,
    pub validator: Arc<dyn DriverValidator>,
}

impl QuestionEnv {
    /// Knowledge, project API set and a sandbox validator for `q`, using an
    /// already prepared workspace of its project.
    pub fn sandboxed(
        qs: &QuestionSet,
        q: &Question,
        workspaces_root: &Path,
        workspace: Workspace,
        snippets: Option<&dyn SnippetSource>,
        options: ValidateOptions,
    ) -> Result<QuestionEnv, String> {
        let classifier = SourceClassifier::new(q.project.clone());
        let knowledge = build_knowledge(q, workspaces_root, snippets, &classifier).map_err(|e| e.to_string())?;
        let header_path = q.project_dir(workspaces_root).join(&q.header_path);
        let header = fs::read_to_string(&header_path).map_err(|e| format!("reading {}: {e}", header_path.display()))?;
        let project_apis = declared_functions(&header);
        let related = project_apis
            .iter()
            .filter(|a| **a != q.api_name)
            .filter_map(|a| {
                let declaration = extract_declaration(&header, a).ok()?;
                let k = ApiKnowledge {
                    api_name: a.clone(),
                    header_include: knowledge.header_include.clone(),
                    declaration,
                    documentation: extract_documentation(&header, a),
                    snippets: Vec::new(),
                };
                Some((a.clone(), k))
            })
            .collect();
        let context = ValidationContext::for_question(qs, q).map_err(|e| e.to_string())?;
        let validator = SandboxValidator { workspace, context, options };
        Ok(QuestionEnv { knowledge, related, project_apis, validator: Arc::new(validator) })
    }

    fn knowledge_for(&self, api: Option<&str>) -> &ApiKnowledge {
        match api {
            Some(a) if a != self.knowledge.api_name => self.related.get(a).unwrap_or(&self.knowledge),
            _ => &self.knowledge,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub prompt: PromptSettings,
    /// Mode deciding whether a candidate counts as a solution. The fix loop
    /// itself only reacts to compile and fuzzing failures.
    pub validation_mode: ValidationMode,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions { prompt: PromptSettings::default(), validation_mode: ValidationMode::Automated }
    }
}

fn libfuzzer_seed(rng: &mut ChaCha8Rng) -> u64 {
    // libFuzzer treats seed 0 as "pick one"
    rng.gen_range(1..=u32::MAX as u64)
}

struct RoundState<'a> {
    q: &'a Question,
    env: &'a QuestionEnv,
    sc: &'a StrategyConfig,
    mc: &'a ModelConfig,
    client: &'a LlmClient,
    opts: &'a SessionOptions,
}

impl RoundState<'_> {
    fn tag(&self, p: Prompt, round: u32, iteration: u32) -> Prompt {
        p.tag("question", self.q.id).tag("strategy", self.sc.strategy).tag("round", round).tag("iteration", iteration)
    }

    fn initial_prompt(&self, rng: &mut ChaCha8Rng) -> (Prompt, Option<SnippetRef>) {
        let kind = match self.sc.strategy {
            Strategy::NaiveK => GenerationKind::Naive,
            Strategy::BactxK | Strategy::BaIterK => GenerationKind::Bactx,
            Strategy::DoctxK => GenerationKind::Doctx,
            Strategy::UgctxK => GenerationKind::Ugctx,
            Strategy::AllIterK => {
                *[GenerationKind::Bactx, GenerationKind::Doctx, GenerationKind::Ugctx].choose(rng).expect("non-empty")
            }
        };
        let k = &self.env.knowledge;
        let snippet = if kind == GenerationKind::Ugctx { k.snippets.choose(rng) } else { None };
        let prompt = render_generation_prompt(kind, k, snippet, &self.opts.prompt);
        let used = (prompt.tags.get("context").map(String::as_str) == Some("UGCTX")).then_some(snippet).flatten();
        let snippet_ref =
            used.map(|s| SnippetRef { source_path: s.source_path.clone(), origin: s.origin, kind: s.kind });
        (prompt, snippet_ref)
    }

    fn run(&self, round: u32, attempts: &mut Vec<Attempt>) -> Repetition {
        let mut rng = self.sc.repetition_rng(round);
        let mut rep = Repetition { round, queries: 0, solved: false, solved_at_iteration: None, aborted: None };
        let (mut prompt, snippet) = self.initial_prompt(&mut rng);
        let mut snippet = snippet;
        let mut supplemental = None;
        let budget = self.sc.query_budget();
        for iteration in 0..budget {
            let tagged = self.tag(prompt.clone(), round, iteration);
            let mut attempt = Attempt {
                round,
                iteration,
                prompt: tagged.clone(),
                exchange: None,
                candidate: None,
                outcome: None,
                snippet: snippet.take(),
                supplemental: supplemental.take(),
                error: None,
            };
            let exchange = match self.client.complete(&tagged, self.mc) {
                Ok(x) => x,
                Err(e) => {
                    rep.aborted = Some(backend_abort(&e));
                    attempt.error = Some(e.to_string());
                    attempts.push(attempt);
                    break;
                }
            };
            rep.queries += 1;
            let code = extract_code(&exchange.response_text);
            attempt.exchange = Some(exchange);
            let candidate = match code {
                Ok(c) => c,
                Err(e) => {
                    attempt.error = Some(e.to_string());
                    attempts.push(attempt);
                    break;
                }
            };
            attempt.candidate = Some(candidate.clone());
            let report = match self.env.validator.validate(&candidate, self.opts.validation_mode, Some(libfuzzer_seed(&mut rng))) {
                Ok(r) => r,
                Err(e) => {
                    rep.aborted = Some(format!("validation error: {e}"));
                    attempt.error = Some(e.to_string());
                    attempts.push(attempt);
                    break;
                }
            };
            let mut outcome = AttemptOutcome::from_report(&report);
            if report.is_effective() {
                attempt.outcome = Some(outcome);
                attempts.push(attempt);
                rep.solved = true;
                rep.solved_at_iteration = Some(iteration + 1);
                break;
            }
            let stop = !self.sc.strategy.is_iterative()
                || iteration + 1 >= budget
                || report.failed_step == Some(FailedStep::Semantic);
            if stop {
                attempt.outcome = Some(outcome);
                attempts.push(attempt);
                break;
            }
            let verdict = match triage_report(&report, &candidate, &self.env.project_apis) {
                Ok(v) => v,
                Err(e) => {
                    attempt.error = Some(e.to_string());
                    attempt.outcome = Some(outcome);
                    attempts.push(attempt);
                    break;
                }
            };
            let knowledge = self.env.knowledge_for(verdict.root_cause_api.as_deref());
            let route = route_fix(&verdict, Some(knowledge), &mut rng, self.sc.strategy.route_mode());
            outcome.triage = Some(verdict);
            attempt.outcome = Some(outcome);
            attempts.push(attempt);
            let route = match route {
                Ok(r) => r,
                Err(e) => {
                    if let Some(last) = attempts.last_mut() {
                        last.error = Some(e.to_string());
                    }
                    break;
                }
            };
            prompt = match render_fix_prompt(route.template, &candidate, &route.fields, &self.opts.prompt) {
                Ok(p) => p,
                Err(e) => {
                    if let Some(last) = attempts.last_mut() {
                        last.error = Some(e.to_string());
                    }
                    break;
                }
            };
            supplemental = route.supplemental;
        }
        rep
    }
}

fn backend_abort(e: &BackendError) -> String {
    format!("backend error: {e}")
}

/// Runs `repeat_k` independent repetitions of the strategy for one question.
pub fn run_question(
    q: &Question,
    env: &QuestionEnv,
    sc: &StrategyConfig,
    mc: &ModelConfig,
    client: &LlmClient,
    opts: &SessionOptions,
) -> SessionLog {
    let state = RoundState { q, env, sc, mc, client, opts };
    let mut attempts = Vec::new();
    let mut repetitions = Vec::new();
    for round in 1..=sc.repeat_k {
        repetitions.push(state.run(round, &mut attempts));
    }
    let exchanges = attempts.iter().filter_map(|a| a.exchange.as_ref());
    let tokens_total = exchanges.fold(TokenTotals::default(), |t, x| TokenTotals {
        prompt: t.prompt + x.prompt_tokens,
        response: t.response + x.response_tokens,
    });
    let solutions = attempts.iter().filter(|a| a.is_effective()).count() as u32;
    SessionLog {
        question_id: q.id,
        api_name: q.api_name.clone(),
        model: mc.clone(),
        strategy: sc.clone(),
        validation_mode: opts.validation_mode,
        queries: repetitions.iter().map(|r| r.queries).sum(),
        solved: solutions > 0,
        solutions,
        attempts,
        repetitions,
        tokens_total,
    }
}

// ---------------------------------------------------------------------------
// Sweeps

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' }).collect()
}

/// `q{id}_{strategy}_{model}_t{temperature}_s{seed}.json`
pub fn session_file_name(question_id: u32, sc: &StrategyConfig, mc: &ModelConfig) -> String {
    format!(
        "q{}_{}_{}_t{}_s{}.json",
        question_id,
        sc.strategy,
        sanitize(&mc.model_name),
        mc.temperature,
        sc.rng_seed
    )
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairStatus {
    Executed,
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub question_id: u32,
    pub config_index: usize,
    pub path: PathBuf,
    pub status: PairStatus,
    pub log: Option<SessionLog>,
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub pairs: Vec<PairResult>,
}

impl SweepReport {
    pub fn logs(&self) -> Vec<&SessionLog> {
        self.pairs.iter().filter_map(|p| p.log.as_ref()).collect()
    }

    pub fn count(&self, f: impl Fn(&PairStatus) -> bool) -> usize {
        self.pairs.iter().filter(|p| f(&p.status)).count()
    }
}

pub struct SweepOptions<'a> {
    pub results_dir: &'a Path,
    pub parallelism: usize,
    pub session: SessionOptions,
    /// Checked before each pair starts; set it to stop after in-flight sessions.
    pub cancel: Option<&'a AtomicBool>,
    /// Called with each finished session.
    pub on_session: Option<&'a (dyn Fn(&SessionLog) + Sync)>,
}

/// Runs every (question, config) pair, persisting each log as it completes.
/// Pairs whose log file already exists are loaded instead of rerun.
pub fn run_sweep<P>(
    qs: &QuestionSet,
    configs: &[(StrategyConfig, ModelConfig)],
    client: &LlmClient,
    prepare: P,
    opts: &SweepOptions<'_>,
) -> std::io::Result<SweepReport>
where
    P: Fn(&Question) -> Result<QuestionEnv, String> + Sync,
{
    fs::create_dir_all(opts.results_dir)?;
    let pairs: Vec<(&Question, usize)> =
        qs.questions.iter().flat_map(|q| (0..configs.len()).map(move |i| (q, i))).collect();
    let envs: Mutex<BTreeMap<u32, Arc<Result<QuestionEnv, String>>>> = Mutex::new(BTreeMap::new());
    let env_for = |q: &Question| {
        let mut cache = envs.lock().unwrap();
        if let Some(e) = cache.get(&q.id) {
            return e.clone();
        }
        let e = Arc::new(prepare(q));
        cache.insert(q.id, e.clone());
        e
    };
    let run_pair = |&(q, i): &(&Question, usize)| -> PairResult {
        let (sc, mc) = &configs[i];
        let path = opts.results_dir.join(session_file_name(q.id, sc, mc));
        let result = |status, log| PairResult { question_id: q.id, config_index: i, path: path.clone(), status, log };
        if path.is_file() {
            return match fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| {
                SessionLog::from_json(&t).map_err(|e| e.to_string())
            }) {
                Ok(log) => result(PairStatus::Skipped, Some(log)),
                Err(e) => result(PairStatus::Failed(format!("unreadable log {}: {e}", path.display())), None),
            };
        }
        if opts.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            return result(PairStatus::Failed("cancelled".into()), None);
        }
        let env = env_for(q);
        let env = match env.as_ref() {
            Ok(e) => e,
            Err(e) => return result(PairStatus::Failed(e.clone()), None),
        };
        let log = run_question(q, env, sc, mc, client, &opts.session);
        if let Err(e) = write_atomic(&path, &log.to_json()) {
            return result(PairStatus::Failed(format!("writing {}: {e}", path.display())), Some(log));
        }
        if let Some(f) = opts.on_session {
            f(&log);
        }
        result(PairStatus::Executed, Some(log))
    };
    let pairs_out = if opts.parallelism <= 1 {
        pairs.iter().map(run_pair).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallelism)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        pool.install(|| pairs.par_iter().map(run_pair).collect())
    };
    Ok(SweepReport { pairs: pairs_out })
}
