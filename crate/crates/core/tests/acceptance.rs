mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::fake::FakeValidator;
use drivergen::dataset::{load_questions, parse_questions, QuestionSet};
use drivergen::knowledge::{
    collect_snippets, dedup_snippets, jaccard, ApiKnowledge, Origin, Snippet, SnippetKind, SourceClassifier,
};
use drivergen::orchestrator::{
    run_question, QuestionEnv, SessionLog, SessionOptions, Strategy, StrategyConfig, TokenTotals,
};
use drivergen::prompting::{
    render_fix_prompt, FixTemplateId, LlmClient, MockBackend, MockEntry, MockError, MockScenario, ModelConfig,
    Placeholder, PlaceholderMap, PromptSettings, RetryPolicy,
};
use drivergen::report::{cost, merge_drivers, round_gain, solve_table};
use drivergen::sandbox::{build, fuzz, parse_fuzz_log, BuildResult, FuzzOptions};
use drivergen::triage::{classify_build_failure, classify_runtime_failure, route_fix, Category, RouteMode};
use drivergen::validate::{
    run_with_hooks, validate, Check, Expectation, FailedStep, FilterDecision, HookEvent, ValidateOptions,
    ValidationContext, ValidationMode, Verdict,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn corpus() -> QuestionSet {
    load_questions(&common::fixtures().join("corpus.json")).unwrap()
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(common::fixtures().join(rel)).unwrap()
}

fn within(started: Instant, limit: Duration) -> Outcome {
    let took = started.elapsed();
    ensure!(took <= limit, "took {took:?}, limit {limit:?}");
    Ok(())
}

/// Rejoins table rows wrapped with a trailing backslash.
fn join_wrapped(raw: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut pending: Option<String> = None;
    for line in raw.lines() {
        let line = match pending.take() {
            Some(head) => format!("{head} {}", line.trim_start()),
            None => line.to_string(),
        };
        match line.trim_end().strip_suffix('\\') {
            Some(head) => pending = Some(head.trim_end().to_string()),
            None => out.push(line),
        }
    }
    out.extend(pending);
    out.join("\n")
}

fn fix_prompt_fidelity() -> Outcome {
    let started = Instant::now();
    for t in FixTemplateId::ALL {
        let raw = read(&format!("fix_templates/{}.txt", t.name()));
        let joined = join_wrapped(&raw);
        let mut fields = PlaceholderMap::new();
        let mut expected = joined.trim_end().to_string();
        for p in Placeholder::ALL {
            let slot = format!("${{{}}}", p.name());
            if expected.contains(&slot) {
                let sentinel = format!("<<sentinel-{}>>", p.name());
                expected = expected.replace(&slot, &sentinel);
                fields.insert(p, sentinel);
            }
        }
        let driver = fields.remove(&Placeholder::DriverCode).ok_or("no driver slot")?;
        let p = render_fix_prompt(t, &driver, &fields, &PromptSettings::default()).map_err(|e| e.to_string())?;
        ensure!(p.user_message == expected, "{t} differs:\n{}\n---\n{expected}", p.user_message);
    }
    within(started, Duration::from_secs(1))
}

fn end_to_end_session() -> Outcome {
    let started = Instant::now();
    let ws = common::demo_workspace().ok_or("no libFuzzer toolchain")?;
    let qs = corpus();
    let q = qs.get(1).unwrap();
    let options = ValidateOptions { fuzz: FuzzOptions::with_duration(10), toolchain: common::toolchain() };
    let env = QuestionEnv::sandboxed(&qs, q, &common::fixtures(), ws.clone(), None, options)?;
    let run = || {
        let scenario = MockScenario::load(&common::fixtures().join("scenarios/ba_iter_demo.json")).unwrap();
        let client = LlmClient::new(RetryPolicy::no_backoff(1), 1).with_backend("mock", Arc::new(MockBackend::new(scenario)));
        let sc = StrategyConfig::new(Strategy::BaIterK, 1, 7);
        run_question(q, &env, &sc, &ModelConfig::new("mock", "mock", 0.5), &client, &SessionOptions::default())
    };
    let log = run();
    ensure!(log.solved && log.queries == 3, "solved={} queries={}", log.solved, log.queries);
    ensure!(log.repetitions[0].solved_at_iteration == Some(3), "solved at {:?}", log.repetitions[0].solved_at_iteration);
    ensure!(run().to_json() == log.to_json(), "rerun differs");
    within(started, Duration::from_secs(180))
}

fn validation_pipeline() -> Outcome {
    let started = Instant::now();
    let ws = common::demo_workspace().ok_or("no libFuzzer toolchain")?;
    let qs = corpus();
    let opts = ValidateOptions {
        fuzz: FuzzOptions { seed: Some(1), ..FuzzOptions::with_duration(10) },
        toolchain: common::toolchain(),
    };
    let run = |driver: &str, q: u32, mode| {
        let ctx = ValidationContext::for_question(&qs, qs.get(q).unwrap()).unwrap();
        validate(&common::demo_driver(driver), &ctx, ws, mode, &opts).map_err(|e| e.to_string())
    };
    let r = run("noop.c", 1, ValidationMode::Automated)?;
    ensure!(
        r.failed_step == Some(FailedStep::FuzzBehavior) && r.evidence.reason.as_deref() == Some("no coverage progress"),
        "no-op: {:?} {:?}",
        r.failed_step,
        r.evidence.reason
    );
    let r = run("driver_crash.c", 1, ValidationMode::Automated)?;
    ensure!(
        r.failed_step == Some(FailedStep::FuzzBehavior) && r.evidence.filter == Some(FilterDecision::DriverFault),
        "driver crash: {:?} {:?}",
        r.failed_step,
        r.evidence.filter
    );
    let r = run("planted_bug.c", 1, ValidationMode::Automated)?;
    ensure!(
        matches!(r.evidence.filter, Some(FilterDecision::TrueBug(_))) && r.verdict == Verdict::Effective,
        "planted bug: {:?} {:?}",
        r.verdict,
        r.evidence.filter
    );
    let r = run("filename.c", 2, ValidationMode::Full)?;
    let failed: Vec<&Check> = r.failed_checks().map(|c| &c.check).collect();
    let want = Check::DataFlow { api: "demo_parse_file".into(), arg: 0, expect: Expectation::FileContentNotName };
    ensure!(
        r.failed_step == Some(FailedStep::Semantic) && failed == [&want],
        "filename driver: {:?} {failed:?}",
        r.failed_step
    );
    within(started, Duration::from_secs(300))
}

fn triage_routing() -> Outcome {
    type Expected = BTreeMap<String, Option<(Category, FixTemplateId)>>;
    let load = |dir: &str| -> Expected { serde_json::from_str(&read(&format!("triage/{dir}/expected.json"))).unwrap() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let compiler = load("compiler");
    let fuzzer = load("fuzz");
    ensure!(compiler.len() >= 10 && fuzzer.len() >= 5, "corpus too small");
    let mut seen = BTreeMap::new();
    for (name, want) in &compiler {
        let (cat, tpl) = want.ok_or("compiler case without expectation")?;
        let br = BuildResult::failed_from_log(&read(&format!("triage/compiler/{name}.log")));
        let v = classify_build_failure(&br, &read(&format!("triage/compiler/{name}.c")));
        let route = route_fix(&v, None, &mut rng, RouteMode::BasicOnly).map_err(|e| format!("{name}: {e}"))?;
        ensure!((v.category, route.template) == (cat, tpl), "{name}: got {} / {}", v.category, route.template);
        seen.insert(v.category, route.template);
    }
    for (name, want) in &fuzzer {
        let got = classify_runtime_failure(&parse_fuzz_log(&read(&format!("triage/fuzz/{name}.log"))), None);
        match (want, got) {
            (None, Err(_)) => {}
            (Some((cat, tpl)), Ok(v)) => {
                let route = route_fix(&v, None, &mut rng, RouteMode::BasicOnly).map_err(|e| format!("{name}: {e}"))?;
                ensure!((v.category, route.template) == (*cat, *tpl), "{name}: got {} / {}", v.category, route.template);
                seen.insert(v.category, route.template);
            }
            (w, g) => return Err(format!("{name}: expected {w:?}, got {g:?}")),
        }
    }
    for (cat, tpl) in [
        (Category::Linkage, FixTemplateId::LinkErr),
        (Category::RtMemleak, FixTemplateId::FuzzMemleak),
        (Category::RtOom, FixTemplateId::FuzzOom),
        (Category::RtTimeout, FixTemplateId::FuzzTimeout),
        (Category::RtCrash, FixTemplateId::FuzzCrash),
        (Category::RtNoneff, FixTemplateId::FuzzNoneff),
    ] {
        ensure!(seen.get(&cat) == Some(&tpl), "{cat} not routed to {tpl} in the corpus");
    }
    Ok(())
}

fn session(q: u32, strategy: Strategy, model: &str, solutions: u32) -> SessionLog {
    SessionLog {
        question_id: q,
        api_name: "demo_parse".into(),
        model: ModelConfig::new("mock", model, 0.5),
        strategy: StrategyConfig::new(strategy, 1, 0),
        validation_mode: ValidationMode::Automated,
        attempts: vec![],
        repetitions: vec![],
        solved: solutions > 0,
        solutions,
        queries: 1,
        tokens_total: TokenTotals::default(),
    }
}

fn metric_formulas() -> Outcome {
    ensure!(cost(40, 4) == 10.0, "cost(40,4) = {}", cost(40, 4));
    ensure!(cost(3, 0).is_infinite(), "cost with no solutions");
    let g = round_gain(&[10, 14], 2).map_err(|e| e.to_string())?;
    ensure!(g == 0.4, "round gain {g}");
    ensure!(round_gain(&[0, 1], 2).is_err(), "degenerate baseline accepted");
    let qs = questions(3);
    let logs = vec![
        session(1, Strategy::BactxK, "m", 1),
        session(2, Strategy::BactxK, "m", 0),
        session(3, Strategy::BactxK, "m", 2),
        session(1, Strategy::NaiveK, "m", 1),
    ];
    let text = solve_table(&logs, &qs).to_text();
    ensure!(text == "model  temperature  NAIVE_K  BACTX_K\nm      0.5          -        2/3\n", "table:\n{text}");
    Ok(())
}

fn questions(n: u32) -> QuestionSet {
    let qs: Vec<String> = (1..=n)
        .map(|i| format!(r#"{{"id":{i},"project":"demo","api_name":"f","header_path":"h.h","build_script":"b.sh"}}"#))
        .collect();
    parse_questions(&format!(r#"{{"questions":[{}]}}"#, qs.join(",")), common::fixtures()).unwrap()
}

fn snippet_pipeline() -> Outcome {
    let snip = |t: String| Snippet { text: t, source_path: "p/a.c".into(), origin: Origin::Internal, kind: SnippetKind::Other };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let texts: Vec<Snippet> = (0..rng.gen_range(0..8))
            .map(|_| snip((0..rng.gen_range(1..6)).map(|_| ["a", "b", "c", "d"][rng.gen_range(0..4)]).collect::<Vec<_>>().join(" ")))
            .collect();
        let once = dedup_snippets(texts, 0.95);
        ensure!(dedup_snippets(once.clone(), 0.95) == once, "dedup not idempotent");
    }
    // every subset of {a,b,c,d} counted by enumeration
    let a = ["a", "b", "c"];
    let b = ["a", "b", "d"];
    let universe = ["a", "b", "c", "d"];
    let inter = universe.iter().filter(|t| a.contains(t) && b.contains(t)).count();
    let union = universe.iter().filter(|t| a.contains(t) || b.contains(t)).count();
    let j = jaccard("a b c", "a b d");
    ensure!(j == inter as f64 / union as f64 && j == 0.5, "jaccard {j}");
    let pair = |shared: usize, extra: usize| {
        let base: Vec<String> = (0..shared).map(|i| format!("t{i}")).collect();
        let mut more = base.clone();
        more.extend((0..extra).map(|i| format!("x{i}")));
        (more.join(" "), base.join(" "))
    };
    let (x, y) = pair(47, 3);
    ensure!(dedup_snippets(vec![snip(x), snip(y)], 0.95).len() == 2, "0.94 pair dropped");
    let (x, y) = pair(19, 1);
    ensure!(dedup_snippets(vec![snip(x), snip(y)], 0.95).len() == 1, "0.95 pair kept");
    let found = collect_snippets(&common::fixtures().join("snippets"), "demo_parse", &SourceClassifier::new("demo"));
    ensure!(!found.is_empty(), "no snippets found");
    ensure!(found.iter().all(|s| !s.source_path.contains("fuzz/")), "fuzz driver file used");
    Ok(())
}

fn demo_knowledge() -> ApiKnowledge {
    ApiKnowledge {
        api_name: "demo_parse".into(),
        header_include: "#include \"demo.h\"".into(),
        declaration: "demo_handle *demo_parse(const unsigned char *data, size_t size)".into(),
        documentation: Some("Parse a buffer.".into()),
        snippets: vec![],
    }
}

fn query_budget() -> Outcome {
    let started = Instant::now();
    let qs = corpus();
    let q = qs.get(1).unwrap();
    let mut gen = ChaCha8Rng::seed_from_u64(99);
    for i in 0..1000 {
        let strategy = Strategy::ALL[gen.gen_range(0..Strategy::ALL.len())];
        let mut sc = StrategyConfig::new(strategy, gen.gen_range(1..4), gen.gen());
        sc.max_fix_iterations = gen.gen_range(1..7);
        let entries: Vec<MockEntry> = (0..gen.gen_range(0..25))
            .map(|n| match gen.gen_range(0..8) {
                0 => MockEntry::reply("no code here"),
                1 => MockEntry::error(MockError::Unavailable),
                _ => MockEntry::driver(&format!("int LLVMFuzzerTestOneInput(const char *d, long n) {{ return {n}; }}")),
            })
            .collect();
        let scenario = MockScenario { entries, on_exhausted: gen.gen_bool(0.7).then(|| "```c\nint v;\n```".into()) };
        let client = LlmClient::new(RetryPolicy::no_backoff(1), 1).with_backend("mock", Arc::new(MockBackend::new(scenario)));
        let env = QuestionEnv {
            knowledge: demo_knowledge(),
            related: Default::default(),
            project_apis: ["demo_parse".to_string()].into(),
            validator: Arc::new(FakeValidator { effective_weight: gen.gen_range(0.0..0.5) }),
        };
        let log = run_question(q, &env, &sc, &ModelConfig::new("mock", "m", 1.0), &client, &SessionOptions::default());
        let limit = if strategy.is_iterative() { 1 + sc.max_fix_iterations } else { 1 };
        for rep in &log.repetitions {
            ensure!(rep.queries <= limit, "session {i}: {strategy} repetition used {} > {limit}", rep.queries);
        }
        let exchanges = log.attempts.iter().filter(|a| a.exchange.is_some()).count() as u32;
        ensure!(log.queries == exchanges, "session {i}: queries {} vs exchanges {exchanges}", log.queries);
    }
    within(started, Duration::from_secs(60))
}

fn merge_dispatch() -> Outcome {
    let ws = common::demo_workspace().ok_or("no libFuzzer toolchain")?;
    let tc = common::toolchain();
    let drivers: Vec<String> = (0..3).map(|i| common::demo_driver(&format!("merge_{i}.c"))).collect();
    let merged = merge_drivers(&drivers).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let br = build(&merged, ws, dir.path(), true, &tc).map_err(|e| e.to_string())?;
    ensure!(br.success, "merged driver does not compile:\n{}", br.compiler_output);
    let bin = br.binary_path.unwrap();
    for (byte, want) in [(0u8, 0i64), (1, 1), (2, 2), (4, 1)] {
        let events = run_with_hooks(&bin, &[byte, b'S', 1, b'x'], &tc).map_err(|e| e.to_string())?;
        let picked: Vec<i64> = events
            .iter()
            .filter_map(|e| match e {
                HookEvent::Int { api, index: 1, value } if api == "demo_get" => Some(value - 100),
                _ => None,
            })
            .collect();
        ensure!(!picked.is_empty() && picked.iter().all(|&p| p == want), "first byte {byte}: ran {picked:?}");
    }
    let plain = tempfile::tempdir().unwrap();
    let br = build(&merged, ws, plain.path(), false, &tc).map_err(|e| e.to_string())?;
    let opts = FuzzOptions { seed: Some(1), ..FuzzOptions::with_duration(5) };
    let fr = fuzz(br.binary_path.as_ref().unwrap(), &opts, &tc).map_err(|e| e.to_string())?;
    ensure!(fr.has_coverage_progress(), "merged driver made no coverage progress");
    Ok(())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("fix prompt templates render the published text", fix_prompt_fidelity),
        ("deterministic end-to-end iterative session", end_to_end_session),
        ("validation verdicts on the fixture drivers", validation_pipeline),
        ("triage routes the golden log corpus", triage_routing),
        ("metric formulas and table cells", metric_formulas),
        ("snippet dedup, similarity and driver exclusion", snippet_pipeline),
        ("query budget over 1000 random sessions", query_budget),
        ("merged driver dispatch on the first byte", merge_dispatch),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("[PASS] {name} ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.1}s): {e}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
