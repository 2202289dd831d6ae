mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::fake::{Canned, FakeValidator, FixedValidator};
use drivergen::dataset::{load_questions, QuestionSet};
use drivergen::knowledge::ApiKnowledge;
use drivergen::orchestrator::{
    run_question, run_sweep, PairStatus, QuestionEnv, SessionLog, SessionOptions, Strategy, StrategyConfig,
    SweepOptions,
};
use drivergen::prompting::{
    LlmClient, MockBackend, MockEntry, MockError, MockScenario, ModelConfig, RetryPolicy,
};
use drivergen::sandbox::FuzzOptions;
use drivergen::validate::{DriverValidator, FailedStep, ValidateOptions, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus() -> QuestionSet {
    load_questions(&common::fixtures().join("corpus.json")).unwrap()
}

fn model() -> ModelConfig {
    ModelConfig::new("mock", "mock-model", 0.5)
}

fn client(backend: MockBackend) -> (LlmClient, Arc<MockBackend>) {
    let backend = Arc::new(backend);
    let client = LlmClient::new(RetryPolicy::no_backoff(2), 4).with_backend("mock", backend.clone());
    (client, backend)
}

fn scenario(name: &str) -> MockScenario {
    MockScenario::load(&common::fixtures().join("scenarios").join(name)).unwrap()
}

fn demo_knowledge() -> ApiKnowledge {
    ApiKnowledge {
        api_name: "demo_parse".into(),
        header_include: "#include \"demo.h\"".into(),
        declaration: "demo_handle *demo_parse(const unsigned char *data, size_t size)".into(),
        documentation: Some("Parse a buffer.".into()),
        snippets: Vec::new(),
    }
}

fn fake_env(validator: impl DriverValidator + 'static) -> QuestionEnv {
    QuestionEnv {
        knowledge: demo_knowledge(),
        related: Default::default(),
        project_apis: ["demo_parse", "demo_free", "demo_get"].iter().map(|s| s.to_string()).collect(),
        validator: Arc::new(validator),
    }
}

fn sandbox_env(qs: &QuestionSet, id: u32) -> Option<QuestionEnv> {
    let ws = common::demo_workspace()?;
    let options = ValidateOptions { fuzz: FuzzOptions::with_duration(3), toolchain: common::toolchain() };
    Some(QuestionEnv::sandboxed(qs, qs.get(id).unwrap(), &common::fixtures(), ws.clone(), None, options).unwrap())
}

fn run_ba_iter(qs: &QuestionSet, env: &QuestionEnv) -> (SessionLog, Arc<MockBackend>) {
    let (client, backend) = client(MockBackend::new(scenario("ba_iter_demo.json")));
    let sc = StrategyConfig::new(Strategy::BaIterK, 1, 11);
    let log = run_question(qs.get(1).unwrap(), env, &sc, &model(), &client, &SessionOptions::default());
    (log, backend)
}

#[test]
fn ba_iter_repairs_compile_error_then_leak() {
    let qs = corpus();
    let Some(env) = sandbox_env(&qs, 1) else { return };
    let (log, backend) = run_ba_iter(&qs, &env);
    assert!(log.solved, "{}", log.to_json());
    assert_eq!(log.queries, 3);
    assert_eq!(log.solutions, 1);
    assert_eq!(log.repetitions[0].solved_at_iteration, Some(3));
    let steps: Vec<Option<FailedStep>> = log.attempts.iter().map(|a| a.outcome.as_ref().unwrap().failed_step).collect();
    assert_eq!(steps, [Some(FailedStep::Compile), Some(FailedStep::FuzzBehavior), None]);
    let templates: Vec<Option<String>> = backend.requests().iter().map(|p| p.tags.get("template").cloned()).collect();
    assert_eq!(templates[0], None);
    assert_eq!(templates[2].as_deref(), Some("FIX_FUZZ_MEMLEAK"));
    assert!(backend.requests()[2].user_message.contains("demo_get(h, 0);"));

    let (again, _) = run_ba_iter(&qs, &env);
    assert_eq!(log.to_json(), again.to_json());
}

#[test]
fn prose_answers_count_as_queries() {
    let qs = corpus();
    let (client, backend) = client(MockBackend::new(scenario("naive_prose.json")));
    let sc = StrategyConfig::new(Strategy::NaiveK, 2, 1);
    let env = fake_env(FakeValidator { effective_weight: 1.0 });
    let log = run_question(qs.get(1).unwrap(), &env, &sc, &model(), &client, &SessionOptions::default());
    assert!(!log.solved);
    assert_eq!(log.queries, 2);
    assert_eq!(backend.requests().len(), 2);
    assert!(log.attempts.iter().all(|a| a.candidate.is_none() && a.error.is_some()));
}

#[test]
fn fix_loop_stops_after_budget() {
    let qs = corpus();
    let backend = MockBackend::new(MockScenario {
        entries: vec![],
        on_exhausted: Some("```c\nint LLVMFuzzerTestOneInput(const unsigned char *d, unsigned long n) { return 0; }\n```".into()),
    });
    let (client, backend) = client(backend);
    let sc = StrategyConfig::new(Strategy::BaIterK, 1, 3);
    let env = fake_env(FixedValidator(Canned::CompileError));
    let log = run_question(qs.get(1).unwrap(), &env, &sc, &model(), &client, &SessionOptions::default());
    assert_eq!(log.queries, 6);
    assert_eq!(backend.requests().len(), 6);
    assert!(!log.solved);
    assert_eq!(log.attempts.last().unwrap().iteration, 5);
}

#[test]
fn backend_outage_aborts_only_the_repetition() {
    let qs = corpus();
    let ok = MockEntry::driver("int LLVMFuzzerTestOneInput(const unsigned char *d, unsigned long n) { return 0; }");
    let outage = MockEntry::error(MockError::Unavailable);
    let (client, _) = client(MockBackend::from_entries(vec![outage.clone(), outage, ok]));
    let sc = StrategyConfig::new(Strategy::BactxK, 2, 3);
    let env = fake_env(FixedValidator(Canned::Effective));
    let log = run_question(qs.get(1).unwrap(), &env, &sc, &model(), &client, &SessionOptions::default());
    assert!(log.repetitions[0].aborted.is_some());
    assert_eq!(log.repetitions[0].queries, 0);
    assert!(log.repetitions[1].solved);
    assert_eq!(log.queries, 1);
    assert_eq!(log.solutions, 1);
}

#[test]
fn all_iter_draws_initial_context_and_supplemental() {
    let qs = corpus();
    let mut contexts = BTreeSet::new();
    let mut supplemental = 0;
    for seed in 0..30 {
        let backend = MockBackend::new(MockScenario { entries: vec![], on_exhausted: Some("```c\nint x;\n```".into()) });
        let (client, _) = client(backend);
        let sc = StrategyConfig::new(Strategy::AllIterK, 1, seed);
        let env = fake_env(FixedValidator(Canned::Leak));
        let log = run_question(qs.get(1).unwrap(), &env, &sc, &model(), &client, &SessionOptions::default());
        contexts.insert(log.attempts[0].prompt.tags["context"].clone());
        supplemental += log.attempts.iter().filter(|a| a.supplemental.is_some()).count();
    }
    assert!(contexts.contains("BACTX") && contexts.contains("DOCTX"), "{contexts:?}");
    assert!(!contexts.contains("NAIVE"));
    assert!(supplemental > 0);
}

#[test]
fn sweep_writes_one_log_per_pair_and_resumes() {
    let qs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let configs = vec![
        (StrategyConfig::new(Strategy::BactxK, 1, 5), model()),
        (StrategyConfig::new(Strategy::BaIterK, 1, 5), model()),
    ];
    let prepare = |_: &drivergen::dataset::Question| Ok(fake_env(FakeValidator { effective_weight: 0.5 }));
    let opts = SweepOptions {
        results_dir: dir.path(),
        parallelism: 2,
        session: SessionOptions::default(),
        cancel: None,
        on_session: None,
    };
    let backend = || MockBackend::new(MockScenario { entries: vec![], on_exhausted: Some("```c\nint y;\n```".into()) });
    let (c, _) = client(backend());
    let first = run_sweep(&qs, &configs, &c, prepare, &opts).unwrap();
    assert_eq!(first.count(|s| *s == PairStatus::Executed), 4);
    let mut files: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(
        files,
        [
            "q1_BACTX_K_mock-model_t0.5_s5.json",
            "q1_BA_ITER_K_mock-model_t0.5_s5.json",
            "q2_BACTX_K_mock-model_t0.5_s5.json",
            "q2_BA_ITER_K_mock-model_t0.5_s5.json"
        ]
    );

    std::fs::remove_file(dir.path().join("q2_BACTX_K_mock-model_t0.5_s5.json")).unwrap();
    let (c, backend) = client(backend());
    let second = run_sweep(&qs, &configs, &c, prepare, &opts).unwrap();
    assert_eq!(second.count(|s| *s == PairStatus::Skipped), 3);
    assert_eq!(second.count(|s| *s == PairStatus::Executed), 1);
    assert_eq!(backend.requests().len(), 1);
    assert_eq!(second.logs().len(), 4);
}

#[test]
fn failed_preparation_is_recorded_per_pair() {
    let qs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let configs = vec![(StrategyConfig::new(Strategy::NaiveK, 1, 5), model())];
    let prepare = |q: &drivergen::dataset::Question| {
        if q.id == 2 {
            Err("workspace missing".to_string())
        } else {
            Ok(fake_env(FixedValidator(Canned::Effective)))
        }
    };
    let opts = SweepOptions {
        results_dir: dir.path(),
        parallelism: 1,
        session: SessionOptions::default(),
        cancel: None,
        on_session: None,
    };
    let (c, _) = client(MockBackend::new(MockScenario { entries: vec![], on_exhausted: Some("```c\nint z;\n```".into()) }));
    let report = run_sweep(&qs, &configs, &c, prepare, &opts).unwrap();
    assert_eq!(report.count(|s| *s == PairStatus::Executed), 1);
    assert_eq!(report.count(|s| matches!(s, PairStatus::Failed(_))), 1);
}

fn random_entry(rng: &mut ChaCha8Rng) -> MockEntry {
    match rng.gen_range(0..10) {
        0 => MockEntry::reply("I cannot write that."),
        1 => MockEntry::error(MockError::Unavailable),
        n => MockEntry::driver(&format!("int LLVMFuzzerTestOneInput(const char *d, long n) {{ return {n}; }}")),
    }
}

#[test]
fn random_sessions_respect_budgets_and_replay_identically() {
    let qs = corpus();
    let q = qs.get(1).unwrap();
    let mut gen = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let strategy = Strategy::ALL[gen.gen_range(0..Strategy::ALL.len())];
        let mut sc = StrategyConfig::new(strategy, gen.gen_range(1..5), gen.gen());
        sc.max_fix_iterations = gen.gen_range(1..6);
        let entries: Vec<MockEntry> = (0..gen.gen_range(0..30)).map(|_| random_entry(&mut gen)).collect();
        let on_exhausted = gen.gen_bool(0.5).then(|| "```c\nint w;\n```".to_string());
        let weight = gen.gen_range(0.0..0.6);
        let run = || {
            let (c, _) = client(MockBackend::new(MockScenario { entries: entries.clone(), on_exhausted: on_exhausted.clone() }));
            let env = fake_env(FakeValidator { effective_weight: weight });
            run_question(q, &env, &sc, &model(), &c, &SessionOptions::default())
        };
        let log = run();
        assert_eq!(log.to_json(), run().to_json());
        assert_eq!(log.queries as usize, log.attempts.iter().filter(|a| a.exchange.is_some()).count());
        assert!(log.solutions <= sc.repeat_k);
        assert_eq!(log.repetitions.len(), sc.repeat_k as usize);
        for rep in &log.repetitions {
            assert!(rep.queries <= sc.query_budget());
            let round: Vec<_> = log.round(rep.round).collect();
            assert_eq!(rep.solved, round.last().is_some_and(|a| a.is_effective()));
            assert_eq!(round.iter().filter(|a| a.is_effective()).count(), rep.solved as usize);
        }
        if !strategy.is_iterative() {
            assert!(log.attempts.iter().all(|a| a.iteration == 0));
        }
        if strategy != Strategy::AllIterK {
            assert!(log.attempts.iter().all(|a| a.supplemental.is_none()));
        }
        assert!(log.attempts.iter().all(|a| a.outcome.as_ref().is_none_or(|o| o.verdict == Verdict::Effective
            || o.failed_step.is_some())));
    }
}
