use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use drivergen::sandbox::{parse_fuzz_log, BuildResult};
use drivergen::validate::{
    DriverValidator, Evidence, FailedStep, FilterDecision, ValidateError, ValidationMode, ValidationReport, Verdict,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures;

/// Canned outcomes replayed from the triage corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Canned {
    Effective,
    CompileError,
    LinkError,
    Leak,
    DriverCrash,
    Timeout,
    NoProgress,
}

impl Canned {
    pub const ALL: [Canned; 7] = [
        Canned::Effective,
        Canned::CompileError,
        Canned::LinkError,
        Canned::Leak,
        Canned::DriverCrash,
        Canned::Timeout,
        Canned::NoProgress,
    ];

    pub fn report(self) -> ValidationReport {
        let read = |rel: &str| std::fs::read_to_string(fixtures().join("triage").join(rel)).unwrap();
        let mut evidence = Evidence::default();
        let (verdict, failed_step) = match self {
            Canned::Effective => (Verdict::Effective, None),
            Canned::CompileError | Canned::LinkError => {
                let log = if self == Canned::CompileError {
                    "compiler/g3_undeclared_function.log"
                } else {
                    "compiler/link_undefined_api.log"
                };
                evidence.build = Some(BuildResult::failed_from_log(&read(log)));
                (Verdict::Ineffective, Some(FailedStep::Compile))
            }
            Canned::Leak | Canned::DriverCrash | Canned::Timeout | Canned::NoProgress => {
                let log = match self {
                    Canned::Leak => "fuzz/leak.log",
                    Canned::DriverCrash => "fuzz/crash_driver.log",
                    Canned::Timeout => "fuzz/timeout.log",
                    _ => "fuzz/noeff_flat.log",
                };
                let fr = parse_fuzz_log(&read(log));
                if self == Canned::NoProgress {
                    evidence.reason = Some("no coverage progress".into());
                } else {
                    evidence.filter = Some(FilterDecision::DriverFault);
                }
                evidence.fuzz = Some(fr);
                (Verdict::Ineffective, Some(FailedStep::FuzzBehavior))
            }
        };
        ValidationReport { verdict, failed_step, evidence, automated_only: true }
    }
}

/// Picks an outcome as a pure function of the candidate and the fuzz seed.
pub struct FakeValidator {
    pub effective_weight: f64,
}

impl DriverValidator for FakeValidator {
    fn validate(&self, driver: &str, _mode: ValidationMode, seed: Option<u64>) -> Result<ValidationReport, ValidateError> {
        let mut h = DefaultHasher::new();
        driver.hash(&mut h);
        seed.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        if rng.gen_bool(self.effective_weight) {
            return Ok(Canned::Effective.report());
        }
        Ok(Canned::ALL[rng.gen_range(1..Canned::ALL.len())].report())
    }
}

/// Always returns the same outcome.
pub struct FixedValidator(pub Canned);

impl DriverValidator for FixedValidator {
    fn validate(&self, _: &str, _: ValidationMode, _: Option<u64>) -> Result<ValidationReport, ValidateError> {
        Ok(self.0.report())
    }
}
