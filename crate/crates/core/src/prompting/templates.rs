//! The seven fix templates, one per failure kind.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FixTemplateId {
    #[serde(rename = "FIX_PRSE_ERR")]
    PrseErr,
    #[serde(rename = "FIX_LINK_ERR")]
    LinkErr,
    #[serde(rename = "FIX_FUZZ_MEMLEAK")]
    FuzzMemleak,
    #[serde(rename = "FIX_FUZZ_OOM")]
    FuzzOom,
    #[serde(rename = "FIX_FUZZ_TIMEOUT")]
    FuzzTimeout,
    #[serde(rename = "FIX_FUZZ_CRASH")]
    FuzzCrash,
    #[serde(rename = "FIX_FUZZ_NONEFF")]
    FuzzNoneff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Placeholder {
    DriverCode,
    ErrLineCode,
    ErrDescription,
    ErrStack,
    ApiName,
    CrashSymptom,
    SupplementalInfo,
}

impl Placeholder {
    pub const ALL: [Placeholder; 7] = [
        Placeholder::DriverCode,
        Placeholder::ErrLineCode,
        Placeholder::ErrDescription,
        Placeholder::ErrStack,
        Placeholder::ApiName,
        Placeholder::CrashSymptom,
        Placeholder::SupplementalInfo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::DriverCode => "DRIVER_CODE",
            Placeholder::ErrLineCode => "ERR_LINE_CODE",
            Placeholder::ErrDescription => "ERR_DESCRIPTION",
            Placeholder::ErrStack => "ERR_STACK",
            Placeholder::ApiName => "API_NAME",
            Placeholder::CrashSymptom => "CRASH_SYMPTOM",
            Placeholder::SupplementalInfo => "SUPPLEMENTAL_INFO",
        }
    }

    /// `${NAME}` as it appears in template text.
    pub fn token(self) -> String {
        format!("${{{}}}", self.name())
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type PlaceholderMap = BTreeMap<Placeholder, String>;

const FIX_PRSE_ERR: &str = "```
${DRIVER_CODE}
```
The above C code has compilation error.
The error line is:
${ERR_LINE_CODE}
The error description is:
${ERR_DESCRIPTION}
${SUPPLEMENTAL_INFO}
Based on the above information, fix the code.";

const FIX_LINK_ERR: &str = "```
${DRIVER_CODE}
```
The above C code calls a non-existing API ${API_NAME}.
${SUPPLEMENTAL_INFO}
Based on the above information, fix the code.";

const FIX_FUZZ_MEMLEAK: &str = "```
${DRIVER_CODE}
```
The above C code can be built successfully but has runtime memory leak.
${SUPPLEMENTAL_INFO}
Based on the above information, fix the code.";

const FIX_FUZZ_OOM: &str = "```
${DRIVER_CODE}
```
The above C code can be built successfully but meet out-of-memory, perhaps due to memory leak.
${SUPPLEMENTAL_INFO}
Based on the above information, fix the code.";

const FIX_FUZZ_TIMEOUT: &str = "```
${DRIVER_CODE}
```
The above C code can be built successfully but will stuck (timeout).
The possible stuck line is:
${ERR_LINE_CODE}
The frames of the stack are:
${ERR_STACK}
${SUPPLEMENTAL_INFO}
Based on the above information, fix the code.";

const FIX_FUZZ_CRASH: &str = "```
${DRIVER_CODE}
```
The above C code can be built successfully but will crash (${CRASH_SYMPTOM}).
The crash line is:
${ERR_LINE_CODE}
The frames of the stack are:
${ERR_DESCRIPTION}
${SUPPLEMENTAL_INFO}
Based on the above information, fix the code.";

const FIX_FUZZ_NONEFF: &str = "```
${DRIVER_CODE}
```
The above C code can be built successfully but its fuzzing seems not effective since the coverage never change.
Based on the above information, fix the code if necessary.";

impl FixTemplateId {
    pub const ALL: [FixTemplateId; 7] = [
        FixTemplateId::PrseErr,
        FixTemplateId::LinkErr,
        FixTemplateId::FuzzMemleak,
        FixTemplateId::FuzzOom,
        FixTemplateId::FuzzTimeout,
        FixTemplateId::FuzzCrash,
        FixTemplateId::FuzzNoneff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FixTemplateId::PrseErr => "FIX_PRSE_ERR",
            FixTemplateId::LinkErr => "FIX_LINK_ERR",
            FixTemplateId::FuzzMemleak => "FIX_FUZZ_MEMLEAK",
            FixTemplateId::FuzzOom => "FIX_FUZZ_OOM",
            FixTemplateId::FuzzTimeout => "FIX_FUZZ_TIMEOUT",
            FixTemplateId::FuzzCrash => "FIX_FUZZ_CRASH",
            FixTemplateId::FuzzNoneff => "FIX_FUZZ_NONEFF",
        }
    }

    /// Raw template text with `${...}` placeholders.
    pub fn text(self) -> &'static str {
        match self {
            FixTemplateId::PrseErr => FIX_PRSE_ERR,
            FixTemplateId::LinkErr => FIX_LINK_ERR,
            FixTemplateId::FuzzMemleak => FIX_FUZZ_MEMLEAK,
            FixTemplateId::FuzzOom => FIX_FUZZ_OOM,
            FixTemplateId::FuzzTimeout => FIX_FUZZ_TIMEOUT,
            FixTemplateId::FuzzCrash => FIX_FUZZ_CRASH,
            FixTemplateId::FuzzNoneff => FIX_FUZZ_NONEFF,
        }
    }

    /// Placeholders that must be supplied; `SUPPLEMENTAL_INFO` is always optional.
    pub fn required(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            FixTemplateId::PrseErr => &[DriverCode, ErrLineCode, ErrDescription],
            FixTemplateId::LinkErr => &[DriverCode, ApiName],
            FixTemplateId::FuzzMemleak | FixTemplateId::FuzzOom | FixTemplateId::FuzzNoneff => &[DriverCode],
            FixTemplateId::FuzzTimeout => &[DriverCode, ErrLineCode, ErrStack],
            FixTemplateId::FuzzCrash => &[DriverCode, CrashSymptom, ErrLineCode, ErrDescription],
        }
    }

    pub fn accepts_supplemental(self) -> bool {
        self != FixTemplateId::FuzzNoneff
    }
}

impl fmt::Display for FixTemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixTemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FixTemplateId::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown fix template `{s}`"))
    }
}

/// Substitutes placeholders into a template. The `${SUPPLEMENTAL_INFO}` line
/// is dropped entirely when that value is absent or empty.
pub fn fill(template: FixTemplateId, fields: &PlaceholderMap) -> Result<String, Placeholder> {
    if let Some(missing) = template.required().iter().find(|p| !fields.contains_key(p)) {
        return Err(*missing);
    }
    let supplemental = fields.get(&Placeholder::SupplementalInfo).filter(|s| !s.is_empty());
    let supplemental_line = Placeholder::SupplementalInfo.token();
    let mut out = Vec::new();
    for line in template.text().split('\n') {
        if line == supplemental_line {
            if let Some(s) = supplemental {
                out.push(s.clone());
            }
            continue;
        }
        let mut rendered = String::with_capacity(line.len());
        let mut rest = line;
        while let Some(start) = rest.find("${") {
            let Some(len) = rest[start..].find('}') else { break };
            let name = &rest[start + 2..start + len];
            rendered.push_str(&rest[..start]);
            match Placeholder::ALL.iter().find(|p| p.name() == name) {
                Some(p) => rendered.push_str(fields.get(p).map(String::as_str).unwrap_or("")),
                None => rendered.push_str(&rest[start..=start + len]),
            }
            rest = &rest[start + len + 1..];
        }
        rendered.push_str(rest);
        out.push(rendered);
    }
    Ok(out.join("\n"))
}
