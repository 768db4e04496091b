//! Run configuration: one TOML document holding every knob, the clause
//! runners and the demand schedule.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ScoringWeights;
use crate::distribution::SearchConfig;
use crate::generator::{Generator, MutationGenerator, RemoteGenerator, TOKEN_ENV, URL_ENV};
use crate::hypothesis::ArtifactSnapshot;
use crate::metrics::{ClauseKind, ErrorWeights, SpecClause, Specification};
use crate::orchestrator::{DemandEvent, RunSetup};
use crate::synthbench::{SyntheticGenerator, SyntheticSpace};
use crate::verification::{BuiltinCheck, ClauseRunner, CommandRunner, OutputParser, RunnerSet};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("{}", Diagnostics(.0))]
    Invalid(Vec<String>),
}

struct Diagnostics<'a>(&'a [String]);

impl fmt::Display for Diagnostics<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config:")?;
        for d in self.0 {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub theta: [f64; 5],
    /// Size budget of a context bundle, in characters.
    pub budget: usize,
    pub recency: u64,
    /// History items written per iteration at most.
    pub max_items_per_iteration: usize,
    /// Characters of the incumbent shown to the generator.
    pub excerpt_chars: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            theta: ScoringWeights::default().theta,
            budget: 4000,
            recency: crate::context::DEFAULT_RECENCY,
            max_items_per_iteration: 8,
            excerpt_chars: 4000,
        }
    }
}

impl ContextConfig {
    pub fn scoring(&self) -> ScoringWeights {
        ScoringWeights { theta: self.theta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminationConfig {
    pub delta_threshold: f64,
    pub max_iterations: u64,
    pub stall_window: u64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        TerminationConfig {
            delta_threshold: 0.0,
            max_iterations: 50,
            stall_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationSettings {
    pub worker_count: usize,
    /// Default per-runner timeout in seconds.
    pub timeout_secs: f64,
    pub anomaly_patterns: Vec<String>,
}

impl Default for VerificationSettings {
    fn default() -> Self {
        VerificationSettings {
            worker_count: 4,
            timeout_secs: 30.0,
            anomaly_patterns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Mutation,
    Remote,
    /// Single-slot neighbours; only valid with a synthetic fixture.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub vocabulary: Vec<String>,
    /// Largest accepted edit payload in bytes.
    pub max_payload: usize,
    /// Remote endpoint; the environment variable takes precedence.
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Mutation,
            vocabulary: Vec::new(),
            max_payload: 4096,
            endpoint: None,
            timeout_secs: 60.0,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    pub command: Option<String>,
    #[serde(default)]
    pub args: Vec<String>,
    pub parser: Option<OutputParser>,
    pub timeout_secs: Option<f64>,
    pub builtin: Option<BuiltinCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClauseConfig {
    pub id: String,
    pub kind: ClauseKind,
    pub weight: f64,
    #[serde(default)]
    pub description: String,
    pub runner: RunnerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    pub at_iteration: u64,
    pub clauses: Vec<ClauseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Use a built-in synthetic space instead of an artifact directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_fixture: Option<String>,
    #[serde(default)]
    pub weights: ErrorWeights,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub context: ContextConfig,
    #[serde(default)]
    pub termination: TerminationConfig,
    #[serde(default)]
    pub verification: VerificationSettings,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clauses: Vec<ClauseConfig>,
    #[serde(default, rename = "demand", skip_serializing_if = "Vec::is_empty")]
    pub demands: Vec<DemandConfig>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Collects every field-level problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = self.knob_errors();
        errs.extend(self.clause_errors());
        finish(errs)
    }

    /// Checks the tuning sections only, leaving clauses and demands aside.
    pub fn validate_knobs(&self) -> Result<(), ConfigError> {
        finish(self.knob_errors())
    }

    fn knob_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.weights.validate() {
            errs.push(format!("weights: {e}"));
        }
        if let Err(e) = self.search.validate() {
            errs.push(format!("search: {e}"));
        }
        if let Err(e) = self.context.scoring().validate() {
            errs.push(format!("context.theta: {e}"));
        }
        let term = &self.termination;
        if !(0.0..=1.0).contains(&term.delta_threshold) {
            errs.push(format!("termination.delta_threshold: {} not in [0,1]", term.delta_threshold));
        }
        if term.max_iterations == 0 {
            errs.push("termination.max_iterations: must be >= 1".into());
        }
        if term.stall_window == 0 {
            errs.push("termination.stall_window: must be >= 1".into());
        }
        let ver = &self.verification;
        if ver.worker_count == 0 {
            errs.push("verification.worker_count: must be >= 1".into());
        }
        if !(ver.timeout_secs.is_finite() && ver.timeout_secs > 0.0) {
            errs.push(format!("verification.timeout_secs: {} must be > 0", ver.timeout_secs));
        }
        for (i, p) in ver.anomaly_patterns.iter().enumerate() {
            if let Err(e) = Regex::new(p) {
                errs.push(format!("verification.anomaly_patterns[{i}]: {e}"));
            }
        }
        let generator = &self.generator;
        if generator.max_payload == 0 {
            errs.push("generator.max_payload: must be >= 1".into());
        }
        if generator.max_in_flight == 0 {
            errs.push("generator.max_in_flight: must be >= 1".into());
        }
        if !(generator.timeout_secs.is_finite() && generator.timeout_secs > 0.0) {
            errs.push(format!("generator.timeout_secs: {} must be > 0", generator.timeout_secs));
        }
        errs
    }

    fn clause_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let generator = &self.generator;
        let ver = &self.verification;
        match &self.synthetic_fixture {
            Some(id) => {
                if SyntheticSpace::fixture(id).is_err() {
                    errs.push(format!("synthetic_fixture: unknown fixture `{id}`"));
                }
                if !self.clauses.is_empty() || !self.demands.is_empty() {
                    errs.push("clauses: a synthetic fixture brings its own clauses and demands".into());
                }
            }
            None => {
                if generator.kind == GeneratorKind::Synthetic {
                    errs.push("generator.kind: `synthetic` requires synthetic_fixture".into());
                }
                if self.clauses.is_empty() {
                    errs.push("clauses: at least one clause is required".into());
                }
            }
        }
        let mut seen = BTreeSet::new();
        let all = self
            .clauses
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("clauses[{i}]"), c))
            .chain(self.demands.iter().enumerate().flat_map(|(d, dem)| {
                dem.clauses
                    .iter()
                    .enumerate()
                    .map(move |(i, c)| (format!("demand[{d}].clauses[{i}]"), c))
            }));
        for (at, c) in all {
            if !seen.insert(c.id.as_str()) {
                errs.push(format!("{at}.id: duplicate clause id `{}`", c.id));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                errs.push(format!("{at}.weight: {} must be > 0", c.weight));
            }
            if let Err(e) = c.runner.build(c.kind, ver.timeout_secs) {
                errs.push(format!("{at}.runner: {e}"));
            }
        }
        for (d, dem) in self.demands.iter().enumerate() {
            if dem.at_iteration == 0 {
                errs.push(format!("demand[{d}].at_iteration: must be >= 1"));
            }
        }
        errs
    }

    /// Assembles the run inputs. `artifact` is the initial artifact
    /// directory; it is ignored for synthetic fixtures.
    pub fn build_setup(&self, artifact: Option<&Path>) -> Result<RunSetup, ConfigError> {
        self.validate()?;
        if let Some(id) = &self.synthetic_fixture {
            let space = SyntheticSpace::fixture(id).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
            return space
                .setup(self.clone())
                .map_err(|e| ConfigError::Invalid(vec![e.to_string()]));
        }
        let path = artifact.ok_or_else(|| ConfigError::Invalid(vec!["artifact: directory required".into()]))?;
        let base = ArtifactSnapshot::load_dir(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let invalid = |e: String| ConfigError::Invalid(vec![e]);
        let spec = Specification::new(self.clauses.iter().map(ClauseConfig::clause).collect())
            .map_err(|e| invalid(format!("clauses: {e}")))?;
        let mut runners = RunnerSet::new();
        for c in self.clauses.iter().chain(self.demands.iter().flat_map(|d| &d.clauses)) {
            let r = c
                .runner
                .build(c.kind, self.verification.timeout_secs)
                .map_err(|e| invalid(format!("{}: {e}", c.id)))?;
            runners.insert(c.id.clone(), r);
        }
        let demands = self
            .demands
            .iter()
            .map(|d| DemandEvent {
                at_iteration: d.at_iteration,
                new_clauses: d.clauses.iter().map(ClauseConfig::clause).collect(),
            })
            .collect();
        let generator = self.build_generator(None).map_err(invalid)?;
        Ok(RunSetup {
            base,
            spec,
            demands,
            runners,
            generator,
            config: self.clone(),
        })
    }

    pub fn build_generator(&self, space: Option<Arc<SyntheticSpace>>) -> Result<Box<dyn Generator>, String> {
        let g = &self.generator;
        Ok(match g.kind {
            GeneratorKind::Mutation => Box::new(MutationGenerator::new(g.vocabulary.clone())),
            GeneratorKind::Synthetic => {
                let space = space.ok_or("generator.kind: `synthetic` requires synthetic_fixture")?;
                Box::new(SyntheticGenerator::new(space))
            }
            GeneratorKind::Remote => {
                let endpoint = std::env::var(URL_ENV)
                    .ok()
                    .or_else(|| g.endpoint.clone())
                    .ok_or_else(|| format!("generator.endpoint: not set and {URL_ENV} is empty"))?;
                Box::new(RemoteGenerator::new(
                    endpoint,
                    std::env::var(TOKEN_ENV).ok(),
                    Duration::from_secs_f64(g.timeout_secs),
                    g.max_in_flight,
                ))
            }
        })
    }
}

fn finish(errs: Vec<String>) -> Result<(), ConfigError> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(errs))
    }
}

impl ClauseConfig {
    pub fn clause(&self) -> SpecClause {
        SpecClause::new(self.id.clone(), self.kind, self.weight).with_description(self.description.clone())
    }
}

impl RunnerConfig {
    pub fn build(&self, kind: ClauseKind, default_timeout: f64) -> Result<Arc<dyn ClauseRunner>, String> {
        let runner: Arc<dyn ClauseRunner> = match (&self.command, &self.builtin) {
            (Some(program), None) => {
                let secs = self.timeout_secs.unwrap_or(default_timeout);
                if !(secs.is_finite() && secs > 0.0) {
                    return Err(format!("timeout_secs {secs} must be > 0"));
                }
                Arc::new(CommandRunner {
                    program: program.clone(),
                    args: self.args.clone(),
                    timeout: Duration::from_secs_f64(secs),
                    parser: self.parser.unwrap_or(OutputParser::ExitCode),
                })
            }
            (None, Some(check)) => {
                if self.parser.is_some() || !self.args.is_empty() || self.timeout_secs.is_some() {
                    return Err("builtin checks take no args, parser or timeout".into());
                }
                if let BuiltinCheck::FileContains { pattern, .. } | BuiltinCheck::ForbidPattern { pattern, .. } = check {
                    Regex::new(pattern).map_err(|e| format!("pattern: {e}"))?;
                }
                Arc::new(check.clone())
            }
            (Some(_), Some(_)) => return Err("set either `command` or `builtin`, not both".into()),
            (None, None) => return Err("one of `command` or `builtin` is required".into()),
        };
        if !runner.parser().accepts(kind) {
            return Err(format!("parser {:?} cannot report a {kind} clause", runner.parser()));
        }
        Ok(runner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3

[search]
lambda = 1.5

[termination]
delta_threshold = 0.05
max_iterations = 10

[[clauses]]
id = "unit"
kind = "test"
weight = 2.0
runner = { command = "sh", args = ["-c", "test -f main.py"] }

[[clauses]]
id = "no-todo"
kind = "structural"
weight = 1.0
runner = { builtin = { check = "forbid_pattern", path = "main.py", pattern = "TODO" } }

[[demand]]
at_iteration = 4
clauses = [{ id = "has-main", kind = "verify", weight = 1.0, runner = { builtin = { check = "file_exists", path = "main.py" } } }]
"#;

    #[test]
    fn parses_sample_and_fills_defaults() {
        let cfg = RunConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.search.lambda, 1.5);
        assert_eq!(cfg.search.pool_size, SearchConfig::default().pool_size);
        assert_eq!(cfg.clauses.len(), 2);
        assert_eq!(cfg.demands[0].at_iteration, 4);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml_str(SAMPLE).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn reports_every_bad_field() {
        let text = r#"
[termination]
delta_threshold = 1.5
stall_window = 0

[[clauses]]
id = "a"
kind = "structural"
weight = -1.0
runner = { command = "true" }

[[clauses]]
id = "a"
kind = "test"
weight = 1.0
runner = { }
"#;
        let Err(ConfigError::Invalid(errs)) = RunConfig::from_toml_str(text) else {
            panic!("expected field diagnostics")
        };
        let joined = errs.join("\n");
        for needle in [
            "termination.delta_threshold",
            "termination.stall_window",
            "clauses[0].weight",
            "clauses[1].id",
            "clauses[1].runner",
        ] {
            assert!(joined.contains(needle), "{needle} missing from:\n{joined}");
        }
        // exit-code runner on a structural clause is allowed
        assert!(!joined.contains("clauses[0].runner"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("seed = 1\nlambda = 2.0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(m) if m.contains("lambda")));
    }

    #[test]
    fn severity_parser_needs_structural_clause() {
        let r = RunnerConfig {
            command: Some("true".into()),
            parser: Some(OutputParser::SeverityJson),
            ..RunnerConfig::default()
        };
        assert!(r.build(ClauseKind::Test, 1.0).is_err());
        assert!(r.build(ClauseKind::Structural, 1.0).is_ok());
    }

    #[test]
    fn synthetic_fixture_config() {
        let cfg = RunConfig::from_toml_str("synthetic_fixture = \"S2\"\n[generator]\nkind = \"synthetic\"\n").unwrap();
        let setup = cfg.build_setup(None).unwrap();
        assert_eq!(setup.spec.len(), 3);
        assert!(RunConfig::from_toml_str("synthetic_fixture = \"S9\"").is_err());
        assert!(RunConfig::from_toml_str("[generator]\nkind = \"synthetic\"").is_err());
    }
}
