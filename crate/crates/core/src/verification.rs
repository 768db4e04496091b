//! The composite verification oracle.
//!
//! Each specification clause is bound to a [`ClauseRunner`]. Runners execute
//! on a bounded worker pool, results are cached per candidate content, clause
//! and clause definition, and the merged outcomes are folded into a
//! [`FeedbackVector`] and composite error through [`crate::metrics`].
//!
//! The cache assumes runners are deterministic. A nondeterministic runner
//! will have its first result replayed for as long as the entry lives.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::hypothesis::{materialize, ArtifactSnapshot, Candidate, CandidateId, Digest};
use crate::metrics::{
    aggregate_delta, compute_log_error, compute_mu, compute_struct_error, compute_test_error,
    compute_verify_error, ChannelSet, ClauseKind, ErrorWeights, FeedbackVector, LogTrace,
    MetricsError, Specification, StructuralOutcome, TestOutcome, VerifyOutcome,
};
use crate::store::write_atomic;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("no runner bound to clause `{0}`")]
    MissingRunner(String),
    #[error("runner for `{clause}` uses parser {parser:?}, which cannot report a {kind} clause")]
    IncompatibleParser {
        clause: String,
        parser: OutputParser,
        kind: ClauseKind,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cache storage failed: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputParser {
    /// Exit status 0 passes.
    ExitCode,
    /// One `{"severity": s, "penalty": q}` record on stdout.
    SeverityJson,
    /// Exit status decides the clause; stdout carries newline-delimited
    /// `{"time": t, "level": l}` log records.
    TraceJson,
}

impl OutputParser {
    pub fn accepts(self, kind: ClauseKind) -> bool {
        match self {
            OutputParser::ExitCode => true,
            OutputParser::SeverityJson => kind == ClauseKind::Structural,
            OutputParser::TraceJson => kind != ClauseKind::Structural,
        }
    }
}

/// What a runner produced before parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawOutcome {
    Exited { code: i32, stdout: String, stderr: String },
    TimedOut { stderr: String },
    Crashed(String),
}

impl RawOutcome {
    pub fn pass() -> Self {
        RawOutcome::Exited {
            code: 0,
            stdout: String::new(),
            stderr: String::new(),
        }
    }

    pub fn fail() -> Self {
        RawOutcome::Exited {
            code: 1,
            stdout: String::new(),
            stderr: String::new(),
        }
    }

    pub fn stdout(code: i32, stdout: impl Into<String>) -> Self {
        RawOutcome::Exited {
            code,
            stdout: stdout.into(),
            stderr: String::new(),
        }
    }
}

/// Inputs handed to a runner for one clause of one candidate.
pub struct Job<'a> {
    pub candidate: &'a CandidateId,
    pub clause_id: &'a str,
    pub snapshot: &'a ArtifactSnapshot,
    /// Root under which per-candidate working directories may be created.
    pub work_root: &'a Path,
}

pub trait ClauseRunner: Send + Sync {
    /// Stable description of what the runner does; part of the cache key.
    fn definition(&self) -> String;
    fn parser(&self) -> OutputParser;
    fn execute(&self, job: &Job<'_>) -> RawOutcome;
}

/// Runs an external program inside an isolated copy of the candidate.
///
/// Arguments may contain `{workdir}`, replaced by the working directory
/// path. The directory is `<work_root>/<candidate id>/<clause id>` and is
/// removed after the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRunner {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub timeout: Duration,
    pub parser: OutputParser,
}

impl ClauseRunner for CommandRunner {
    fn definition(&self) -> String {
        format!(
            "command:{:?}:{:?}:{:?}:{}",
            self.program,
            self.args,
            self.parser,
            self.timeout.as_millis()
        )
    }

    fn parser(&self) -> OutputParser {
        self.parser
    }

    fn execute(&self, job: &Job<'_>) -> RawOutcome {
        let dir = job.work_root.join(job.candidate.to_hex()).join(sanitize(job.clause_id));
        let _ = fs::remove_dir_all(&dir);
        if let Err(e) = fs::create_dir_all(&dir).and_then(|_| job.snapshot.write_dir(&dir)) {
            return RawOutcome::Crashed(format!("cannot prepare {}: {e}", dir.display()));
        }
        let outcome = run_with_timeout(&self.program, &self.args, &dir, self.timeout);
        let _ = fs::remove_dir_all(&dir);
        if let Some(parent) = dir.parent() {
            // only succeeds once the last clause of this candidate is done
            let _ = fs::remove_dir(parent);
        }
        outcome
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn run_with_timeout(program: &str, args: &[String], dir: &Path, timeout: Duration) -> RawOutcome {
    let workdir = dir.to_string_lossy();
    let mut child = match Command::new(program)
        .args(args.iter().map(|a| a.replace("{workdir}", &workdir)))
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => return RawOutcome::Crashed(format!("cannot spawn `{program}`: {e}")),
    };
    let drain = |pipe: Option<Box<dyn Read + Send>>| {
        thread::spawn(move || {
            let mut buf = Vec::new();
            if let Some(mut p) = pipe {
                let _ = p.read_to_end(&mut buf);
            }
            String::from_utf8_lossy(&buf).into_owned()
        })
    };
    let out = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let err = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let status = match child.wait_timeout(timeout) {
        Ok(Some(status)) => Some(status),
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            None
        }
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            return RawOutcome::Crashed(format!("wait failed: {e}"));
        }
    };
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    match status {
        None => RawOutcome::TimedOut { stderr },
        Some(s) => match s.code() {
            Some(code) => RawOutcome::Exited { code, stdout, stderr },
            None => RawOutcome::Crashed(format!("`{program}` terminated by signal")),
        },
    }
}

/// In-process checks over the materialized snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum BuiltinCheck {
    /// Passes when `path` exists.
    FileExists { path: String },
    /// Passes when `pattern` matches somewhere in `path`.
    FileContains { path: String, pattern: String },
    /// Structural: severity is the match count of `pattern` in `path`
    /// divided by `limit`, capped at 1.
    ForbidPattern {
        path: String,
        pattern: String,
        #[serde(default = "one")]
        limit: usize,
        #[serde(default = "one_f")]
        penalty: f64,
    },
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl BuiltinCheck {
    pub fn parser(&self) -> OutputParser {
        match self {
            BuiltinCheck::ForbidPattern { .. } => OutputParser::SeverityJson,
            _ => OutputParser::ExitCode,
        }
    }
}

impl ClauseRunner for BuiltinCheck {
    fn definition(&self) -> String {
        format!("builtin:{}", serde_json::to_string(self).expect("builtin serializes"))
    }

    fn parser(&self) -> OutputParser {
        BuiltinCheck::parser(self)
    }

    fn execute(&self, job: &Job<'_>) -> RawOutcome {
        let exit = |ok: bool| if ok { RawOutcome::pass() } else { RawOutcome::fail() };
        match self {
            BuiltinCheck::FileExists { path } => exit(job.snapshot.files.contains_key(path)),
            BuiltinCheck::FileContains { path, pattern } => {
                let re = match Regex::new(pattern) {
                    Ok(r) => r,
                    Err(e) => return RawOutcome::Crashed(format!("bad pattern: {e}")),
                };
                exit(job.snapshot.text(path).is_some_and(|t| re.is_match(t)))
            }
            BuiltinCheck::ForbidPattern {
                path,
                pattern,
                limit,
                penalty,
            } => {
                let re = match Regex::new(pattern) {
                    Ok(r) => r,
                    Err(e) => return RawOutcome::Crashed(format!("bad pattern: {e}")),
                };
                let count = job.snapshot.text(path).map_or(0, |t| re.find_iter(t).count());
                let severity = (count as f64 / (*limit).max(1) as f64).min(1.0);
                RawOutcome::stdout(0, format!("{{\"severity\": {severity}, \"penalty\": {penalty}}}"))
            }
        }
    }
}

type ScriptFn = dyn Fn(&ArtifactSnapshot) -> RawOutcome + Send + Sync;

/// A closure-backed runner that counts its invocations.
pub struct ScriptedRunner {
    name: String,
    parser: OutputParser,
    script: Box<ScriptFn>,
    calls: Arc<AtomicUsize>,
}

impl ScriptedRunner {
    pub fn new(
        name: impl Into<String>,
        parser: OutputParser,
        script: impl Fn(&ArtifactSnapshot) -> RawOutcome + Send + Sync + 'static,
    ) -> Self {
        ScriptedRunner {
            name: name.into(),
            parser,
            script: Box::new(script),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Shared invocation counter.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.calls)
    }
}

impl ClauseRunner for ScriptedRunner {
    fn definition(&self) -> String {
        format!("scripted:{}", self.name)
    }

    fn parser(&self) -> OutputParser {
        self.parser
    }

    fn execute(&self, job: &Job<'_>) -> RawOutcome {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(job.snapshot)
    }
}

pub type RunnerSet = BTreeMap<String, Arc<dyn ClauseRunner>>;

/// Parsed result of one clause, as cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "channel", rename_all = "snake_case")]
pub enum ClauseOutcome {
    Test(TestOutcome),
    Structural(StructuralOutcome),
    Verify(VerifyOutcome),
}

impl ClauseOutcome {
    pub fn clause_id(&self) -> &str {
        match self {
            ClauseOutcome::Test(o) => &o.clause_id,
            ClauseOutcome::Structural(o) => &o.clause_id,
            ClauseOutcome::Verify(o) => &o.clause_id,
        }
    }

    pub fn satisfied(&self) -> bool {
        match self {
            ClauseOutcome::Test(o) => o.passed,
            ClauseOutcome::Structural(o) => !o.violated,
            ClauseOutcome::Verify(o) => o.holds,
        }
    }

    /// The outcome a clause of `kind` gets when its runner failed to report.
    fn worst(kind: ClauseKind, clause_id: &str) -> Self {
        let clause_id = clause_id.to_string();
        match kind {
            ClauseKind::Test => ClauseOutcome::Test(TestOutcome { clause_id, passed: false }),
            ClauseKind::Structural => ClauseOutcome::Structural(StructuralOutcome::new(clause_id, 1.0, 1.0)),
            ClauseKind::Verify => ClauseOutcome::Verify(VerifyOutcome { clause_id, holds: false }),
        }
    }

    fn from_status(kind: ClauseKind, clause_id: &str, ok: bool) -> Self {
        if !ok {
            return Self::worst(kind, clause_id);
        }
        let clause_id = clause_id.to_string();
        match kind {
            ClauseKind::Test => ClauseOutcome::Test(TestOutcome { clause_id, passed: true }),
            ClauseKind::Structural => ClauseOutcome::Structural(StructuralOutcome::clean(clause_id)),
            ClauseKind::Verify => ClauseOutcome::Verify(VerifyOutcome { clause_id, holds: true }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentKind {
    Timeout,
    Crash,
}

/// A runner that did not complete normally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub clause_id: String,
    pub kind: IncidentKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseResult {
    pub outcome: ClauseOutcome,
    /// `(time, level)` log samples contributed by this runner.
    #[serde(default)]
    pub log_points: Vec<(f64, f64)>,
    #[serde(default)]
    pub incident: Option<Incident>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    clause_id: String,
    result: ClauseResult,
}

/// Clause results keyed by (snapshot content, clause id, clause definition).
/// Concurrent reads, serialized writes; optionally persisted as one JSON file
/// per hex-encoded key.
pub struct VerificationCache {
    entries: RwLock<HashMap<Digest, CacheEntry>>,
    dir: Option<PathBuf>,
}

impl Default for VerificationCache {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl VerificationCache {
    pub fn in_memory() -> Self {
        VerificationCache {
            entries: RwLock::new(HashMap::new()),
            dir: None,
        }
    }

    pub fn open(dir: &Path) -> Result<Self, VerifyError> {
        fs::create_dir_all(dir)?;
        let mut entries = HashMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".json")) else {
                continue;
            };
            let Ok(key) = stem.parse::<Digest>() else { continue };
            // unreadable entries are recomputed on demand
            if let Ok(e) = fs::read(&path).map_err(|_| ()).and_then(|b| serde_json::from_slice(&b).map_err(|_| ())) {
                entries.insert(key, e);
            }
        }
        Ok(VerificationCache {
            entries: RwLock::new(entries),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &Digest) -> Option<ClauseResult> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .map(|e| e.result.clone())
    }

    fn insert(&self, key: Digest, clause_id: &str, result: ClauseResult) -> Result<(), VerifyError> {
        let entry = CacheEntry {
            clause_id: clause_id.to_string(),
            result,
        };
        let mut guard = self.entries.write().expect("cache lock poisoned");
        if let Some(dir) = &self.dir {
            let body = serde_json::to_vec(&entry).expect("cache entry serializes");
            write_atomic(&dir.join(format!("{}.json", key.to_hex())), &body)?;
        }
        guard.insert(key, entry);
        Ok(())
    }

    /// Evicts every entry belonging to one of `clause_ids`.
    pub fn invalidate(&self, clause_ids: &[&str]) -> usize {
        let mut guard = self.entries.write().expect("cache lock poisoned");
        let doomed: Vec<Digest> = guard
            .iter()
            .filter(|(_, e)| clause_ids.contains(&e.clause_id.as_str()))
            .map(|(k, _)| *k)
            .collect();
        for key in &doomed {
            guard.remove(key);
            if let Some(dir) = &self.dir {
                let _ = fs::remove_file(dir.join(format!("{}.json", key.to_hex())));
            }
        }
        doomed.len()
    }
}

/// Hash of everything that determines a clause's result except the
/// candidate: id, kind, runner definition and log heuristics.
pub fn clause_definition_hash(clause_id: &str, kind: ClauseKind, runner: &dyn ClauseRunner, patterns: &[String]) -> Digest {
    let text = format!(
        "{clause_id}\0{kind}\0{}\0{:?}\0{}",
        runner.definition(),
        runner.parser(),
        patterns.join("\u{1f}")
    );
    Digest::of(text.as_bytes())
}

pub fn cache_key(content: &Digest, clause_id: &str, definition: &Digest) -> Digest {
    let mut buf = Vec::with_capacity(96 + clause_id.len());
    buf.extend_from_slice(&content.0);
    buf.extend_from_slice(&(clause_id.len() as u64).to_le_bytes());
    buf.extend_from_slice(clause_id.as_bytes());
    buf.extend_from_slice(&definition.0);
    Digest::of(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub candidate_id: CandidateId,
    pub spec_version: u64,
    /// Sorted by clause id.
    pub outcomes: Vec<ClauseOutcome>,
    pub log_trace: LogTrace,
    pub channels: ChannelSet,
    pub feedback: FeedbackVector,
    pub delta: f64,
    pub mu: f64,
    pub cache_hits: usize,
    #[serde(default)]
    pub incidents: Vec<Incident>,
    /// Set when the candidate could not be materialized.
    #[serde(default)]
    pub infeasible: Option<String>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl VerificationReport {
    /// Rebuilds feedback and delta from the stored outcomes.
    pub fn recompute(&self, spec: &Specification, weights: &ErrorWeights) -> Result<(FeedbackVector, f64), MetricsError> {
        if self.infeasible.is_some() {
            return Ok((FeedbackVector::saturated(), 1.0));
        }
        let feedback = feedback_from(&self.outcomes, &self.log_trace, self.channels, spec)?;
        let delta = aggregate_delta(&feedback, weights, self.channels)?;
        Ok((feedback, delta))
    }

    /// Serialized form without timing, used to compare reports.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn feedback_from(
    outcomes: &[ClauseOutcome],
    trace: &LogTrace,
    channels: ChannelSet,
    spec: &Specification,
) -> Result<FeedbackVector, MetricsError> {
    let mut tests = Vec::new();
    let mut structs = Vec::new();
    let mut verifies = Vec::new();
    for o in outcomes {
        match o {
            ClauseOutcome::Test(t) => tests.push(t.clone()),
            ClauseOutcome::Structural(s) => structs.push(s.clone()),
            ClauseOutcome::Verify(v) => verifies.push(v.clone()),
        }
    }
    let mut f = FeedbackVector::default();
    if channels.test {
        f.e_test = compute_test_error(&tests, spec)?;
    }
    if channels.structural {
        f.e_struct = compute_struct_error(&structs, spec)?;
    }
    if channels.verify {
        f.e_verify = compute_verify_error(&verifies, spec)?;
    }
    if channels.logs {
        f.e_logs = compute_log_error(trace)?;
    }
    Ok(f)
}

#[derive(Debug, Clone, Default)]
pub struct VerifierConfig {
    pub worker_count: usize,
    /// Regexes flagging anomalous stderr lines.
    pub anomaly_patterns: Vec<String>,
    /// Root for per-candidate working directories of command runners.
    pub work_root: Option<PathBuf>,
}

/// Binds runners, cache and weights into the oracle.
pub struct Verifier {
    runners: RunnerSet,
    cache: Arc<VerificationCache>,
    weights: ErrorWeights,
    worker_count: usize,
    patterns: Vec<String>,
    compiled: Vec<Regex>,
    work_root: PathBuf,
}

impl Verifier {
    pub fn new(
        runners: RunnerSet,
        cache: Arc<VerificationCache>,
        weights: ErrorWeights,
        config: VerifierConfig,
    ) -> Result<Self, regex::Error> {
        let compiled = config
            .anomaly_patterns
            .iter()
            .map(|p| Regex::new(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Verifier {
            runners,
            cache,
            weights,
            worker_count: config.worker_count.max(1),
            patterns: config.anomaly_patterns,
            compiled,
            work_root: config
                .work_root
                .unwrap_or_else(|| std::env::temp_dir().join("refloop-work")),
        })
    }

    pub fn cache(&self) -> &Arc<VerificationCache> {
        &self.cache
    }

    pub fn weights(&self) -> &ErrorWeights {
        &self.weights
    }

    pub fn set_worker_count(&mut self, n: usize) {
        self.worker_count = n.max(1);
    }

    /// Checks every clause of `spec` has a runner with a compatible parser.
    pub fn check_bindings(&self, spec: &Specification) -> Result<(), VerifyError> {
        for clause in spec.clauses() {
            let runner = self
                .runners
                .get(&clause.id)
                .ok_or_else(|| VerifyError::MissingRunner(clause.id.clone()))?;
            if !runner.parser().accepts(clause.kind) {
                return Err(VerifyError::IncompatibleParser {
                    clause: clause.id.clone(),
                    parser: runner.parser(),
                    kind: clause.kind,
                });
            }
        }
        Ok(())
    }

    fn log_channel(&self, spec: &Specification) -> bool {
        !self.patterns.is_empty()
            || spec.clauses().iter().any(|c| {
                self.runners
                    .get(&c.id)
                    .is_some_and(|r| r.parser() == OutputParser::TraceJson)
            })
    }

    pub fn verify(
        &self,
        candidate: &Candidate,
        base: &ArtifactSnapshot,
        spec: &Specification,
    ) -> Result<VerificationReport, VerifyError> {
        let started = Instant::now();
        self.check_bindings(spec)?;
        let snapshot = match materialize(base, candidate) {
            Ok(s) => s,
            Err(e) => {
                return Ok(VerificationReport {
                    candidate_id: candidate.id,
                    spec_version: spec.version(),
                    outcomes: Vec::new(),
                    log_trace: LogTrace::quiet(),
                    channels: ChannelSet::for_spec(spec, self.log_channel(spec)),
                    feedback: FeedbackVector::saturated(),
                    delta: 1.0,
                    mu: 0.0,
                    cache_hits: 0,
                    incidents: Vec::new(),
                    infeasible: Some(e.to_string()),
                    wall_time: started.elapsed(),
                })
            }
        };
        let content = snapshot.content_id();

        let mut clauses: Vec<_> = spec.clauses().iter().collect();
        clauses.sort_by(|a, b| a.id.cmp(&b.id));

        let mut results: Vec<Option<ClauseResult>> = vec![None; clauses.len()];
        let mut keys = Vec::with_capacity(clauses.len());
        let mut pending = Vec::new();
        for (i, clause) in clauses.iter().enumerate() {
            let runner = &self.runners[&clause.id];
            let def = clause_definition_hash(&clause.id, clause.kind, runner.as_ref(), &self.patterns);
            let key = cache_key(&content, &clause.id, &def);
            keys.push(key);
            match self.cache.get(&key) {
                Some(hit) => results[i] = Some(hit),
                None => pending.push(i),
            }
        }
        let cache_hits = clauses.len() - pending.len();

        let fresh = self.execute_all(&pending, &clauses, &candidate.id, &snapshot);
        for (i, result) in pending.iter().copied().zip(fresh) {
            self.cache.insert(keys[i], &clauses[i].id, result.clone())?;
            results[i] = Some(result);
        }

        let results: Vec<ClauseResult> = results.into_iter().map(|r| r.expect("every clause resolved")).collect();
        let log_trace = LogTrace::from_points(results.iter().flat_map(|r| r.log_points.iter().copied()));
        let channels = ChannelSet::for_spec(spec, self.log_channel(spec));
        let outcomes: Vec<ClauseOutcome> = results.iter().map(|r| r.outcome.clone()).collect();
        let incidents: Vec<Incident> = results.iter().filter_map(|r| r.incident.clone()).collect();
        let feedback = feedback_from(&outcomes, &log_trace, channels, spec)?;
        let delta = aggregate_delta(&feedback, &self.weights, channels)?;
        let mu = compute_mu(outcomes.iter().map(|o| (o.clause_id(), o.satisfied())), spec)?;

        Ok(VerificationReport {
            candidate_id: candidate.id,
            spec_version: spec.version(),
            outcomes,
            log_trace,
            channels,
            feedback,
            delta,
            mu,
            cache_hits,
            incidents,
            infeasible: None,
            wall_time: started.elapsed(),
        })
    }

    /// Runs the pending clauses on at most `worker_count` threads. Results
    /// come back in `pending` order whatever the completion order.
    fn execute_all(
        &self,
        pending: &[usize],
        clauses: &[&crate::metrics::SpecClause],
        candidate: &CandidateId,
        snapshot: &ArtifactSnapshot,
    ) -> Vec<ClauseResult> {
        let run_one = |i: usize| {
            let clause = clauses[i];
            let runner = &self.runners[&clause.id];
            let job = Job {
                candidate,
                clause_id: &clause.id,
                snapshot,
                work_root: &self.work_root,
            };
            let raw = runner.execute(&job);
            self.parse(clause.kind, &clause.id, runner.parser(), raw)
        };
        let workers = self.worker_count.min(pending.len());
        if workers <= 1 {
            return pending.iter().map(|&i| run_one(i)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<ClauseResult>>> = Mutex::new(vec![None; pending.len()]);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    if k >= pending.len() {
                        break;
                    }
                    let r = run_one(pending[k]);
                    slots.lock().expect("result lock poisoned")[k] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("result lock poisoned")
            .into_iter()
            .map(|r| r.expect("worker filled every slot"))
            .collect()
    }

    fn anomaly_points(&self, stderr: &str) -> Vec<(f64, f64)> {
        if self.compiled.is_empty() {
            return Vec::new();
        }
        stderr
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let hit = self.compiled.iter().any(|re| re.is_match(line));
                (i as f64, if hit { 1.0 } else { 0.0 })
            })
            .collect()
    }

    fn parse(&self, kind: ClauseKind, clause_id: &str, parser: OutputParser, raw: RawOutcome) -> ClauseResult {
        let incident = |kind: IncidentKind, message: String| Incident {
            clause_id: clause_id.to_string(),
            kind,
            message,
        };
        match raw {
            RawOutcome::TimedOut { stderr } => ClauseResult {
                outcome: ClauseOutcome::worst(kind, clause_id),
                log_points: self.anomaly_points(&stderr),
                incident: Some(incident(IncidentKind::Timeout, "runner timed out".into())),
            },
            RawOutcome::Crashed(msg) => ClauseResult {
                outcome: ClauseOutcome::worst(kind, clause_id),
                log_points: Vec::new(),
                incident: Some(incident(IncidentKind::Crash, msg)),
            },
            RawOutcome::Exited { code, stdout, stderr } => {
                let mut log_points = self.anomaly_points(&stderr);
                let outcome = match parser {
                    OutputParser::ExitCode => ClauseOutcome::from_status(kind, clause_id, code == 0),
                    OutputParser::TraceJson => match parse_trace(&stdout) {
                        Ok(points) => {
                            log_points.extend(points);
                            ClauseOutcome::from_status(kind, clause_id, code == 0)
                        }
                        Err(e) => {
                            return ClauseResult {
                                outcome: ClauseOutcome::worst(kind, clause_id),
                                log_points,
                                incident: Some(incident(IncidentKind::Crash, format!("bad trace output: {e}"))),
                            }
                        }
                    },
                    OutputParser::SeverityJson => match parse_severity(&stdout) {
                        Ok((s, q)) => ClauseOutcome::Structural(StructuralOutcome::new(clause_id, s, q)),
                        Err(e) => {
                            return ClauseResult {
                                outcome: ClauseOutcome::worst(kind, clause_id),
                                log_points,
                                incident: Some(incident(IncidentKind::Crash, format!("bad severity output: {e}"))),
                            }
                        }
                    },
                };
                ClauseResult {
                    outcome,
                    log_points,
                    incident: None,
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct SeverityRecord {
    severity: f64,
    penalty: f64,
}

#[derive(Deserialize)]
struct TraceRecord {
    time: f64,
    level: f64,
}

fn parse_severity(stdout: &str) -> Result<(f64, f64), String> {
    let rec: SeverityRecord = serde_json::from_str(stdout.trim()).map_err(|e| e.to_string())?;
    for (name, v) in [("severity", rec.severity), ("penalty", rec.penalty)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} {v} outside [0,1]"));
        }
    }
    Ok((rec.severity, rec.penalty))
}

fn parse_trace(stdout: &str) -> Result<Vec<(f64, f64)>, String> {
    stdout
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: TraceRecord = serde_json::from_str(l).map_err(|e| e.to_string())?;
            if !(r.time.is_finite() && r.time >= 0.0) || !(0.0..=1.0).contains(&r.level) {
                return Err(format!("record out of range: {l}"));
            }
            Ok((r.time, r.level))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::Edit;
    use crate::metrics::SpecClause;

    fn base() -> ArtifactSnapshot {
        ArtifactSnapshot::from_texts([("main.txt", "value = 3\n")])
    }

    fn value(s: &ArtifactSnapshot) -> i64 {
        s.text("main.txt")
            .and_then(|t| t.trim().strip_prefix("value = "))
            .and_then(|v| v.parse().ok())
            .unwrap_or(-1)
    }

    fn fixture() -> (Specification, RunnerSet) {
        let spec = Specification::new(vec![
            SpecClause::new("t-pos", ClauseKind::Test, 1.0),
            SpecClause::new("t-even", ClauseKind::Test, 3.0),
            SpecClause::new("s-size", ClauseKind::Structural, 1.0),
            SpecClause::new("v-small", ClauseKind::Verify, 2.0),
        ])
        .unwrap();
        let mut runners: RunnerSet = BTreeMap::new();
        runners.insert(
            "t-pos".into(),
            Arc::new(ScriptedRunner::new("pos", OutputParser::ExitCode, |s| {
                if value(s) > 0 { RawOutcome::pass() } else { RawOutcome::fail() }
            })),
        );
        runners.insert(
            "t-even".into(),
            Arc::new(ScriptedRunner::new("even", OutputParser::TraceJson, |s| {
                let v = value(s);
                let lvl = if v % 2 == 0 { 0.0 } else { 1.0 };
                RawOutcome::stdout(
                    if v % 2 == 0 { 0 } else { 1 },
                    format!("{{\"time\": 0, \"level\": 0}}\n{{\"time\": 2, \"level\": {lvl}}}\n"),
                )
            })),
        );
        runners.insert(
            "s-size".into(),
            Arc::new(ScriptedRunner::new("size", OutputParser::SeverityJson, |s| {
                let sev = (value(s) as f64 / 10.0).clamp(0.0, 1.0);
                RawOutcome::stdout(0, format!("{{\"severity\": {sev}, \"penalty\": 0.5}}"))
            })),
        );
        runners.insert(
            "v-small".into(),
            Arc::new(ScriptedRunner::new("small", OutputParser::ExitCode, |s| {
                if value(s) < 5 { RawOutcome::pass() } else { RawOutcome::fail() }
            })),
        );
        (spec, runners)
    }

    fn verifier(runners: RunnerSet, workers: usize) -> Verifier {
        Verifier::new(
            runners,
            Arc::new(VerificationCache::in_memory()),
            ErrorWeights::default(),
            VerifierConfig {
                worker_count: workers,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn partial_failures_shape_mu() {
        let (spec, runners) = fixture();
        let v = verifier(runners, 2);
        let b = base();
        let c = Candidate::derive(&b.content_id(), vec![Edit::set_parameter("main.txt", "value", "0")], Candidate::root(&b).id, 1);
        let r = v.verify(&c, &b, &spec).unwrap();
        // value 0 fails t-pos only
        assert_eq!(r.mu, 0.75);
        let c2 = Candidate::derive(&b.content_id(), vec![Edit::set_parameter("main.txt", "value", "2")], c.id, 1);
        let r2 = v.verify(&c2, &b, &spec).unwrap();
        assert_eq!(r2.outcomes.iter().filter(|o| o.satisfied()).count(), 3);
        assert!(r2.delta > 0.0, "structural severity 0.2 keeps delta positive");
    }

    #[test]
    fn fully_green_candidate() {
        let spec = Specification::new(vec![SpecClause::new("t", ClauseKind::Test, 1.0)]).unwrap();
        let runners: RunnerSet =
            BTreeMap::from([("t".to_string(), Arc::new(ScriptedRunner::new("ok", OutputParser::ExitCode, |_| RawOutcome::pass())) as Arc<dyn ClauseRunner>)]);
        let b = base();
        let r = verifier(runners, 1).verify(&Candidate::root(&b), &b, &spec).unwrap();
        assert_eq!((r.delta, r.mu), (0.0, 1.0));
        assert!(!r.channels.logs);
    }

    #[test]
    fn outcomes_are_clause_ordered_and_recomputable() {
        let (spec, runners) = fixture();
        let v = verifier(runners, 3);
        let b = base();
        let r = v.verify(&Candidate::root(&b), &b, &spec).unwrap();
        let ids: Vec<&str> = r.outcomes.iter().map(|o| o.clause_id()).collect();
        assert_eq!(ids, vec!["s-size", "t-even", "t-pos", "v-small"]);
        let (f, d) = r.recompute(&spec, &ErrorWeights::default()).unwrap();
        assert_eq!(f, r.feedback);
        assert_eq!(d, r.delta);
        assert!(r.channels.logs);
        // odd value: level 0 -> 1 over [0, 2]
        assert_eq!(r.feedback.e_logs, 0.5);
    }

    #[test]
    fn second_verification_is_served_from_cache() {
        let (spec, runners) = fixture();
        let v = verifier(runners, 4);
        let b = base();
        let c = Candidate::root(&b);
        let first = v.verify(&c, &b, &spec).unwrap();
        let second = v.verify(&c, &b, &spec).unwrap();
        assert_eq!(first.cache_hits, 0);
        assert_eq!(second.cache_hits, spec.len());
        assert_eq!(first.feedback, second.feedback);
    }

    #[test]
    fn invalidation_counts_and_cools_clause() {
        let (spec, runners) = fixture();
        let v = verifier(runners, 1);
        assert_eq!(v.cache().invalidate(&["t-pos"]), 0);
        let b = base();
        let mut ids = Vec::new();
        let small = Specification::new(vec![
            SpecClause::new("t-pos", ClauseKind::Test, 1.0),
            SpecClause::new("v-small", ClauseKind::Verify, 1.0),
        ])
        .unwrap();
        for n in 1..=3 {
            let c = Candidate::derive(&b.content_id(), vec![Edit::set_parameter("main.txt", "value", n.to_string())], Candidate::root(&b).id, 1);
            v.verify(&c, &b, &small).unwrap();
            ids.push(c);
        }
        assert_eq!(v.cache().len(), 6);
        assert_eq!(v.cache().invalidate(&["t-pos"]), 3);
        let again = v.verify(&ids[0], &b, &small).unwrap();
        assert_eq!(again.cache_hits, 1);
        let _ = spec;
    }

    #[test]
    fn infeasible_candidate_gets_maximal_delta() {
        let (spec, runners) = fixture();
        let b = base();
        let c = Candidate::derive(&b.content_id(), vec![Edit::delete("missing.txt", 0, 1)], Candidate::root(&b).id, 1);
        let r = verifier(runners, 1).verify(&c, &b, &spec).unwrap();
        assert_eq!(r.delta, 1.0);
        assert!(r.outcomes.is_empty());
        assert!(r.infeasible.is_some());
    }

    #[test]
    fn timeouts_and_crashes_count_as_worst_case() {
        let spec = Specification::new(vec![
            SpecClause::new("t", ClauseKind::Test, 1.0),
            SpecClause::new("s", ClauseKind::Structural, 1.0),
        ])
        .unwrap();
        let runners: RunnerSet = BTreeMap::from([
            (
                "t".to_string(),
                Arc::new(ScriptedRunner::new("slow", OutputParser::ExitCode, |_| RawOutcome::TimedOut { stderr: String::new() }))
                    as Arc<dyn ClauseRunner>,
            ),
            (
                "s".to_string(),
                Arc::new(ScriptedRunner::new("boom", OutputParser::SeverityJson, |_| RawOutcome::Crashed("segfault".into())))
                    as Arc<dyn ClauseRunner>,
            ),
        ]);
        let b = base();
        let r = verifier(runners, 2).verify(&Candidate::root(&b), &b, &spec).unwrap();
        assert_eq!(r.feedback.e_test, 1.0);
        assert_eq!(r.feedback.e_struct, 1.0);
        assert_eq!(r.delta, 1.0);
        let kinds: Vec<IncidentKind> = r.incidents.iter().map(|i| i.kind).collect();
        assert_eq!(kinds, vec![IncidentKind::Crash, IncidentKind::Timeout]);
    }

    #[test]
    fn malformed_severity_output_is_a_crash() {
        let spec = Specification::new(vec![SpecClause::new("s", ClauseKind::Structural, 1.0)]).unwrap();
        let runners: RunnerSet = BTreeMap::from([(
            "s".to_string(),
            Arc::new(ScriptedRunner::new("junk", OutputParser::SeverityJson, |_| RawOutcome::stdout(0, "not json")))
                as Arc<dyn ClauseRunner>,
        )]);
        let b = base();
        let r = verifier(runners, 1).verify(&Candidate::root(&b), &b, &spec).unwrap();
        assert_eq!(r.feedback.e_struct, 1.0);
        assert_eq!(r.incidents.len(), 1);
    }

    #[test]
    fn anomaly_patterns_feed_log_channel() {
        let spec = Specification::new(vec![SpecClause::new("t", ClauseKind::Test, 1.0)]).unwrap();
        let runners: RunnerSet = BTreeMap::from([(
            "t".to_string(),
            Arc::new(ScriptedRunner::new("noisy", OutputParser::ExitCode, |_| RawOutcome::Exited {
                code: 0,
                stdout: String::new(),
                stderr: "ok\nWARN disk\nok\n".into(),
            })) as Arc<dyn ClauseRunner>,
        )]);
        let v = Verifier::new(
            runners,
            Arc::new(VerificationCache::in_memory()),
            ErrorWeights::default(),
            VerifierConfig {
                worker_count: 1,
                anomaly_patterns: vec!["WARN".into()],
                work_root: None,
            },
        )
        .unwrap();
        let b = base();
        let r = v.verify(&Candidate::root(&b), &b, &spec).unwrap();
        assert!(r.channels.logs);
        // levels 0,1,0 at t = 0,1,2: area 1 over horizon 2
        assert_eq!(r.feedback.e_logs, 0.5);
    }

    #[test]
    fn missing_runner_and_bad_parser_are_rejected() {
        let spec = Specification::new(vec![SpecClause::new("t", ClauseKind::Test, 1.0)]).unwrap();
        let b = base();
        assert!(matches!(
            verifier(BTreeMap::new(), 1).verify(&Candidate::root(&b), &b, &spec),
            Err(VerifyError::MissingRunner(_))
        ));
        let runners: RunnerSet = BTreeMap::from([(
            "t".to_string(),
            Arc::new(ScriptedRunner::new("x", OutputParser::SeverityJson, |_| RawOutcome::pass())) as Arc<dyn ClauseRunner>,
        )]);
        assert!(matches!(
            verifier(runners, 1).verify(&Candidate::root(&b), &b, &spec),
            Err(VerifyError::IncompatibleParser { .. })
        ));
    }

    #[test]
    fn builtin_checks() {
        let snap = ArtifactSnapshot::from_texts([("src/a.rs", "fn main() { todo!() }\n// TODO\n// TODO\n")]);
        let id = Candidate::root(&snap).id;
        let tmp = std::env::temp_dir();
        let job = Job {
            candidate: &id,
            clause_id: "x",
            snapshot: &snap,
            work_root: &tmp,
        };
        assert_eq!(BuiltinCheck::FileExists { path: "src/a.rs".into() }.execute(&job), RawOutcome::pass());
        assert_eq!(
            BuiltinCheck::FileContains {
                path: "src/a.rs".into(),
                pattern: "fn\\s+main".into()
            }
            .execute(&job),
            RawOutcome::pass()
        );
        let forbid = BuiltinCheck::ForbidPattern {
            path: "src/a.rs".into(),
            pattern: "TODO".into(),
            limit: 4,
            penalty: 1.0,
        };
        assert_eq!(parse_severity(&match forbid.execute(&job) {
            RawOutcome::Exited { stdout, .. } => stdout,
            other => panic!("{other:?}"),
        }), Ok((0.5, 1.0)));
    }

    #[cfg(unix)]
    #[test]
    fn command_runner_sees_isolated_snapshot() {
        let root = tempfile::tempdir().unwrap();
        let snap = base();
        let id = Candidate::root(&snap).id;
        let job = Job {
            candidate: &id,
            clause_id: "grep",
            snapshot: &snap,
            work_root: root.path(),
        };
        let runner = CommandRunner {
            program: "grep".into(),
            args: vec!["-q".into(), "value = 3".into(), "{workdir}/main.txt".into()],
            timeout: Duration::from_secs(10),
            parser: OutputParser::ExitCode,
        };
        assert!(matches!(runner.execute(&job), RawOutcome::Exited { code: 0, .. }));
        assert!(!root.path().join(id.to_hex()).exists());
    }

    #[cfg(unix)]
    #[test]
    fn command_runner_times_out() {
        let root = tempfile::tempdir().unwrap();
        let snap = base();
        let id = Candidate::root(&snap).id;
        let job = Job {
            candidate: &id,
            clause_id: "slow",
            snapshot: &snap,
            work_root: root.path(),
        };
        let runner = CommandRunner {
            program: "sleep".into(),
            args: vec!["5".into()],
            timeout: Duration::from_millis(100),
            parser: OutputParser::ExitCode,
        };
        let started = Instant::now();
        assert!(matches!(runner.execute(&job), RawOutcome::TimedOut { .. }));
        assert!(started.elapsed() < Duration::from_secs(4));
        let missing = CommandRunner {
            program: "/definitely/not/here".into(),
            ..runner
        };
        assert!(matches!(missing.execute(&job), RawOutcome::Crashed(_)));
    }

    #[test]
    fn disk_cache_persists_entries() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, runners) = fixture();
        let b = base();
        let c = Candidate::root(&b);
        {
            let v = Verifier::new(
                runners.clone(),
                Arc::new(VerificationCache::open(dir.path()).unwrap()),
                ErrorWeights::default(),
                VerifierConfig::default(),
            )
            .unwrap();
            v.verify(&c, &b, &spec).unwrap();
        }
        let v = Verifier::new(
            runners,
            Arc::new(VerificationCache::open(dir.path()).unwrap()),
            ErrorWeights::default(),
            VerifierConfig::default(),
        )
        .unwrap();
        assert_eq!(v.verify(&c, &b, &spec).unwrap().cache_hits, spec.len());
        assert_eq!(v.cache().invalidate(&["t-pos", "v-small"]), 2);
        assert_eq!(VerificationCache::open(dir.path()).unwrap().len(), 2);
    }
}
