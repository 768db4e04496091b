//! The refinement loop.
//!
//! Each iteration applies due demand events, picks surviving candidates from
//! the distribution, verifies them, asks the generator for proposals around
//! a focal candidate, verifies the newcomers, writes feedback into the
//! history store, reweights the distribution and appends an
//! [`IterationRecord`].
//!
//! A run directory holds `config.toml`, a copy of the base artifact under
//! `base/`, `records.jsonl`, `history.jsonl`, the verification cache under
//! `cache/` and, once finished, `report.json`. All loop state is rebuilt
//! from the records on resume, so a resumed run continues exactly as an
//! uninterrupted one would.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::context::{
    render_bundle, select_context, ContextError, HistoryStore, NewItem, Origin, Query, Scorer, SeverityClass,
};
use crate::distribution::{
    admit_candidates, gibbs_update, select_pool, CandidateDistribution, DistributionError,
};
use crate::generator::{render_excerpt, spec_digest, validate_proposal, Generator, GeneratorError, ProposalRequest, Validation};
use crate::hypothesis::{materialize, ArtifactSnapshot, Candidate, CandidateId, Digest};
use crate::metrics::{ClauseKind, FeedbackVector, MetricsError, SpecClause, Specification};
use crate::store::write_atomic;
use crate::verification::{
    ClauseOutcome, RunnerSet, VerificationCache, VerificationReport, Verifier, VerifierConfig, VerifyError,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const BASE_DIR: &str = "base";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CACHE_DIR: &str = "cache";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run storage failed: {0}")]
    Storage(#[from] io::Error),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("no run found in {0}")]
    NoRun(PathBuf),
    #[error("{0} already holds a run; resume it instead")]
    AlreadyExists(PathBuf),
    #[error("corrupt run records: {0}")]
    Corrupt(String),
}

/// Clauses joining the specification at the start of `at_iteration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandEvent {
    pub at_iteration: u64,
    pub new_clauses: Vec<SpecClause>,
}

/// Everything a run needs besides its directory.
pub struct RunSetup {
    pub base: ArtifactSnapshot,
    pub spec: Specification,
    pub demands: Vec<DemandEvent>,
    /// Runners for every clause, including those arriving with demands.
    pub runners: RunnerSet,
    pub generator: Box<dyn Generator>,
    /// Knob sections are used; clause and demand sections were already
    /// turned into the fields above.
    pub config: RunConfig,
}

/// Appends clauses; the version bump makes every previously computed δ
/// stale until its candidate is evaluated again.
pub fn extend_spec(spec: &Specification, new_clauses: Vec<SpecClause>) -> Result<Specification, MetricsError> {
    spec.extended(new_clauses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub candidate: CandidateId,
    pub delta: f64,
    pub mu: f64,
    pub feedback: FeedbackVector,
    pub cache_hits: usize,
    #[serde(default)]
    pub incidents: usize,
    #[serde(default)]
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u64,
    pub spec_version: u64,
    /// Survivors first, then newcomers.
    pub pool: Vec<CandidateId>,
    pub evaluations: Vec<Evaluation>,
    /// Candidates first seen this iteration.
    pub new_candidates: Vec<Candidate>,
    pub proposals_requested: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_note: Option<String>,
    /// Distribution after the update.
    pub distribution: CandidateDistribution,
    pub incumbent: CandidateId,
    pub best_delta: f64,
    pub cache_hits: usize,
    pub clause_evaluations: usize,
    #[serde(default)]
    pub wall_ms: u64,
}

impl IterationRecord {
    /// The record with timing zeroed, for comparisons.
    pub fn canonical(&self) -> IterationRecord {
        IterationRecord {
            wall_ms: 0,
            ..self.clone()
        }
    }

    pub fn cache_hit_rate(&self) -> f64 {
        if self.clause_evaluations == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.clause_evaluations as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Success,
    Budget,
    Stall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub termination: Termination,
    pub iterations: u64,
    pub final_candidate: Candidate,
    pub final_delta: f64,
    pub final_mu: f64,
    pub spec_version: u64,
    pub proposals_total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub report: RunReport,
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Known {
    delta: f64,
    mu: f64,
    version: u64,
}

/// Result of [`Orchestrator::resume`].
pub enum Resumed {
    Finished(RunResult),
    Running(Box<Orchestrator>),
}

pub struct Orchestrator {
    base: ArtifactSnapshot,
    base_id: Digest,
    spec: Specification,
    demands: Vec<DemandEvent>,
    applied_demands: usize,
    generator: Box<dyn Generator>,
    verifier: Verifier,
    config: RunConfig,
    history: HistoryStore,
    failure_counts: BTreeMap<String, u64>,
    registry: BTreeMap<CandidateId, Candidate>,
    dist: CandidateDistribution,
    known: BTreeMap<CandidateId, Known>,
    incumbent: CandidateId,
    since_improvement: u64,
    proposals_total: usize,
    records: Vec<IterationRecord>,
    dir: Option<PathBuf>,
    records_file: Option<File>,
    finished: Option<RunReport>,
}

fn derive_seed(seed: u64, t: u64, tag: &str) -> u64 {
    let mut buf = tag.as_bytes().to_vec();
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&t.to_le_bytes());
    u64::from_le_bytes(Digest::of(&buf).0[..8].try_into().expect("8 bytes"))
}

impl Orchestrator {
    /// Starts a fresh run. With a directory, run state is persisted there;
    /// the directory must not already hold a run.
    pub fn create(setup: RunSetup, dir: Option<&Path>) -> Result<Self, RunError> {
        setup.config.validate_knobs()?;
        if setup.spec.is_empty() {
            return Err(ConfigError::Invalid(vec!["clauses: at least one clause is required".into()]).into());
        }
        if let Some(dir) = dir {
            if dir.join(RECORDS_FILE).exists() {
                return Err(RunError::AlreadyExists(dir.to_path_buf()));
            }
            fs::create_dir_all(dir)?;
            write_atomic(&dir.join(CONFIG_FILE), setup.config.to_toml().as_bytes())?;
            let base_dir = dir.join(BASE_DIR);
            if base_dir.exists() {
                fs::remove_dir_all(&base_dir)?;
            }
            setup.base.write_dir(&base_dir)?;
            File::create(dir.join(RECORDS_FILE))?.sync_all()?;
        }
        Self::assemble(setup, dir)
    }

    fn assemble(setup: RunSetup, dir: Option<&Path>) -> Result<Self, RunError> {
        let RunSetup {
            base,
            spec,
            mut demands,
            runners,
            generator,
            config,
        } = setup;
        demands.sort_by_key(|d| d.at_iteration);
        let (cache, history, records_file) = match dir {
            Some(d) => (
                VerificationCache::open(&d.join(CACHE_DIR))?,
                HistoryStore::open(&d.join(HISTORY_FILE))?,
                Some(OpenOptions::new().append(true).open(d.join(RECORDS_FILE))?),
            ),
            None => (VerificationCache::in_memory(), HistoryStore::in_memory(), None),
        };
        let verifier = Verifier::new(
            runners,
            Arc::new(cache),
            config.weights,
            VerifierConfig {
                worker_count: config.verification.worker_count,
                anomaly_patterns: config.verification.anomaly_patterns.clone(),
                work_root: dir.map(|d| d.join("work")),
            },
        )
        .map_err(|e| ConfigError::Invalid(vec![format!("verification.anomaly_patterns: {e}")]))?;
        verifier.check_bindings(&spec)?;
        for d in &demands {
            for c in &d.new_clauses {
                if !verifier_has(&verifier, c) {
                    return Err(VerifyError::MissingRunner(c.id.clone()).into());
                }
            }
        }
        let root = Candidate::root(&base);
        let base_id = base.content_id();
        Ok(Orchestrator {
            base,
            base_id,
            spec,
            demands,
            applied_demands: 0,
            generator,
            verifier,
            config,
            history,
            failure_counts: BTreeMap::new(),
            registry: BTreeMap::from([(root.id, root.clone())]),
            dist: CandidateDistribution::singleton(root.id),
            known: BTreeMap::new(),
            incumbent: root.id,
            since_improvement: 0,
            proposals_total: 0,
            records: Vec::new(),
            dir: dir.map(Path::to_path_buf),
            records_file,
            finished: None,
        })
    }

    /// Continues a run from its directory with caller-supplied inputs. The
    /// inputs must match the ones the run started with.
    pub fn resume(setup: RunSetup, dir: &Path) -> Result<Resumed, RunError> {
        let records_path = dir.join(RECORDS_FILE);
        if !records_path.exists() {
            return Err(RunError::NoRun(dir.to_path_buf()));
        }
        let records = read_records(&records_path)?;
        let report_path = dir.join(REPORT_FILE);
        if report_path.exists() {
            let report: RunReport = serde_json::from_slice(&fs::read(&report_path)?)
                .map_err(|e| RunError::Corrupt(format!("{REPORT_FILE}: {e}")))?;
            return Ok(Resumed::Finished(RunResult { report, records }));
        }
        let mut orch = Self::assemble(setup, Some(dir))?;
        let last_t = records.last().map_or(0, |r| r.t);
        orch.history.truncate_after(last_t)?;
        for item in orch.history.snapshot() {
            if let Some(c) = item.clause_id {
                *orch.failure_counts.entry(c).or_default() += 1;
            }
        }
        if let Some(first) = records.first() {
            if !first.pool.contains(&Candidate::root(&orch.base).id) {
                return Err(RunError::Corrupt("base artifact differs from the one the run started with".into()));
            }
        }
        for record in records {
            orch.apply_due_demands(record.t)?;
            if record.spec_version != orch.spec.version() {
                return Err(RunError::Corrupt(format!(
                    "record t={} has spec version {}, replay gives {}",
                    record.t,
                    record.spec_version,
                    orch.spec.version()
                )));
            }
            orch.absorb(record)?;
        }
        if let Some(term) = orch.termination() {
            let result = orch.finish(term)?;
            return Ok(Resumed::Finished(result));
        }
        Ok(Resumed::Running(Box::new(orch)))
    }

    /// Resumes using the config and base artifact stored in `dir`.
    pub fn resume_dir(dir: &Path) -> Result<Resumed, RunError> {
        let config_path = dir.join(CONFIG_FILE);
        if !config_path.exists() {
            return Err(RunError::NoRun(dir.to_path_buf()));
        }
        let config = RunConfig::load(&config_path)?;
        let setup = config.build_setup(Some(&dir.join(BASE_DIR)))?;
        Self::resume(setup, dir)
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn spec(&self) -> &Specification {
        &self.spec
    }

    pub fn distribution(&self) -> &CandidateDistribution {
        &self.dist
    }

    pub fn history(&self) -> &HistoryStore {
        &self.history
    }

    pub fn verifier(&self) -> &Verifier {
        &self.verifier
    }

    pub fn candidate(&self, id: &CandidateId) -> Option<&Candidate> {
        self.registry.get(id)
    }

    pub fn is_finished(&self) -> bool {
        self.finished.is_some()
    }

    /// Runs one iteration. Returns the termination reason once the run is
    /// over; further calls return it again without doing work.
    pub fn step(&mut self) -> Result<Option<Termination>, RunError> {
        if let Some(r) = &self.finished {
            return Ok(Some(r.termination));
        }
        let started = Instant::now();
        let t = self.records.len() as u64 + 1;
        self.apply_due_demands(t)?;
        let cfg = self.config.clone();
        let version = self.spec.version();

        let survivors = select_pool(
            &self.dist,
            cfg.search.survivors,
            cfg.search.exploration_fraction,
            derive_seed(cfg.seed, t, "pool"),
            Some(&self.incumbent),
        );
        let mut known = self.known.clone();
        let mut reports: BTreeMap<CandidateId, VerificationReport> = BTreeMap::new();
        for id in &survivors {
            let report = self.verify(id)?;
            known.insert(*id, known_of(&report, version));
            reports.insert(*id, report);
        }
        let mut incumbent = choose_incumbent(&known, version, self.incumbent);

        let mut notes: Vec<String> = Vec::new();
        let mut new_candidates = Vec::new();
        let mut proposals_requested = 0;
        let mut dist = self.dist.clone();
        let satisfied = known[&incumbent].delta <= cfg.termination.delta_threshold;
        if !(satisfied && !self.demand_pending(t)) {
            let n = cfg.search.pool_size.saturating_sub(survivors.len()).max(1);
            let focal = self.focal(&survivors, &cfg, t);
            proposals_requested = n;
            match self.propose(&focal, n, &cfg, t) {
                Ok((fresh, mut dropped)) => {
                    new_candidates = fresh;
                    notes.append(&mut dropped);
                }
                Err(e) if e.is_retriable() => notes.push(e.to_string()),
                Err(e) => return Err(e.into()),
            }
            let ids: Vec<CandidateId> = new_candidates.iter().map(|c: &Candidate| c.id).collect();
            dist = admit_candidates(&dist, &ids, cfg.search.newcomer_mass)?;
            for c in &new_candidates {
                self.registry.insert(c.id, c.clone());
                let report = self.verify(&c.id)?;
                known.insert(c.id, known_of(&report, version));
                reports.insert(c.id, report);
            }
            incumbent = choose_incumbent(&known, version, incumbent);
        }

        self.record_feedback(&reports[&incumbent], &notes, t)?;

        let pool: Vec<CandidateId> = survivors
            .iter()
            .copied()
            .chain(new_candidates.iter().map(|c| c.id))
            .collect();
        let pool_deltas: BTreeMap<CandidateId, f64> = pool.iter().map(|id| (*id, known[id].delta)).collect();
        let last_known: BTreeMap<CandidateId, f64> = known.iter().map(|(id, k)| (*id, k.delta)).collect();
        let updated = gibbs_update(&dist, &pool_deltas, &last_known, cfg.search.lambda)?;

        let evaluations: Vec<Evaluation> = pool
            .iter()
            .map(|id| {
                let r = &reports[id];
                Evaluation {
                    candidate: *id,
                    delta: r.delta,
                    mu: r.mu,
                    feedback: r.feedback,
                    cache_hits: r.cache_hits,
                    incidents: r.incidents.len(),
                    infeasible: r.infeasible.is_some(),
                }
            })
            .collect();
        let cache_hits = evaluations.iter().map(|e| e.cache_hits).sum();
        let record = IterationRecord {
            t,
            spec_version: version,
            clause_evaluations: pool.len() * self.spec.len(),
            pool,
            evaluations,
            new_candidates,
            proposals_requested,
            generator_note: (!notes.is_empty()).then(|| notes.join("; ")),
            distribution: updated,
            incumbent,
            best_delta: known[&incumbent].delta,
            cache_hits,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        self.persist(&record)?;
        self.absorb(record)?;
        match self.termination() {
            Some(term) => {
                self.finish(term)?;
                Ok(Some(term))
            }
            None => Ok(None),
        }
    }

    /// Steps until the run terminates.
    pub fn run_to_end(mut self) -> Result<RunResult, RunError> {
        while self.step()?.is_none() {}
        self.result()
    }

    /// Final result of a finished run.
    pub fn result(&self) -> Result<RunResult, RunError> {
        let report = self
            .finished
            .clone()
            .ok_or_else(|| RunError::Corrupt("run has not finished".into()))?;
        Ok(RunResult {
            report,
            records: self.records.clone(),
        })
    }

    fn verify(&self, id: &CandidateId) -> Result<VerificationReport, RunError> {
        let c = &self.registry[id];
        Ok(self.verifier.verify(c, &self.base, &self.spec)?)
    }

    fn apply_due_demands(&mut self, t: u64) -> Result<(), RunError> {
        while let Some(d) = self.demands.get(self.applied_demands) {
            if d.at_iteration > t {
                break;
            }
            self.spec = extend_spec(&self.spec, d.new_clauses.clone())?;
            self.applied_demands += 1;
        }
        Ok(())
    }

    fn demand_pending(&self, t: u64) -> bool {
        self.demands.iter().any(|d| d.at_iteration > t)
    }

    /// The candidate proposals are built around: drawn from the survivors
    /// in proportion to their mass.
    fn focal(&self, survivors: &[CandidateId], cfg: &RunConfig, t: u64) -> CandidateId {
        let masses: Vec<f64> = survivors.iter().map(|id| self.dist.mass(id).unwrap_or(0.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, t, "focal"));
        match WeightedIndex::new(&masses) {
            Ok(w) => survivors[w.sample(&mut rng)],
            Err(_) => self.incumbent,
        }
    }

    fn propose(
        &self,
        focal: &CandidateId,
        n: usize,
        cfg: &RunConfig,
        t: u64,
    ) -> Result<(Vec<Candidate>, Vec<String>), GeneratorError> {
        let parent = &self.registry[focal];
        let snapshot = materialize(&self.base, parent)
            .map_err(|e| GeneratorError::InvalidRequest(format!("focal candidate does not materialize: {e}")))?;
        let items = self.history.snapshot();
        let scorer = Scorer {
            weights: cfg.context.scoring(),
            current_iteration: t,
            recency: cfg.context.recency,
        };
        let bundle = select_context(&items, &scorer, cfg.context.budget, &Query::all());
        let req = ProposalRequest {
            incumbent: *focal,
            incumbent_edits: parent.edits.clone(),
            incumbent_excerpt: render_excerpt(&snapshot, cfg.context.excerpt_chars),
            incumbent_snapshot: Arc::new(snapshot),
            context: render_bundle(&bundle, &items),
            spec_digest: spec_digest(&self.spec),
            n,
            seed: derive_seed(cfg.seed, t, "propose"),
        };
        let batch = self.generator.propose(&req)?;
        let mut dropped = batch.dropped;
        let mut seen = BTreeSet::new();
        let mut fresh = Vec::new();
        for p in batch.proposals.into_iter().take(n) {
            if let Validation::Rejected(why) = validate_proposal(&p, &req.incumbent_snapshot, cfg.generator.max_payload)
            {
                dropped.push(format!("proposal rejected: {why}"));
                continue;
            }
            let edits = self.generator.compose(&parent.edits, &p.edits);
            let c = Candidate::derive(&self.base_id, edits, *focal, t);
            if self.dist.contains(&c.id) || !seen.insert(c.id) {
                continue;
            }
            fresh.push(c);
        }
        Ok((fresh, dropped))
    }

    /// History items for this iteration: one per clause the incumbent fails,
    /// a log excerpt when its run was anomalous, and generator notes.
    fn record_feedback(&mut self, report: &VerificationReport, notes: &[String], t: u64) -> Result<(), RunError> {
        let cap = self.config.context.max_items_per_iteration;
        let mut items = Vec::new();
        let short = report.candidate_id.short();
        for o in report.outcomes.iter().filter(|o| !o.satisfied()) {
            let Some(clause) = self.spec.clause(o.clause_id()) else { continue };
            let mean = mean_weight(&self.spec, clause.kind);
            let count = self.failure_counts.get(&clause.id).copied().unwrap_or(0) + 1;
            let (origin, complexity, detail) = match o {
                ClauseOutcome::Test(_) => (Origin::TestFailure, 0.0, String::new()),
                ClauseOutcome::Verify(_) => (Origin::VerifyFinding, 0.0, String::new()),
                ClauseOutcome::Structural(s) => (
                    Origin::StructuralFinding,
                    s.severity * s.penalty,
                    format!(" severity {} penalty {}", s.severity, s.penalty),
                ),
            };
            let mut payload = format!(
                "candidate {short}: {} clause `{}` (weight {}) not satisfied{detail}",
                clause.kind, clause.id, clause.weight
            );
            if !clause.description.is_empty() {
                payload.push_str(&format!("\n{}", clause.description));
            }
            items.push(NewItem {
                severity_class: if clause.weight >= mean { SeverityClass::High } else { SeverityClass::Low },
                failure_count: count,
                complexity,
                anomalous_logs: report.log_trace.is_anomalous(),
                clause_id: Some(clause.id.clone()),
                ..NewItem::new(origin, t, payload)
            });
        }
        if report.log_trace.is_anomalous() || !report.incidents.is_empty() {
            let mut payload = format!("candidate {short}: anomalous run");
            for i in &report.incidents {
                payload.push_str(&format!("\n{:?} in `{}`: {}", i.kind, i.clause_id, i.message));
            }
            let hot: Vec<String> = report
                .log_trace
                .samples()
                .iter()
                .filter(|(_, l)| *l > 0.0)
                .map(|(time, l)| format!("{time}:{l}"))
                .collect();
            if !hot.is_empty() {
                payload.push_str(&format!("\nlog levels {}", hot.join(" ")));
            }
            items.push(NewItem {
                anomalous_logs: true,
                ..NewItem::new(Origin::LogExcerpt, t, payload)
            });
        }
        for note in notes {
            items.push(NewItem::new(Origin::PriorFeedback, t, format!("generator: {note}")));
        }
        for item in items.into_iter().take(cap) {
            if let Some(c) = &item.clause_id {
                *self.failure_counts.entry(c.clone()).or_default() += 1;
            }
            self.history.append(item)?;
        }
        Ok(())
    }

    fn persist(&mut self, record: &IterationRecord) -> Result<(), RunError> {
        if let Some(f) = self.records_file.as_mut() {
            let mut line = serde_json::to_string(record).expect("record serializes");
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        Ok(())
    }

    /// Folds a record into the loop state. Shared by live steps and replay.
    fn absorb(&mut self, record: IterationRecord) -> Result<(), RunError> {
        let expected = self.records.len() as u64 + 1;
        if record.t != expected {
            return Err(RunError::Corrupt(format!("expected record t={expected}, found t={}", record.t)));
        }
        for c in &record.new_candidates {
            self.registry.insert(c.id, c.clone());
        }
        for e in &record.evaluations {
            if !self.registry.contains_key(&e.candidate) {
                return Err(RunError::Corrupt(format!("t={}: unknown candidate {}", record.t, e.candidate.short())));
            }
            self.known.insert(
                e.candidate,
                Known {
                    delta: e.delta,
                    mu: e.mu,
                    version: record.spec_version,
                },
            );
        }
        if !self.known.contains_key(&record.incumbent) {
            return Err(RunError::Corrupt(format!("t={}: incumbent was never evaluated", record.t)));
        }
        self.since_improvement = match self.records.last() {
            Some(prev) if prev.spec_version == record.spec_version && record.best_delta >= prev.best_delta => {
                self.since_improvement + 1
            }
            _ => 0,
        };
        self.dist = record.distribution.clone();
        self.incumbent = record.incumbent;
        self.proposals_total += record.proposals_requested;
        self.records.push(record);
        Ok(())
    }

    fn termination(&self) -> Option<Termination> {
        let last = self.records.last()?;
        let term = &self.config.termination;
        if last.best_delta <= term.delta_threshold && !self.demand_pending(last.t) {
            Some(Termination::Success)
        } else if last.t >= term.max_iterations {
            Some(Termination::Budget)
        } else if last.best_delta > term.delta_threshold && self.since_improvement >= term.stall_window {
            Some(Termination::Stall)
        } else {
            None
        }
    }

    fn finish(&mut self, termination: Termination) -> Result<RunResult, RunError> {
        let last = self.records.last().expect("finished runs have records");
        let k = self.known[&self.incumbent];
        let report = RunReport {
            termination,
            iterations: last.t,
            final_candidate: self.registry[&self.incumbent].clone(),
            final_delta: k.delta,
            final_mu: k.mu,
            spec_version: last.spec_version,
            proposals_total: self.proposals_total,
        };
        if let Some(dir) = &self.dir {
            let body = serde_json::to_vec_pretty(&report).expect("report serializes");
            write_atomic(&dir.join(REPORT_FILE), &body)?;
        }
        self.finished = Some(report.clone());
        Ok(RunResult {
            report,
            records: self.records.clone(),
        })
    }
}

fn verifier_has(verifier: &Verifier, clause: &SpecClause) -> bool {
    let probe = Specification::new(vec![clause.clone()]).expect("single clause spec");
    verifier.check_bindings(&probe).is_ok()
}

fn known_of(report: &VerificationReport, version: u64) -> Known {
    Known {
        delta: report.delta,
        mu: report.mu,
        version,
    }
}

/// Lowest δ under the current spec version; the current incumbent keeps its
/// place on ties, otherwise the smaller id wins.
fn choose_incumbent(known: &BTreeMap<CandidateId, Known>, version: u64, current: CandidateId) -> CandidateId {
    let mut best = known.get(&current).filter(|k| k.version == version).map(|k| (k.delta, current));
    for (id, k) in known.iter().filter(|(_, k)| k.version == version) {
        if best.is_none_or(|(d, _)| k.delta < d) {
            best = Some((k.delta, *id));
        }
    }
    best.map_or(current, |(_, id)| id)
}

fn mean_weight(spec: &Specification, kind: ClauseKind) -> f64 {
    let ws: Vec<f64> = spec.of_kind(kind).map(|c| c.weight).collect();
    ws.iter().sum::<f64>() / ws.len().max(1) as f64
}

/// Reads `records.jsonl` without modifying it. A trailing line cut short by
/// an interrupted write is skipped; any other bad line is an error.
pub fn load_records(path: &Path) -> Result<Vec<IterationRecord>, RunError> {
    Ok(scan_records(path)?.0)
}

/// Like [`load_records`], but also trims a torn trailing line from the file.
pub fn read_records(path: &Path) -> Result<Vec<IterationRecord>, RunError> {
    let (records, valid_len) = scan_records(path)?;
    let f = OpenOptions::new().write(true).open(path)?;
    if f.metadata()?.len() > valid_len as u64 {
        f.set_len(valid_len as u64)?;
        f.sync_all()?;
    }
    Ok(records)
}

fn scan_records(path: &Path) -> Result<(Vec<IterationRecord>, usize), RunError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut valid_len = 0;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        if !chunk.ends_with('\n') {
            break;
        }
        let r = serde_json::from_str::<IterationRecord>(chunk.trim_end())
            .map_err(|e| RunError::Corrupt(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        records.push(r);
        valid_len += chunk.len();
    }
    for (i, r) in records.iter().enumerate() {
        if r.t != i as u64 + 1 {
            return Err(RunError::Corrupt(format!("line {} holds t={}", i + 1, r.t)));
        }
    }
    Ok((records, valid_len))
}

/// Runs to completion in one call.
pub fn run(setup: RunSetup, dir: Option<&Path>) -> Result<RunResult, RunError> {
    Orchestrator::create(setup, dir)?.run_to_end()
}
