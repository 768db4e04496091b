//! Enumerable synthetic hypothesis spaces.
//!
//! A candidate is one symbol per slot, stored in the artifact as lines
//! `s<i> = <symbol>` of [`SLOT_FILE`]. Clauses are deterministic rules over
//! the symbol vector, evaluated in process by [`SyntheticRunner`]. Spaces are
//! small enough to sweep exhaustively, which gives [`brute_force_min_delta`]
//! as ground truth for search runs.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::generator::{Generator, GeneratorError, Proposal, ProposalBatch, ProposalRequest};
use crate::hypothesis::{materialize, ArtifactSnapshot, Digest, Edit, EditKind};
use crate::metrics::{
    aggregate_delta, compute_log_error, compute_struct_error, compute_test_error, compute_verify_error,
    ChannelSet, ClauseKind, ErrorWeights, FeedbackVector, LogTrace, MetricsError, SpecClause, Specification,
    StructuralOutcome, TestOutcome, VerifyOutcome,
};
use crate::orchestrator::{DemandEvent, Orchestrator, RunError, RunSetup, Termination};
use crate::store::write_atomic;
use crate::verification::{ClauseRunner, Job, OutputParser, RawOutcome, RunnerSet};

/// Largest space accepted by the brute-force oracle.
pub const MAX_SPACE: usize = 100_000;
pub const SLOT_FILE: &str = "slots.txt";
pub const FIXTURES: [&str; 3] = ["S1", "S2", "S3"];

const S1: &str = include_str!("../fixtures/s1.toml");
const S2: &str = include_str!("../fixtures/s2.toml");
const S3: &str = include_str!("../fixtures/s3.toml");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),
    #[error("fixture does not parse: {0}")]
    Parse(String),
    #[error("invalid space: {0}")]
    Invalid(String),
    #[error("space has {0} candidates, brute force is limited to {MAX_SPACE}")]
    TooLarge(usize),
    #[error("experiment has no replicates")]
    NoReplicates,
    #[error("report table is empty")]
    EmptyTable,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    SlotEquals { slot: usize, value: usize },
    /// Holds at `target`; as a structural clause the severity is the
    /// normalized distance from it.
    SlotDistance { slot: usize, target: usize },
    SlotsDiffer { a: usize, b: usize },
    SlotGreater { a: usize, b: usize },
    SumEquals { total: usize },
}

impl Rule {
    pub fn holds(&self, v: &[usize]) -> bool {
        match *self {
            Rule::SlotEquals { slot, value } => v[slot] == value,
            Rule::SlotDistance { slot, target } => v[slot] == target,
            Rule::SlotsDiffer { a, b } => v[a] != v[b],
            Rule::SlotGreater { a, b } => v[a] > v[b],
            Rule::SumEquals { total } => v.iter().sum::<usize>() == total,
        }
    }

    /// Structural severity in [0,1].
    pub fn severity(&self, v: &[usize], dims: &[usize]) -> f64 {
        match *self {
            Rule::SlotDistance { slot, target } if dims[slot] > 1 => {
                v[slot].abs_diff(target) as f64 / (dims[slot] - 1) as f64
            }
            _ if self.holds(v) => 0.0,
            _ => 1.0,
        }
    }

    fn slots(&self) -> Vec<usize> {
        match *self {
            Rule::SlotEquals { slot, .. } | Rule::SlotDistance { slot, .. } => vec![slot],
            Rule::SlotsDiffer { a, b } | Rule::SlotGreater { a, b } => vec![a, b],
            Rule::SumEquals { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClause {
    pub id: String,
    pub kind: ClauseKind,
    pub weight: f64,
    pub rule: Rule,
    /// Emit a two-sample log trace that rises when the rule fails.
    #[serde(default)]
    pub trace: bool,
    #[serde(default)]
    pub description: String,
}

impl SyntheticClause {
    pub fn spec_clause(&self) -> SpecClause {
        let description = if self.description.is_empty() {
            format!("{:?}", self.rule)
        } else {
            self.description.clone()
        };
        SpecClause::new(self.id.clone(), self.kind, self.weight).with_description(description)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDemand {
    pub at_iteration: u64,
    pub clauses: Vec<SyntheticClause>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpace {
    pub id: String,
    /// Alphabet size per slot.
    pub dimensions: Vec<usize>,
    #[serde(default)]
    pub plant: Option<Vec<usize>>,
    pub clauses: Vec<SyntheticClause>,
    #[serde(default)]
    pub demands: Vec<SyntheticDemand>,
}

impl SyntheticSpace {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let space: SyntheticSpace = toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        space.validate()?;
        Ok(space)
    }

    pub fn fixture(id: &str) -> Result<Self, SynthError> {
        let text = match id {
            "S1" => S1,
            "S2" => S2,
            "S3" => S3,
            other => return Err(SynthError::UnknownFixture(other.to_string())),
        };
        Self::from_toml(text)
    }

    /// Number of candidates, saturating.
    pub fn size(&self) -> usize {
        self.dimensions.iter().fold(1usize, |acc, &k| acc.saturating_mul(k))
    }

    pub fn all_clauses(&self) -> impl Iterator<Item = &SyntheticClause> {
        self.clauses.iter().chain(self.demands.iter().flat_map(|d| &d.clauses))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.dimensions.is_empty() || self.dimensions.contains(&0) {
            return bad("every slot needs at least one symbol".into());
        }
        if self.size() > MAX_SPACE {
            return Err(SynthError::TooLarge(self.size()));
        }
        if self.clauses.is_empty() {
            return bad("no clauses".into());
        }
        let n = self.dimensions.len();
        for c in self.all_clauses() {
            if let Some(s) = c.rule.slots().into_iter().find(|&s| s >= n) {
                return bad(format!("clause `{}` names slot {s} of {n}", c.id));
            }
            if let Rule::SlotEquals { slot, value: t } | Rule::SlotDistance { slot, target: t } = c.rule {
                if t >= self.dimensions[slot] {
                    return bad(format!("clause `{}` expects symbol {t} outside slot {slot}", c.id));
                }
            }
            if c.trace && c.kind == ClauseKind::Structural {
                return bad(format!("clause `{}`: structural clauses cannot carry a trace", c.id));
            }
        }
        if self.demands.iter().any(|d| d.at_iteration == 0) {
            return bad("demands start at iteration 1".into());
        }
        let mut spec = self.spec()?;
        let weights = ErrorWeights::default();
        if let Some(p) = &self.plant {
            if p.len() != n || p.iter().zip(&self.dimensions).any(|(v, k)| v >= k) {
                return bad(format!("plant {p:?} is not a point of the space"));
            }
            for d in self.sorted_demands().into_iter().map(Some).chain([None]) {
                let (_, delta) = self.evaluate(&spec, &weights, p)?;
                if delta != 0.0 {
                    return bad(format!("plant has δ = {delta} under spec version {}", spec.version()));
                }
                if let Some(d) = d {
                    spec = spec.extended(d.clauses.iter().map(SyntheticClause::spec_clause).collect())?;
                }
            }
        }
        Ok(())
    }

    fn sorted_demands(&self) -> Vec<&SyntheticDemand> {
        let mut d: Vec<_> = self.demands.iter().collect();
        d.sort_by_key(|d| d.at_iteration);
        d
    }

    pub fn spec(&self) -> Result<Specification, MetricsError> {
        Specification::new(self.clauses.iter().map(SyntheticClause::spec_clause).collect())
    }

    /// The spec after every demand has arrived.
    pub fn final_spec(&self) -> Result<Specification, MetricsError> {
        self.sorted_demands().into_iter().try_fold(self.spec()?, |s, d| {
            s.extended(d.clauses.iter().map(SyntheticClause::spec_clause).collect())
        })
    }

    pub fn demand_events(&self) -> Vec<DemandEvent> {
        self.sorted_demands()
            .into_iter()
            .map(|d| DemandEvent {
                at_iteration: d.at_iteration,
                new_clauses: d.clauses.iter().map(SyntheticClause::spec_clause).collect(),
            })
            .collect()
    }

    pub fn render(&self, v: &[usize]) -> String {
        let mut out = String::new();
        for (i, s) in v.iter().enumerate() {
            let _ = writeln!(out, "s{i} = {s}");
        }
        out
    }

    /// Strict inverse of [`Self::render`].
    pub fn parse(&self, text: &str) -> Option<Vec<usize>> {
        let mut v = Vec::with_capacity(self.dimensions.len());
        let mut lines = text.split_inclusive('\n');
        for (i, &k) in self.dimensions.iter().enumerate() {
            let line = lines.next()?.strip_suffix('\n')?;
            let value: usize = line.strip_prefix(&format!("s{i} = "))?.parse().ok()?;
            if value >= k || line != format!("s{i} = {value}") {
                return None;
            }
            v.push(value);
        }
        lines.next().is_none().then_some(v)
    }

    pub fn decode(&self, snapshot: &ArtifactSnapshot) -> Option<Vec<usize>> {
        if snapshot.files.len() != 1 {
            return None;
        }
        self.parse(snapshot.text(SLOT_FILE)?)
    }

    pub fn origin(&self) -> Vec<usize> {
        vec![0; self.dimensions.len()]
    }

    pub fn base_artifact(&self) -> ArtifactSnapshot {
        ArtifactSnapshot::from_texts([(SLOT_FILE, self.render(&self.origin()).as_str())])
    }

    /// Canonical edit list reaching `v` from the base artifact.
    pub fn edits_for(&self, v: &[usize]) -> Vec<Edit> {
        v.iter()
            .enumerate()
            .filter(|(_, &s)| s != 0)
            .map(|(i, s)| Edit::set_parameter(SLOT_FILE, format!("s{i}"), s.to_string()))
            .collect()
    }

    /// Applies slot assignments in order; `None` for any other edit.
    fn replay(&self, mut v: Vec<usize>, edits: &[Edit]) -> Option<Vec<usize>> {
        for e in edits {
            let EditKind::SetParameter { key, value } = &e.kind else { return None };
            if e.target != SLOT_FILE {
                return None;
            }
            let slot: usize = key.strip_prefix('s')?.parse().ok()?;
            let value: usize = value.parse().ok()?;
            if slot >= v.len() || value >= self.dimensions[slot] {
                return None;
            }
            v[slot] = value;
        }
        Some(v)
    }

    /// Candidates in lexicographic order, slot 0 most significant.
    pub fn point(&self, mut index: usize) -> Vec<usize> {
        let mut v = vec![0; self.dimensions.len()];
        for (slot, &k) in self.dimensions.iter().enumerate().rev() {
            v[slot] = index % k;
            index /= k;
        }
        v
    }

    pub fn runners(&self) -> RunnerSet {
        let space = Arc::new(self.clone());
        self.all_clauses()
            .map(|c| {
                let r: Arc<dyn ClauseRunner> = Arc::new(SyntheticRunner {
                    space: Arc::clone(&space),
                    clause: c.clone(),
                });
                (c.id.clone(), r)
            })
            .collect()
    }

    /// Direct evaluation of feedback and δ for `v` under `spec`, with the
    /// log channel present when any clause of `spec` carries a trace.
    pub fn evaluate(
        &self,
        spec: &Specification,
        weights: &ErrorWeights,
        v: &[usize],
    ) -> Result<(FeedbackVector, f64), MetricsError> {
        let mut tests = Vec::new();
        let mut structs = Vec::new();
        let mut verifies = Vec::new();
        let mut points = Vec::new();
        let mut logs = false;
        for sc in spec.clauses() {
            let Some(c) = self.all_clauses().find(|c| c.id == sc.id) else {
                continue;
            };
            let holds = c.rule.holds(v);
            match c.kind {
                ClauseKind::Test => tests.push(TestOutcome {
                    clause_id: c.id.clone(),
                    passed: holds,
                }),
                ClauseKind::Structural => {
                    structs.push(StructuralOutcome::new(c.id.clone(), c.rule.severity(v, &self.dimensions), 1.0))
                }
                ClauseKind::Verify => verifies.push(VerifyOutcome {
                    clause_id: c.id.clone(),
                    holds,
                }),
            }
            if c.trace {
                logs = true;
                points.extend(trace_points(holds));
            }
        }
        let channels = ChannelSet::for_spec(spec, logs);
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
            f.e_logs = compute_log_error(&LogTrace::from_points(points))?;
        }
        let delta = aggregate_delta(&f, weights, channels)?;
        Ok((f, delta))
    }

    /// Run inputs for this space under `config`.
    pub fn setup(&self, config: RunConfig) -> Result<RunSetup, SynthError> {
        let generator = config
            .build_generator(Some(Arc::new(self.clone())))
            .map_err(SynthError::Invalid)?;
        Ok(RunSetup {
            base: self.base_artifact(),
            spec: self.spec()?,
            demands: self.demand_events(),
            runners: self.runners(),
            generator,
            config,
        })
    }
}

fn trace_points(holds: bool) -> [(f64, f64); 2] {
    [(0.0, 0.0), (1.0, if holds { 0.0 } else { 1.0 })]
}

/// In-process runner for one synthetic clause. An artifact that does not
/// decode to a point of the space counts as a crash.
pub struct SyntheticRunner {
    space: Arc<SyntheticSpace>,
    clause: SyntheticClause,
}

impl ClauseRunner for SyntheticRunner {
    fn definition(&self) -> String {
        format!(
            "synthetic:{:?}:{}:{}",
            self.space.dimensions,
            self.clause.kind,
            serde_json::to_string(&(&self.clause.rule, self.clause.trace)).expect("rule serializes")
        )
    }

    fn parser(&self) -> OutputParser {
        match (self.clause.kind, self.clause.trace) {
            (ClauseKind::Structural, _) => OutputParser::SeverityJson,
            (_, true) => OutputParser::TraceJson,
            _ => OutputParser::ExitCode,
        }
    }

    fn execute(&self, job: &Job<'_>) -> RawOutcome {
        let Some(v) = self.space.decode(job.snapshot) else {
            return RawOutcome::Crashed(format!("{SLOT_FILE} is not a point of the space"));
        };
        let rule = &self.clause.rule;
        if self.clause.kind == ClauseKind::Structural {
            let s = rule.severity(&v, &self.space.dimensions);
            return RawOutcome::stdout(0, format!("{{\"severity\": {s}, \"penalty\": 1.0}}"));
        }
        let code = if rule.holds(&v) { 0 } else { 1 };
        if !self.clause.trace {
            return RawOutcome::stdout(code, "");
        }
        let mut out = String::new();
        for (t, l) in trace_points(code == 0) {
            let _ = writeln!(out, "{{\"time\": {t}, \"level\": {l}}}");
        }
        RawOutcome::stdout(code, out)
    }
}

/// Proposes single-slot neighbours of the incumbent in a seeded order. When
/// more proposals are asked for than there are neighbours, the order repeats.
pub struct SyntheticGenerator {
    space: Arc<SyntheticSpace>,
}

impl SyntheticGenerator {
    pub fn new(space: Arc<SyntheticSpace>) -> Self {
        SyntheticGenerator { space }
    }
}

impl Generator for SyntheticGenerator {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn propose(&self, req: &ProposalRequest) -> Result<ProposalBatch, GeneratorError> {
        if req.n == 0 {
            return Err(GeneratorError::InvalidRequest("n must be >= 1".into()));
        }
        let Some(v) = self.space.decode(&req.incumbent_snapshot) else {
            return Ok(ProposalBatch {
                proposals: Vec::new(),
                dropped: vec!["incumbent is not a point of the space".into()],
            });
        };
        let mut moves: Vec<(usize, usize)> = Vec::new();
        for (slot, &k) in self.space.dimensions.iter().enumerate() {
            moves.extend((0..k).filter(|&s| s != v[slot]).map(|s| (slot, s)));
        }
        if moves.is_empty() {
            return Ok(ProposalBatch::default());
        }
        let mut buf = req.incumbent_snapshot.content_id().0.to_vec();
        buf.extend_from_slice(&req.seed.to_le_bytes());
        let seed = u64::from_le_bytes(Digest::of(&buf).0[..8].try_into().expect("8 bytes"));
        moves.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let proposals = moves
            .iter()
            .cycle()
            .take(req.n)
            .map(|&(slot, s)| Proposal {
                edits: vec![Edit::set_parameter(SLOT_FILE, format!("s{slot}"), s.to_string())],
                rationale: format!("slot {slot} -> {s}"),
            })
            .collect();
        Ok(ProposalBatch {
            proposals,
            dropped: Vec::new(),
        })
    }

    fn compose(&self, incumbent_edits: &[Edit], delta: &[Edit]) -> Vec<Edit> {
        let all: Vec<Edit> = incumbent_edits.iter().chain(delta).cloned().collect();
        match self.space.replay(self.space.origin(), &all) {
            Some(v) => self.space.edits_for(&v),
            None => all,
        }
    }
}

/// Global minimum of δ over the space and every minimizer, in lexicographic
/// order.
pub fn brute_force_min_delta(
    space: &SyntheticSpace,
    spec: &Specification,
    weights: &ErrorWeights,
) -> Result<(f64, Vec<Vec<usize>>), SynthError> {
    let size = space.size();
    if size > MAX_SPACE {
        return Err(SynthError::TooLarge(size));
    }
    let deltas: Vec<f64> = (0..size)
        .into_par_iter()
        .map(|i| space.evaluate(spec, weights, &space.point(i)).map(|(_, d)| d))
        .collect::<Result<_, _>>()?;
    let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let argmin = (0..size).filter(|&i| deltas[i] == min).map(|i| space.point(i)).collect();
    Ok((min, argmin))
}

#[derive(Debug, Clone)]
pub struct ConvergenceExperiment {
    pub space: SyntheticSpace,
    /// Knobs shared by every replicate; the seed is replaced per replicate.
    pub config: RunConfig,
    pub seeds: Vec<u64>,
}

/// Search settings used for fixture sweeps.
pub fn bench_config(lambda: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.search.lambda = lambda;
    cfg.termination.delta_threshold = 0.0;
    cfg.termination.max_iterations = 200;
    cfg.termination.stall_window = 200;
    cfg.verification.worker_count = 1;
    cfg.generator.kind = crate::config::GeneratorKind::Synthetic;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub success: bool,
    pub iterations: u64,
    pub final_delta: f64,
    /// Whether δ reached the threshold again once every demand arrived;
    /// `None` for spaces without demands.
    pub reconverged_after_demand: Option<bool>,
    pub final_candidate: Option<Vec<usize>>,
    /// Best δ after each iteration.
    pub trajectory: Vec<f64>,
    /// Spec version of each iteration.
    pub spec_versions: Vec<u64>,
}

/// Runs one replicate per seed, in parallel; rows come back in seed order.
pub fn run_experiment(exp: &ConvergenceExperiment) -> Result<Vec<ExperimentRow>, SynthError> {
    if exp.seeds.is_empty() {
        return Err(SynthError::NoReplicates);
    }
    exp.space.validate()?;
    exp.seeds
        .par_iter()
        .map(|&seed| {
            let mut config = exp.config.clone();
            config.seed = seed;
            run_replicate(&exp.space, config)
        })
        .collect()
}

fn run_replicate(space: &SyntheticSpace, config: RunConfig) -> Result<ExperimentRow, SynthError> {
    let threshold = config.termination.delta_threshold;
    let seed = config.seed;
    let setup = space.setup(config)?;
    let base = setup.base.clone();
    let result = Orchestrator::create(setup, None)?.run_to_end()?;
    let final_candidate = materialize(&base, &result.report.final_candidate)
        .ok()
        .and_then(|s| space.decode(&s));
    let last_demand = space.demands.iter().map(|d| d.at_iteration).max();
    let final_version = space.demands.len() as u64;
    let reconverged_after_demand = last_demand.map(|at| {
        result
            .records
            .iter()
            .any(|r| r.t >= at && r.spec_version == final_version && r.best_delta <= threshold)
    });
    Ok(ExperimentRow {
        seed,
        success: result.report.termination == Termination::Success,
        iterations: result.report.iterations,
        final_delta: result.report.final_delta,
        reconverged_after_demand,
        final_candidate,
        trajectory: result.records.iter().map(|r| r.best_delta).collect(),
        spec_versions: result.records.iter().map(|r| r.spec_version).collect(),
    })
}

pub const REPORT_HEADER: &str = "seed,success,iterations,final_delta,reconverged_after_demand,final_candidate,trajectory";

/// CSV body: header, one row per replicate, then a `summary` row carrying
/// the success rate and the median iterations of successful replicates.
pub fn render_report(rows: &[ExperimentRow]) -> Result<String, SynthError> {
    if rows.is_empty() {
        return Err(SynthError::EmptyTable);
    }
    let mut out = String::new();
    let _ = writeln!(out, "{REPORT_HEADER}");
    let join = |xs: &mut dyn Iterator<Item = String>, sep: &str| xs.collect::<Vec<_>>().join(sep);
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed,
            r.success,
            r.iterations,
            r.final_delta,
            r.reconverged_after_demand.map(|b| b.to_string()).unwrap_or_default(),
            r.final_candidate
                .as_ref()
                .map(|v| join(&mut v.iter().map(usize::to_string), " "))
                .unwrap_or_default(),
            join(&mut r.trajectory.iter().map(f64::to_string), ";"),
        );
    }
    let successes = rows.iter().filter(|r| r.success).count();
    let rate = successes as f64 / rows.len() as f64;
    let median = median_iterations(rows).map(|m| m.to_string()).unwrap_or_default();
    let _ = writeln!(out, "summary,{rate},{median},,,,");
    Ok(out)
}

/// Median iterations over successful rows.
pub fn median_iterations(rows: &[ExperimentRow]) -> Option<f64> {
    let mut its: Vec<u64> = rows.iter().filter(|r| r.success).map(|r| r.iterations).collect();
    if its.is_empty() {
        return None;
    }
    its.sort_unstable();
    let m = its.len() / 2;
    Some(if its.len() % 2 == 1 {
        its[m] as f64
    } else {
        (its[m - 1] + its[m]) as f64 / 2.0
    })
}

pub fn emit_report(rows: &[ExperimentRow], path: &Path) -> Result<(), SynthError> {
    let body = render_report(rows)?;
    write_atomic(path, body.as_bytes())?;
    Ok(())
}
