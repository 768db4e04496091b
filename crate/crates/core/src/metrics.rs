//! Channel error measures and the composite error `delta`.
//!
//! Every function here is pure. Weighted ratios are normalized by the sum of
//! their weights, so each channel error and the aggregate lie in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("no clauses of kind `{0}` in the specification")]
    EmptyChannel(ClauseKind),
    #[error("invalid log trace: {0}")]
    InvalidTrace(String),
    #[error("no channel carries signal")]
    NoSignal,
    #[error("invalid weight: {0}")]
    InvalidWeight(String),
    #[error("duplicate clause id `{0}`")]
    DuplicateClause(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseKind {
    Test,
    Structural,
    Verify,
}

impl ClauseKind {
    pub fn channel(self) -> Channel {
        match self {
            ClauseKind::Test => Channel::Test,
            ClauseKind::Structural => Channel::Struct,
            ClauseKind::Verify => Channel::Verify,
        }
    }
}

impl fmt::Display for ClauseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClauseKind::Test => "test",
            ClauseKind::Structural => "structural",
            ClauseKind::Verify => "verify",
        })
    }
}

/// One demand of the specification, weighted within its channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecClause {
    pub id: String,
    pub kind: ClauseKind,
    pub weight: f64,
    #[serde(default)]
    pub description: String,
}

impl SpecClause {
    pub fn new(id: impl Into<String>, kind: ClauseKind, weight: f64) -> Self {
        SpecClause {
            id: id.into(),
            kind,
            weight,
            description: String::new(),
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }
}

/// Ordered, append-only clause set. `version` counts extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specification {
    clauses: Vec<SpecClause>,
    version: u64,
}

impl Specification {
    pub fn new(clauses: Vec<SpecClause>) -> Result<Self, MetricsError> {
        let spec = Specification {
            clauses: Vec::new(),
            version: 0,
        };
        let mut spec = spec.extended(clauses)?;
        spec.version = 0;
        Ok(spec)
    }

    pub fn clauses(&self) -> &[SpecClause] {
        &self.clauses
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn clause(&self, id: &str) -> Option<&SpecClause> {
        self.clauses.iter().find(|c| c.id == id)
    }

    pub fn of_kind(&self, kind: ClauseKind) -> impl Iterator<Item = &SpecClause> {
        self.clauses.iter().filter(move |c| c.kind == kind)
    }

    /// Returns the next version with `new_clauses` appended. Existing clauses
    /// are never touched; an id collision rejects the whole extension.
    pub fn extended(&self, new_clauses: Vec<SpecClause>) -> Result<Self, MetricsError> {
        let mut ids: BTreeSet<&str> = self.clauses.iter().map(|c| c.id.as_str()).collect();
        for clause in &new_clauses {
            if !(clause.weight.is_finite() && clause.weight > 0.0) {
                return Err(MetricsError::InvalidWeight(format!(
                    "clause `{}` has weight {}",
                    clause.id, clause.weight
                )));
            }
            if !ids.insert(clause.id.as_str()) {
                return Err(MetricsError::DuplicateClause(clause.id.clone()));
            }
        }
        let mut clauses = self.clauses.clone();
        clauses.extend(new_clauses);
        Ok(Specification {
            clauses,
            version: self.version + 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub clause_id: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralOutcome {
    pub clause_id: String,
    pub severity: f64,
    pub penalty: f64,
    pub violated: bool,
}

impl StructuralOutcome {
    /// Builds an outcome with both factors clamped into `[0, 1]`.
    /// A zero severity means the check is not violated.
    pub fn new(clause_id: impl Into<String>, severity: f64, penalty: f64) -> Self {
        let severity = clamp_unit(severity);
        let penalty = clamp_unit(penalty);
        StructuralOutcome {
            clause_id: clause_id.into(),
            severity,
            penalty,
            violated: severity > 0.0,
        }
    }

    pub fn clean(clause_id: impl Into<String>) -> Self {
        Self::new(clause_id, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub clause_id: String,
    pub holds: bool,
}

/// Piecewise-linear anomaly level over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTrace {
    horizon: f64,
    samples: Vec<(f64, f64)>,
}

impl LogTrace {
    pub fn new(horizon: f64, samples: Vec<(f64, f64)>) -> Result<Self, MetricsError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(MetricsError::InvalidTrace(format!("horizon {horizon} must be > 0")));
        }
        if samples.len() < 2 {
            return Err(MetricsError::InvalidTrace("need at least two samples".into()));
        }
        if samples[0].0 != 0.0 {
            return Err(MetricsError::InvalidTrace("first sample must be at time 0".into()));
        }
        if samples[samples.len() - 1].0 != horizon {
            return Err(MetricsError::InvalidTrace("last sample must be at the horizon".into()));
        }
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(MetricsError::InvalidTrace("sample times must strictly increase".into()));
            }
        }
        if let Some(&(t, l)) = samples.iter().find(|(_, l)| !(0.0..=1.0).contains(l)) {
            return Err(MetricsError::InvalidTrace(format!("level {l} at time {t} outside [0,1]")));
        }
        Ok(LogTrace { horizon, samples })
    }

    /// A trace with no anomalies over a unit horizon.
    pub fn quiet() -> Self {
        LogTrace {
            horizon: 1.0,
            samples: vec![(0.0, 0.0), (1.0, 0.0)],
        }
    }

    /// Builds a trace from unordered `(time, level)` points.
    ///
    /// Points sharing a time keep the highest level, levels are clamped into
    /// `[0, 1]`, negative or non-finite times are dropped. The trace is quiet
    /// before the first point; a single instant is stretched over a unit
    /// horizon. No points gives [`LogTrace::quiet`].
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut merged: BTreeMap<u64, f64> = BTreeMap::new();
        for (t, l) in points {
            if !t.is_finite() || t < 0.0 || l.is_nan() {
                continue;
            }
            // non-negative finite floats order the same as their bit patterns
            let key = (t + 0.0).to_bits();
            let level = clamp_unit(l);
            let slot = merged.entry(key).or_insert(level);
            *slot = slot.max(level);
        }
        let mut samples: Vec<(f64, f64)> =
            merged.into_iter().map(|(k, l)| (f64::from_bits(k), l)).collect();
        if samples.is_empty() {
            return Self::quiet();
        }
        if samples[0].0 > 0.0 {
            samples.insert(0, (0.0, 0.0));
        }
        if samples.len() == 1 {
            let level = samples[0].1;
            samples.push((1.0, level));
        }
        let horizon = samples[samples.len() - 1].0;
        LogTrace { horizon, samples }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn is_anomalous(&self) -> bool {
        self.samples.iter().any(|&(_, l)| l > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorWeights {
    pub alpha_test: f64,
    pub alpha_struct: f64,
    pub alpha_verify: f64,
    pub alpha_logs: f64,
}

impl Default for ErrorWeights {
    fn default() -> Self {
        ErrorWeights {
            alpha_test: 0.4,
            alpha_struct: 0.2,
            alpha_verify: 0.3,
            alpha_logs: 0.1,
        }
    }
}

impl ErrorWeights {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, v) in [
            ("alpha_test", self.alpha_test),
            ("alpha_struct", self.alpha_struct),
            ("alpha_verify", self.alpha_verify),
            ("alpha_logs", self.alpha_logs),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MetricsError::InvalidWeight(format!("{name} = {v} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Test => self.alpha_test,
            Channel::Struct => self.alpha_struct,
            Channel::Verify => self.alpha_verify,
            Channel::Logs => self.alpha_logs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Test,
    Struct,
    Verify,
    Logs,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Test, Channel::Struct, Channel::Verify, Channel::Logs];
}

/// Set of channels that carry signal for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelSet {
    pub test: bool,
    #[serde(rename = "struct")]
    pub structural: bool,
    pub verify: bool,
    pub logs: bool,
}

impl ChannelSet {
    pub const ALL: ChannelSet = ChannelSet {
        test: true,
        structural: true,
        verify: true,
        logs: true,
    };

    /// Channels backed by at least one clause of `spec`, plus logs when
    /// `logs` is set.
    pub fn for_spec(spec: &Specification, logs: bool) -> Self {
        ChannelSet {
            test: spec.of_kind(ClauseKind::Test).next().is_some(),
            structural: spec.of_kind(ClauseKind::Structural).next().is_some(),
            verify: spec.of_kind(ClauseKind::Verify).next().is_some(),
            logs,
        }
    }

    pub fn contains(&self, channel: Channel) -> bool {
        match channel {
            Channel::Test => self.test,
            Channel::Struct => self.structural,
            Channel::Verify => self.verify,
            Channel::Logs => self.logs,
        }
    }

    pub fn insert(&mut self, channel: Channel) {
        match channel {
            Channel::Test => self.test = true,
            Channel::Struct => self.structural = true,
            Channel::Verify => self.verify = true,
            Channel::Logs => self.logs = true,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.test || self.structural || self.verify || self.logs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeedbackVector {
    pub e_test: f64,
    pub e_struct: f64,
    pub e_verify: f64,
    pub e_logs: f64,
}

impl FeedbackVector {
    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Test => self.e_test,
            Channel::Struct => self.e_struct,
            Channel::Verify => self.e_verify,
            Channel::Logs => self.e_logs,
        }
    }

    pub fn set(&mut self, channel: Channel, value: f64) {
        match channel {
            Channel::Test => self.e_test = value,
            Channel::Struct => self.e_struct = value,
            Channel::Verify => self.e_verify = value,
            Channel::Logs => self.e_logs = value,
        }
    }

    /// Maximal error on every channel.
    pub fn saturated() -> Self {
        FeedbackVector {
            e_test: 1.0,
            e_struct: 1.0,
            e_verify: 1.0,
            e_logs: 1.0,
        }
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Fraction of clauses satisfied, given one `(clause id, satisfied)` pair per
/// clause of `spec`.
pub fn compute_mu<'a, I>(outcomes: I, spec: &Specification) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a str, bool)>,
{
    if spec.is_empty() {
        return Err(MetricsError::Shape("specification has no clauses".into()));
    }
    let mut seen = BTreeSet::new();
    let mut satisfied = 0usize;
    for (id, ok) in outcomes {
        if spec.clause(id).is_none() {
            return Err(MetricsError::Shape(format!("unknown clause `{id}`")));
        }
        if !seen.insert(id) {
            return Err(MetricsError::Shape(format!("clause `{id}` reported twice")));
        }
        satisfied += ok as usize;
    }
    if seen.len() != spec.len() {
        return Err(MetricsError::Shape(format!(
            "{} outcomes for {} clauses",
            seen.len(),
            spec.len()
        )));
    }
    Ok(satisfied as f64 / spec.len() as f64)
}

/// Shared body of the three clause-weighted channels: `sum(w * loss) / sum(w)`.
fn weighted_channel<'a>(
    spec: &Specification,
    kind: ClauseKind,
    losses: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<f64, MetricsError> {
    let weights: BTreeMap<&str, f64> =
        spec.of_kind(kind).map(|c| (c.id.as_str(), c.weight)).collect();
    if weights.is_empty() {
        return Err(MetricsError::EmptyChannel(kind));
    }
    let mut seen = BTreeSet::new();
    let mut num = 0.0;
    for (id, loss) in losses {
        let w = *weights
            .get(id)
            .ok_or_else(|| MetricsError::Shape(format!("`{id}` is not a {kind} clause")))?;
        if !seen.insert(id) {
            return Err(MetricsError::Shape(format!("clause `{id}` reported twice")));
        }
        num += w * loss;
    }
    if seen.len() != weights.len() {
        return Err(MetricsError::Shape(format!(
            "{} outcomes for {} {kind} clauses",
            seen.len(),
            weights.len()
        )));
    }
    let den: f64 = weights.values().sum();
    Ok(clamp_unit(num / den))
}

pub fn compute_test_error(outcomes: &[TestOutcome], spec: &Specification) -> Result<f64, MetricsError> {
    weighted_channel(
        spec,
        ClauseKind::Test,
        outcomes
            .iter()
            .map(|o| (o.clause_id.as_str(), if o.passed { 0.0 } else { 1.0 })),
    )
}

pub fn compute_struct_error(
    outcomes: &[StructuralOutcome],
    spec: &Specification,
) -> Result<f64, MetricsError> {
    for o in outcomes {
        if !(0.0..=1.0).contains(&o.severity) || !(0.0..=1.0).contains(&o.penalty) {
            return Err(MetricsError::Shape(format!(
                "structural outcome `{}` outside [0,1]",
                o.clause_id
            )));
        }
    }
    weighted_channel(
        spec,
        ClauseKind::Structural,
        outcomes
            .iter()
            .map(|o| (o.clause_id.as_str(), o.severity * o.penalty)),
    )
}

pub fn compute_verify_error(
    outcomes: &[VerifyOutcome],
    spec: &Specification,
) -> Result<f64, MetricsError> {
    weighted_channel(
        spec,
        ClauseKind::Verify,
        outcomes
            .iter()
            .map(|o| (o.clause_id.as_str(), if o.holds { 0.0 } else { 1.0 })),
    )
}

/// Time-averaged anomaly level: trapezoid rule over the samples, which is the
/// exact integral of the piecewise-linear trace.
pub fn compute_log_error(trace: &LogTrace) -> Result<f64, MetricsError> {
    if !(trace.horizon.is_finite() && trace.horizon > 0.0) {
        return Err(MetricsError::InvalidTrace("horizon must be > 0".into()));
    }
    let area: f64 = trace
        .samples
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    Ok(clamp_unit(area / trace.horizon))
}

/// Weighted mean of the present channel errors.
pub fn aggregate_delta(
    f: &FeedbackVector,
    w: &ErrorWeights,
    present: ChannelSet,
) -> Result<f64, MetricsError> {
    w.validate()?;
    if present.is_empty() {
        return Err(MetricsError::NoSignal);
    }
    let (num, den) = Channel::ALL
        .iter()
        .filter(|c| present.contains(**c))
        .fold((0.0, 0.0), |(n, d), &c| (n + w.get(c) * f.get(c), d + w.get(c)));
    Ok(clamp_unit(num / den))
}
