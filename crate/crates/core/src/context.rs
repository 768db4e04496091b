//! History store and budgeted context retrieval.
//!
//! Items accumulated during a run are scored by a weighted sum of recency,
//! severity, failure count, complexity and log anomalies. Retrieval picks the
//! subset with the highest total score whose combined size fits the budget
//! (a 0/1 knapsack): exactly for small candidate sets, greedily with a swap
//! pass for large ones.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest filtered item count solved exactly.
pub const EXACT_LIMIT: usize = 25;
/// Default recency window for the "recent failure" indicator.
pub const DEFAULT_RECENCY: u64 = 3;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("context item payload is empty")]
    EmptyPayload,
    #[error("history storage failed: {0}")]
    Storage(#[from] std::io::Error),
    #[error("corrupt history record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    TestFailure,
    StructuralFinding,
    VerifyFinding,
    LogExcerpt,
    CodeExcerpt,
    PriorFeedback,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::TestFailure => "test_failure",
            Origin::StructuralFinding => "structural_finding",
            Origin::VerifyFinding => "verify_finding",
            Origin::LogExcerpt => "log_excerpt",
            Origin::CodeExcerpt => "code_excerpt",
            Origin::PriorFeedback => "prior_feedback",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityClass {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub id: String,
    pub origin: Origin,
    pub iteration: u64,
    pub size: usize,
    pub severity_class: SeverityClass,
    pub failure_count: u64,
    pub complexity: f64,
    pub anomalous_logs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clause_id: Option<String>,
    pub payload: String,
}

/// An item before the store assigns its id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewItem {
    pub origin: Origin,
    pub iteration: u64,
    pub severity_class: SeverityClass,
    pub failure_count: u64,
    pub complexity: f64,
    pub anomalous_logs: bool,
    pub clause_id: Option<String>,
    pub payload: String,
}

impl NewItem {
    pub fn new(origin: Origin, iteration: u64, payload: impl Into<String>) -> Self {
        NewItem {
            origin,
            iteration,
            severity_class: SeverityClass::Low,
            failure_count: 0,
            complexity: 0.0,
            anomalous_logs: false,
            clause_id: None,
            payload: payload.into(),
        }
    }
}

/// Size in context units: characters of the payload.
pub fn payload_size(payload: &str) -> usize {
    payload.chars().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringWeights {
    pub theta: [f64; 5],
}

impl Default for ScoringWeights {
    fn default() -> Self {
        ScoringWeights { theta: [1.0; 5] }
    }
}

impl ScoringWeights {
    pub fn validate(&self) -> Result<(), String> {
        match self.theta.iter().position(|t| !(t.is_finite() && *t >= 0.0)) {
            Some(i) => Err(format!("theta{} = {} must be >= 0", i + 1, self.theta[i])),
            None => Ok(()),
        }
    }
}

/// Score `g(x)` of an item at `current_iteration`, with `recency` the number
/// of past iterations that still count as recent.
pub fn score_item(x: &ContextItem, w: &ScoringWeights, current_iteration: u64, recency: u64) -> f64 {
    let [t1, t2, t3, t4, t5] = w.theta;
    let is_failure = matches!(x.origin, Origin::TestFailure | Origin::VerifyFinding);
    let recent = is_failure && x.iteration + recency >= current_iteration;
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    t1 * indicator(recent)
        + t2 * indicator(x.severity_class == SeverityClass::High)
        + t3 * (x.failure_count as f64).ln_1p()
        + t4 * x.complexity.max(0.0)
        + t5 * indicator(x.anomalous_logs)
}

/// Structured retrieval filter: origin set and iteration range.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Query {
    pub origins: Option<BTreeSet<Origin>>,
    pub iterations: Option<RangeInclusive<u64>>,
}

impl Query {
    pub fn all() -> Self {
        Query::default()
    }

    pub fn matches(&self, x: &ContextItem) -> bool {
        self.origins.as_ref().is_none_or(|o| o.contains(&x.origin))
            && self.iterations.as_ref().is_none_or(|r| r.contains(&x.iteration))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    /// Item ids in descending score order.
    pub items: Vec<String>,
    pub total_size: usize,
    pub total_score: f64,
}

impl ContextBundle {
    pub fn empty() -> Self {
        ContextBundle {
            items: Vec::new(),
            total_size: 0,
            total_score: 0.0,
        }
    }
}

/// Scoring parameters for retrieval.
#[derive(Debug, Clone, Copy)]
pub struct Scorer {
    pub weights: ScoringWeights,
    pub current_iteration: u64,
    pub recency: u64,
}

impl Scorer {
    pub fn score(&self, x: &ContextItem) -> f64 {
        score_item(x, &self.weights, self.current_iteration, self.recency)
    }
}

/// A 0/1 knapsack entry: index into the caller's slice.
#[derive(Debug, Clone, Copy)]
struct Entry {
    idx: usize,
    score: f64,
    size: usize,
}

/// Chooses the highest-scoring subset of matching items that fits `budget`.
pub fn select_context(items: &[ContextItem], scorer: &Scorer, budget: usize, query: &Query) -> ContextBundle {
    let mut entries: Vec<Entry> = items
        .iter()
        .enumerate()
        .filter(|(_, x)| query.matches(x))
        .map(|(idx, x)| Entry {
            idx,
            score: scorer.score(x),
            size: x.size,
        })
        // zero-score items never raise the objective
        .filter(|e| e.score > 0.0 && e.size <= budget)
        .collect();
    // density order, ties by item id
    entries.sort_by(|a, b| {
        let da = a.score / a.size.max(1) as f64;
        let db = b.score / b.size.max(1) as f64;
        db.partial_cmp(&da)
            .unwrap_or(Ordering::Equal)
            .then_with(|| items[a.idx].id.cmp(&items[b.idx].id))
    });
    let chosen = if entries.len() <= EXACT_LIMIT {
        knapsack_exact(&entries, budget)
    } else {
        knapsack_greedy(&entries, budget)
    };
    let mut picked: Vec<Entry> = chosen.into_iter().map(|i| entries[i]).collect();
    picked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| items[a.idx].id.cmp(&items[b.idx].id))
    });
    ContextBundle {
        total_size: picked.iter().map(|e| e.size).sum(),
        total_score: picked.iter().map(|e| e.score).sum(),
        items: picked.into_iter().map(|e| items[e.idx].id.clone()).collect(),
    }
}

/// Depth-first branch and bound over density-sorted entries, pruned by the
/// fractional relaxation. Returns positions into `entries`.
fn knapsack_exact(entries: &[Entry], budget: usize) -> Vec<usize> {
    struct Search<'a> {
        entries: &'a [Entry],
        best_score: f64,
        best: Vec<usize>,
        current: Vec<usize>,
    }

    impl Search<'_> {
        fn bound(&self, from: usize, room: usize, score: f64) -> f64 {
            let mut room = room as f64;
            let mut bound = score;
            for e in &self.entries[from..] {
                if (e.size as f64) <= room {
                    room -= e.size as f64;
                    bound += e.score;
                } else {
                    bound += e.score * room / e.size as f64;
                    break;
                }
            }
            bound
        }

        fn go(&mut self, i: usize, room: usize, score: f64) {
            if score > self.best_score {
                self.best_score = score;
                self.best = self.current.clone();
            }
            if i == self.entries.len() || self.bound(i, room, score) <= self.best_score {
                return;
            }
            let e = self.entries[i];
            if e.size <= room {
                self.current.push(i);
                self.go(i + 1, room - e.size, score + e.score);
                self.current.pop();
            }
            self.go(i + 1, room, score);
        }
    }

    let mut s = Search {
        entries,
        best_score: 0.0,
        best: Vec::new(),
        current: Vec::new(),
    };
    s.go(0, budget, 0.0);
    s.best
}

/// Density greedy followed by single-item swap and fill passes.
fn knapsack_greedy(entries: &[Entry], budget: usize) -> Vec<usize> {
    let mut taken = vec![false; entries.len()];
    let mut used = 0usize;
    for (i, e) in entries.iter().enumerate() {
        if used + e.size <= budget {
            taken[i] = true;
            used += e.size;
        }
    }

    loop {
        let mut best_gain = 0.0;
        let mut best_move: Option<(Option<usize>, usize)> = None;
        for j in (0..entries.len()).filter(|&j| !taken[j]) {
            let ej = entries[j];
            if used + ej.size <= budget && ej.score > best_gain {
                best_gain = ej.score;
                best_move = Some((None, j));
            }
            for i in (0..entries.len()).filter(|&i| taken[i]) {
                let ei = entries[i];
                let gain = ej.score - ei.score;
                if gain > best_gain && used - ei.size + ej.size <= budget {
                    best_gain = gain;
                    best_move = Some((Some(i), j));
                }
            }
        }
        match best_move {
            Some((out, j)) => {
                if let Some(i) = out {
                    taken[i] = false;
                    used -= entries[i].size;
                }
                taken[j] = true;
                used += entries[j].size;
            }
            None => break,
        }
    }

    // the best single item bounds the density greedy's worst case
    let greedy_score: f64 = (0..entries.len()).filter(|&i| taken[i]).map(|i| entries[i].score).sum();
    if let Some((k, e)) = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.size <= budget)
        .max_by(|a, b| a.1.score.partial_cmp(&b.1.score).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))
    {
        if e.score > greedy_score {
            return vec![k];
        }
    }
    (0..entries.len()).filter(|&i| taken[i]).collect()
}

/// Renders a bundle for delivery to a generator: items in bundle order, each
/// under a header naming its origin.
pub fn render_bundle(bundle: &ContextBundle, items: &[ContextItem]) -> String {
    let mut out = String::new();
    for id in &bundle.items {
        if let Some(x) = items.iter().find(|x| &x.id == id) {
            let _ = writeln!(out, "### {} (iteration {})", x.origin.as_str(), x.iteration);
            out.push_str(&x.payload);
            if !x.payload.ends_with('\n') {
                out.push('\n');
            }
            out.push('\n');
        }
    }
    out
}

struct StoreInner {
    items: Vec<ContextItem>,
    file: Option<File>,
}

/// Append-only history of context items, optionally mirrored to a JSON-lines
/// file. Safe to share between threads.
pub struct HistoryStore {
    inner: Mutex<StoreInner>,
    path: Option<PathBuf>,
}

impl HistoryStore {
    pub fn in_memory() -> Self {
        HistoryStore {
            inner: Mutex::new(StoreInner {
                items: Vec::new(),
                file: None,
            }),
            path: None,
        }
    }

    /// Opens (or creates) a persisted store, loading existing records.
    pub fn open(path: &Path) -> Result<Self, ContextError> {
        let items = if path.exists() {
            let (items, valid_len) = load_history(path)?;
            let f = OpenOptions::new().write(true).open(path)?;
            if f.metadata()?.len() > valid_len as u64 {
                f.set_len(valid_len as u64)?;
                f.sync_all()?;
            }
            items
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(HistoryStore {
            inner: Mutex::new(StoreInner {
                items,
                file: Some(file),
            }),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, item: NewItem) -> Result<String, ContextError> {
        if item.payload.is_empty() {
            return Err(ContextError::EmptyPayload);
        }
        let mut inner = self.inner.lock().expect("history lock poisoned");
        let id = format!("h{:06}", inner.items.len());
        let record = ContextItem {
            id: id.clone(),
            origin: item.origin,
            iteration: item.iteration,
            size: payload_size(&item.payload),
            severity_class: item.severity_class,
            failure_count: item.failure_count,
            complexity: item.complexity,
            anomalous_logs: item.anomalous_logs,
            clause_id: item.clause_id,
            payload: item.payload,
        };
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("context item serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        inner.items.push(record);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<ContextItem> {
        let inner = self.inner.lock().expect("history lock poisoned");
        inner.items.iter().find(|x| x.id == id).cloned()
    }

    pub fn by_origin(&self, origin: Origin) -> Vec<ContextItem> {
        let inner = self.inner.lock().expect("history lock poisoned");
        inner.items.iter().filter(|x| x.origin == origin).cloned().collect()
    }

    pub fn snapshot(&self) -> Vec<ContextItem> {
        self.inner.lock().expect("history lock poisoned").items.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("history lock poisoned").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops items recorded after `iteration`, rewriting the backing file.
    /// Used when resuming a run that stopped mid-iteration.
    pub fn truncate_after(&self, iteration: u64) -> Result<usize, ContextError> {
        let mut inner = self.inner.lock().expect("history lock poisoned");
        let before = inner.items.len();
        let keep = inner.items.iter().take_while(|x| x.iteration <= iteration).count();
        inner.items.truncate(keep);
        let dropped = before - keep;
        if dropped > 0 {
            if let Some(path) = &self.path {
                let mut body = String::new();
                for x in &inner.items {
                    body.push_str(&serde_json::to_string(x).expect("context item serializes"));
                    body.push('\n');
                }
                crate::store::write_atomic(path, body.as_bytes())?;
                inner.file = Some(OpenOptions::new().append(true).open(path)?);
            }
        }
        Ok(dropped)
    }
}

/// Reads a history file without modifying it. A trailing line cut short by
/// an interrupted write is skipped; its byte offset is returned alongside.
pub fn load_history(path: &Path) -> Result<(Vec<ContextItem>, usize), ContextError> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    let mut valid_len = 0;
    for (n, chunk) in text.split_inclusive('\n').enumerate() {
        if !chunk.ends_with('\n') {
            break;
        }
        valid_len += chunk.len();
        if chunk.trim().is_empty() {
            continue;
        }
        let item: ContextItem = serde_json::from_str(chunk.trim_end()).map_err(|e| ContextError::Corrupt {
            line: n + 1,
            reason: e.to_string(),
        })?;
        items.push(item);
    }
    Ok((items, valid_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, score_parts: (u64, bool), size: usize) -> ContextItem {
        ContextItem {
            id: id.into(),
            origin: Origin::CodeExcerpt,
            iteration: 0,
            size,
            severity_class: SeverityClass::Low,
            failure_count: 0,
            complexity: score_parts.0 as f64,
            anomalous_logs: score_parts.1,
            clause_id: None,
            payload: "x".repeat(size),
        }
    }

    /// Items whose score under `complexity_only` equals their complexity.
    fn scored(id: &str, score: u64, size: usize) -> ContextItem {
        item(id, (score, false), size)
    }

    fn complexity_only() -> Scorer {
        Scorer {
            weights: ScoringWeights {
                theta: [0.0, 0.0, 0.0, 1.0, 0.0],
            },
            current_iteration: 0,
            recency: DEFAULT_RECENCY,
        }
    }

    #[test]
    fn null_item_scores_zero() {
        let x = item("a", (0, false), 3);
        assert_eq!(score_item(&x, &ScoringWeights::default(), 10, 3), 0.0);
    }

    #[test]
    fn full_item_scores_term_sum() {
        let x = ContextItem {
            origin: Origin::TestFailure,
            iteration: 9,
            severity_class: SeverityClass::High,
            failure_count: 1,
            complexity: 0.5,
            anomalous_logs: true,
            ..item("a", (0, false), 3)
        };
        // one recorded failure contributes ln 2
        let s = score_item(&x, &ScoringWeights::default(), 10, 3);
        assert!((s - (1.0 + 1.0 + 2f64.ln() + 0.5 + 1.0)).abs() < 1e-12);
        let stale = ContextItem { iteration: 6, ..x.clone() };
        assert!((score_item(&stale, &ScoringWeights::default(), 10, 3) - (s - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_failures_contribute_nothing() {
        let x = item("a", (0, false), 3);
        let w = ScoringWeights {
            theta: [0.0, 0.0, 5.0, 0.0, 0.0],
        };
        assert_eq!(score_item(&x, &w, 0, 3), 0.0);
    }

    #[test]
    fn zero_budget_selects_nothing() {
        let items = vec![scored("a", 10, 5)];
        let b = select_context(&items, &complexity_only(), 0, &Query::all());
        assert_eq!(b, ContextBundle::empty());
    }

    #[test]
    fn exact_example() {
        let items = vec![scored("A", 10, 5), scored("B", 6, 3), scored("C", 5, 3)];
        let b = select_context(&items, &complexity_only(), 6, &Query::all());
        assert_eq!(b.items, vec!["B", "C"]);
        assert_eq!(b.total_score, 11.0);
        assert_eq!(b.total_size, 6);
    }

    #[test]
    fn singleton_that_fits() {
        let items = vec![scored("only", 3, 4)];
        let b = select_context(&items, &complexity_only(), 4, &Query::all());
        assert_eq!(b.items, vec!["only"]);
    }

    #[test]
    fn query_filters_by_origin_and_iteration() {
        let mut items = vec![scored("a", 1, 1), scored("b", 1, 1), scored("c", 1, 1)];
        items[1].origin = Origin::LogExcerpt;
        items[2].iteration = 7;
        let q = Query {
            origins: Some(BTreeSet::from([Origin::CodeExcerpt])),
            iterations: Some(0..=5),
        };
        let b = select_context(&items, &complexity_only(), 100, &q);
        assert_eq!(b.items, vec!["a"]);
    }

    #[test]
    fn greedy_path_respects_budget() {
        let items: Vec<_> = (0..60).map(|i| scored(&format!("i{i:02}"), 1 + i % 7, 1 + (i as usize * 7) % 11)).collect();
        let b = select_context(&items, &complexity_only(), 40, &Query::all());
        assert!(b.total_size <= 40);
        assert!(b.total_score > 0.0);
    }

    #[test]
    fn greedy_takes_big_item_when_density_misleads() {
        // one dense small item and one large item filling the budget
        let mut items: Vec<_> = (0..30).map(|i| scored(&format!("pad{i:02}"), 1, 1000)).collect();
        items.push(scored("small", 2, 1));
        items.push(scored("big", 50, 100));
        let b = select_context(&items, &complexity_only(), 100, &Query::all());
        assert_eq!(b.items, vec!["big"]);
    }

    #[test]
    fn history_round_trip_and_filter() {
        let store = HistoryStore::in_memory();
        let origins = [
            Origin::TestFailure,
            Origin::LogExcerpt,
            Origin::TestFailure,
            Origin::VerifyFinding,
            Origin::CodeExcerpt,
            Origin::TestFailure,
        ];
        let ids: Vec<String> = origins
            .iter()
            .enumerate()
            .map(|(i, &o)| store.append(NewItem::new(o, i as u64, format!("payload {i}"))).unwrap())
            .collect();
        assert_eq!(store.get(&ids[3]).unwrap().payload, "payload 3");
        assert!(ids[0] < ids[1]);
        let fails: Vec<String> = store.by_origin(Origin::TestFailure).into_iter().map(|x| x.id).collect();
        assert_eq!(fails, vec![ids[0].clone(), ids[2].clone(), ids[5].clone()]);
        assert!(matches!(
            store.append(NewItem::new(Origin::CodeExcerpt, 0, "")),
            Err(ContextError::EmptyPayload)
        ));
    }

    #[test]
    fn persisted_history_reloads_and_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        {
            let store = HistoryStore::open(&path).unwrap();
            for t in 0..4 {
                store.append(NewItem::new(Origin::PriorFeedback, t, format!("t{t}"))).unwrap();
            }
        }
        let store = HistoryStore::open(&path).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(store.truncate_after(1).unwrap(), 2);
        store.append(NewItem::new(Origin::PriorFeedback, 2, "again")).unwrap();
        let reopened = HistoryStore::open(&path).unwrap();
        let payloads: Vec<String> = reopened.snapshot().into_iter().map(|x| x.payload).collect();
        assert_eq!(payloads, vec!["t0", "t1", "again"]);
    }

    #[test]
    fn torn_history_tail_is_trimmed_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let store = HistoryStore::open(&path).unwrap();
        store.append(NewItem::new(Origin::TestFailure, 1, "kept")).unwrap();
        drop(store);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"id\":\"h0000").unwrap();
        drop(f);
        assert_eq!(load_history(&path).unwrap().0.len(), 1);
        let store = HistoryStore::open(&path).unwrap();
        store.append(NewItem::new(Origin::TestFailure, 2, "next")).unwrap();
        let payloads: Vec<String> = HistoryStore::open(&path).unwrap().snapshot().into_iter().map(|x| x.payload).collect();
        assert_eq!(payloads, vec!["kept", "next"]);
    }

    #[test]
    fn rendering_lists_headers_in_bundle_order() {
        let mut items = vec![scored("a", 1, 1), scored("b", 5, 1)];
        items[1].origin = Origin::TestFailure;
        let b = select_context(&items, &complexity_only(), 10, &Query::all());
        let text = render_bundle(&b, &items);
        let first = text.find("### test_failure").unwrap();
        let second = text.find("### code_excerpt").unwrap();
        assert!(first < second);
    }
}
