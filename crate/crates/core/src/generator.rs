//! Candidate proposal.
//!
//! A [`Generator`] receives a rendered [`ProposalRequest`] and returns edit
//! lists to apply on top of the incumbent. Two implementations ship here: a
//! seeded textual mutation generator and a client for a remote proposal
//! service. The synthetic generator used by benchmarks lives in
//! [`crate::synthbench`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hypothesis::{apply_edits, ArtifactSnapshot, CandidateId, Digest, Edit};
use crate::metrics::Specification;

pub const URL_ENV: &str = "REFLOOP_GENERATOR_URL";
pub const TOKEN_ENV: &str = "REFLOOP_GENERATOR_TOKEN";

const FORMAT_INSTRUCTION: &str = "Respond with a JSON object {\"proposals\": [{\"edits\": [...], \"rationale\": \"...\"}]}. \
Each edit is {\"target\": path, \"kind\": one of replace_region|insert|delete|set_parameter, ...} \
with byte offsets `start`/`end`/`offset`, replacement `text`, or `key`/`value`.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    /// The proposal source could not be reached; the caller may retry later.
    #[error("generator unavailable: {0}")]
    Unavailable(String),
    #[error("invalid proposal request: {0}")]
    InvalidRequest(String),
}

impl GeneratorError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, GeneratorError::Unavailable(_))
    }
}

#[derive(Debug, Clone)]
pub struct ProposalRequest {
    pub incumbent: CandidateId,
    pub incumbent_edits: Vec<Edit>,
    pub incumbent_snapshot: Arc<ArtifactSnapshot>,
    pub incumbent_excerpt: String,
    /// Rendered context bundle.
    pub context: String,
    pub spec_digest: String,
    pub n: usize,
    pub seed: u64,
}

impl ProposalRequest {
    /// Prompt text: spec digest, context, incumbent excerpt, then the output
    /// format instruction.
    pub fn prompt(&self) -> String {
        format!(
            "## Specification\n{}\n## Context\n{}\n## Current candidate\n{}\n## Output format\n{}\n",
            self.spec_digest, self.context, self.incumbent_excerpt, FORMAT_INSTRUCTION
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    /// Edits applied after the incumbent's own edits.
    pub edits: Vec<Edit>,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalBatch {
    pub proposals: Vec<Proposal>,
    /// Why individual responses were discarded.
    pub dropped: Vec<String>,
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;

    fn propose(&self, req: &ProposalRequest) -> Result<ProposalBatch, GeneratorError>;

    /// Edit list of the candidate obtained by applying `delta` to the
    /// incumbent. Generators with a canonical candidate form override this.
    fn compose(&self, incumbent_edits: &[Edit], delta: &[Edit]) -> Vec<Edit> {
        incumbent_edits.iter().chain(delta).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Accepted,
    Rejected(String),
}

/// Cheap pre-verification check: non-empty, every edit resolves against
/// `base`, payloads within `max_payload` bytes.
pub fn validate_proposal(p: &Proposal, base: &ArtifactSnapshot, max_payload: usize) -> Validation {
    if p.edits.is_empty() {
        return Validation::Rejected("no edits".into());
    }
    if let Some(e) = p.edits.iter().find(|e| e.payload_len() > max_payload) {
        return Validation::Rejected(format!("payload: {} bytes for `{}`", e.payload_len(), e.target));
    }
    match apply_edits(base, &p.edits) {
        Ok(_) => Validation::Accepted,
        Err(e) => Validation::Rejected(format!("target: {e}")),
    }
}

/// One line per clause: kind, id, weight and description.
pub fn spec_digest(spec: &Specification) -> String {
    let mut out = String::new();
    for c in spec.clauses() {
        let _ = writeln!(out, "- [{}] {} (weight {}): {}", c.kind, c.id, c.weight, c.description);
    }
    out
}

/// Text files of the snapshot, truncated to roughly `max_chars`.
pub fn render_excerpt(snapshot: &ArtifactSnapshot, max_chars: usize) -> String {
    let mut out = String::new();
    for (path, bytes) in &snapshot.files {
        let Ok(text) = std::str::from_utf8(bytes) else { continue };
        let _ = writeln!(out, "--- {path}");
        let room = max_chars.saturating_sub(out.chars().count());
        if room == 0 {
            break;
        }
        out.extend(text.chars().take(room));
        if !out.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

fn derive_seed(content: &Digest, seed: u64) -> u64 {
    let mut buf = content.0.to_vec();
    buf.extend_from_slice(&seed.to_le_bytes());
    let d = Digest::of(&buf);
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mutation {
    Token,
    Number,
    DeleteLine,
    DuplicateLine,
    SwapLines,
}

const MUTATIONS: [Mutation; 5] = [
    Mutation::Token,
    Mutation::Number,
    Mutation::DeleteLine,
    Mutation::DuplicateLine,
    Mutation::SwapLines,
];

/// Seeded single-edit mutations of the incumbent's text files: vocabulary
/// token substitution, numeric perturbation, line deletion or duplication,
/// and adjacent line swaps.
pub struct MutationGenerator {
    vocabulary: Vec<String>,
    word: Regex,
    number: Regex,
}

impl MutationGenerator {
    pub fn new(vocabulary: Vec<String>) -> Self {
        MutationGenerator {
            vocabulary,
            word: Regex::new(r"[A-Za-z_][A-Za-z0-9_]*").expect("static regex"),
            number: Regex::new(r"[0-9]+(\.[0-9]+)?").expect("static regex"),
        }
    }

    fn mutate(&self, snapshot: &ArtifactSnapshot, rng: &mut ChaCha8Rng) -> Option<Edit> {
        let texts: Vec<(&String, &str)> = snapshot
            .files
            .iter()
            .filter_map(|(p, b)| std::str::from_utf8(b).ok().map(|t| (p, t)))
            .filter(|(_, t)| !t.is_empty())
            .collect();
        let &(path, text) = texts.choose(rng)?;
        match *MUTATIONS.choose(rng)? {
            Mutation::Token => {
                let hits: Vec<_> = self
                    .word
                    .find_iter(text)
                    .filter(|m| self.vocabulary.iter().any(|v| v == m.as_str()))
                    .collect();
                let m = hits.choose(rng)?;
                let others: Vec<&String> = self.vocabulary.iter().filter(|v| *v != m.as_str()).collect();
                let replacement = others.choose(rng)?;
                Some(Edit::replace(path.as_str(), m.start(), m.end(), replacement.as_str()))
            }
            Mutation::Number => {
                let hits: Vec<_> = self
                    .number
                    .find_iter(text)
                    .filter(|m| {
                        // skip digits glued to identifiers such as `x1`
                        let before = text[..m.start()].chars().next_back();
                        let after = text[m.end()..].chars().next();
                        !before.is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '.')
                            && !after.is_some_and(|c| c.is_alphanumeric() || c == '_')
                    })
                    .collect();
                let m = hits.choose(rng)?;
                let up = rng.random_bool(0.5);
                let next = if m.as_str().contains('.') {
                    let v: f64 = m.as_str().parse().ok()?;
                    let decimals = m.as_str().split('.').nth(1).map_or(1, str::len);
                    let scaled = if up { v * 1.1 } else { v * 0.9 };
                    format!("{scaled:.decimals$}")
                } else {
                    let v: i64 = m.as_str().parse().ok()?;
                    if !up && v == 0 {
                        return None;
                    }
                    (if up { v + 1 } else { v - 1 }).to_string()
                };
                Some(Edit::replace(path.as_str(), m.start(), m.end(), next))
            }
            Mutation::DeleteLine => {
                let (start, end) = *line_spans(text).choose(rng)?;
                Some(Edit::delete(path.as_str(), start, end))
            }
            Mutation::DuplicateLine => {
                let (start, end) = *line_spans(text).choose(rng)?;
                let mut line = text[start..end].to_string();
                if !line.ends_with('\n') {
                    line.insert(0, '\n');
                }
                Some(Edit::insert(path.as_str(), end, line))
            }
            Mutation::SwapLines => {
                let spans = line_spans(text);
                if spans.len() < 2 {
                    return None;
                }
                let i = rng.random_range(0..spans.len() - 1);
                let (a, b) = (spans[i], spans[i + 1]);
                let first = text[a.0..a.1].trim_end_matches('\n');
                let second = text[b.0..b.1].trim_end_matches('\n');
                let tail = if text[b.0..b.1].ends_with('\n') { "\n" } else { "" };
                let swapped = format!("{second}\n{first}{tail}");
                if swapped == text[a.0..b.1] {
                    return None;
                }
                Some(Edit::replace(path.as_str(), a.0, b.1, swapped))
            }
        }
    }
}

/// Byte spans of each line, newline included.
fn line_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        spans.push((start, start + line.len()));
        start += line.len();
    }
    spans
}

impl Generator for MutationGenerator {
    fn name(&self) -> &str {
        "mutation"
    }

    fn propose(&self, req: &ProposalRequest) -> Result<ProposalBatch, GeneratorError> {
        if req.n == 0 {
            return Err(GeneratorError::InvalidRequest("n must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&req.incumbent_snapshot.content_id(), req.seed));
        let mut seen = HashSet::new();
        let mut proposals = Vec::new();
        let mut attempts = 0;
        while proposals.len() < req.n && attempts < 50 * req.n {
            attempts += 1;
            let Some(edit) = self.mutate(&req.incumbent_snapshot, &mut rng) else { continue };
            if seen.insert(edit.clone()) {
                proposals.push(Proposal {
                    rationale: "mutation".into(),
                    edits: vec![edit],
                });
            }
        }
        Ok(ProposalBatch {
            proposals,
            dropped: Vec::new(),
        })
    }
}

/// Client for a remote proposal service. Each requested proposal is one
/// POST of `{spec_digest, context, incumbent_excerpt, n, seed, prompt}`; the
/// reply must be `{"proposals": [{"edits": [...], "rationale": ...}]}`.
pub struct RemoteGenerator {
    endpoint: String,
    token: Option<String>,
    timeout: Duration,
    max_in_flight: usize,
}

impl RemoteGenerator {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration, max_in_flight: usize) -> Self {
        RemoteGenerator {
            endpoint: endpoint.into(),
            token,
            timeout,
            max_in_flight: max_in_flight.max(1),
        }
    }

    /// Reads the endpoint and token from the environment.
    pub fn from_env(timeout: Duration, max_in_flight: usize) -> Option<Self> {
        let endpoint = std::env::var(URL_ENV).ok()?;
        Some(Self::new(endpoint, std::env::var(TOKEN_ENV).ok(), timeout, max_in_flight))
    }

    fn request_one(&self, req: &ProposalRequest, seed: u64) -> Result<Value, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = json!({
            "spec_digest": req.spec_digest,
            "context": req.context,
            "incumbent_excerpt": req.incumbent_excerpt,
            "n": 1,
            "seed": seed,
            "prompt": req.prompt(),
        });
        let mut call = agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| e.to_string())?;
        resp.body_mut().read_json::<Value>().map_err(|e| e.to_string())
    }
}

/// Splits a service reply into well-formed proposals and drop reasons.
pub fn parse_proposals(reply: &Value) -> (Vec<Proposal>, Vec<String>) {
    let mut good = Vec::new();
    let mut dropped = Vec::new();
    let Some(list) = reply.get("proposals").and_then(Value::as_array) else {
        dropped.push("reply has no `proposals` array".into());
        return (good, dropped);
    };
    for (i, item) in list.iter().enumerate() {
        match serde_json::from_value::<Proposal>(item.clone()) {
            Ok(p) if p.edits.is_empty() => dropped.push(format!("proposal {i}: no edits")),
            Ok(p) => good.push(p),
            Err(e) => dropped.push(format!("proposal {i}: malformed edit list: {e}")),
        }
    }
    (good, dropped)
}

impl Generator for RemoteGenerator {
    fn name(&self) -> &str {
        "remote"
    }

    fn propose(&self, req: &ProposalRequest) -> Result<ProposalBatch, GeneratorError> {
        if req.n == 0 {
            return Err(GeneratorError::InvalidRequest("n must be >= 1".into()));
        }
        let seeds: Vec<u64> = (0..req.n as u64).map(|i| req.seed.wrapping_add(i)).collect();
        let mut replies: Vec<Result<Value, String>> = Vec::with_capacity(seeds.len());
        for chunk in seeds.chunks(self.max_in_flight) {
            let batch: Vec<Result<Value, String>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || self.request_one(req, seed))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err("request thread panicked".into())))
                    .collect()
            });
            replies.extend(batch);
        }
        if replies.iter().all(Result::is_err) {
            let first = replies.into_iter().find_map(Result::err).unwrap_or_default();
            return Err(GeneratorError::Unavailable(first));
        }
        let mut out = ProposalBatch::default();
        for (seed, reply) in seeds.iter().zip(replies) {
            match reply {
                Ok(v) => {
                    let (good, dropped) = parse_proposals(&v);
                    out.proposals.extend(good.into_iter().take(1));
                    out.dropped.extend(dropped);
                }
                Err(e) => out.dropped.push(format!("request seed {seed}: {e}")),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    use crate::hypothesis::Candidate;

    fn request(snapshot: ArtifactSnapshot, n: usize, seed: u64) -> ProposalRequest {
        let c0 = Candidate::root(&snapshot);
        ProposalRequest {
            incumbent: c0.id,
            incumbent_edits: Vec::new(),
            incumbent_excerpt: render_excerpt(&snapshot, 200),
            incumbent_snapshot: Arc::new(snapshot),
            context: String::new(),
            spec_digest: String::new(),
            n,
            seed,
        }
    }

    fn program() -> ArtifactSnapshot {
        ArtifactSnapshot::from_texts([(
            "src/calc.py",
            "def area(w, h):\n    return w + h * 2\n\nLIMIT = 10\nRATE = 0.25\n",
        )])
    }

    fn generator() -> MutationGenerator {
        MutationGenerator::new(vec!["w".into(), "h".into(), "area".into()])
    }

    #[test]
    fn same_seed_same_proposals() {
        let g = generator();
        let a = g.propose(&request(program(), 6, 11)).unwrap();
        let b = g.propose(&request(program(), 6, 11)).unwrap();
        assert_eq!(a, b);
        let c = g.propose(&request(program(), 6, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn proposals_are_distinct_and_bounded() {
        let g = generator();
        let req = request(program(), 3, 5);
        let batch = g.propose(&req).unwrap();
        assert!(batch.proposals.len() <= 3);
        let base_id = req.incumbent_snapshot.content_id();
        let ids: BTreeSet<_> = batch
            .proposals
            .iter()
            .map(|p| crate::hypothesis::candidate_id(&base_id, &g.compose(&[], &p.edits)))
            .collect();
        assert_eq!(ids.len(), batch.proposals.len());
        for p in &batch.proposals {
            assert_eq!(validate_proposal(p, &req.incumbent_snapshot, 1024), Validation::Accepted);
        }
    }

    #[test]
    fn numeric_perturbation_skips_identifier_digits() {
        let snap = ArtifactSnapshot::from_texts([("p.cfg", "x1 = 7\n")]);
        let g = MutationGenerator::new(Vec::new());
        let batch = g.propose(&request(snap.clone(), 40, 3)).unwrap();
        for p in &batch.proposals {
            let out = apply_edits(&snap, &p.edits).unwrap();
            let text = out.text("p.cfg").unwrap();
            assert!(!text.starts_with("x0") && !text.starts_with("x2"), "{text:?}");
        }
        let values: BTreeSet<String> = batch
            .proposals
            .iter()
            .map(|p| apply_edits(&snap, &p.edits).unwrap().text("p.cfg").unwrap().to_string())
            .collect();
        assert!(values.contains("x1 = 8\n") && values.contains("x1 = 6\n"));
    }

    #[test]
    fn validation_cases() {
        let base = program();
        let empty = Proposal {
            edits: vec![],
            rationale: String::new(),
        };
        assert_eq!(validate_proposal(&empty, &base, 100), Validation::Rejected("no edits".into()));
        let ghost = Proposal {
            edits: vec![Edit::delete("nope.py", 0, 1)],
            rationale: String::new(),
        };
        assert!(matches!(validate_proposal(&ghost, &base, 100), Validation::Rejected(r) if r.starts_with("target")));
        let fine = Proposal {
            edits: vec![Edit::replace("src/calc.py", 4, 8, "size")],
            rationale: String::new(),
        };
        assert_eq!(validate_proposal(&fine, &base, 100), Validation::Accepted);
        let big = Proposal {
            edits: vec![Edit::insert("src/calc.py", 0, "#".repeat(101))],
            rationale: String::new(),
        };
        assert!(matches!(validate_proposal(&big, &base, 100), Validation::Rejected(r) if r.starts_with("payload")));
    }

    #[test]
    fn prompt_sections_are_ordered() {
        let mut req = request(program(), 1, 0);
        req.spec_digest = "SPEC".into();
        req.context = "CTX".into();
        let p = req.prompt();
        let pos = |s: &str| p.find(s).unwrap();
        assert!(pos("SPEC") < pos("CTX"));
        assert!(pos("CTX") < pos("def area"));
        assert!(pos("def area") < pos("Output format"));
    }

    #[test]
    fn reply_parsing_drops_malformed_entries() {
        let reply = json!({"proposals": [
            {"edits": [{"target": "a", "kind": "delete", "start": 0, "end": 1}], "rationale": "ok"},
            {"edits": [{"target": "a", "kind": "teleport"}]},
            {"edits": []}
        ]});
        let (good, dropped) = parse_proposals(&reply);
        assert_eq!(good.len(), 1);
        assert_eq!(dropped.len(), 2);
        let (none, why) = parse_proposals(&json!({"oops": 1}));
        assert!(none.is_empty() && why.len() == 1);
    }

    #[test]
    fn unreachable_remote_is_retriable() {
        // port 9 on localhost is discard and normally closed
        let g = RemoteGenerator::new("http://127.0.0.1:9/propose", None, Duration::from_millis(500), 2);
        let err = g.propose(&request(program(), 2, 0)).unwrap_err();
        assert!(err.is_retriable());
    }
}
