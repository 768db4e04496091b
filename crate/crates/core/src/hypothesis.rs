//! Candidates as edit sequences over a base artifact.
//!
//! A candidate is identified by the SHA-256 digest of its base artifact id
//! and its ordered edit list, so identical content always maps to the same
//! id and snapshots can be rebuilt on demand.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Digest algorithm recorded in run metadata.
pub const HASH_ALGORITHM: &str = "sha256";

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Content hash of a candidate. Ordered by its hex spelling.
pub type CandidateId = Digest;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditKind {
    /// Replace the byte range `start..end` with `text`.
    ReplaceRegion { start: usize, end: usize, text: String },
    Insert { offset: usize, text: String },
    Delete { start: usize, end: usize },
    /// Rewrite the value of the first `key = value` line.
    SetParameter { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub target: String,
    #[serde(flatten)]
    pub kind: EditKind,
}

impl Edit {
    pub fn replace(target: impl Into<String>, start: usize, end: usize, text: impl Into<String>) -> Self {
        Edit {
            target: target.into(),
            kind: EditKind::ReplaceRegion {
                start,
                end,
                text: text.into(),
            },
        }
    }

    pub fn insert(target: impl Into<String>, offset: usize, text: impl Into<String>) -> Self {
        Edit {
            target: target.into(),
            kind: EditKind::Insert {
                offset,
                text: text.into(),
            },
        }
    }

    pub fn delete(target: impl Into<String>, start: usize, end: usize) -> Self {
        Edit {
            target: target.into(),
            kind: EditKind::Delete { start, end },
        }
    }

    pub fn set_parameter(target: impl Into<String>, key: impl Into<String>, value: impl Into<String>) -> Self {
        Edit {
            target: target.into(),
            kind: EditKind::SetParameter {
                key: key.into(),
                value: value.into(),
            },
        }
    }

    /// Size of the payload carried by this edit, in bytes.
    pub fn payload_len(&self) -> usize {
        match &self.kind {
            EditKind::ReplaceRegion { text, .. } | EditKind::Insert { text, .. } => text.len(),
            EditKind::Delete { .. } => 0,
            EditKind::SetParameter { key, value } => key.len() + value.len(),
        }
    }

    /// Length-prefixed canonical encoding fed to the candidate hash.
    fn encode_into(&self, out: &mut Vec<u8>) {
        fn field(out: &mut Vec<u8>, bytes: &[u8]) {
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        fn num(out: &mut Vec<u8>, n: usize) {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        field(out, self.target.as_bytes());
        match &self.kind {
            EditKind::ReplaceRegion { start, end, text } => {
                out.push(1);
                num(out, *start);
                num(out, *end);
                field(out, text.as_bytes());
            }
            EditKind::Insert { offset, text } => {
                out.push(2);
                num(out, *offset);
                field(out, text.as_bytes());
            }
            EditKind::Delete { start, end } => {
                out.push(3);
                num(out, *start);
                num(out, *end);
            }
            EditKind::SetParameter { key, value } => {
                out.push(4);
                field(out, key.as_bytes());
                field(out, value.as_bytes());
            }
        }
    }
}

/// Hash of `(base id, ordered edits)`.
pub fn candidate_id(base_id: &Digest, edits: &[Edit]) -> CandidateId {
    let mut buf = Vec::with_capacity(64 + edits.len() * 32);
    buf.extend_from_slice(b"refloop/candidate/v1\0");
    buf.extend_from_slice(&base_id.0);
    buf.extend_from_slice(&(edits.len() as u64).to_le_bytes());
    for e in edits {
        e.encode_into(&mut buf);
    }
    Digest::of(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub edits: Vec<Edit>,
    pub parent: Option<CandidateId>,
    pub birth_iteration: u64,
}

impl Candidate {
    /// The empty-edit candidate for `base`.
    pub fn root(base: &ArtifactSnapshot) -> Self {
        Candidate {
            id: candidate_id(&base.content_id(), &[]),
            edits: Vec::new(),
            parent: None,
            birth_iteration: 0,
        }
    }

    pub fn derive(base_id: &Digest, edits: Vec<Edit>, parent: CandidateId, birth_iteration: u64) -> Self {
        Candidate {
            id: candidate_id(base_id, &edits),
            edits,
            parent: Some(parent),
            birth_iteration,
        }
    }
}

#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error("edit {index}: no file `{target}`")]
    MissingTarget { index: usize, target: String },
    #[error("edit {index}: region {start}..{end} out of bounds for `{target}` ({len} bytes)")]
    OutOfBounds {
        index: usize,
        target: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("edit {index}: key `{key}` not found in `{target}`")]
    MissingKey { index: usize, target: String, key: String },
    #[error("edit {index}: `{target}` is not UTF-8 text")]
    NotText { index: usize, target: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactSnapshot {
    pub files: BTreeMap<String, Vec<u8>>,
    pub provenance: Option<CandidateId>,
}

impl ArtifactSnapshot {
    pub fn new(files: BTreeMap<String, Vec<u8>>) -> Self {
        ArtifactSnapshot {
            files,
            provenance: None,
        }
    }

    pub fn from_texts<'a>(files: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::new(
            files
                .into_iter()
                .map(|(p, c)| (p.to_string(), c.as_bytes().to_vec()))
                .collect(),
        )
    }

    /// Hash over the file map only; provenance is ignored.
    pub fn content_id(&self) -> Digest {
        let mut hasher = Sha256::new();
        hasher.update(b"refloop/artifact/v1\0");
        for (path, bytes) in &self.files {
            hasher.update((path.len() as u64).to_le_bytes());
            hasher.update(path.as_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(bytes);
        }
        Digest(hasher.finalize().into())
    }

    pub fn text(&self, path: &str) -> Option<&str> {
        self.files.get(path).and_then(|b| std::str::from_utf8(b).ok())
    }

    /// Loads every regular file under `root`, keyed by `/`-separated relative path.
    pub fn load_dir(root: &Path) -> io::Result<Self> {
        let mut files = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let path = entry.path();
                let ty = entry.file_type()?;
                if ty.is_dir() {
                    stack.push(path);
                } else if ty.is_file() {
                    let rel = path
                        .strip_prefix(root)
                        .expect("walked path is under root")
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy().into_owned())
                        .collect::<Vec<_>>()
                        .join("/");
                    files.insert(rel, fs::read(&path)?);
                }
            }
        }
        Ok(Self::new(files))
    }

    pub fn write_dir(&self, root: &Path) -> io::Result<()> {
        for (rel, bytes) in &self.files {
            let path: PathBuf = root.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
        }
        Ok(())
    }

    fn apply(&mut self, index: usize, edit: &Edit) -> Result<(), MaterializeError> {
        let target = &edit.target;
        let bytes = self
            .files
            .get_mut(target)
            .ok_or_else(|| MaterializeError::MissingTarget {
                index,
                target: target.clone(),
            })?;
        let len = bytes.len();
        let check_range = |start: usize, end: usize| {
            if start > end || end > len {
                Err(MaterializeError::OutOfBounds {
                    index,
                    target: target.clone(),
                    start,
                    end,
                    len,
                })
            } else {
                Ok(())
            }
        };
        match &edit.kind {
            EditKind::ReplaceRegion { start, end, text } => {
                check_range(*start, *end)?;
                bytes.splice(*start..*end, text.bytes());
            }
            EditKind::Insert { offset, text } => {
                check_range(*offset, *offset)?;
                bytes.splice(*offset..*offset, text.bytes());
            }
            EditKind::Delete { start, end } => {
                check_range(*start, *end)?;
                bytes.drain(*start..*end);
            }
            EditKind::SetParameter { key, value } => {
                let text = std::str::from_utf8(bytes).map_err(|_| MaterializeError::NotText {
                    index,
                    target: target.clone(),
                })?;
                let (start, end) = find_parameter(text, key).ok_or_else(|| MaterializeError::MissingKey {
                    index,
                    target: target.clone(),
                    key: key.clone(),
                })?;
                bytes.splice(start..end, value.bytes());
            }
        }
        Ok(())
    }
}

/// Byte range of the value in the first line of the form `key = value`.
pub fn find_parameter(text: &str, key: &str) -> Option<(usize, usize)> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        let lead = body.len() - body.trim_start().len();
        let rest = &body[lead..];
        if let Some(after) = rest.strip_prefix(key) {
            let trimmed = after.trim_start();
            if let Some(value) = trimmed.strip_prefix('=') {
                let value_lead = value.len() - value.trim_start().len();
                let start = offset + body.len() - value.len() + value_lead;
                let end = offset + body.trim_end().len().max(start - offset);
                return Some((start, end));
            }
        }
        offset += line.len();
    }
    None
}

/// Applies the candidate's edits to `base` in order.
pub fn materialize(base: &ArtifactSnapshot, candidate: &Candidate) -> Result<ArtifactSnapshot, MaterializeError> {
    let mut snap = ArtifactSnapshot::new(base.files.clone());
    for (i, e) in candidate.edits.iter().enumerate() {
        snap.apply(i, e)?;
    }
    snap.provenance = Some(candidate.id);
    Ok(snap)
}

/// Applies bare edits without a candidate identity.
pub fn apply_edits(base: &ArtifactSnapshot, edits: &[Edit]) -> Result<ArtifactSnapshot, MaterializeError> {
    let mut snap = ArtifactSnapshot::new(base.files.clone());
    for (i, e) in edits.iter().enumerate() {
        snap.apply(i, e)?;
    }
    Ok(snap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ArtifactSnapshot {
        ArtifactSnapshot::from_texts([
            ("src/lib.rs", "fn add(a: i32, b: i32) -> i32 { a - b }\n"),
            ("params.cfg", "rate = 10\n  depth=3\n"),
        ])
    }

    #[test]
    fn empty_edit_list_is_identity() {
        let b = base();
        let c0 = Candidate::root(&b);
        let m = materialize(&b, &c0).unwrap();
        assert_eq!(m.files, b.files);
        assert_eq!(m.provenance, Some(c0.id));
    }

    #[test]
    fn disjoint_replacements_commute() {
        let b = base();
        let x = Edit::replace("src/lib.rs", 3, 6, "sum");
        let y = Edit::replace("src/lib.rs", 34, 35, "+");
        let xy = apply_edits(&b, &[x.clone(), y.clone()]).unwrap();
        let yx = apply_edits(&b, &[y, x]).unwrap();
        assert_eq!(xy.content_id(), yx.content_id());
        assert_eq!(xy.text("src/lib.rs").unwrap(), "fn sum(a: i32, b: i32) -> i32 { a + b }\n");
    }

    #[test]
    fn insert_then_delete_restores_base() {
        let b = base();
        let edits = [Edit::insert("params.cfg", 4, "xyz"), Edit::delete("params.cfg", 4, 7)];
        assert_eq!(apply_edits(&b, &edits).unwrap().files, b.files);
    }

    #[test]
    fn set_parameter_rewrites_value() {
        let b = base();
        let s = apply_edits(
            &b,
            &[
                Edit::set_parameter("params.cfg", "rate", "12.5"),
                Edit::set_parameter("params.cfg", "depth", "4"),
            ],
        )
        .unwrap();
        assert_eq!(s.text("params.cfg").unwrap(), "rate = 12.5\n  depth=4\n");
    }

    #[test]
    fn unresolvable_targets_fail() {
        let b = base();
        assert!(matches!(
            apply_edits(&b, &[Edit::delete("nope.rs", 0, 1)]),
            Err(MaterializeError::MissingTarget { .. })
        ));
        assert!(matches!(
            apply_edits(&b, &[Edit::delete("params.cfg", 5, 500)]),
            Err(MaterializeError::OutOfBounds { .. })
        ));
        assert!(matches!(
            apply_edits(&b, &[Edit::set_parameter("params.cfg", "width", "1")]),
            Err(MaterializeError::MissingKey { .. })
        ));
    }

    #[test]
    fn ids_are_deterministic_and_order_sensitive() {
        let base_id = base().content_id();
        let a = Edit::insert("params.cfg", 0, "#");
        let b = Edit::delete("params.cfg", 0, 1);
        let ab = candidate_id(&base_id, &[a.clone(), b.clone()]);
        assert_eq!(ab, candidate_id(&base_id, &[a.clone(), b.clone()]));
        assert_ne!(ab, candidate_id(&base_id, &[b, a]));
    }

    #[test]
    fn empty_and_noop_edits_have_distinct_ids() {
        let base_id = base().content_id();
        let noop = Edit::insert("params.cfg", 0, "");
        assert_ne!(candidate_id(&base_id, &[]), candidate_id(&base_id, &[noop]));
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = Digest::of(b"abc");
        assert_eq!(d.to_hex().parse::<Digest>().unwrap(), d);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }

    #[test]
    fn snapshot_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = base();
        b.write_dir(dir.path()).unwrap();
        assert_eq!(ArtifactSnapshot::load_dir(dir.path()).unwrap().files, b.files);
    }
}
