use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use refloop_core::generator::{render_excerpt, MutationGenerator, ProposalRequest};
use refloop_core::hypothesis::{apply_edits, ArtifactSnapshot, Candidate};
use refloop_core::synthbench::SLOT_FILE;
use refloop_core::{Generator, SyntheticSpace};

fn request(snapshot: ArtifactSnapshot, seed: u64) -> ProposalRequest {
    ProposalRequest {
        incumbent: Candidate::root(&snapshot).id,
        incumbent_edits: Vec::new(),
        incumbent_excerpt: render_excerpt(&snapshot, 200),
        incumbent_snapshot: Arc::new(snapshot),
        context: String::new(),
        spec_digest: String::new(),
        n: 8,
        seed,
    }
}

#[test]
fn every_valid_state_of_a_small_space_is_reachable() {
    let space = SyntheticSpace::fixture("S2").unwrap();
    let generator = MutationGenerator::new(Vec::new());
    let start = space.origin();
    let mut seen = BTreeSet::from([start.clone()]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let snapshot = ArtifactSnapshot::from_texts([(SLOT_FILE, space.render(&v).as_str())]);
        for seed in 0..6 {
            let batch = generator.propose(&request(snapshot.clone(), seed)).unwrap();
            for p in batch.proposals {
                let next = apply_edits(&snapshot, &p.edits).ok().and_then(|s| space.decode(&s));
                if let Some(w) = next {
                    if seen.insert(w.clone()) {
                        queue.push_back(w);
                    }
                }
            }
        }
    }
    assert_eq!(seen.len(), space.size());
}
