//! Iterative candidate refinement driven by multi-channel verification
//! feedback and exponential weighting.

pub mod config;
pub mod context;
pub mod distribution;
pub mod generator;
pub mod hypothesis;
pub mod metrics;
pub mod orchestrator;
pub mod store;
pub mod synthbench;
pub mod verification;

pub use config::{ConfigError, RunConfig};
pub use context::{ContextBundle, ContextItem, HistoryStore, Origin, ScoringWeights};
pub use distribution::{CandidateDistribution, SearchConfig};
pub use generator::{Generator, GeneratorError, Proposal, ProposalRequest};
pub use hypothesis::{ArtifactSnapshot, Candidate, CandidateId, Digest, Edit};
pub use metrics::{ClauseKind, ErrorWeights, FeedbackVector, LogTrace, SpecClause, Specification};
pub use orchestrator::{
    DemandEvent, IterationRecord, Orchestrator, Resumed, RunError, RunReport, RunResult, RunSetup, Termination,
};
pub use synthbench::{SyntheticSpace, SynthError};
pub use verification::{ClauseRunner, OutputParser, RunnerSet, VerificationReport, Verifier};
