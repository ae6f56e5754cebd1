//! Community proving: hand proving jobs to untrusted provers, verify and pay
//! for the first valid proof of each job, and reassign stalled work by
//! least-recently-processed order instead of timeouts.
//!
//! - [`store`]: the operator's job database and round aggregation.
//! - [`backend`]: work-puzzle prove/verify standing in for circuit proving.
//! - [`distributor`]: the Job Distributor.
//! - [`simulator`]: virtual-clock runs of prover populations.
//! - [`analytics`]: ideal-parallel time, breakeven and payout calculators.

pub mod analytics;
pub mod backend;
pub mod clock;
pub mod distributor;
pub mod simulator;
pub mod store;

pub use backend::{ProofBackend, Proof, ProvingParams, WorkPuzzle};
pub use clock::{Clock, ManualClock, SystemClock, Timestamp};
pub use distributor::{
    Distributor, DistributorConfig, GetJobOutcome, JobAssignment, LedgerEntry, ProofSubmission,
    RateLimit, RejectReason, RequestId, SubmitOutcome,
};
pub use store::{BatchSpec, CoreStore, JobId, JobRecord, JobStatus};
