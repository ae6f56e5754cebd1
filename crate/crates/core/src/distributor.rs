//! The Job Distributor.
//!
//! Provers poll [`Distributor::handle_get_job`]. Fresh jobs from the core
//! store always go out first; once the store has nothing waiting, the pending
//! job that was assigned least recently is handed out again under a new
//! request id and moved to the back of the queue. There is no timeout
//! anywhere: a stalled or hoarded job comes back around simply by reaching
//! the head of the queue.
//!
//! [`Distributor::handle_submit_result`] accepts the first valid proof for a
//! job, pays its submitter once, and forgets every request id of that job so
//! late or duplicate submissions fall through as unknown.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::ProofBackend;
use crate::clock::{Clock, Timestamp};
use crate::store::{CoreStore, JobId, JobStatus};

/// Operator's per-job proving cost estimate, 0.0012 USD.
pub const DEFAULT_REWARD_MICROUSD: u64 = 1_200;
/// Half the operator estimate, 0.0006 USD.
pub const COMMUNITY_REWARD_MICROUSD: u64 = 600;
pub const DEFAULT_RETRY_AFTER_MS: u64 = 500;
pub const DEFAULT_RATE_LIMIT_WINDOW_MS: u64 = 60_000;
pub const DEFAULT_RATE_LIMIT_MAX_OUTSTANDING: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Caps how many still-outstanding assignments one prover may have received
/// within the trailing window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimit {
    pub window_ms: u64,
    pub max_outstanding: usize,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self {
            window_ms: DEFAULT_RATE_LIMIT_WINDOW_MS,
            max_outstanding: DEFAULT_RATE_LIMIT_MAX_OUTSTANDING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistributorConfig {
    pub reward_microusd: u64,
    pub retry_after_ms: u64,
    /// Disabled when `None`.
    pub rate_limit: Option<RateLimit>,
}

impl Default for DistributorConfig {
    fn default() -> Self {
        Self {
            reward_microusd: DEFAULT_REWARD_MICROUSD,
            retry_after_ms: DEFAULT_RETRY_AFTER_MS,
            rate_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobAssignment {
    pub job_id: JobId,
    pub request_id: RequestId,
    pub round: u32,
    pub witness: Arc<[u8]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GetJobOutcome {
    Assigned(JobAssignment),
    NoJob { retry_after_ms: u64 },
    RateLimited,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProofSubmission {
    pub prover_id: String,
    pub wallet: String,
    pub job_id: JobId,
    pub request_id: RequestId,
    pub proof: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownRequest,
    InvalidProof,
    RateLimited,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::UnknownRequest => "unknown_request",
            RejectReason::InvalidProof => "invalid_proof",
            RejectReason::RateLimited => "rate_limited",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Accepted { reward_microusd: u64 },
    Rejected(RejectReason),
}

/// One payment: the first valid proof of a job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub prover_id: String,
    pub wallet: String,
    pub job_id: JobId,
    pub request_id: RequestId,
    pub reward_microusd: u64,
    pub timestamp: Timestamp,
}

/// A running, not yet finalized job as seen by the pending queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingEntry {
    pub job_id: JobId,
    pub last_assigned_at: Timestamp,
    /// Zero for jobs recovered by [`Distributor::reconcile`] that have not
    /// been handed out since.
    pub assignment_count: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DistributorMetrics {
    pub fresh_assignments: u64,
    pub reassignments: u64,
    pub valid_submissions: u64,
    pub invalid_submissions: u64,
    pub unknown_submissions: u64,
    pub rate_limited: u64,
    pub total_payout_microusd: u64,
    pub queue_depth: usize,
    pub outstanding_requests: usize,
}

#[derive(Debug, Clone)]
struct Outstanding {
    prover_id: String,
    wallet: String,
    assigned_at: Timestamp,
}

#[derive(Debug, Clone)]
struct QueueSlot {
    seq: u64,
    last_assigned_at: Timestamp,
    assignment_count: u32,
}

#[derive(Debug, Default)]
struct State {
    next_request_id: u64,
    next_seq: u64,
    /// Queue order: enqueue sequence -> job. The head is the entry that was
    /// (re)assigned least recently.
    queue: BTreeMap<u64, JobId>,
    pending: HashMap<JobId, QueueSlot>,
    assignments: BTreeMap<JobId, BTreeMap<RequestId, Outstanding>>,
    ledger: Vec<LedgerEntry>,
    /// Per prover, assignments still inside the rate-limit window.
    recent: HashMap<String, VecDeque<(Timestamp, JobId, RequestId)>>,
    metrics: DistributorMetrics,
}

impl State {
    fn enqueue_tail(&mut self, job_id: JobId, now: Timestamp, assignment_count: u32) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert(seq, job_id.clone());
        self.pending.insert(
            job_id,
            QueueSlot {
                seq,
                last_assigned_at: now,
                assignment_count,
            },
        );
    }

    fn dequeue(&mut self, job_id: &JobId) -> Option<QueueSlot> {
        let slot = self.pending.remove(job_id)?;
        self.queue.remove(&slot.seq);
        Some(slot)
    }

    fn mint_request_id(&mut self) -> RequestId {
        self.next_request_id += 1;
        RequestId(self.next_request_id)
    }

    fn is_outstanding(&self, job_id: &JobId, request_id: RequestId) -> bool {
        self.assignments
            .get(job_id)
            .is_some_and(|m| m.contains_key(&request_id))
    }

    fn over_rate_limit(&mut self, limit: &RateLimit, prover_id: &str, now: Timestamp) -> bool {
        let Some(mut recent) = self.recent.remove(prover_id) else {
            return false;
        };
        let horizon = now.saturating_sub(Timestamp::from_millis(limit.window_ms));
        recent.retain(|(at, job_id, rid)| *at >= horizon && self.is_outstanding(job_id, *rid));
        let limited = recent.len() >= limit.max_outstanding;
        if !recent.is_empty() {
            self.recent.insert(prover_id.to_owned(), recent);
        }
        limited
    }

    fn forget_request(&mut self, job_id: &JobId, request_id: RequestId) {
        if let Some(requests) = self.assignments.get_mut(job_id) {
            requests.remove(&request_id);
            if requests.is_empty() {
                self.assignments.remove(job_id);
            }
        }
    }
}

pub struct Distributor {
    store: Arc<CoreStore>,
    backend: Arc<dyn ProofBackend>,
    clock: Arc<dyn Clock>,
    config: DistributorConfig,
    state: Mutex<State>,
}

impl fmt::Debug for Distributor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Distributor")
            .field("config", &self.config)
            .field("metrics", &self.snapshot_metrics())
            .finish_non_exhaustive()
    }
}

impl Distributor {
    pub fn new(
        store: Arc<CoreStore>,
        backend: Arc<dyn ProofBackend>,
        clock: Arc<dyn Clock>,
        config: DistributorConfig,
    ) -> Self {
        Self {
            store,
            backend,
            clock,
            config,
            state: Mutex::new(State::default()),
        }
    }

    pub fn store(&self) -> &Arc<CoreStore> {
        &self.store
    }

    pub fn config(&self) -> &DistributorConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn handle_get_job(&self, prover_id: &str, wallet: &str) -> GetJobOutcome {
        let now = self.clock.now();
        let mut state = self.state.lock();

        if let Some(limit) = &self.config.rate_limit {
            if state.over_rate_limit(limit, prover_id, now) {
                state.metrics.rate_limited += 1;
                return GetJobOutcome::RateLimited;
            }
        }

        let (job_id, round, witness) = if let Some(job) = self.store.fetch_next_waiting() {
            state.enqueue_tail(job.job_id.clone(), now, 1);
            state.metrics.fresh_assignments += 1;
            (job.job_id, job.round, job.witness)
        } else if let Some(head) = state.queue.first_key_value().map(|(_, id)| id.clone()) {
            let slot = state.dequeue(&head).expect("queued job has a slot");
            let job = self
                .store
                .job(&head)
                .expect("pending job exists in the core store");
            state.enqueue_tail(head.clone(), now, slot.assignment_count + 1);
            state.metrics.reassignments += 1;
            (head, job.round, job.witness)
        } else {
            return GetJobOutcome::NoJob {
                retry_after_ms: self.config.retry_after_ms,
            };
        };

        let request_id = state.mint_request_id();
        state.assignments.entry(job_id.clone()).or_default().insert(
            request_id,
            Outstanding {
                prover_id: prover_id.to_owned(),
                wallet: wallet.to_owned(),
                assigned_at: now,
            },
        );
        if self.config.rate_limit.is_some() {
            state
                .recent
                .entry(prover_id.to_owned())
                .or_default()
                .push_back((now, job_id.clone(), request_id));
        }
        GetJobOutcome::Assigned(JobAssignment {
            job_id,
            request_id,
            round,
            witness,
        })
    }

    pub fn handle_submit_result(&self, submission: ProofSubmission) -> SubmitOutcome {
        let now = self.clock.now();
        let mut state = self.state.lock();

        let issued_to_submitter = state
            .assignments
            .get(&submission.job_id)
            .and_then(|requests| requests.get(&submission.request_id))
            .is_some_and(|o| o.prover_id == submission.prover_id);
        if !issued_to_submitter {
            state.metrics.unknown_submissions += 1;
            return SubmitOutcome::Rejected(RejectReason::UnknownRequest);
        }

        let job = match self.store.job(&submission.job_id) {
            Some(job) if job.status == JobStatus::Running => job,
            // Finalized behind our back (another distributor sharing the store).
            _ => {
                state.dequeue(&submission.job_id);
                state.assignments.remove(&submission.job_id);
                state.metrics.unknown_submissions += 1;
                return SubmitOutcome::Rejected(RejectReason::UnknownRequest);
            }
        };

        if !self.backend.verify(&job.witness, &submission.proof) {
            state.forget_request(&submission.job_id, submission.request_id);
            state.metrics.invalid_submissions += 1;
            return SubmitOutcome::Rejected(RejectReason::InvalidProof);
        }

        if self
            .store
            .mark_completed(&submission.job_id, &submission.proof)
            .is_err()
        {
            state.dequeue(&submission.job_id);
            state.assignments.remove(&submission.job_id);
            state.metrics.unknown_submissions += 1;
            return SubmitOutcome::Rejected(RejectReason::UnknownRequest);
        }

        state.dequeue(&submission.job_id);
        let requests = state
            .assignments
            .remove(&submission.job_id)
            .expect("checked above");
        let payee = &requests[&submission.request_id];
        let reward = self.config.reward_microusd;
        state.ledger.push(LedgerEntry {
            prover_id: payee.prover_id.clone(),
            wallet: payee.wallet.clone(),
            job_id: submission.job_id,
            request_id: submission.request_id,
            reward_microusd: reward,
            timestamp: now,
        });
        state.metrics.valid_submissions += 1;
        state.metrics.total_payout_microusd += reward;
        SubmitOutcome::Accepted {
            reward_microusd: reward,
        }
    }

    /// Re-queues running jobs this distributor does not know about, e.g.
    /// after a restart over an existing store. Returns how many were added.
    pub fn reconcile(&self) -> usize {
        let now = self.clock.now();
        let mut state = self.state.lock();
        let mut recovered = 0;
        for job_id in self.store.running_jobs() {
            if !state.pending.contains_key(&job_id) {
                state.enqueue_tail(job_id, now, 0);
                recovered += 1;
            }
        }
        recovered
    }

    pub fn snapshot_metrics(&self) -> DistributorMetrics {
        let state = self.state.lock();
        DistributorMetrics {
            queue_depth: state.queue.len(),
            outstanding_requests: state.assignments.values().map(BTreeMap::len).sum(),
            ..state.metrics
        }
    }

    /// Pending queue from head (least recently assigned) to tail.
    pub fn pending_queue(&self) -> Vec<PendingEntry> {
        let state = self.state.lock();
        state
            .queue
            .values()
            .map(|job_id| {
                let slot = &state.pending[job_id];
                PendingEntry {
                    job_id: job_id.clone(),
                    last_assigned_at: slot.last_assigned_at,
                    assignment_count: slot.assignment_count,
                }
            })
            .collect()
    }

    /// Outstanding request ids of a job, ascending.
    pub fn outstanding_requests(&self, job_id: &JobId) -> Vec<RequestId> {
        let state = self.state.lock();
        state
            .assignments
            .get(job_id)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Prover holding an outstanding request, with its assignment time.
    pub fn assignee(&self, job_id: &JobId, request_id: RequestId) -> Option<(String, Timestamp)> {
        let state = self.state.lock();
        state
            .assignments
            .get(job_id)?
            .get(&request_id)
            .map(|o| (o.prover_id.clone(), o.assigned_at))
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.state.lock().ledger.clone()
    }

    /// Total payout per prover id.
    pub fn payouts(&self) -> BTreeMap<String, u64> {
        let state = self.state.lock();
        let mut out = BTreeMap::new();
        for entry in &state.ledger {
            *out.entry(entry.prover_id.clone()).or_default() += entry.reward_microusd;
        }
        out
    }

    /// Ledger as JSON lines.
    pub fn write_ledger<W: Write>(&self, mut out: W) -> io::Result<()> {
        for entry in self.ledger() {
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    /// Hash of everything that determines future behavior: request counter,
    /// queue, assignment map, ledger, rate-limit window and the core store.
    /// Metrics are excluded.
    pub fn state_digest(&self) -> [u8; 32] {
        let state = self.state.lock();
        let mut hasher = Sha256::new();
        hasher.update(state.next_request_id.to_be_bytes());
        hasher.update(state.next_seq.to_be_bytes());
        for (seq, job_id) in &state.queue {
            let slot = &state.pending[job_id];
            hasher.update(seq.to_be_bytes());
            hash_str(&mut hasher, job_id.as_str());
            hasher.update(slot.last_assigned_at.0.to_be_bytes());
            hasher.update(slot.assignment_count.to_be_bytes());
        }
        for (job_id, requests) in &state.assignments {
            hash_str(&mut hasher, job_id.as_str());
            for (rid, o) in requests {
                hasher.update(rid.0.to_be_bytes());
                hash_str(&mut hasher, &o.prover_id);
                hash_str(&mut hasher, &o.wallet);
                hasher.update(o.assigned_at.0.to_be_bytes());
            }
        }
        for e in &state.ledger {
            hash_str(&mut hasher, &e.prover_id);
            hash_str(&mut hasher, e.job_id.as_str());
            hasher.update(e.request_id.0.to_be_bytes());
            hasher.update(e.reward_microusd.to_be_bytes());
        }
        let mut provers: Vec<_> = state.recent.iter().collect();
        provers.sort_by(|a, b| a.0.cmp(b.0));
        for (prover, entries) in provers {
            hash_str(&mut hasher, prover);
            for (at, job_id, rid) in entries {
                hasher.update(at.0.to_be_bytes());
                hash_str(&mut hasher, job_id.as_str());
                hasher.update(rid.0.to_be_bytes());
            }
        }
        self.store.digest_into(&mut hasher);
        hasher.finalize().into()
    }
}

fn hash_str(hasher: &mut Sha256, s: &str) {
    hasher.update((s.len() as u64).to_be_bytes());
    hasher.update(s.as_bytes());
}
