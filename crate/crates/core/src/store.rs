//! In-memory model of the rollup operator's proving-job database.
//!
//! A batch starts as a set of round-0 witness jobs. When every job of a
//! round has been proven, the operator aggregates the round's proofs into
//! `ceil(n / fanin)` witnesses for the next round, until a single job remains
//! whose proof is the batch proof. In single-round mode the batch is done as
//! soon as round 0 is proven.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default number of child proofs folded into one aggregated witness.
pub const DEFAULT_FANIN: u32 = 16;
/// Witness size used by tests and the simulator.
pub const DEFAULT_WITNESS_BYTES: usize = 4096;
/// Typical production witness size (about 470 KB).
pub const PAPER_SCALE_WITNESS_BYTES: usize = 481_280;
/// Smallest witness the store will generate.
pub const MIN_WITNESS_BYTES: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("invalid batch spec: {0}")]
    InvalidSpec(String),
    #[error("batch {0} already ingested")]
    DuplicateBatch(String),
    #[error("unknown batch {0}")]
    UnknownBatch(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} is already completed")]
    AlreadyCompleted(JobId),
    #[error("job {0} was never fetched and cannot be completed")]
    NotRunning(JobId),
    #[error("round {round} of batch {batch_id} is not fully proven")]
    RoundIncomplete { batch_id: String, round: u32 },
    #[error("round {round} of batch {batch_id} was already aggregated")]
    AlreadyAggregated { batch_id: String, round: u32 },
}

/// Opaque identifier of one proving job.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(String);

impl JobId {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn for_job(batch_id: &str, round: u32, index: usize) -> Self {
        Self(format!("{batch_id}-r{round}-{index:06}"))
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Waiting,
    Running,
    Completed,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Waiting => "waiting",
            JobStatus::Running => "running",
            JobStatus::Completed => "completed",
        }
    }
}

/// Shape of a batch to be proven.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_id: String,
    pub round0_jobs: u32,
    #[serde(default = "default_fanin")]
    pub fanin: u32,
    #[serde(default = "default_witness_bytes")]
    pub witness_size_bytes: usize,
    #[serde(default)]
    pub single_round: bool,
}

fn default_fanin() -> u32 {
    DEFAULT_FANIN
}

fn default_witness_bytes() -> usize {
    DEFAULT_WITNESS_BYTES
}

impl BatchSpec {
    pub fn new(batch_id: impl Into<String>, round0_jobs: u32) -> Self {
        Self {
            batch_id: batch_id.into(),
            round0_jobs,
            fanin: DEFAULT_FANIN,
            witness_size_bytes: DEFAULT_WITNESS_BYTES,
            single_round: false,
        }
    }

    /// Round-0-only batch, the shape used by the scaling experiments.
    pub fn single_round(batch_id: impl Into<String>, round0_jobs: u32) -> Self {
        Self {
            single_round: true,
            ..Self::new(batch_id, round0_jobs)
        }
    }

    pub fn with_fanin(mut self, fanin: u32) -> Self {
        self.fanin = fanin;
        self
    }

    pub fn with_witness_size(mut self, bytes: usize) -> Self {
        self.witness_size_bytes = bytes;
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.round0_jobs == 0 {
            return Err(StoreError::InvalidSpec("batch has no round-0 jobs".into()));
        }
        if self.fanin < 2 {
            return Err(StoreError::InvalidSpec(format!(
                "fanin must be at least 2, got {}",
                self.fanin
            )));
        }
        if self.witness_size_bytes < MIN_WITNESS_BYTES {
            return Err(StoreError::InvalidSpec(format!(
                "witness_size_bytes must be at least {MIN_WITNESS_BYTES}, got {}",
                self.witness_size_bytes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRecord {
    pub job_id: JobId,
    pub batch_id: String,
    pub round: u32,
    pub witness: Arc<[u8]>,
    pub status: JobStatus,
    /// Present exactly when `status` is `Completed`.
    pub proof: Option<Arc<[u8]>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoundCounts {
    pub round: u32,
    pub waiting: usize,
    pub running: usize,
    pub completed: usize,
}

impl RoundCounts {
    pub fn total(&self) -> usize {
        self.waiting + self.running + self.completed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchProgress {
    pub batch_id: String,
    pub rounds: Vec<RoundCounts>,
    pub complete: bool,
}

/// One line of a status snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub job_id: JobId,
    pub round: u32,
    pub status: JobStatus,
}

#[derive(Debug)]
struct BatchState {
    spec: BatchSpec,
    /// Job indices (into `StoreState::jobs`) per round, in creation order.
    rounds: Vec<Vec<usize>>,
    complete: bool,
}

#[derive(Debug, Default)]
struct StoreState {
    jobs: Vec<JobRecord>,
    by_id: HashMap<JobId, usize>,
    batches: HashMap<String, BatchState>,
    /// Waiting jobs in creation order. Jobs never return to waiting, so a
    /// plain FIFO is enough.
    waiting: VecDeque<usize>,
}

/// Thread-safe job database. Every mutation happens under one lock, so each
/// operation is atomic with respect to every other.
#[derive(Debug, Default)]
pub struct CoreStore {
    state: Mutex<StoreState>,
}

impl CoreStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates the round-0 jobs of a batch, all waiting, in creation order.
    pub fn ingest_batch(&self, spec: BatchSpec, seed: u64) -> Result<Vec<JobRecord>, StoreError> {
        spec.validate()?;
        let mut state = self.state.lock();
        if state.batches.contains_key(&spec.batch_id) {
            return Err(StoreError::DuplicateBatch(spec.batch_id));
        }
        let witnesses = (0..spec.round0_jobs as usize)
            .map(|index| round0_witness(seed, &spec.batch_id, index, spec.witness_size_bytes));
        let created = state.push_round(&spec.batch_id, 0, witnesses);
        let records = created.iter().map(|&idx| state.jobs[idx].clone()).collect();
        state.batches.insert(
            spec.batch_id.clone(),
            BatchState {
                spec,
                rounds: vec![created],
                complete: false,
            },
        );
        Ok(records)
    }

    /// Hands out the oldest waiting job and marks it running.
    pub fn fetch_next_waiting(&self) -> Option<JobRecord> {
        let mut state = self.state.lock();
        let idx = state.waiting.pop_front()?;
        let job = &mut state.jobs[idx];
        debug_assert_eq!(job.status, JobStatus::Waiting);
        job.status = JobStatus::Running;
        Some(job.clone())
    }

    /// Records the proof of a running job. Completing the last job of a round
    /// either finishes the batch or aggregates the round into the next one.
    pub fn mark_completed(&self, job_id: &JobId, proof: &[u8]) -> Result<(), StoreError> {
        let mut state = self.state.lock();
        let idx = *state
            .by_id
            .get(job_id)
            .ok_or_else(|| StoreError::UnknownJob(job_id.clone()))?;
        let job = &mut state.jobs[idx];
        match job.status {
            JobStatus::Completed => return Err(StoreError::AlreadyCompleted(job_id.clone())),
            JobStatus::Waiting => return Err(StoreError::NotRunning(job_id.clone())),
            JobStatus::Running => {}
        }
        job.status = JobStatus::Completed;
        job.proof = Some(Arc::from(proof));
        let batch_id = job.batch_id.clone();
        let round = job.round;

        let batch = &state.batches[&batch_id];
        let round_done = batch.rounds[round as usize]
            .iter()
            .all(|&i| state.jobs[i].status == JobStatus::Completed);
        if !round_done {
            return Ok(());
        }
        let round_len = batch.rounds[round as usize].len();
        if batch.spec.single_round || round_len == 1 {
            state.batches.get_mut(&batch_id).expect("batch exists").complete = true;
        } else {
            state.aggregate(&batch_id, round)?;
        }
        Ok(())
    }

    /// Folds a fully proven round into `ceil(n / fanin)` waiting jobs of the
    /// next round. A round of one job completes the batch and creates nothing.
    ///
    /// `mark_completed` calls this automatically; calling it for a round that
    /// was already aggregated is an error.
    pub fn aggregate_round(&self, batch_id: &str, round: u32) -> Result<Vec<JobRecord>, StoreError> {
        let mut state = self.state.lock();
        let created = state.aggregate(batch_id, round)?;
        Ok(created.iter().map(|&idx| state.jobs[idx].clone()).collect())
    }

    pub fn progress(&self, batch_id: &str) -> Result<BatchProgress, StoreError> {
        let state = self.state.lock();
        let batch = state
            .batches
            .get(batch_id)
            .ok_or_else(|| StoreError::UnknownBatch(batch_id.to_owned()))?;
        let rounds = batch
            .rounds
            .iter()
            .enumerate()
            .map(|(round, jobs)| {
                let mut counts = RoundCounts {
                    round: round as u32,
                    ..RoundCounts::default()
                };
                for &idx in jobs {
                    match state.jobs[idx].status {
                        JobStatus::Waiting => counts.waiting += 1,
                        JobStatus::Running => counts.running += 1,
                        JobStatus::Completed => counts.completed += 1,
                    }
                }
                counts
            })
            .collect();
        Ok(BatchProgress {
            batch_id: batch_id.to_owned(),
            rounds,
            complete: batch.complete,
        })
    }

    pub fn is_batch_complete(&self, batch_id: &str) -> Result<bool, StoreError> {
        let state = self.state.lock();
        state
            .batches
            .get(batch_id)
            .map(|b| b.complete)
            .ok_or_else(|| StoreError::UnknownBatch(batch_id.to_owned()))
    }

    /// True when every ingested batch is complete.
    pub fn all_complete(&self) -> bool {
        self.state.lock().batches.values().all(|b| b.complete)
    }

    pub fn job(&self, job_id: &JobId) -> Option<JobRecord> {
        let state = self.state.lock();
        state.by_id.get(job_id).map(|&idx| state.jobs[idx].clone())
    }

    /// Running jobs in creation order.
    pub fn running_jobs(&self) -> Vec<JobId> {
        let state = self.state.lock();
        state
            .jobs
            .iter()
            .filter(|j| j.status == JobStatus::Running)
            .map(|j| j.job_id.clone())
            .collect()
    }

    pub fn job_count(&self) -> usize {
        self.state.lock().jobs.len()
    }

    pub fn completed_count(&self) -> usize {
        let state = self.state.lock();
        state
            .jobs
            .iter()
            .filter(|j| j.status == JobStatus::Completed)
            .count()
    }

    /// Status of every job in creation order.
    pub fn snapshot(&self) -> Vec<SnapshotRecord> {
        let state = self.state.lock();
        state
            .jobs
            .iter()
            .map(|j| SnapshotRecord {
                job_id: j.job_id.clone(),
                round: j.round,
                status: j.status,
            })
            .collect()
    }

    /// Writes the snapshot as JSON lines.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in self.snapshot() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    /// Feeds job identities, statuses and proofs into `hasher`.
    pub fn digest_into(&self, hasher: &mut Sha256) {
        let state = self.state.lock();
        for job in &state.jobs {
            hasher.update(job.job_id.as_str().as_bytes());
            hasher.update([0u8, job.status as u8]);
            match &job.proof {
                Some(proof) => {
                    hasher.update((proof.len() as u64).to_be_bytes());
                    hasher.update(proof);
                }
                None => hasher.update(u64::MAX.to_be_bytes()),
            }
        }
    }
}

impl StoreState {
    fn push_round(
        &mut self,
        batch_id: &str,
        round: u32,
        witnesses: impl Iterator<Item = Vec<u8>>,
    ) -> Vec<usize> {
        witnesses
            .enumerate()
            .map(|(index, witness)| {
                let idx = self.jobs.len();
                let job_id = JobId::for_job(batch_id, round, index);
                self.by_id.insert(job_id.clone(), idx);
                self.jobs.push(JobRecord {
                    job_id,
                    batch_id: batch_id.to_owned(),
                    round,
                    witness: witness.into(),
                    status: JobStatus::Waiting,
                    proof: None,
                });
                self.waiting.push_back(idx);
                idx
            })
            .collect()
    }

    fn aggregate(&mut self, batch_id: &str, round: u32) -> Result<Vec<usize>, StoreError> {
        let batch = self
            .batches
            .get(batch_id)
            .ok_or_else(|| StoreError::UnknownBatch(batch_id.to_owned()))?;
        let children = batch
            .rounds
            .get(round as usize)
            .ok_or_else(|| StoreError::RoundIncomplete {
                batch_id: batch_id.to_owned(),
                round,
            })?;
        if children
            .iter()
            .any(|&i| self.jobs[i].status != JobStatus::Completed)
        {
            return Err(StoreError::RoundIncomplete {
                batch_id: batch_id.to_owned(),
                round,
            });
        }
        if batch.rounds.len() > round as usize + 1 {
            return Err(StoreError::AlreadyAggregated {
                batch_id: batch_id.to_owned(),
                round,
            });
        }
        if children.len() == 1 {
            self.batches.get_mut(batch_id).expect("batch exists").complete = true;
            return Ok(Vec::new());
        }

        let fanin = batch.spec.fanin as usize;
        let size = batch.spec.witness_size_bytes;
        let witnesses: Vec<Vec<u8>> = children
            .chunks(fanin)
            .map(|group| {
                let mut hasher = Sha256::new();
                for &i in group {
                    hasher.update(self.jobs[i].proof.as_deref().expect("completed job has proof"));
                }
                expand_witness(hasher.finalize().into(), size)
            })
            .collect();
        let created = self.push_round(batch_id, round + 1, witnesses.into_iter());
        self.batches
            .get_mut(batch_id)
            .expect("batch exists")
            .rounds
            .push(created.clone());
        Ok(created)
    }
}

fn round0_witness(seed: u64, batch_id: &str, index: usize, size: usize) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(b"round0-witness");
    hasher.update(seed.to_be_bytes());
    hasher.update((batch_id.len() as u64).to_be_bytes());
    hasher.update(batch_id.as_bytes());
    hasher.update((index as u64).to_be_bytes());
    expand_witness(hasher.finalize().into(), size)
}

/// Deterministic `size`-byte payload whose first 32 bytes are `digest`.
fn expand_witness(digest: [u8; 32], size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size];
    out[..32].copy_from_slice(&digest);
    ChaCha8Rng::from_seed(digest).fill_bytes(&mut out[32..]);
    out
}
