//! Deterministic discrete-event simulation of a prover population.
//!
//! A real [`Distributor`] runs against a [`ManualClock`]; simulated provers
//! never compute anything. Proving is a fixed virtual delay per profile, and
//! an honest proof is the difficulty-0 work digest, so the distributor still
//! verifies every submission for real.
//!
//! Events at the same virtual instant run in (prover index, event kind)
//! order, which makes a run a pure function of its [`Scenario`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{corrupt, prove, ProvingParams, WorkPuzzle};
use crate::clock::{ManualClock, Timestamp};
use crate::distributor::{
    Distributor, DistributorConfig, GetJobOutcome, JobAssignment, ProofSubmission, RateLimit,
    SubmitOutcome, DEFAULT_RETRY_AFTER_MS, DEFAULT_REWARD_MICROUSD,
};
use crate::store::{BatchSpec, CoreStore, StoreError};

/// Upper bound on processed events before a run is declared stalled.
pub const MAX_EVENTS: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario has no honest prover, so the batch can never complete")]
    NoHonestCapacity,
    #[error("batch did not complete within {0} events")]
    Stalled(u64),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("scenario file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Submits a corrupted proof with the given probability.
    Invalid { probability: f64 },
    /// Takes jobs and never submits.
    Hoarder,
    /// Honest, but proving takes `multiplier` times longer.
    Slow { multiplier: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProverProfile {
    pub count: u32,
    pub per_job_seconds: f64,
    #[serde(default)]
    pub behavior: Behavior,
    /// Delay between polls when not proving. Defaults to `per_job_seconds`,
    /// i.e. the rate at which an honest prover of this class asks for work.
    #[serde(default)]
    pub poll_interval_seconds: Option<f64>,
}

impl ProverProfile {
    pub fn honest(count: u32, per_job_seconds: f64) -> Self {
        Self {
            count,
            per_job_seconds,
            behavior: Behavior::Honest,
            poll_interval_seconds: None,
        }
    }

    pub fn with_behavior(mut self, behavior: Behavior) -> Self {
        self.behavior = behavior;
        self
    }

    pub fn with_poll_interval(mut self, seconds: f64) -> Self {
        self.poll_interval_seconds = Some(seconds);
        self
    }

    fn poll_interval(&self) -> f64 {
        self.poll_interval_seconds.unwrap_or(self.per_job_seconds)
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidScenario(msg));
        if !(self.per_job_seconds > 0.0 && self.per_job_seconds.is_finite()) {
            return bad(format!("per_job_seconds must be positive, got {}", self.per_job_seconds));
        }
        if !(self.poll_interval() > 0.0 && self.poll_interval().is_finite()) {
            return bad(format!("poll_interval_seconds must be positive, got {}", self.poll_interval()));
        }
        match self.behavior {
            Behavior::Invalid { probability } if !(0.0..=1.0).contains(&probability) => {
                bad(format!("invalid-proof probability must be in [0, 1], got {probability}"))
            }
            Behavior::Slow { multiplier } if !(multiplier >= 1.0 && multiplier.is_finite()) => {
                bad(format!("slow multiplier must be at least 1, got {multiplier}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_scenario_id")]
    pub id: String,
    pub batch: BatchSpec,
    pub profiles: Vec<ProverProfile>,
    /// One-way delay applied to every request and every response.
    #[serde(default)]
    pub network_latency_ms: f64,
    #[serde(default = "default_reward")]
    pub reward_microusd: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retry_after")]
    pub retry_after_ms: u64,
    #[serde(default = "default_true")]
    pub assert_liveness: bool,
    /// Uniform proving-time jitter of `±jitter_fraction`. Zero disables it.
    #[serde(default)]
    pub jitter_fraction: f64,
    #[serde(default)]
    pub rate_limit: Option<RateLimit>,
}

fn default_scenario_id() -> String {
    "scenario".into()
}

fn default_reward() -> u64 {
    DEFAULT_REWARD_MICROUSD
}

fn default_retry_after() -> u64 {
    DEFAULT_RETRY_AFTER_MS
}

fn default_true() -> bool {
    true
}

impl Scenario {
    pub fn new(id: impl Into<String>, batch: BatchSpec, profiles: Vec<ProverProfile>) -> Self {
        Self {
            id: id.into(),
            batch,
            profiles,
            network_latency_ms: 0.0,
            reward_microusd: DEFAULT_REWARD_MICROUSD,
            seed: 0,
            retry_after_ms: DEFAULT_RETRY_AFTER_MS,
            assert_liveness: true,
            jitter_fraction: 0.0,
            rate_limit: None,
        }
    }

    pub fn with_latency_ms(mut self, ms: f64) -> Self {
        self.network_latency_ms = ms;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_reward(mut self, microusd: u64) -> Self {
        self.reward_microusd = microusd;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.batch.validate()?;
        if self.profiles.iter().all(|p| p.count == 0) {
            return Err(SimError::InvalidScenario("no provers".into()));
        }
        for profile in &self.profiles {
            profile.validate()?;
        }
        if !(self.network_latency_ms >= 0.0 && self.network_latency_ms.is_finite()) {
            return Err(SimError::InvalidScenario(format!(
                "network_latency_ms must be non-negative, got {}",
                self.network_latency_ms
            )));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(SimError::InvalidScenario(format!(
                "jitter_fraction must be in [0, 1), got {}",
                self.jitter_fraction
            )));
        }
        if self.assert_liveness
            && !self
                .profiles
                .iter()
                .any(|p| p.count > 0 && p.behavior == Behavior::Honest)
        {
            return Err(SimError::NoHonestCapacity);
        }
        Ok(())
    }
}

/// Parses a scenario file holding either one scenario or an array of them.
pub fn parse_scenarios(json: &str) -> Result<Vec<Scenario>, SimError> {
    let value: serde_json::Value = serde_json::from_str(json)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub scenario_id: String,
    pub seed: u64,
    pub provers_total: u32,
    pub honest: u32,
    pub hoarders: u32,
    pub invalid: u32,
    pub jobs_completed: u64,
    pub per_job_seconds: f64,
    pub latency_ms: f64,
    /// First assignment to receipt of the final proof.
    pub batch_proving_time_seconds: f64,
    pub jobs_per_minute: f64,
    pub total_payout_microusd: u64,
    pub reassignments: u64,
    pub invalid_submissions: u64,
    pub unknown_submissions: u64,
    /// Accepted proofs per prover, by prover index.
    pub per_prover_jobs: Vec<u64>,
    /// Payout per prover, by prover index.
    pub per_prover_payout_microusd: Vec<u64>,
    /// Profile index of each prover.
    pub prover_profile: Vec<usize>,
}

impl SimReport {
    pub fn total_payout_usd(&self) -> f64 {
        self.total_payout_microusd as f64 / 1e6
    }

    pub fn batch_minutes(&self) -> f64 {
        self.batch_proving_time_seconds / 60.0
    }

    /// Sum of payouts to provers of one profile.
    pub fn profile_payout_microusd(&self, profile: usize) -> u64 {
        self.prover_profile
            .iter()
            .zip(&self.per_prover_payout_microusd)
            .filter(|(p, _)| **p == profile)
            .map(|(_, pay)| pay)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Submit,
    Poll,
}

#[derive(Debug)]
struct Event {
    at: u64,
    prover: usize,
    kind: EventKind,
    seq: u64,
    submission: Option<(JobAssignment, bool)>,
}

impl Event {
    fn key(&self) -> (u64, usize, EventKind, u64) {
        (self.at, self.prover, self.kind, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

struct SimProver {
    id: String,
    wallet: String,
    profile: usize,
    behavior: Behavior,
    prove_us: u64,
    poll_us: u64,
}

struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    fn push(&mut self, at: u64, prover: usize, kind: EventKind, submission: Option<(JobAssignment, bool)>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event {
            at,
            prover,
            kind,
            seq,
            submission,
        });
    }
}

fn micros(seconds: f64) -> u64 {
    Timestamp::from_secs_f64(seconds).as_micros()
}

pub fn run_scenario(scenario: &Scenario) -> Result<SimReport, SimError> {
    scenario.validate()?;

    let store = Arc::new(CoreStore::new());
    store.ingest_batch(scenario.batch.clone(), scenario.seed)?;
    let clock = Arc::new(ManualClock::new());
    let params = ProvingParams::default();
    let jd = Distributor::new(
        store.clone(),
        Arc::new(WorkPuzzle::new(params)),
        clock.clone(),
        DistributorConfig {
            reward_microusd: scenario.reward_microusd,
            retry_after_ms: scenario.retry_after_ms,
            rate_limit: scenario.rate_limit,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5349_4d55_4c41_5445);

    let provers: Vec<SimProver> = scenario
        .profiles
        .iter()
        .enumerate()
        .flat_map(|(profile_idx, profile)| {
            let slow = match profile.behavior {
                Behavior::Slow { multiplier } => multiplier,
                _ => 1.0,
            };
            (0..profile.count).map(move |_| (profile_idx, profile, slow))
        })
        .enumerate()
        .map(|(idx, (profile_idx, profile, slow))| SimProver {
            id: format!("p{idx:04}"),
            wallet: format!("wallet-{idx:04}"),
            profile: profile_idx,
            behavior: profile.behavior,
            prove_us: micros(profile.per_job_seconds * slow),
            poll_us: micros(profile.poll_interval()),
        })
        .collect();

    let latency = micros(scenario.network_latency_ms / 1e3);
    let retry_us = scenario.retry_after_ms * 1_000;
    let mut queue = EventQueue {
        heap: BinaryHeap::new(),
        next_seq: 0,
    };
    // Every prover sends its first request at t = 0.
    for idx in 0..provers.len() {
        queue.push(latency, idx, EventKind::Poll, None);
    }

    let mut first_assignment: Option<u64> = None;
    let mut finished_at: Option<u64> = None;
    let mut per_prover_jobs = vec![0u64; provers.len()];
    let mut processed = 0u64;

    while let Some(event) = queue.heap.pop() {
        processed += 1;
        if processed > MAX_EVENTS {
            return Err(SimError::Stalled(MAX_EVENTS));
        }
        let now = event.at;
        clock.set(Timestamp(now));
        let prover = &provers[event.prover];

        match event.kind {
            EventKind::Poll => match jd.handle_get_job(&prover.id, &prover.wallet) {
                GetJobOutcome::Assigned(assignment) => {
                    first_assignment.get_or_insert(now);
                    match prover.behavior {
                        Behavior::Hoarder => {
                            queue.push(now + 2 * latency + prover.poll_us, event.prover, EventKind::Poll, None);
                        }
                        behavior => {
                            let corrupt_it = match behavior {
                                Behavior::Invalid { probability } => rng.gen_bool(probability),
                                _ => false,
                            };
                            let mut prove_us = prover.prove_us;
                            if scenario.jitter_fraction > 0.0 {
                                let f = rng.gen_range(-scenario.jitter_fraction..=scenario.jitter_fraction);
                                prove_us = ((prove_us as f64) * (1.0 + f)).round().max(1.0) as u64;
                            }
                            queue.push(
                                now + 2 * latency + prove_us,
                                event.prover,
                                EventKind::Submit,
                                Some((assignment, corrupt_it)),
                            );
                        }
                    }
                }
                GetJobOutcome::NoJob { .. } | GetJobOutcome::RateLimited => {
                    let wait = retry_us.max(prover.poll_us);
                    queue.push(now + 2 * latency + wait, event.prover, EventKind::Poll, None);
                }
            },
            EventKind::Submit => {
                let (assignment, corrupt_it) = event.submission.expect("submit events carry a job");
                let mut proof = prove(&assignment.witness, &params);
                if corrupt_it {
                    proof = corrupt(&proof);
                }
                let outcome = jd.handle_submit_result(ProofSubmission {
                    prover_id: prover.id.clone(),
                    wallet: prover.wallet.clone(),
                    job_id: assignment.job_id,
                    request_id: assignment.request_id,
                    proof: proof.to_bytes(),
                });
                if let SubmitOutcome::Accepted { .. } = outcome {
                    per_prover_jobs[event.prover] += 1;
                    if store.is_batch_complete(&scenario.batch.batch_id)? {
                        finished_at = Some(now);
                        break;
                    }
                }
                queue.push(now + 2 * latency, event.prover, EventKind::Poll, None);
            }
        }
    }

    let finished_at = finished_at.ok_or(SimError::Stalled(processed))?;
    let started_at = first_assignment.expect("a finished batch had assignments");
    let batch_seconds = Timestamp(finished_at - started_at).as_secs_f64();

    let metrics = jd.snapshot_metrics();
    let payouts = jd.payouts();
    let per_prover_payout: Vec<u64> = provers
        .iter()
        .map(|p| payouts.get(&p.id).copied().unwrap_or(0))
        .collect();
    let jobs_completed = store.completed_count() as u64;

    let count_where = |pred: fn(&Behavior) -> bool| -> u32 {
        scenario
            .profiles
            .iter()
            .filter(|p| pred(&p.behavior))
            .map(|p| p.count)
            .sum()
    };
    let reference_profile = scenario
        .profiles
        .iter()
        .find(|p| p.behavior == Behavior::Honest && p.count > 0)
        .unwrap_or(&scenario.profiles[0]);

    Ok(SimReport {
        scenario_id: scenario.id.clone(),
        seed: scenario.seed,
        provers_total: provers.len() as u32,
        honest: count_where(|b| matches!(b, Behavior::Honest | Behavior::Slow { .. })),
        hoarders: count_where(|b| matches!(b, Behavior::Hoarder)),
        invalid: count_where(|b| matches!(b, Behavior::Invalid { .. })),
        jobs_completed,
        per_job_seconds: reference_profile.per_job_seconds,
        latency_ms: scenario.network_latency_ms,
        batch_proving_time_seconds: batch_seconds,
        jobs_per_minute: if batch_seconds > 0.0 {
            jobs_completed as f64 * 60.0 / batch_seconds
        } else {
            f64::INFINITY
        },
        total_payout_microusd: metrics.total_payout_microusd,
        reassignments: metrics.reassignments,
        invalid_submissions: metrics.invalid_submissions,
        unknown_submissions: metrics.unknown_submissions,
        per_prover_jobs,
        per_prover_payout_microusd: per_prover_payout,
        prover_profile: provers.iter().map(|p| p.profile).collect(),
    })
}

/// Runs every scenario in order.
pub fn sweep(scenarios: &[Scenario]) -> Result<Vec<SimReport>, SimError> {
    scenarios.iter().map(run_scenario).collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    scenario_id: &'a str,
    provers_total: u32,
    honest: u32,
    hoarders: u32,
    invalid: u32,
    jobs: u64,
    per_job_s: String,
    latency_ms: String,
    batch_time_s: String,
    jobs_per_min: String,
    payout_usd: String,
    reassignments: u64,
    invalid_submissions: u64,
    seed: u64,
}

/// One CSV row per report, with a header.
pub fn reports_to_csv(reports: &[SimReport]) -> Result<String, SimError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in reports {
        writer.serialize(CsvRow {
            scenario_id: &r.scenario_id,
            provers_total: r.provers_total,
            honest: r.honest,
            hoarders: r.hoarders,
            invalid: r.invalid,
            jobs: r.jobs_completed,
            per_job_s: format!("{}", r.per_job_seconds),
            latency_ms: format!("{}", r.latency_ms),
            batch_time_s: format!("{:.3}", r.batch_proving_time_seconds),
            jobs_per_min: format!("{:.4}", r.jobs_per_minute),
            payout_usd: format!("{:.6}", r.total_payout_usd()),
            reassignments: r.reassignments,
            invalid_submissions: r.invalid_submissions,
            seed: r.seed,
        })?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
