//! Property and model-checking tests for the Job Distributor.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use commprove_core::backend::{corrupt, prove};
use commprove_core::{
    BatchSpec, CoreStore, Distributor, DistributorConfig, GetJobOutcome, JobAssignment, JobId,
    ManualClock, Proof, ProofSubmission, ProvingParams, RejectReason, RequestId, SubmitOutcome,
    Timestamp, WorkPuzzle,
};
use proptest::prelude::*;

const RATE: u64 = 1_200;

fn distributor(jobs: u32) -> (Arc<ManualClock>, Distributor) {
    let store = Arc::new(CoreStore::new());
    store
        .ingest_batch(BatchSpec::single_round("b", jobs).with_witness_size(32), 3)
        .unwrap();
    let clock = Arc::new(ManualClock::new());
    let jd = Distributor::new(
        store,
        Arc::new(WorkPuzzle::default()),
        clock.clone(),
        DistributorConfig::default(),
    );
    (clock, jd)
}

fn valid(a: &JobAssignment) -> Vec<u8> {
    prove(&a.witness, &ProvingParams::default()).to_bytes()
}

fn corrupted(a: &JobAssignment) -> Vec<u8> {
    corrupt(&Proof::from_bytes(&valid(a)).unwrap()).to_bytes()
}

fn submit(jd: &Distributor, prover: &str, a: &JobAssignment, proof: Vec<u8>) -> SubmitOutcome {
    jd.handle_submit_result(ProofSubmission {
        prover_id: prover.into(),
        wallet: format!("w-{prover}"),
        job_id: a.job_id.clone(),
        request_id: a.request_id,
        proof,
    })
}

/// Queue and map agree with the store: pending jobs are exactly the running
/// ones, and every mapped job is pending.
fn assert_consistent(jd: &Distributor) {
    let queued: BTreeSet<JobId> = jd.pending_queue().into_iter().map(|e| e.job_id).collect();
    let running: BTreeSet<JobId> = jd.store().running_jobs().into_iter().collect();
    assert_eq!(queued, running);
    let snapshot = jd.store().snapshot();
    for record in snapshot {
        let outstanding = jd.outstanding_requests(&record.job_id);
        if !outstanding.is_empty() {
            assert!(queued.contains(&record.job_id));
        }
    }
}

fn assert_paid_once(jd: &Distributor) {
    let ledger = jd.ledger();
    let paid: HashSet<&JobId> = ledger.iter().map(|e| &e.job_id).collect();
    assert_eq!(paid.len(), ledger.len(), "a job was paid twice");
    let completed = jd.store().completed_count();
    assert_eq!(ledger.len(), completed);
    assert_eq!(jd.snapshot_metrics().total_payout_microusd, completed as u64 * RATE);
}

#[derive(Debug, Clone)]
enum Op {
    Poll(usize),
    /// Submit one held assignment: 0 valid, 1 corrupted, 2 forged request id,
    /// 3 replay of an already used pair, 4 garbage bytes.
    Submit { prover: usize, pick: usize, kind: u8 },
    Tick,
}

fn op_strategy(provers: usize) -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..provers).prop_map(Op::Poll),
        4 => (0..provers, any::<usize>(), 0u8..5).prop_map(|(prover, pick, kind)| Op::Submit { prover, pick, kind }),
        1 => Just(Op::Tick),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exactly_once_payment_under_random_schedules(
        jobs in 1u32..8,
        ops in proptest::collection::vec(op_strategy(4), 1..120),
    ) {
        let (clock, jd) = distributor(jobs);
        let mut held: Vec<Vec<JobAssignment>> = vec![Vec::new(); 4];
        let mut used: Vec<(usize, JobAssignment)> = Vec::new();
        let mut last_rid = 0u64;

        for op in ops {
            match op {
                Op::Tick => clock.advance(Timestamp(1)),
                Op::Poll(p) => {
                    let fresh_waiting = jd.store().snapshot().iter().any(|r| r.status == commprove_core::JobStatus::Waiting);
                    let head = jd.pending_queue().first().map(|e| e.job_id.clone());
                    if let GetJobOutcome::Assigned(a) = jd.handle_get_job(&format!("p{p}"), "w") {
                        prop_assert!(a.request_id.0 > last_rid);
                        last_rid = a.request_id.0;
                        if !fresh_waiting {
                            // LRP: reassignment takes the head of the queue.
                            prop_assert_eq!(Some(a.job_id.clone()), head);
                        }
                        held[p].push(a);
                    }
                }
                Op::Submit { prover, pick, kind } => {
                    if held[prover].is_empty() {
                        continue;
                    }
                    let before = jd.state_digest();
                    let completed_before = jd.store().completed_count();
                    let (a, proof, owner) = match kind {
                        0 | 1 | 4 => {
                            let at = pick % held[prover].len();
                            let a = held[prover].remove(at);
                            let proof = match kind {
                                0 => valid(&a),
                                1 => corrupted(&a),
                                _ => vec![0xde, 0xad],
                            };
                            used.push((prover, a.clone()));
                            (a, proof, prover)
                        }
                        2 => {
                            let mut a = held[prover][pick % held[prover].len()].clone();
                            a.request_id = RequestId(a.request_id.0 + 1_000_000);
                            let p = valid(&a);
                            (a, p, prover)
                        }
                        _ => {
                            if used.is_empty() {
                                continue;
                            }
                            let (owner, a) = used[pick % used.len()].clone();
                            let p = valid(&a);
                            (a, p, owner)
                        }
                    };
                    let outcome = submit(&jd, &format!("p{owner}"), &a, proof);
                    match outcome {
                        SubmitOutcome::Accepted { reward_microusd } => {
                            prop_assert_eq!(reward_microusd, RATE);
                            prop_assert_eq!(jd.store().completed_count(), completed_before + 1);
                            prop_assert_eq!(kind, 0);
                        }
                        SubmitOutcome::Rejected(RejectReason::UnknownRequest) => {
                            prop_assert_eq!(jd.state_digest(), before);
                        }
                        SubmitOutcome::Rejected(_) => {
                            prop_assert_eq!(jd.store().completed_count(), completed_before);
                        }
                    }
                }
            }
            assert_consistent(&jd);
            assert_paid_once(&jd);
        }
    }

    #[test]
    fn queue_rotation_visits_every_pending_job(jobs in 1u32..12, hoarders in 1usize..4) {
        let (clock, jd) = distributor(jobs);
        let mut p = 0;
        while jd.store().snapshot().iter().any(|r| r.status == commprove_core::JobStatus::Waiting) {
            jd.handle_get_job(&format!("h{}", p % hoarders), "w");
            p += 1;
            clock.advance(Timestamp(1));
        }
        let pending = jd.pending_queue().len();
        prop_assert_eq!(pending, jobs as usize);
        let mut seen = BTreeMap::new();
        for _ in 0..pending {
            let GetJobOutcome::Assigned(a) = jd.handle_get_job("honest", "w") else {
                panic!("pending jobs exist");
            };
            *seen.entry(a.job_id).or_insert(0) += 1;
        }
        prop_assert_eq!(seen.len(), pending);
        prop_assert!(seen.values().all(|&n| n == 1));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Honest,
    Hoarder,
    Invalid,
}

/// One step of prover `idx`: poll when idle, otherwise act on the held job.
fn step(jd: &Distributor, roles: &[Role], held: &mut [Option<JobAssignment>], idx: usize) {
    let name = format!("p{idx}");
    match held[idx].take() {
        None => {
            if let GetJobOutcome::Assigned(a) = jd.handle_get_job(&name, "w") {
                held[idx] = Some(a);
            }
        }
        Some(a) => match roles[idx] {
            Role::Honest => {
                submit(jd, &name, &a, valid(&a));
            }
            Role::Invalid => {
                submit(jd, &name, &a, corrupted(&a));
            }
            Role::Hoarder => {}
        },
    }
}

fn replay(jobs: u32, roles: &[Role], schedule: &[usize]) -> (Distributor, Vec<Option<JobAssignment>>) {
    let (clock, jd) = distributor(jobs);
    let mut held = vec![None; roles.len()];
    for &idx in schedule {
        step(&jd, roles, &mut held, idx);
        clock.advance(Timestamp(1));
    }
    (jd, held)
}

fn explore(jobs: u32, roles: &[Role], schedule: &mut Vec<usize>, depth: usize, nodes: &mut u64) {
    *nodes += 1;
    let (jd, mut held) = replay(jobs, roles, schedule);
    assert_consistent(&jd);
    assert_paid_once(&jd);
    if jd.store().all_complete() {
        return;
    }
    // From here, the honest prover alone finishes the batch: each poll/submit
    // pair completes one job because it only ever holds unfinished work.
    let honest = roles.iter().position(|r| *r == Role::Honest).unwrap();
    let remaining = jobs as usize - jd.store().completed_count();
    let budget = 2 * remaining + 2;
    let mut steps = 0;
    while !jd.store().all_complete() {
        assert!(steps < budget, "schedule {schedule:?} stalls the honest prover");
        step(&jd, roles, &mut held, honest);
        steps += 1;
    }
    assert_paid_once(&jd);

    if schedule.len() == depth {
        return;
    }
    for idx in 0..roles.len() {
        schedule.push(idx);
        explore(jobs, roles, schedule, depth, nodes);
        schedule.pop();
    }
}

#[test]
fn liveness_under_every_small_interleaving() {
    let populations: [&[Role]; 4] = [
        &[Role::Honest, Role::Hoarder, Role::Invalid],
        &[Role::Honest, Role::Hoarder, Role::Hoarder],
        &[Role::Honest, Role::Honest, Role::Invalid],
        &[Role::Honest, Role::Invalid],
    ];
    let mut nodes = 0;
    for roles in populations {
        for jobs in 1..=4 {
            explore(jobs, roles, &mut Vec::new(), 8, &mut nodes);
        }
    }
    assert!(nodes > 50_000, "explored {nodes} states");
}
