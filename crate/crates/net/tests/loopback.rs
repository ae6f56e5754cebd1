//! Wire protocol and prover client against a live service on loopback.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use commprove_core::backend::{corrupt, prove, Proof, ProvingParams};
use commprove_core::{BatchSpec, CoreStore, Distributor, DistributorConfig, SystemClock, WorkPuzzle};
use commprove_net::client::TransportError;
use commprove_net::wire::{
    GetJobRequest, GetJobResponse, SubmitResultRequest, SubmitResultResponse,
};
use commprove_net::{run, run_with, serve, ClientBehavior, ClientConfig, JdTransport};
use proptest::prelude::*;
use tokio::sync::watch;

fn distributor(jobs: u32, difficulty: u8) -> Arc<Distributor> {
    let store = Arc::new(CoreStore::new());
    if jobs > 0 {
        store
            .ingest_batch(BatchSpec::single_round("b", jobs).with_witness_size(256), 1)
            .unwrap();
    }
    Arc::new(Distributor::new(
        store,
        Arc::new(WorkPuzzle::new(ProvingParams::with_difficulty(difficulty).unwrap())),
        Arc::new(SystemClock::new()),
        DistributorConfig::default(),
    ))
}

async fn post(addr: std::net::SocketAddr, path: &str, body: impl Into<reqwest::Body>) -> (u16, String) {
    let resp = reqwest::Client::new()
        .post(format!("http://{addr}{path}"))
        .body(body)
        .send()
        .await
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.text().await.unwrap())
}

#[tokio::test]
async fn get_job_over_http() {
    let empty = serve("127.0.0.1:0", distributor(0, 0)).await.unwrap();
    let (status, body) = post(empty.local_addr(), "/v1/get_job", r#"{"prover_id":"p1","wallet":"w1"}"#).await;
    assert_eq!(status, 200);
    assert_eq!(body, r#"{"type":"no_job","retry_after_ms":500}"#);
    empty.shutdown().await.unwrap();

    let jd = distributor(1, 0);
    let handle = serve("127.0.0.1:0", jd.clone()).await.unwrap();
    let (status, body) = post(handle.local_addr(), "/v1/get_job", r#"{"prover_id":"p1","wallet":"w1"}"#).await;
    assert_eq!(status, 200);
    let value: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(value["type"], "job");
    assert_eq!(value["job_id"], "b-r0-000000");
    assert_eq!(value["request_id"], 1);
    assert_eq!(value["round"], 0);
    let witness = jd.store().job(&commprove_core::JobId::new("b-r0-000000")).unwrap().witness;
    let decoded: GetJobResponse = serde_json::from_str(&body).unwrap();
    let GetJobResponse::Job { witness_b64, .. } = decoded else { panic!() };
    assert_eq!(&witness_b64[..], &witness[..]);
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn malformed_bodies_get_400_and_change_nothing() {
    let jd = distributor(2, 0);
    let handle = serve("127.0.0.1:0", jd.clone()).await.unwrap();
    let before = jd.state_digest();
    for (path, body) in [
        ("/v1/get_job", "{"),
        ("/v1/get_job", r#"{"prover_id":1}"#),
        ("/v1/submit_result", "null"),
        ("/v1/submit_result", r#"{"prover_id":"p","wallet":"w","job_id":"b-r0-000000","request_id":1,"proof_b64":"%%%"}"#),
    ] {
        let (status, text) = post(handle.local_addr(), path, body).await;
        assert_eq!(status, 400, "{path} {body}");
        assert!(text.contains("error"));
    }
    assert_eq!(jd.state_digest(), before);
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn submit_outcomes_over_http() {
    let jd = distributor(2, 4);
    let handle = serve("127.0.0.1:0", jd.clone()).await.unwrap();
    let addr = handle.local_addr();
    let params = ProvingParams::with_difficulty(4).unwrap();

    let mut jobs = Vec::new();
    for prover in ["p1", "p2"] {
        let (_, body) = post(addr, "/v1/get_job", format!(r#"{{"prover_id":"{prover}","wallet":"w"}}"#)).await;
        let GetJobResponse::Job { job_id, request_id, witness_b64, .. } = serde_json::from_str(&body).unwrap() else {
            panic!("expected a job");
        };
        jobs.push((prover, job_id, request_id, witness_b64));
    }

    let submit = |prover: &str, job_id: &str, request_id: u64, proof: Vec<u8>| SubmitResultRequest {
        prover_id: prover.into(),
        wallet: "w".into(),
        job_id: job_id.into(),
        request_id,
        proof_b64: proof,
    };

    let (p1, j1, r1, w1) = &jobs[0];
    let valid = prove(w1, &params);
    let body = serde_json::to_string(&submit(p1, j1, *r1, valid.to_bytes())).unwrap();
    assert_eq!(post(addr, "/v1/submit_result", body.clone()).await.1, r#"{"type":"accepted","reward_microusd":1200}"#);
    // Same submission again: the job is finalized.
    assert_eq!(post(addr, "/v1/submit_result", body).await.1, r#"{"type":"rejected","reason":"unknown_request"}"#);

    let forged = serde_json::to_string(&submit("p9", "J9", 999, valid.to_bytes())).unwrap();
    assert_eq!(post(addr, "/v1/submit_result", forged).await.1, r#"{"type":"rejected","reason":"unknown_request"}"#);

    let (p2, j2, r2, w2) = &jobs[1];
    let bad = corrupt(&prove(w2, &params)).to_bytes();
    let body = serde_json::to_string(&submit(p2, j2, *r2, bad)).unwrap();
    assert_eq!(post(addr, "/v1/submit_result", body).await.1, r#"{"type":"rejected","reason":"invalid_proof"}"#);
    assert_eq!(jd.pending_queue().len(), 1);
    handle.shutdown().await.unwrap();
}

#[test]
fn arbitrary_bodies_never_crash_or_mutate() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let jd = distributor(3, 0);
    let handle = rt.block_on(serve("127.0.0.1:0", jd.clone())).unwrap();
    let addr = handle.local_addr();
    let before = jd.state_digest();
    let client = reqwest::Client::new();

    proptest!(ProptestConfig::with_cases(300), |(body in proptest::collection::vec(any::<u8>(), 0..256), which in any::<bool>())| {
        let path = if which { "/v1/get_job" } else { "/v1/submit_result" };
        let status = rt.block_on(async {
            client.post(format!("http://{addr}{path}")).body(body.clone()).send().await.unwrap().status()
        });
        // Random bytes are essentially never a schema-valid message.
        prop_assert_eq!(status.as_u16(), 400);
        prop_assert_eq!(jd.state_digest(), before);
    });

    // Still serving.
    let (status, _) = rt.block_on(post(addr, "/v1/get_job", r#"{"prover_id":"p","wallet":"w"}"#));
    assert_eq!(status, 200);
    rt.block_on(handle.shutdown()).unwrap();
}

fn client_config(addr: std::net::SocketAddr, prover: &str) -> ClientConfig {
    let mut config = ClientConfig::new(addr.to_string(), prover, format!("{prover}-wallet"));
    config.params = ProvingParams::with_difficulty(8).unwrap();
    config.idle_backoff_ms = 20;
    config
}

#[tokio::test]
async fn single_job_client_run() {
    let jd = distributor(1, 8);
    let handle = serve("127.0.0.1:0", jd.clone()).await.unwrap();
    let mut config = client_config(handle.local_addr(), "p1");
    config.max_jobs = Some(1);
    let (_tx, rx) = watch::channel(false);
    let report = run(config, rx).await.unwrap();
    assert_eq!(report.completed, 1);
    assert_eq!(report.rewards_microusd, 1_200);
    assert_eq!(jd.payouts().get("p1"), Some(&1_200));
    assert!(jd.store().all_complete());
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn corrupting_client_is_rejected() {
    let jd = distributor(1, 8);
    let handle = serve("127.0.0.1:0", jd.clone()).await.unwrap();
    let mut config = client_config(handle.local_addr(), "bad");
    config.max_jobs = Some(1);
    config.behavior = ClientBehavior::Corrupt;
    let (_tx, rx) = watch::channel(false);
    let report = run(config, rx).await.unwrap();
    assert_eq!(report.completed, 0);
    assert_eq!(report.rejected(), 1);
    assert_eq!(report.rejected_invalid, 1);
    assert!(jd.ledger().is_empty());
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn hoarding_and_slow_clients() {
    let jd = distributor(2, 4);
    let handle = serve("127.0.0.1:0", jd.clone()).await.unwrap();
    let (_tx, rx) = watch::channel(false);

    let mut hoarder = client_config(handle.local_addr(), "h");
    hoarder.max_jobs = Some(2);
    hoarder.behavior = ClientBehavior::Hoard;
    let report = run(hoarder, rx.clone()).await.unwrap();
    assert_eq!(report.hoarded, 2);
    assert_eq!(jd.pending_queue().len(), 2);

    let mut slow = client_config(handle.local_addr(), "s");
    slow.max_jobs = Some(2);
    slow.params = ProvingParams::with_difficulty(4).unwrap();
    slow.behavior = ClientBehavior::Slow(2.0);
    let report = run(slow, rx).await.unwrap();
    assert_eq!(report.completed, 2);
    assert!(jd.store().all_complete());
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn unreachable_jd_is_retried_until_stopped() {
    // Bind and drop to find a port with nothing listening.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut config = ClientConfig::new(port.to_string(), "p", "w");
    config.idle_backoff_ms = 10;
    let (tx, rx) = watch::channel(false);
    let task = tokio::spawn(run(config, rx));
    tokio::time::sleep(Duration::from_millis(150)).await;
    tx.send(true).unwrap();
    let report = task.await.unwrap().unwrap();
    assert!(report.transport_retries >= 2);
    assert_eq!(report.completed, 0);
}

/// Scripted JD recording every call.
struct ScriptedJd {
    responses: Mutex<Vec<GetJobResponse>>,
    polls: Mutex<Vec<Instant>>,
    submissions: Mutex<Vec<(String, u64)>>,
}

impl ScriptedJd {
    fn new(mut responses: Vec<GetJobResponse>) -> Self {
        responses.reverse();
        Self {
            responses: Mutex::new(responses),
            polls: Mutex::new(Vec::new()),
            submissions: Mutex::new(Vec::new()),
        }
    }
}

impl JdTransport for ScriptedJd {
    async fn get_job(&self, _req: &GetJobRequest) -> Result<GetJobResponse, TransportError> {
        self.polls.lock().unwrap().push(Instant::now());
        Ok(self
            .responses
            .lock()
            .unwrap()
            .pop()
            .unwrap_or(GetJobResponse::NoJob { retry_after_ms: 60 }))
    }

    async fn submit_result(&self, req: &SubmitResultRequest) -> Result<SubmitResultResponse, TransportError> {
        self.submissions.lock().unwrap().push((req.job_id.clone(), req.request_id));
        let valid = Proof::from_bytes(&req.proof_b64).is_some();
        Ok(if valid {
            SubmitResultResponse::Accepted { reward_microusd: 600 }
        } else {
            SubmitResultResponse::Rejected { reason: commprove_core::RejectReason::InvalidProof }
        })
    }
}

#[tokio::test]
async fn idle_client_respects_retry_after() {
    let jd = ScriptedJd::new(Vec::new());
    let mut config = ClientConfig::new("unused:1", "p", "w");
    config.idle_backoff_ms = 1;
    let (tx, rx) = watch::channel(false);
    let stopper = tokio::spawn(async move {
        tokio::time::sleep(Duration::from_millis(400)).await;
        tx.send(true).unwrap();
    });
    let report = run_with(&config, &jd, rx).await.unwrap();
    stopper.await.unwrap();
    assert_eq!(report.completed, 0);
    let polls = jd.polls.lock().unwrap();
    assert!(polls.len() >= 2);
    for pair in polls.windows(2) {
        assert!(pair[1] - pair[0] >= Duration::from_millis(60));
    }
}

#[tokio::test]
async fn client_only_submits_pairs_it_received() {
    let job = |id: &str, rid: u64| GetJobResponse::Job {
        job_id: id.into(),
        request_id: rid,
        round: 0,
        witness_b64: id.as_bytes().to_vec(),
    };
    let jd = ScriptedJd::new(vec![
        job("a", 4),
        GetJobResponse::NoJob { retry_after_ms: 1 },
        job("b", 9),
        job("a", 11),
    ]);
    let mut config = ClientConfig::new("unused:1", "p", "w");
    config.idle_backoff_ms = 1;
    config.max_jobs = Some(3);
    let (_tx, rx) = watch::channel(false);
    let report = run_with(&config, &jd, rx).await.unwrap();
    assert_eq!(report.completed, 3);
    assert_eq!(report.rewards_microusd, 1_800);
    assert_eq!(
        *jd.submissions.lock().unwrap(),
        vec![("a".to_string(), 4), ("b".to_string(), 9), ("a".to_string(), 11)]
    );
}
