//! The community prover: poll, prove, submit, repeat.

use std::future::Future;
use std::str::FromStr;
use std::time::{Duration, Instant};

use commprove_core::backend::{corrupt, prove, ProvingParams};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::watch;

use crate::wire::{
    decode, encode, GetJobRequest, GetJobResponse, SubmitResultRequest, SubmitResultResponse,
    GET_JOB_PATH, SUBMIT_RESULT_PATH,
};
use commprove_core::distributor::RejectReason;

pub const DEFAULT_IDLE_BACKOFF_MS: u64 = 500;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying after a backoff (connection refused, 5xx, timeouts).
    #[error("transient transport error: {0}")]
    Transient(String),
    /// Retrying will not help (4xx, undecodable responses).
    #[error("protocol error: {0}")]
    Permanent(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid client config: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// How the client treats the jobs it receives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClientBehavior {
    Honest,
    /// Submits a proof that fails verification, without doing the work.
    Corrupt,
    /// Takes jobs and throws them away.
    Hoard,
    /// Honest, but holds each proof for `factor` times the proving time.
    Slow(f64),
}

impl FromStr for ClientBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "honest" => Ok(ClientBehavior::Honest),
            "corrupt" => Ok(ClientBehavior::Corrupt),
            "hoard" => Ok(ClientBehavior::Hoard),
            other => {
                let factor = other
                    .strip_prefix("slow:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .filter(|f| *f >= 1.0 && f.is_finite())
                    .ok_or_else(|| {
                        format!("expected honest|corrupt|hoard|slow:<factor >= 1>, got {other:?}")
                    })?;
                Ok(ClientBehavior::Slow(factor))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// `host:port` or an `http://` URL.
    pub jd_endpoint: String,
    pub prover_id: String,
    pub wallet: String,
    pub params: ProvingParams,
    /// Stop after this many assignments have been handled.
    pub max_jobs: Option<u64>,
    pub idle_backoff_ms: u64,
    pub behavior: ClientBehavior,
}

impl ClientConfig {
    pub fn new(jd_endpoint: impl Into<String>, prover_id: impl Into<String>, wallet: impl Into<String>) -> Self {
        Self {
            jd_endpoint: jd_endpoint.into(),
            prover_id: prover_id.into(),
            wallet: wallet.into(),
            params: ProvingParams::default(),
            max_jobs: None,
            idle_backoff_ms: DEFAULT_IDLE_BACKOFF_MS,
            behavior: ClientBehavior::Honest,
        }
    }

    fn validate(&self) -> Result<(), ClientError> {
        if self.idle_backoff_ms == 0 {
            return Err(ClientError::Config("idle_backoff_ms must be at least 1".into()));
        }
        if self.prover_id.is_empty() {
            return Err(ClientError::Config("prover_id must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub completed: u64,
    pub rewards_microusd: u64,
    pub rejected_invalid: u64,
    pub rejected_unknown: u64,
    pub rate_limited: u64,
    pub hoarded: u64,
    pub polls: u64,
    pub transport_retries: u64,
}

impl RunReport {
    pub fn rejected(&self) -> u64 {
        self.rejected_invalid + self.rejected_unknown
    }
}

/// Request/response channel to a Job Distributor.
pub trait JdTransport: Send + Sync {
    fn get_job(
        &self,
        req: &GetJobRequest,
    ) -> impl Future<Output = Result<GetJobResponse, TransportError>> + Send;

    fn submit_result(
        &self,
        req: &SubmitResultRequest,
    ) -> impl Future<Output = Result<SubmitResultResponse, TransportError>> + Send;
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::Client,
    base: String,
}

impl HttpTransport {
    pub fn new(endpoint: &str) -> Result<Self, ClientError> {
        let base = if endpoint.starts_with("http://") {
            endpoint.trim_end_matches('/').to_owned()
        } else if endpoint.contains("://") {
            return Err(ClientError::Config(format!(
                "only http:// endpoints are supported, got {endpoint:?}"
            )));
        } else {
            format!("http://{endpoint}")
        };
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Self { client, base })
    }

    async fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: Vec<u8>) -> Result<T, TransportError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        if status.is_server_error() {
            return Err(TransportError::Transient(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Permanent(format!(
                "server returned {status}: {}",
                String::from_utf8_lossy(&bytes)
            )));
        }
        decode(&bytes).map_err(|e| TransportError::Permanent(e.to_string()))
    }
}

impl JdTransport for HttpTransport {
    async fn get_job(&self, req: &GetJobRequest) -> Result<GetJobResponse, TransportError> {
        self.post(GET_JOB_PATH, encode(req)).await
    }

    async fn submit_result(&self, req: &SubmitResultRequest) -> Result<SubmitResultResponse, TransportError> {
        self.post(SUBMIT_RESULT_PATH, encode(req)).await
    }
}

/// Sleeps for `ms`, returning early with `true` if a stop was requested.
async fn pause(ms: u64, stop: &mut watch::Receiver<bool>) -> bool {
    if *stop.borrow() {
        return true;
    }
    tokio::select! {
        _ = tokio::time::sleep(Duration::from_millis(ms)) => *stop.borrow(),
        changed = stop.changed() => changed.is_err() || *stop.borrow(),
    }
}

/// Runs the prover loop over HTTP until `max_jobs` or a stop request.
pub async fn run(config: ClientConfig, stop: watch::Receiver<bool>) -> Result<RunReport, ClientError> {
    config.validate()?;
    let transport = HttpTransport::new(&config.jd_endpoint)?;
    run_with(&config, &transport, stop).await
}

/// Runs the prover loop over any transport.
pub async fn run_with<T: JdTransport>(
    config: &ClientConfig,
    transport: &T,
    mut stop: watch::Receiver<bool>,
) -> Result<RunReport, ClientError> {
    config.validate()?;
    let mut report = RunReport::default();
    let mut handled = 0u64;
    let backoff = config.idle_backoff_ms;
    let poll = GetJobRequest {
        prover_id: config.prover_id.clone(),
        wallet: config.wallet.clone(),
    };

    loop {
        if *stop.borrow() || config.max_jobs.is_some_and(|max| handled >= max) {
            break;
        }
        report.polls += 1;
        let (job_id, request_id, witness) = match transport.get_job(&poll).await {
            Ok(GetJobResponse::Job {
                job_id,
                request_id,
                witness_b64,
                ..
            }) => (job_id, request_id, witness_b64),
            Ok(GetJobResponse::NoJob { retry_after_ms }) => {
                if pause(retry_after_ms.max(backoff), &mut stop).await {
                    break;
                }
                continue;
            }
            Ok(GetJobResponse::Rejected { .. }) => {
                report.rate_limited += 1;
                if pause(backoff, &mut stop).await {
                    break;
                }
                continue;
            }
            Err(TransportError::Transient(err)) => {
                tracing::warn!(prover = %config.prover_id, %err, "get_job failed, backing off");
                report.transport_retries += 1;
                if pause(backoff, &mut stop).await {
                    break;
                }
                continue;
            }
            Err(err) => return Err(err.into()),
        };
        handled += 1;

        let proof = match config.behavior {
            ClientBehavior::Hoard => {
                report.hoarded += 1;
                if pause(backoff, &mut stop).await {
                    break;
                }
                continue;
            }
            ClientBehavior::Corrupt => corrupt(&prove(&witness, &ProvingParams::default())).to_bytes(),
            ClientBehavior::Honest | ClientBehavior::Slow(_) => {
                let params = config.params;
                let started = Instant::now();
                let proof = tokio::task::spawn_blocking(move || prove(&witness, &params).to_bytes())
                    .await
                    .expect("proving does not panic");
                if let ClientBehavior::Slow(factor) = config.behavior {
                    let extra = started.elapsed().mul_f64(factor - 1.0);
                    tokio::time::sleep(extra).await;
                }
                proof
            }
        };

        let submission = SubmitResultRequest {
            prover_id: config.prover_id.clone(),
            wallet: config.wallet.clone(),
            job_id,
            request_id,
            proof_b64: proof,
        };
        let outcome = loop {
            match transport.submit_result(&submission).await {
                Err(TransportError::Transient(err)) => {
                    tracing::warn!(prover = %config.prover_id, %err, "submit_result failed, retrying");
                    report.transport_retries += 1;
                    if pause(backoff, &mut stop).await {
                        return Ok(report);
                    }
                }
                other => break other?,
            }
        };
        match outcome {
            SubmitResultResponse::Accepted { reward_microusd } => {
                report.completed += 1;
                report.rewards_microusd += reward_microusd;
            }
            SubmitResultResponse::Rejected { reason } => match reason {
                RejectReason::InvalidProof => report.rejected_invalid += 1,
                RejectReason::UnknownRequest => report.rejected_unknown += 1,
                RejectReason::RateLimited => report.rate_limited += 1,
            },
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn behavior_parsing() {
        assert_eq!("honest".parse(), Ok(ClientBehavior::Honest));
        assert_eq!("corrupt".parse(), Ok(ClientBehavior::Corrupt));
        assert_eq!("hoard".parse(), Ok(ClientBehavior::Hoard));
        assert_eq!("slow:2.5".parse(), Ok(ClientBehavior::Slow(2.5)));
        assert!("slow:0.5".parse::<ClientBehavior>().is_err());
        assert!("slow:".parse::<ClientBehavior>().is_err());
        assert!("evil".parse::<ClientBehavior>().is_err());
    }

    #[test]
    fn endpoint_forms() {
        assert_eq!(HttpTransport::new("127.0.0.1:9").unwrap().base, "http://127.0.0.1:9");
        assert_eq!(HttpTransport::new("http://h:1/").unwrap().base, "http://h:1");
        assert!(HttpTransport::new("https://h:1").is_err());
    }

    #[test]
    fn config_validation() {
        let mut config = ClientConfig::new("127.0.0.1:1", "p", "w");
        config.idle_backoff_ms = 0;
        assert!(matches!(config.validate(), Err(ClientError::Config(_))));
    }
}
