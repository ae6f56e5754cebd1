//! JSON messages exchanged between provers and the Job Distributor.
//!
//! Binary payloads travel as standard base64 text. Unknown fields are ignored
//! when decoding.

use commprove_core::distributor::RejectReason;
use commprove_core::{GetJobOutcome, JobId, ProofSubmission, RequestId, SubmitOutcome};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GET_JOB_PATH: &str = "/v1/get_job";
pub const SUBMIT_RESULT_PATH: &str = "/v1/submit_result";

#[derive(Debug, Error)]
#[error("malformed message: {0}")]
pub struct DecodeError(#[from] serde_json::Error);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetJobRequest {
    pub prover_id: String,
    pub wallet: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GetJobResponse {
    Job {
        job_id: String,
        request_id: u64,
        round: u32,
        #[serde(with = "b64")]
        witness_b64: Vec<u8>,
    },
    NoJob {
        retry_after_ms: u64,
    },
    Rejected {
        reason: RejectReason,
    },
}

impl From<GetJobOutcome> for GetJobResponse {
    fn from(outcome: GetJobOutcome) -> Self {
        match outcome {
            GetJobOutcome::Assigned(a) => GetJobResponse::Job {
                job_id: a.job_id.as_str().to_owned(),
                request_id: a.request_id.0,
                round: a.round,
                witness_b64: a.witness.to_vec(),
            },
            GetJobOutcome::NoJob { retry_after_ms } => GetJobResponse::NoJob { retry_after_ms },
            GetJobOutcome::RateLimited => GetJobResponse::Rejected {
                reason: RejectReason::RateLimited,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResultRequest {
    pub prover_id: String,
    pub wallet: String,
    pub job_id: String,
    pub request_id: u64,
    #[serde(with = "b64")]
    pub proof_b64: Vec<u8>,
}

impl From<SubmitResultRequest> for ProofSubmission {
    fn from(req: SubmitResultRequest) -> Self {
        ProofSubmission {
            prover_id: req.prover_id,
            wallet: req.wallet,
            job_id: JobId::new(req.job_id),
            request_id: RequestId(req.request_id),
            proof: req.proof_b64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SubmitResultResponse {
    Accepted { reward_microusd: u64 },
    Rejected { reason: RejectReason },
}

impl From<SubmitOutcome> for SubmitResultResponse {
    fn from(outcome: SubmitOutcome) -> Self {
        match outcome {
            SubmitOutcome::Accepted { reward_microusd } => {
                SubmitResultResponse::Accepted { reward_microusd }
            }
            SubmitOutcome::Rejected(reason) => SubmitResultResponse::Rejected { reason },
        }
    }
}

pub fn encode<T: Serialize>(message: &T) -> Vec<u8> {
    serde_json::to_vec(message).expect("wire messages always serialize")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, DecodeError> {
    Ok(serde_json::from_slice(bytes)?)
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}
