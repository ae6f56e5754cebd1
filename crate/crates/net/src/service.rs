//! HTTP binding of the Job Distributor.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use commprove_core::Distributor;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::wire::{
    decode, encode, GetJobRequest, GetJobResponse, SubmitResultRequest, SubmitResultResponse,
    GET_JOB_PATH, SUBMIT_RESULT_PATH,
};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("server failed: {0}")]
    Io(#[from] io::Error),
}

pub fn router(distributor: Arc<Distributor>) -> Router {
    Router::new()
        .route(GET_JOB_PATH, post(get_job))
        .route(SUBMIT_RESULT_PATH, post(submit_result))
        .with_state(distributor)
}

fn json(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn bad_request(err: impl std::fmt::Display) -> Response {
    let body = serde_json::json!({ "error": err.to_string() });
    json(StatusCode::BAD_REQUEST, body.to_string().into_bytes())
}

async fn get_job(State(jd): State<Arc<Distributor>>, body: Bytes) -> Response {
    let req: GetJobRequest = match decode(&body) {
        Ok(req) => req,
        Err(err) => return bad_request(err),
    };
    let outcome = jd.handle_get_job(&req.prover_id, &req.wallet);
    json(StatusCode::OK, encode(&GetJobResponse::from(outcome)))
}

async fn submit_result(State(jd): State<Arc<Distributor>>, body: Bytes) -> Response {
    let req: SubmitResultRequest = match decode(&body) {
        Ok(req) => req,
        Err(err) => return bad_request(err),
    };
    // Verification hashes the whole witness; keep it off the reactor.
    let outcome = tokio::task::spawn_blocking(move || jd.handle_submit_result(req.into())).await;
    match outcome {
        Ok(outcome) => json(StatusCode::OK, encode(&SubmitResultResponse::from(outcome))),
        Err(err) => {
            tracing::error!(%err, "submit handler panicked");
            StatusCode::INTERNAL_SERVER_ERROR.into_response()
        }
    }
}

/// A running service. Dropping the handle leaves the server running; call
/// [`ServiceHandle::shutdown`] to stop it.
#[derive(Debug)]
pub struct ServiceHandle {
    local_addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops accepting connections, lets in-flight requests finish.
    pub async fn shutdown(mut self) -> Result<(), ServeError> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.task.await {
            Ok(result) => Ok(result?),
            Err(join) => Err(ServeError::Io(io::Error::other(join))),
        }
    }
}

/// Binds `addr` and serves `POST /v1/get_job` and `POST /v1/submit_result`.
pub async fn serve(addr: &str, distributor: Arc<Distributor>) -> Result<ServiceHandle, ServeError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| ServeError::Bind {
        addr: addr.to_owned(),
        source,
    })?;
    let local_addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let app = router(distributor);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%local_addr, "job distributor listening");
    Ok(ServiceHandle {
        local_addr,
        stop: Some(stop),
        task,
    })
}
