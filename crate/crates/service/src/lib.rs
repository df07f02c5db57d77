//! Axum service exposing the pipeline operations over HTTP/JSON. Every
//! endpoint takes the run config inline, executes the operation on a
//! blocking worker, and returns the outcome summary; file outputs land
//! under the config's output directory on the service host.

use axum::extract::Json;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use blenddiff_client::{
    ApiError, ConfigRequest, EvalRequest, GenerateRequest, HealthResponse, RefineRequest,
    RerunRequest,
};
use blenddiff_engine::{pipeline, EngineError};

fn error_response(err: &EngineError) -> Response {
    let status = if err.is_usage() {
        StatusCode::BAD_REQUEST
    } else {
        StatusCode::INTERNAL_SERVER_ERROR
    };
    let body = ApiError {
        error: err.to_string(),
        usage: err.is_usage(),
    };
    (status, Json(body)).into_response()
}

/// Run a pipeline operation on the blocking pool and convert the result
/// into an HTTP response.
async fn run_blocking<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(outcome)) => Json(outcome).into_response(),
        Ok(Err(err)) => {
            tracing::warn!(error = %err, "operation failed");
            error_response(&err)
        }
        Err(join_err) => {
            tracing::error!(error = %join_err, "worker panicked");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(ApiError {
                    error: format!("worker panicked: {join_err}"),
                    usage: false,
                }),
            )
                .into_response()
        }
    }
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn oracle_gen(Json(req): Json<ConfigRequest>) -> Response {
    run_blocking(move || pipeline::run_oracle_gen(&req.config)).await
}

async fn train_diffusion(Json(req): Json<ConfigRequest>) -> Response {
    run_blocking(move || pipeline::run_train_diffusion(&req.config)).await
}

async fn train_lip(Json(req): Json<ConfigRequest>) -> Response {
    run_blocking(move || pipeline::run_train_lip(&req.config)).await
}

async fn generate(Json(req): Json<GenerateRequest>) -> Response {
    run_blocking(move || pipeline::run_generate(&req.config, &req.args)).await
}

async fn refine(Json(req): Json<RefineRequest>) -> Response {
    run_blocking(move || pipeline::run_refine(&req.config, &req.args)).await
}

async fn eval(Json(req): Json<EvalRequest>) -> Response {
    run_blocking(move || pipeline::run_eval(&req.config, &req.args)).await
}

async fn rerun(Json(req): Json<RerunRequest>) -> Response {
    run_blocking(move || pipeline::run_snapshot(&req.snapshot)).await
}

pub fn router() -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/oracle-gen", post(oracle_gen))
        .route("/v1/train-diffusion", post(train_diffusion))
        .route("/v1/train-lip", post(train_lip))
        .route("/v1/generate", post(generate))
        .route("/v1/refine", post(refine))
        .route("/v1/eval", post(eval))
        .route("/v1/rerun", post(rerun))
}

/// Serve on the given address until the process ends.
pub async fn serve(addr: &str) -> anyhow::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router()).await?;
    Ok(())
}

/// Bind an ephemeral localhost port and serve in a background task.
/// Used by the CLI (which is a client of this service) and by tests.
pub async fn spawn_ephemeral() -> anyhow::Result<(String, JoinHandle<()>)> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(err) = axum::serve(listener, router()).await {
            tracing::error!(error = %err, "ephemeral server stopped");
        }
    });
    Ok((format!("http://{addr}"), handle))
}
