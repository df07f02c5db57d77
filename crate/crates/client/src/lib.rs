//! Thin HTTP client for the blenddiff service, plus the request/response
//! types both sides share. All heavy lifting happens server-side; the
//! client just ships configs and arguments and gets outcome summaries
//! (with output paths) back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blenddiff_engine::config::{RunConfig, Snapshot};
pub use blenddiff_engine::metrics::EvalReport;
pub use blenddiff_engine::pipeline::{
    EvalArgs, EvalOutcome, GenerateArgs, GenerateOutcome, OracleGenOutcome, RefineArgs,
    RefineOutcome, TrainOutcome,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigRequest {
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub config: RunConfig,
    pub args: GenerateArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRequest {
    pub config: RunConfig,
    pub args: RefineArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub config: RunConfig,
    pub args: EvalArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerunRequest {
    pub snapshot: Snapshot,
}

/// Error body returned by the service on failure. `usage` distinguishes
/// caller mistakes (HTTP 400, exit code 2) from runtime failures
/// (HTTP 500, exit code 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub usage: bool,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("{message}")]
    Api {
        status: u16,
        usage: bool,
        message: String,
    },
}

impl ClientError {
    pub fn is_usage(&self) -> bool {
        matches!(self, ClientError::Api { usage: true, .. })
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

/// Async client; requests have no overall timeout since training calls
/// legitimately run for minutes.
#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        let mut base = base_url.into();
        while base.ends_with('/') {
            base.pop();
        }
        Client {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        req: &Req,
    ) -> ClientResult<Resp> {
        let url = format!("{}{path}", self.base);
        let response = self.http.post(url).json(req).send().await?;
        let status = response.status();
        if status.is_success() {
            Ok(response.json().await?)
        } else {
            let message = match response.json::<ApiError>().await {
                Ok(body) => {
                    return Err(ClientError::Api {
                        status: status.as_u16(),
                        usage: body.usage,
                        message: body.error,
                    })
                }
                Err(_) => format!("service returned {status}"),
            };
            Err(ClientError::Api {
                status: status.as_u16(),
                usage: status.as_u16() == 400,
                message,
            })
        }
    }

    pub async fn health(&self) -> ClientResult<HealthResponse> {
        let url = format!("{}/v1/health", self.base);
        let response = self.http.get(url).send().await?;
        Ok(response.json().await?)
    }

    pub async fn oracle_gen(&self, config: RunConfig) -> ClientResult<OracleGenOutcome> {
        self.post("/v1/oracle-gen", &ConfigRequest { config }).await
    }

    pub async fn train_diffusion(&self, config: RunConfig) -> ClientResult<TrainOutcome> {
        self.post("/v1/train-diffusion", &ConfigRequest { config }).await
    }

    pub async fn train_lip(&self, config: RunConfig) -> ClientResult<TrainOutcome> {
        self.post("/v1/train-lip", &ConfigRequest { config }).await
    }

    pub async fn generate(
        &self,
        config: RunConfig,
        args: GenerateArgs,
    ) -> ClientResult<GenerateOutcome> {
        self.post("/v1/generate", &GenerateRequest { config, args }).await
    }

    pub async fn refine(&self, config: RunConfig, args: RefineArgs) -> ClientResult<RefineOutcome> {
        self.post("/v1/refine", &RefineRequest { config, args }).await
    }

    pub async fn eval(&self, config: RunConfig, args: EvalArgs) -> ClientResult<EvalOutcome> {
        self.post("/v1/eval", &EvalRequest { config, args }).await
    }

    pub async fn rerun(&self, snapshot: Snapshot) -> ClientResult<serde_json::Value> {
        self.post("/v1/rerun", &RerunRequest { snapshot }).await
    }
}
