//! Async client for the `fpcert-service` HTTP API.

use fpcert_core::api::{
    AdversarialRequest, AdversarialResponse, CertifyRequest, EpsLinfRequest, EpsLinfResponse, ErrorBody, Health, ModelInfo,
    SearchCexRequest,
};
use fpcert_core::batch::{CexReport, Report};
use fpcert_core::network::ModelFile;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api { status: status.as_u16(), message })
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::decode(self.http.post(format!("{}{path}", self.base)).json(body).send().await?).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    /// Upload a model; `gram_iters` overrides the iteration count in the file.
    pub async fn upload_model(&self, file: &ModelFile, gram_iters: Option<u32>) -> Result<ModelInfo> {
        let path = match gram_iters {
            Some(k) => format!("/models?gram_iters={k}"),
            None => "/models".to_string(),
        };
        self.post(&path, file).await
    }

    /// The stored model with its norm cache embedded.
    pub async fn model_file(&self, id: &str) -> Result<ModelFile> {
        self.get(&format!("/models/{id}")).await
    }

    pub async fn certify(&self, req: &CertifyRequest) -> Result<Report> {
        self.post("/certify", req).await
    }

    pub async fn search_cex(&self, req: &SearchCexRequest) -> Result<CexReport> {
        self.post("/search-cex", req).await
    }

    pub async fn adversarial(&self, req: &AdversarialRequest) -> Result<AdversarialResponse> {
        self.post("/adversarial", req).await
    }

    pub async fn eps_linf(&self, req: &EpsLinfRequest) -> Result<EpsLinfResponse> {
        self.post("/eps-linf", req).await
    }
}
