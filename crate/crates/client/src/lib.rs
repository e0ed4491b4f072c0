//! Async client for the rendertime HTTP API.

use base64::Engine;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use rendertime_core::wire::{
    ErrorBody, ModelInfo, PredictRequest, PredictResponse, RenderRequest, RenderResponse, VolumeInfo,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {}", body.error)]
    Api { status: StatusCode, body: ErrorBody },
    #[error("bad frame encoding: {0}")]
    Frame(#[from] base64::DecodeError),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status(),
            ClientError::Frame(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        Self { base: base.trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody { error: text, field: None });
        Err(ClientError::Api { status, body })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn health(&self) -> Result<String> {
        let resp = self.http.get(format!("{}/api/health", self.base)).send().await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    pub async fn volumes(&self) -> Result<Vec<VolumeInfo>> {
        self.get("/api/volumes").await
    }

    pub async fn model(&self) -> Result<ModelInfo> {
        self.get("/api/model").await
    }

    pub async fn predict(&self, req: &PredictRequest) -> Result<PredictResponse> {
        self.post("/api/predict", req).await
    }

    pub async fn render(&self, req: &RenderRequest) -> Result<RenderResponse> {
        self.post("/api/render", req).await
    }
}

/// PNG bytes of a rendered frame.
pub fn frame_png(resp: &RenderResponse) -> Result<Vec<u8>> {
    Ok(base64::engine::general_purpose::STANDARD.decode(&resp.frame_png_b64)?)
}
