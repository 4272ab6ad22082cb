//! Thin typed client for the icbench HTTP service.

use std::time::Duration;

use icbench_core::api::{self, ApiError, ErrorKind};
use icbench_core::dataset::SplitPlan;
use icbench_core::subjective::{MosOutput, RatingRecord};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {message}")]
    Transport { url: String, message: String },
    #[error("HTTP {status}: {}", .error.error)]
    Api { status: u16, error: ApiError },
    #[error("unexpected response from {url}: {message}")]
    Protocol { url: String, message: String },
}

impl ClientError {
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ClientError::Api { error, .. } => Some(error.kind),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        Self::with_timeout(base_url, Duration::from_secs(300))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport {
                url: base_url.to_string(),
                message: e.to_string(),
            })?;
        Ok(Self {
            http,
            base: base_url.trim_end_matches('/').to_string(),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send(&self, method: Method, path: &str, body: Option<&(impl Serialize + ?Sized)>) -> Result<reqwest::Response, ClientError> {
        let url = format!("{}{path}", self.base);
        let mut req = self.http.request(method, &url);
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await.map_err(|e| ClientError::Transport {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let error = serde_json::from_str::<ApiError>(&text).unwrap_or(ApiError {
            kind: if status.is_server_error() {
                ErrorKind::Internal
            } else {
                ErrorKind::Validation
            },
            error: text,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            error,
        })
    }

    async fn json<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&(impl Serialize + ?Sized)>,
    ) -> Result<T, ClientError> {
        let resp = self.send(method, path, body).await?;
        let url = resp.url().to_string();
        resp.json().await.map_err(|e| ClientError::Protocol {
            url,
            message: e.to_string(),
        })
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.json(Method::POST, path, Some(body)).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.json(Method::GET, path, None::<&()>).await
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        self.send(Method::GET, api::HEALTH_PATH, None::<&()>).await.map(|_| ())
    }

    pub async fn create_session(&self, subject_id: &str) -> Result<api::SessionInfo, ClientError> {
        self.post(
            api::SESSIONS_PATH,
            &api::CreateSession {
                subject_id: subject_id.to_string(),
            },
        )
        .await
    }

    pub async fn session(&self, session_id: &str) -> Result<api::SessionInfo, ClientError> {
        self.get(&format!("{}/{session_id}", api::SESSIONS_PATH)).await
    }

    pub async fn close_session(&self, session_id: &str) -> Result<api::SessionInfo, ClientError> {
        self.post(&format!("{}/{session_id}/close", api::SESSIONS_PATH), &()).await
    }

    pub async fn qualify(
        &self,
        session_id: &str,
        answers: Vec<api::QualificationAnswer>,
    ) -> Result<api::QualificationResult, ClientError> {
        self.post(
            api::QUALIFICATION_PATH,
            &api::QualificationRequest {
                session_id: session_id.to_string(),
                answers,
            },
        )
        .await
    }

    /// `None` once the study has nothing left for this subject.
    pub async fn next_task(&self, session_id: &str) -> Result<Option<api::AnnotationTask>, ClientError> {
        let resp = self
            .send(
                Method::GET,
                &format!("{}?session_id={session_id}", api::NEXT_TASK_PATH),
                None::<&()>,
            )
            .await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        let url = resp.url().to_string();
        resp.json().await.map(Some).map_err(|e| ClientError::Protocol {
            url,
            message: e.to_string(),
        })
    }

    pub async fn submit(&self, rating: &api::RatingSubmission) -> Result<RatingRecord, ClientError> {
        self.post(api::RATINGS_PATH, rating).await
    }

    /// The raw `ratings.jsonl` body.
    pub async fn export_text(&self) -> Result<String, ClientError> {
        let resp = self.send(Method::GET, api::EXPORT_PATH, None::<&()>).await?;
        let url = resp.url().to_string();
        resp.text().await.map_err(|e| ClientError::Protocol {
            url,
            message: e.to_string(),
        })
    }

    pub async fn export(&self) -> Result<Vec<RatingRecord>, ClientError> {
        let text = self.export_text().await?;
        icbench_core::jsonl::parse_str(&text, api::EXPORT_PATH).map_err(|e| ClientError::Protocol {
            url: format!("{}{}", self.base, api::EXPORT_PATH),
            message: e.to_string(),
        })
    }

    pub async fn progress(&self) -> Result<api::Progress, ClientError> {
        self.get(api::PROGRESS_PATH).await
    }

    pub async fn mos(&self, ratings: Vec<RatingRecord>) -> Result<MosOutput, ClientError> {
        self.post(api::MOS_PATH, &api::MosRequest { ratings }).await
    }

    pub async fn report(&self, req: &api::ReportRequest) -> Result<api::ReportResponse, ClientError> {
        self.post(api::REPORT_PATH, req).await
    }

    pub async fn leaderboard(&self, req: &api::LeaderboardRequest) -> Result<api::LeaderboardResponse, ClientError> {
        self.post(api::LEADERBOARD_PATH, req).await
    }

    pub async fn split(&self, req: &api::SplitRequest) -> Result<SplitPlan, ClientError> {
        self.post(api::SPLIT_PATH, req).await
    }
}
