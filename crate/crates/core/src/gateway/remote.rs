use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{FeaturesRequest, FeaturesResponse, GenerateRequest, GenerateResponse, FEATURES_PATH, GENERATE_PATH};
use super::{GatewayConfig, GatewayError, ModelBackend, Pooling, RetryPolicy};

/// HTTP client for services speaking the `/v1/generate` + `/v1/features` contract.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    http: reqwest::Client,
    generate_url: String,
    features_url: String,
    retry: RetryPolicy,
    generator_id: String,
    backbone_id: String,
}

impl RemoteBackend {
    pub fn new(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let base = |u: &Option<String>, what: &str| {
            u.clone()
                .ok_or_else(|| GatewayError::Config(format!("remote mode needs a {what} endpoint URL")))
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            http,
            generate_url: join_url(&base(&cfg.generate_url, "generation")?, GENERATE_PATH),
            features_url: join_url(&base(&cfg.features_url, "feature")?, FEATURES_PATH),
            retry: cfg.retry,
            generator_id: cfg.generator_id.clone(),
            backbone_id: cfg.backbone_id.clone(),
        })
    }

    async fn post<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, GatewayError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let wait = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 2).min(16));
                tokio::time::sleep(Duration::from_millis(wait)).await;
            }
            match self.http.post(url).json(body).send().await {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<R>()
                        .await
                        .map_err(|e| GatewayError::Protocol(format!("{url}: bad response body: {e}")));
                }
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("{url}: HTTP {}", resp.status());
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().await.unwrap_or_default();
                    return Err(GatewayError::Protocol(format!("{url}: HTTP {status}: {text}")));
                }
                Err(e) => last = format!("{url}: {e}"),
            }
            tracing::warn!(attempt, error = %last, "gateway call failed");
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}

fn join_url(base: &str, path: &str) -> String {
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{}{}", base.trim_end_matches('/'), path)
    }
}

#[async_trait]
impl ModelBackend for RemoteBackend {
    fn generator_id(&self) -> &str {
        &self.generator_id
    }

    fn backbone_id(&self) -> &str {
        &self.backbone_id
    }

    fn is_mock(&self) -> bool {
        false
    }

    async fn generate(&self, caption: &str) -> Result<Vec<u8>, GatewayError> {
        let resp: GenerateResponse = self
            .post(
                &self.generate_url,
                &GenerateRequest {
                    caption: caption.to_string(),
                },
            )
            .await?;
        base64::engine::general_purpose::STANDARD
            .decode(resp.image_b64)
            .map_err(|e| GatewayError::Protocol(format!("image_b64: {e}")))
    }

    async fn features(&self, image: &[u8], recon: &[u8], caption: &str, instruction: &str, pooling: Pooling) -> Result<Vec<f64>, GatewayError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let req = FeaturesRequest {
            image_b64: b64.encode(image),
            recon_b64: b64.encode(recon),
            caption: caption.to_string(),
            instruction: instruction.to_string(),
            pooling,
        };
        let resp: FeaturesResponse = self.post(&self.features_url, &req).await?;
        Ok(resp.vector)
    }
}
