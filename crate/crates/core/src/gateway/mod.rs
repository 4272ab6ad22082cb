//! Clients for the reconstruction and feature-extraction models.
//!
//! [`Gateway`] fronts a [`ModelBackend`] (HTTP or in-process mock) with the
//! on-disk [`ArtifactCache`] and a bound on in-flight backend calls. Every
//! backend call is counted, so callers can assert that a warm cache issues
//! none.

mod cache;
mod instruction;
mod mock;
mod remote;
pub mod wire;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::dataset::{CaptionSample, Dimension};
use crate::jsonl::write_atomic;

pub use cache::{content_key, decode_features, encode_features, ArtifactCache, FEATURE_MAGIC};
pub use instruction::{render_instruction, InstructionTemplates, TEMPLATE_VERSION};
pub use mock::{MockBackend, MOCK_BACKBONE_ID, MOCK_GENERATOR_ID};
pub use remote::RemoteBackend;

pub const ENV_GENERATE_URL: &str = "ICBENCH_GENERATE_URL";
pub const ENV_FEATURES_URL: &str = "ICBENCH_FEATURES_URL";
pub const ENV_TIMEOUT_SECS: &str = "ICBENCH_TIMEOUT_SECS";
pub const ENV_CACHE_DIR: &str = "ICBENCH_CACHE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("feature length {got} does not match configured d_H {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("gateway config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GatewayError + '_ {
    move |source| GatewayError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    MeanLastLayer,
    LastToken,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::MeanLastLayer => "mean_last_layer",
            Pooling::LastToken => "last_token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Remote,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub generate_url: Option<String>,
    pub features_url: Option<String>,
    pub feature_dim: usize,
    pub pooling: Pooling,
    pub timeout_secs: f64,
    pub retry: RetryPolicy,
    pub cache_dir: PathBuf,
    pub max_in_flight: usize,
    pub seed: u64,
    /// Identity of the remote generator, part of every reconstruction cache key.
    pub generator_id: String,
    /// Identity of the remote feature backbone, part of every feature cache key.
    pub backbone_id: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: GatewayMode::Mock,
            generate_url: None,
            features_url: None,
            feature_dim: 64,
            pooling: Pooling::MeanLastLayer,
            timeout_secs: 60.0,
            retry: RetryPolicy::default(),
            cache_dir: PathBuf::from(".icbench-cache"),
            max_in_flight: 8,
            seed: 0,
            generator_id: "remote-generator".into(),
            backbone_id: "remote-backbone".into(),
        }
    }
}

impl GatewayConfig {
    /// Override endpoints, timeout and cache directory from the environment.
    pub fn apply_env(&mut self) -> Result<(), GatewayError> {
        if let Ok(v) = std::env::var(ENV_GENERATE_URL) {
            self.generate_url = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_FEATURES_URL) {
            self.features_url = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_TIMEOUT_SECS) {
            self.timeout_secs = v
                .parse()
                .map_err(|_| GatewayError::Config(format!("{ENV_TIMEOUT_SECS}={v:?} is not a number")))?;
        }
        if let Ok(v) = std::env::var(ENV_CACHE_DIR) {
            self.cache_dir = PathBuf::from(v);
        }
        Ok(())
    }
}

#[async_trait]
pub trait ModelBackend: Send + Sync {
    fn generator_id(&self) -> &str;
    fn backbone_id(&self) -> &str;
    fn is_mock(&self) -> bool;
    async fn generate(&self, caption: &str) -> Result<Vec<u8>, GatewayError>;
    async fn features(&self, image: &[u8], recon: &[u8], caption: &str, instruction: &str, pooling: Pooling) -> Result<Vec<f64>, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub caption_id: String,
    pub text: String,
    pub output_ref: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRequest {
    pub caption_id: String,
    pub dimension: Dimension,
    pub image_ref: PathBuf,
    pub recon_ref: PathBuf,
    pub text: String,
    pub instruction: String,
}

impl FeatureRequest {
    /// Build the request for one caption and dimension, rendering the instruction.
    pub fn for_caption(
        sample: &CaptionSample,
        dimension: Dimension,
        images_root: &Path,
        recon_ref: PathBuf,
        templates: &InstructionTemplates,
    ) -> Result<Self, GatewayError> {
        Ok(Self {
            caption_id: sample.caption_id.clone(),
            dimension,
            image_ref: images_root.join(&sample.image_ref),
            recon_ref,
            text: sample.text.clone(),
            instruction: templates.render(dimension, sample.length_class)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    RealService,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub caption_id: String,
    pub dimension: Dimension,
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    cache: ArtifactCache,
    templates: InstructionTemplates,
    pooling: Pooling,
    feature_dim: usize,
    calls: AtomicU64,
    permits: Semaphore,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("generator", &self.backend.generator_id())
            .field("backbone", &self.backend.backbone_id())
            .field("cache", &self.cache.root())
            .finish()
    }
}

impl Gateway {
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let backend: Arc<dyn ModelBackend> = match cfg.mode {
            GatewayMode::Mock => Arc::new(MockBackend::new(cfg.seed, cfg.feature_dim)),
            GatewayMode::Remote => Arc::new(RemoteBackend::new(cfg)?),
        };
        Ok(Self::with_backend(backend, cfg))
    }

    pub fn with_backend(backend: Arc<dyn ModelBackend>, cfg: &GatewayConfig) -> Self {
        Self {
            backend,
            cache: ArtifactCache::new(&cfg.cache_dir),
            templates: InstructionTemplates::default(),
            pooling: cfg.pooling,
            feature_dim: cfg.feature_dim,
            calls: AtomicU64::new(0),
            permits: Semaphore::new(cfg.max_in_flight.max(1)),
        }
    }

    pub fn with_templates(mut self, templates: InstructionTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn templates(&self) -> &InstructionTemplates {
        &self.templates
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of calls that reached the backend.
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn generation_key(&self, text: &str) -> String {
        content_key(&[b"generate", self.backend.generator_id().as_bytes(), text.as_bytes()])
    }

    pub fn feature_key(&self, image: &[u8], recon: &[u8], text: &str, instruction: &str) -> String {
        content_key(&[
            b"features",
            image,
            recon,
            text.as_bytes(),
            instruction.as_bytes(),
            self.pooling.as_str().as_bytes(),
            self.backend.backbone_id().as_bytes(),
            self.templates.version().as_bytes(),
            &(self.feature_dim as u64).to_le_bytes(),
        ])
    }

    pub async fn reconstruct(&self, req: &GenerationRequest) -> Result<PathBuf, GatewayError> {
        if req.text.trim().is_empty() {
            return Err(GatewayError::Validation(format!("caption {:?} is empty", req.caption_id)));
        }
        let key = self.generation_key(&req.text);
        let cached = self.cache.get_image(&key).map_err(io_err(&self.cache.image_path(&key)))?;
        let bytes = match cached {
            Some(b) => b,
            None => {
                let _permit = self.permits.acquire().await.expect("semaphore open");
                self.calls.fetch_add(1, Ordering::SeqCst);
                let b = self.backend.generate(&req.text).await?;
                self.cache.put_image(&key, &b).map_err(io_err(&self.cache.image_path(&key)))?;
                b
            }
        };
        let current = fs::read(&req.output_ref).ok();
        if current.as_deref() != Some(bytes.as_slice()) {
            write_atomic(&req.output_ref, &bytes).map_err(io_err(&req.output_ref))?;
        }
        Ok(req.output_ref.clone())
    }

    pub async fn extract_features(&self, req: &FeatureRequest) -> Result<FeatureVector, GatewayError> {
        let image = fs::read(&req.image_ref).map_err(io_err(&req.image_ref))?;
        let recon = fs::read(&req.recon_ref).map_err(io_err(&req.recon_ref))?;
        let key = self.feature_key(&image, &recon, &req.text, &req.instruction);
        let path = self.cache.feature_path(&key);
        let values: Vec<f32> = match self.cache.get_features(&key).map_err(io_err(&path))? {
            Some(v) => v,
            None => {
                let _permit = self.permits.acquire().await.expect("semaphore open");
                self.calls.fetch_add(1, Ordering::SeqCst);
                let v = self
                    .backend
                    .features(&image, &recon, &req.text, &req.instruction, self.pooling)
                    .await?;
                if v.len() != self.feature_dim {
                    return Err(GatewayError::FeatureDim {
                        expected: self.feature_dim,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(GatewayError::Protocol("non-finite feature value".into()));
                }
                let v: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
                self.cache.put_features(&key, &v).map_err(io_err(&path))?;
                v
            }
        };
        if values.len() != self.feature_dim {
            return Err(GatewayError::FeatureDim {
                expected: self.feature_dim,
                got: values.len(),
            });
        }
        Ok(FeatureVector {
            caption_id: req.caption_id.clone(),
            dimension: req.dimension,
            values: values.into_iter().map(f64::from).collect(),
            source: if self.backend.is_mock() {
                FeatureSource::Mock
            } else {
                FeatureSource::RealService
            },
        })
    }
}
