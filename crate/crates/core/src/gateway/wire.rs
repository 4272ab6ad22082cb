//! JSON bodies of the generation and feature endpoints.

use serde::{Deserialize, Serialize};

use super::Pooling;

pub const GENERATE_PATH: &str = "/v1/generate";
pub const FEATURES_PATH: &str = "/v1/features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_b64: String,
    pub generator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesRequest {
    pub image_b64: String,
    pub recon_b64: String,
    pub caption: String,
    pub instruction: String,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesResponse {
    pub vector: Vec<f64>,
    pub backbone_id: String,
}
