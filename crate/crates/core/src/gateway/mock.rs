//! Deterministic stand-ins for the generation and feature services.
//!
//! Reconstructions are 16x16 binary PPM images whose pixels come from a
//! ChaCha8 stream keyed by the caption text and seed.
//!
//! Features are a sum of seeded random projections:
//! `text + 0.5 * (image + reconstruction + instruction)`, where `text` is the
//! normalized sum of projections of the caption's word unigrams and bigrams
//! (or of its last unigram and bigram under last-token pooling). Two captions
//! that share most words for the same image therefore share most of their
//! vector mass, while unrelated captions only share the image and
//! instruction terms.

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::wire::{FeaturesRequest, FeaturesResponse, GenerateResponse};
use super::{GatewayError, ModelBackend, Pooling};
use base64::Engine;

pub const MOCK_GENERATOR_ID: &str = "mock-generator/v1";
pub const MOCK_BACKBONE_ID: &str = "mock-backbone/v1";
const SIDE: usize = 16;

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    feature_dim: usize,
    generator_id: String,
    backbone_id: String,
}

fn hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl MockBackend {
    pub fn new(seed: u64, feature_dim: usize) -> Self {
        Self {
            seed,
            feature_dim,
            generator_id: format!("{MOCK_GENERATOR_ID}#seed={seed}"),
            backbone_id: format!("{MOCK_BACKBONE_ID}#seed={seed}"),
        }
    }

    pub fn render_image(&self, caption: &str) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[b"img", caption.as_bytes(), &self.seed.to_le_bytes()]));
        let mut out = format!("P6\n{SIDE} {SIDE}\n255\n").into_bytes();
        let mut px = vec![0u8; SIDE * SIDE * 3];
        rng.fill(px.as_mut_slice());
        out.extend_from_slice(&px);
        out
    }

    fn projection(&self, tag: &[u8], content: &[u8]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[tag, content, &self.seed.to_le_bytes()]));
        (0..self.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn embed(&self, image: &[u8], recon: &[u8], caption: &str, instruction: &str, pooling: Pooling) -> Vec<f32> {
        let toks = words(caption);
        let mut grams: Vec<String> = toks.clone();
        grams.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
        let grams: Vec<String> = match pooling {
            Pooling::MeanLastLayer => grams,
            Pooling::LastToken => {
                let mut last: Vec<String> = toks.last().cloned().into_iter().collect();
                last.extend(toks.windows(2).last().map(|w| format!("{} {}", w[0], w[1])));
                last
            }
        };
        let mut text = vec![0.0; self.feature_dim];
        for g in &grams {
            for (t, p) in text.iter_mut().zip(self.projection(b"gram", g.as_bytes())) {
                *t += p;
            }
        }
        let norm = (grams.len().max(1) as f64).sqrt();
        let img = self.projection(b"image", image);
        let rec = self.projection(b"recon", recon);
        let ins = self.projection(b"instruction", instruction.as_bytes());
        (0..self.feature_dim)
            .map(|i| (text[i] / norm + 0.5 * (img[i] + rec[i] + ins[i])) as f32)
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Server-side handling of a generate call, shared with the HTTP mock.
    pub fn handle_generate(&self, caption: &str) -> GenerateResponse {
        GenerateResponse {
            image_b64: base64::engine::general_purpose::STANDARD.encode(self.render_image(caption)),
            generator_id: self.generator_id.clone(),
        }
    }

    pub fn handle_features(&self, req: &FeaturesRequest) -> Result<FeaturesResponse, GatewayError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let image = b64
            .decode(&req.image_b64)
            .map_err(|e| GatewayError::Validation(format!("image_b64: {e}")))?;
        let recon = b64
            .decode(&req.recon_b64)
            .map_err(|e| GatewayError::Validation(format!("recon_b64: {e}")))?;
        let v = self.embed(&image, &recon, &req.caption, &req.instruction, req.pooling);
        Ok(FeaturesResponse {
            vector: v.into_iter().map(f64::from).collect(),
            backbone_id: self.backbone_id.clone(),
        })
    }
}

#[async_trait]
impl ModelBackend for MockBackend {
    fn generator_id(&self) -> &str {
        &self.generator_id
    }

    fn backbone_id(&self) -> &str {
        &self.backbone_id
    }

    fn is_mock(&self) -> bool {
        true
    }

    async fn generate(&self, caption: &str) -> Result<Vec<u8>, GatewayError> {
        Ok(self.render_image(caption))
    }

    async fn features(&self, image: &[u8], recon: &[u8], caption: &str, instruction: &str, pooling: Pooling) -> Result<Vec<f64>, GatewayError> {
        Ok(self
            .embed(image, recon, caption, instruction, pooling)
            .into_iter()
            .map(f64::from)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_depends_on_text_and_seed() {
        let a = MockBackend::new(7, 8);
        assert_eq!(a.render_image("a red cube"), a.render_image("a red cube"));
        assert_ne!(a.render_image("a red cube"), a.render_image("a blue cube"));
        assert_ne!(a.render_image("a red cube"), MockBackend::new(8, 8).render_image("a red cube"));
        assert!(a.render_image("x").starts_with(b"P6\n16 16\n255\n"));
    }

    #[test]
    fn pooling_changes_features() {
        let m = MockBackend::new(1, 16);
        let a = m.embed(b"i", b"r", "a dog on a sofa", "p", Pooling::MeanLastLayer);
        let b = m.embed(b"i", b"r", "a dog on a sofa", "p", Pooling::LastToken);
        assert_ne!(a, b);
        assert_eq!(a.len(), 16);
    }
}
