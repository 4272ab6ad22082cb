//! Synthetic fixtures for demos and tests.
//!
//! A corpus is a grid of images x models x caption lengths. Each model has a
//! planted quality in [0, 1]; a caption's latent per-dimension quality is the
//! model's plus small jitter. Caption text draws on the image's own
//! vocabulary with probability equal to that quality, so mock features carry
//! a signal about it. Simulated raters map latent quality to the 1..5 scale
//! with a personal bias and Gaussian noise.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{CaptionSample, Dimension, LengthClass, DEFAULT_CATEGORIES};
use crate::gateway::{InstructionTemplates, MockBackend, Pooling};
use crate::head::{DimensionTargets, FeatureSet, TrainingSample};
use crate::jsonl::write_atomic;
use crate::subjective::RatingRecord;

const VOCAB: [&str; 48] = [
    "dog", "cat", "bridge", "river", "tower", "window", "bicycle", "street", "lamp", "table", "bread", "cup", "mountain",
    "snow", "forest", "boat", "harbor", "market", "child", "umbrella", "train", "station", "guitar", "stage", "painting",
    "museum", "dress", "mirror", "coffee", "glass", "horse", "field", "ball", "player", "laptop", "desk", "phone", "car",
    "road", "sofa", "kitchen", "plate", "flower", "garden", "bird", "sky", "beach", "wave",
];
const FILLER: [&str; 12] = [
    "a", "the", "with", "near", "under", "beside", "on", "in", "and", "of", "red", "small",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model_id: String,
    pub quality: f64,
}

/// `n` models with qualities evenly spaced over [0.2, 0.8]; `model-00` is the
/// weakest and the last one the strongest.
pub fn planted_models(n: usize) -> Vec<ModelSpec> {
    (0..n)
        .map(|i| ModelSpec {
            model_id: format!("model-{i:02}"),
            quality: if n > 1 { 0.2 + 0.6 * i as f64 / (n - 1) as f64 } else { 0.5 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub models: Vec<ModelSpec>,
    /// Std of per-caption quality jitter.
    pub jitter: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub captions: Vec<CaptionSample>,
    /// Latent quality in [0, 1] per (caption_id, dimension).
    pub truth: BTreeMap<(String, Dimension), f64>,
}

pub fn image_ref(i: usize) -> String {
    format!("images/img-{i:05}.ppm")
}

fn image_vocab(i: usize) -> [&'static str; 6] {
    std::array::from_fn(|k| VOCAB[(i * 7 + k * 5) % VOCAB.len()])
}

pub fn corpus(spec: &CorpusSpec) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter.max(0.0)).expect("finite jitter");
    let mut captions = Vec::new();
    let mut truth = BTreeMap::new();
    for i in 0..spec.n_images {
        let own = image_vocab(i);
        for m in &spec.models {
            for length in [LengthClass::Short, LengthClass::Long] {
                let caption_id = format!("{}-{i:05}-{}", m.model_id, &length.as_str()[..1]);
                let base = m.quality + jitter.sample(&mut rng);
                let mut sum = 0.0;
                for &d in length.dimensions() {
                    let t = (base + 0.5 * jitter.sample(&mut rng)).clamp(0.0, 1.0);
                    sum += t;
                    truth.insert((caption_id.clone(), d), t);
                }
                let p = sum / length.dimensions().len() as f64;
                let n_words = if length == LengthClass::Short { 6 } else { 16 };
                let text: Vec<&str> = (0..n_words)
                    .map(|k| {
                        if k % 3 == 1 {
                            FILLER[rng.random_range(0..FILLER.len())]
                        } else if rng.random_bool(p) {
                            own[rng.random_range(0..own.len())]
                        } else {
                            VOCAB[rng.random_range(0..VOCAB.len())]
                        }
                    })
                    .collect();
                captions.push(CaptionSample {
                    caption_id,
                    image_ref: image_ref(i),
                    model_id: m.model_id.clone(),
                    category: DEFAULT_CATEGORIES[i % DEFAULT_CATEGORIES.len()].to_string(),
                    length_class: length,
                    text: text.join(" "),
                });
            }
        }
    }
    SynthCorpus { captions, truth }
}

/// Write a small placeholder PPM for every distinct image of `captions`.
pub fn write_images(root: &Path, captions: &[CaptionSample], seed: u64) -> io::Result<()> {
    let painter = MockBackend::new(seed ^ 0x5eed, 1);
    let mut done = std::collections::BTreeSet::new();
    for c in captions {
        if done.insert(c.image_ref.as_str()) {
            let path = root.join(&c.image_ref);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_atomic(&path, &painter.render_image(&c.image_ref))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingSim {
    /// Number of raters in the pool.
    pub pool: usize,
    /// Raters drawn per caption (without replacement).
    pub per_caption: usize,
    /// Std of per-rating Gaussian noise on the 1..5 scale.
    pub noise: f64,
    /// Half-width of the uniform per-rater bias.
    pub bias: f64,
    /// The last `bad_raters` pool members are named `bad-NN` and add a random
    /// sign times `bad_offset` to every rating.
    pub bad_raters: usize,
    pub bad_offset: f64,
    pub seed: u64,
}

impl Default for RatingSim {
    fn default() -> Self {
        Self {
            pool: 30,
            per_caption: 15,
            noise: 0.3,
            bias: 0.2,
            bad_raters: 0,
            bad_offset: 0.0,
            seed: 0,
        }
    }
}

pub fn subject_id(sim: &RatingSim, i: usize) -> String {
    if i + sim.bad_raters >= sim.pool {
        format!("bad-{:02}", i + sim.bad_raters - sim.pool)
    } else {
        format!("s-{i:02}")
    }
}

/// Simulated ratings for every caption and applicable dimension.
pub fn simulate_ratings(corpus: &SynthCorpus, sim: &RatingSim) -> Vec<RatingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let noise = Normal::new(0.0, sim.noise.max(0.0)).expect("finite noise");
    let bias: Vec<f64> = (0..sim.pool)
        .map(|_| if sim.bias > 0.0 { rng.random_range(-sim.bias..sim.bias) } else { 0.0 })
        .collect();
    let mut out = Vec::new();
    let mut clock = 1_700_000_000i64;
    for c in &corpus.captions {
        let mut raters = sample(&mut rng, sim.pool, sim.per_caption.min(sim.pool)).into_vec();
        raters.sort_unstable();
        for r in raters {
            let subject = subject_id(sim, r);
            let is_bad = r + sim.bad_raters >= sim.pool;
            for &d in c.length_class.dimensions() {
                let t = corpus.truth[&(c.caption_id.clone(), d)];
                let mut score = 1.0 + 4.0 * t + bias[r] + noise.sample(&mut rng);
                if is_bad {
                    score += if rng.random_bool(0.5) { sim.bad_offset } else { -sim.bad_offset };
                }
                clock += 1;
                out.push(RatingRecord {
                    rating_id: format!("r-{:08}", out.len() + 1),
                    subject_id: subject.clone(),
                    caption_id: c.caption_id.clone(),
                    dimension: d,
                    score: score.clamp(1.0, 5.0),
                    session_id: format!("sess-{subject}"),
                    timestamp: clock,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub n: usize,
    pub feature_dim: usize,
    /// Slope of the logistic squash.
    pub scale: f64,
    /// Std of additive target noise.
    pub noise: f64,
    pub seed: u64,
}

/// A learnable regression task over mock features.
///
/// Each sample is a random caption; its per-dimension features come from the
/// mock backend with that dimension's instruction, and its targets are
/// `sigmoid(scale * w . x_d)` plus Gaussian noise for a seeded unit vector `w`
/// shared by all dimensions.
pub fn teacher_samples(spec: &TeacherSpec) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mock = MockBackend::new(spec.seed, spec.feature_dim);
    let templates = InstructionTemplates::default();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut w: Vec<f64> = (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");

    (0..spec.n)
        .map(|i| {
            let length = if i % 2 == 0 { LengthClass::Short } else { LengthClass::Long };
            let n_words = rng.random_range(4..12);
            let text: Vec<&str> = (0..n_words).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
            let text = text.join(" ");
            let image = format!("teacher-image-{}", rng.random_range(0..spec.n.max(1) / 4 + 1));
            let recon = mock.render_image(&text);
            let mut features = FeatureSet::new();
            let mut scores = BTreeMap::new();
            for &d in length.dimensions() {
                let ins = templates.render(d, length).expect("dimension valid for length");
                let x: Vec<f64> = mock
                    .embed(image.as_bytes(), &recon, &text, &ins, Pooling::MeanLastLayer)
                    .into_iter()
                    .map(f64::from)
                    .collect();
                let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                let s = 1.0 / (1.0 + (-spec.scale * z).exp()) + noise.sample(&mut rng);
                features.insert(d, x);
                scores.insert(d, s.clamp(0.0, 1.0));
            }
            TrainingSample {
                features,
                targets: DimensionTargets {
                    caption_id: format!("teacher-{i:05}"),
                    scores,
                },
            }
        })
        .collect()
}
