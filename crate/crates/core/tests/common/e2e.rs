//! The mock-mode pipeline on a small synthetic corpus, shared by the
//! end-to-end and acceptance targets.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use icbench_core::dataset::CaptionSample;
use icbench_core::gateway::{Gateway, GatewayConfig};
use icbench_core::head::TrainConfig;
use icbench_core::pipeline::{run_score, run_train, BenchConfig, TrainArtifacts};
use icbench_core::report::ScoreRecord;
use icbench_core::subjective::{mos_pipeline, MosEntry};
use icbench_core::synth::{corpus, planted_models, simulate_ratings, write_images, CorpusSpec, RatingSim};

pub struct E2e {
    pub captions: Vec<CaptionSample>,
    pub mos: Vec<MosEntry>,
    pub trained: TrainArtifacts,
    pub scores: Vec<ScoreRecord>,
    pub cold_calls: u64,
    pub warm_calls: u64,
    pub elapsed: Duration,
    pub images: PathBuf,
    pub cfg: BenchConfig,
}

pub fn config(root: &Path) -> BenchConfig {
    BenchConfig {
        gateway: GatewayConfig {
            feature_dim: 32,
            cache_dir: root.join("cache"),
            seed: 1,
            ..GatewayConfig::default()
        },
        train: TrainConfig {
            epochs: 10,
            h1: 32,
            h2: 16,
            lr0: 1e-3,
            ..TrainConfig::default()
        },
        ..BenchConfig::default()
    }
}

/// 10 images x 3 models x 2 lengths = 60 captions, trained and scored twice
/// (the second scoring pass runs against a warm cache).
pub async fn run(root: &Path) -> E2e {
    let start = Instant::now();
    let c = corpus(&CorpusSpec {
        n_images: 10,
        models: planted_models(3),
        jitter: 0.05,
        seed: 4,
    });
    let images = root.join("data");
    write_images(&images, &c.captions, 4).unwrap();
    let ratings = simulate_ratings(&c, &RatingSim { seed: 4, ..RatingSim::default() });
    let mos = mos_pipeline(&ratings).unwrap().entries;
    let cfg = config(root);

    let gw = Arc::new(Gateway::from_config(&cfg.gateway).unwrap());
    let trained = run_train(&cfg, &gw, &c.captions, &mos, &images, &root.join("run")).await.unwrap();
    let scores = run_score(&gw, &c.captions, &images, &trained.checkpoint, &root.join("run")).await.unwrap();
    let cold_calls = gw.backend_calls();

    let warm = Arc::new(Gateway::from_config(&cfg.gateway).unwrap());
    let again = run_score(&warm, &c.captions, &images, &trained.checkpoint, &root.join("run")).await.unwrap();
    assert_eq!(again, scores);
    E2e {
        captions: c.captions,
        mos,
        trained,
        scores,
        cold_calls,
        warm_calls: warm.backend_calls(),
        elapsed: start.elapsed(),
        images,
        cfg,
    }
}
