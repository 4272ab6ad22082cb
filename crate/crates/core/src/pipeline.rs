//! Split, reconstruct, extract, train and score stages.
//!
//! Each stage is usable on its own (the CLI exposes them as subcommands);
//! [`run_train`] and [`run_score`] chain them.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

use crate::dataset::{split_dataset, CaptionSample, DatasetError, Dimension, Split, SplitPlan, DEFAULT_CATEGORIES};
use crate::gateway::{content_key, FeatureRequest, FeatureVector, Gateway, GatewayConfig, GatewayError, GenerationRequest};
use crate::head::{
    head_forward, read_checkpoint, train, write_checkpoint, CheckpointError, Conditioning, DimensionTargets, FeatureSet,
    HeadError, TrainConfig, TrainError, TrainOutcome, TrainingSample,
};
use crate::jsonl::{self, JsonlError};
use crate::report::ScoreRecord;
use crate::subjective::MosEntry;

pub const CHECKPOINT_FILE: &str = "head.itih";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SPLITS_FILE: &str = "splits.jsonl";
pub const RECON_DIR: &str = "recon";

/// Everything a run needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub gateway: GatewayConfig,
    pub train: TrainConfig,
    pub split_ratios: [u32; 3],
    pub split_seed: u64,
    pub categories: Vec<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            gateway: GatewayConfig::default(),
            train: TrainConfig::default(),
            split_ratios: [4, 1, 1],
            split_seed: 0,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint expects d_H = {checkpoint}, gateway is configured for {config}")]
    FeatureDimMismatch { checkpoint: usize, config: usize },
    #[error("missing features for caption {caption_id} ({dimension})")]
    MissingFeatures { caption_id: String, dimension: Dimension },
    #[error("no training captions have complete MOS targets")]
    NoTargets,
    #[error("worker task failed: {0}")]
    Join(String),
}

/// Where the reconstruction of `sample` lives under `dir`.
pub fn recon_path(dir: &Path, sample: &CaptionSample) -> PathBuf {
    let safe: String = sample
        .caption_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    let tag = &content_key(&[sample.caption_id.as_bytes()])[..8];
    dir.join(format!("{safe}-{tag}.img"))
}

/// Reconstruct every caption, returning caption id to image path.
pub async fn reconstruct_all(
    gw: &Arc<Gateway>,
    samples: &[CaptionSample],
    recon_dir: &Path,
) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let mut set = JoinSet::new();
    for s in samples {
        let gw = Arc::clone(gw);
        let req = GenerationRequest {
            caption_id: s.caption_id.clone(),
            text: s.text.clone(),
            output_ref: recon_path(recon_dir, s),
        };
        set.spawn(async move {
            let r = gw.reconstruct(&req).await;
            (req.caption_id, r)
        });
    }
    let mut out = BTreeMap::new();
    while let Some(joined) = set.join_next().await {
        let (id, r) = joined.map_err(|e| PipelineError::Join(e.to_string()))?;
        out.insert(id, r?);
    }
    Ok(out)
}

/// Extract features for every caption and applicable dimension.
///
/// Under one-hot conditioning a single dimension-free feature is extracted
/// per caption and repeated for each of its dimensions.
pub async fn extract_all(
    gw: &Arc<Gateway>,
    samples: &[CaptionSample],
    images_root: &Path,
    recon: &BTreeMap<String, PathBuf>,
    conditioning: Conditioning,
) -> Result<Vec<FeatureVector>, PipelineError> {
    let mut set = JoinSet::new();
    for (idx, s) in samples.iter().enumerate() {
        let recon_ref = recon
            .get(&s.caption_id)
            .cloned()
            .ok_or_else(|| PipelineError::MissingFeatures {
                caption_id: s.caption_id.clone(),
                dimension: s.length_class.dimensions()[0],
            })?;
        let dims = s.length_class.dimensions();
        let reqs: Vec<FeatureRequest> = match conditioning {
            Conditioning::Instruction => dims
                .iter()
                .map(|&d| FeatureRequest::for_caption(s, d, images_root, recon_ref.clone(), gw.templates()))
                .collect::<Result<_, _>>()?,
            Conditioning::OneHot => vec![FeatureRequest {
                caption_id: s.caption_id.clone(),
                dimension: dims[0],
                image_ref: images_root.join(&s.image_ref),
                recon_ref,
                text: s.text.clone(),
                instruction: gw.templates().render_shared(s.length_class),
            }],
        };
        for req in reqs {
            let gw = Arc::clone(gw);
            set.spawn(async move { (idx, gw.extract_features(&req).await) });
        }
    }
    let mut got: Vec<(usize, FeatureVector)> = Vec::new();
    while let Some(joined) = set.join_next().await {
        let (idx, r) = joined.map_err(|e| PipelineError::Join(e.to_string()))?;
        let fv = r?;
        match conditioning {
            Conditioning::Instruction => got.push((idx, fv)),
            Conditioning::OneHot => {
                for &d in samples[idx].length_class.dimensions() {
                    got.push((
                        idx,
                        FeatureVector {
                            dimension: d,
                            ..fv.clone()
                        },
                    ));
                }
            }
        }
    }
    // Completion order is arbitrary; restore input order.
    got.sort_by_key(|(idx, fv)| (*idx, fv.dimension));
    Ok(got.into_iter().map(|(_, fv)| fv).collect())
}

/// Group feature vectors into one [`FeatureSet`] per caption, checking that
/// every caption has every dimension its length class requires.
pub fn feature_sets(
    samples: &[CaptionSample],
    features: &[FeatureVector],
) -> Result<BTreeMap<String, FeatureSet>, PipelineError> {
    let mut by_caption: HashMap<&str, FeatureSet> = HashMap::new();
    for f in features {
        by_caption
            .entry(f.caption_id.as_str())
            .or_default()
            .insert(f.dimension, f.values.clone());
    }
    let mut out = BTreeMap::new();
    for s in samples {
        let set = by_caption.remove(s.caption_id.as_str()).unwrap_or_default();
        for &d in s.length_class.dimensions() {
            if !set.contains_key(&d) {
                return Err(PipelineError::MissingFeatures {
                    caption_id: s.caption_id.clone(),
                    dimension: d,
                });
            }
        }
        out.insert(s.caption_id.clone(), set);
    }
    Ok(out)
}

/// MOS/100 targets for captions whose every applicable dimension has a MOS.
pub fn targets_from_mos(samples: &[CaptionSample], mos: &[MosEntry]) -> BTreeMap<String, DimensionTargets> {
    let mut by_pair: HashMap<(&str, Dimension), f64> = HashMap::new();
    for m in mos {
        by_pair.insert((m.caption_id.as_str(), m.dimension), m.mos / 100.0);
    }
    samples
        .iter()
        .filter_map(|s| {
            let scores: Option<BTreeMap<Dimension, f64>> = s
                .length_class
                .dimensions()
                .iter()
                .map(|&d| by_pair.get(&(s.caption_id.as_str(), d)).map(|&v| (d, v)))
                .collect();
            Some((
                s.caption_id.clone(),
                DimensionTargets {
                    caption_id: s.caption_id.clone(),
                    scores: scores?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub plan: SplitPlan,
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub splits_path: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
}

/// Split, reconstruct and extract the train and validation captions, then
/// train a head and write the checkpoint, log and split file into `out_dir`.
pub async fn run_train(
    cfg: &BenchConfig,
    gw: &Arc<Gateway>,
    captions: &[CaptionSample],
    mos: &[MosEntry],
    images_root: &Path,
    out_dir: &Path,
) -> Result<TrainArtifacts, PipelineError> {
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|source| PipelineError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    mkdir(out_dir)?;
    let plan = split_dataset(captions, cfg.split_ratios, cfg.split_seed)?;
    let splits_path = out_dir.join(SPLITS_FILE);
    jsonl::write(&splits_path, &plan.assignments)?;

    let split_of: HashMap<&str, Split> = plan.assignments.iter().map(|a| (a.caption_id.as_str(), a.split)).collect();
    let split_of = |id: &str| split_of.get(id).copied();
    let targets = targets_from_mos(captions, mos);
    let members: Vec<CaptionSample> = captions
        .iter()
        .filter(|c| split_of(&c.caption_id) != Some(Split::Test) && targets.contains_key(&c.caption_id))
        .cloned()
        .collect();
    if members.is_empty() {
        return Err(PipelineError::NoTargets);
    }
    let skipped = captions
        .iter()
        .filter(|c| split_of(&c.caption_id) != Some(Split::Test) && !targets.contains_key(&c.caption_id))
        .count();
    if skipped > 0 {
        tracing::warn!(skipped, "train/val captions without complete MOS were skipped");
    }

    let recon_dir = out_dir.join(RECON_DIR);
    mkdir(&recon_dir)?;
    let recon = reconstruct_all(gw, &members, &recon_dir).await?;
    let feats = extract_all(gw, &members, images_root, &recon, cfg.train.conditioning).await?;
    let sets = feature_sets(&members, &feats)?;

    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    for c in &members {
        let sample = TrainingSample {
            features: sets[&c.caption_id].clone(),
            targets: targets[&c.caption_id].clone(),
        };
        match split_of(&c.caption_id) {
            Some(Split::Train) => train_set.push(sample),
            _ => val_set.push(sample),
        }
    }
    let outcome = train(&train_set, &val_set, &cfg.train)?;

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint, &outcome.params, Some(&cfg.train))?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    jsonl::write(&log_path, &outcome.log)?;
    Ok(TrainArtifacts {
        plan,
        n_train: train_set.len(),
        n_val: val_set.len(),
        outcome,
        checkpoint,
        log_path,
        splits_path,
    })
}

/// Score captions with a trained head. Means and deviations are reported on
/// the [0, 100] scale.
pub async fn run_score(
    gw: &Arc<Gateway>,
    captions: &[CaptionSample],
    images_root: &Path,
    checkpoint: &Path,
    work_dir: &Path,
) -> Result<Vec<ScoreRecord>, PipelineError> {
    if !checkpoint.is_file() {
        return Err(PipelineError::MissingCheckpoint(checkpoint.to_path_buf()));
    }
    let (params, _meta) = read_checkpoint(checkpoint)?;
    let shape = params.shape();
    if shape.feature_dim != gw.feature_dim() {
        return Err(PipelineError::FeatureDimMismatch {
            checkpoint: shape.feature_dim,
            config: gw.feature_dim(),
        });
    }
    let recon_dir = work_dir.join(RECON_DIR);
    std::fs::create_dir_all(&recon_dir).map_err(|source| PipelineError::Io {
        path: recon_dir.clone(),
        source,
    })?;
    let recon = reconstruct_all(gw, captions, &recon_dir).await?;
    let feats = extract_all(gw, captions, images_root, &recon, shape.conditioning).await?;
    let sets = feature_sets(captions, &feats)?;

    let mut out = Vec::new();
    for c in captions {
        let pred = head_forward(&params, &sets[&c.caption_id])?;
        for d in &pred.dims {
            out.push(ScoreRecord {
                caption_id: c.caption_id.clone(),
                dimension: d.dimension,
                mu: 100.0 * d.mu,
                sigma: 100.0 * d.sigma,
                mu_agg: 100.0 * pred.mu_agg,
                sigma_agg: 100.0 * pred.sigma_agg,
            });
        }
    }
    Ok(out)
}
