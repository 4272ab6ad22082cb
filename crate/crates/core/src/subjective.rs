//! Raw rating screening and MOS computation.
//!
//! Order of operations is fixed: outlier detection per (caption, dimension)
//! group, subject screening per (subject, dimension), z-scoring of the
//! surviving ratings with per-(subject, dimension) parameters, and finally
//! the per-caption mean mapped from z-space onto [0, 100].
//!
//! All standard deviations are population (divide by n) deviations.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dimension;
use crate::jsonl::{self, JsonlError};

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;
/// Subjects whose screened ratings vary less than this cannot be z-scored.
pub const DEGENERATE_STDDEV: f64 = 1e-6;
/// Kurtosis window treated as normally distributed.
pub const NORMAL_KURTOSIS: (f64, f64) = (2.0, 4.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rating_id: String,
    pub subject_id: String,
    pub caption_id: String,
    pub dimension: Dimension,
    pub score: f64,
    pub session_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub subject_id: String,
    pub dimension: Dimension,
    pub mean: f64,
    pub stddev: f64,
    pub n_ratings: usize,
    pub n_outliers: usize,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub caption_id: String,
    pub dimension: Dimension,
    pub mos: f64,
    pub z_mean: f64,
    pub n_valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedPair {
    pub caption_id: String,
    pub dimension: Dimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub subjects: Vec<SubjectStats>,
    pub removed_rating_ids: Vec<String>,
    pub removed_fraction: f64,
    #[serde(default)]
    pub omitted: Vec<OmittedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosOutput {
    pub entries: Vec<MosEntry>,
    pub report: ScreeningReport,
}

#[derive(Debug, thiserror::Error)]
pub enum RatingsError {
    #[error("no ratings")]
    Empty,
    #[error("rating {id}: score {score} outside [1, 5]")]
    ScoreRange { id: String, score: f64 },
    #[error("duplicate rating_id {0:?}")]
    DuplicateId(String),
    #[error("subject {subject} rated caption {caption} on {dimension} more than once")]
    DuplicateRating {
        subject: String,
        caption: String,
        dimension: Dimension,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

pub fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>, RatingsError> {
    let ratings: Vec<RatingRecord> = jsonl::read(path)?;
    validate_ratings(&ratings)?;
    Ok(ratings)
}

pub fn validate_ratings(ratings: &[RatingRecord]) -> Result<(), RatingsError> {
    let mut ids = HashSet::new();
    let mut triples = HashSet::new();
    for r in ratings {
        if !(SCORE_MIN..=SCORE_MAX).contains(&r.score) {
            return Err(RatingsError::ScoreRange {
                id: r.rating_id.clone(),
                score: r.score,
            });
        }
        if !ids.insert(r.rating_id.as_str()) {
            return Err(RatingsError::DuplicateId(r.rating_id.clone()));
        }
        if !triples.insert((r.subject_id.as_str(), r.caption_id.as_str(), r.dimension)) {
            return Err(RatingsError::DuplicateRating {
                subject: r.subject_id.clone(),
                caption: r.caption_id.clone(),
                dimension: r.dimension,
            });
        }
    }
    Ok(())
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson kurtosis m4 / m2^2 (3 for a normal distribution). `None` when m2 = 0.
pub fn kurtosis(xs: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return None;
    }
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Some(m4 / (m2 * m2))
}

/// Rejection multiplier for a group: 2 when the scores look normal, sqrt(20) otherwise.
pub fn rejection_width(xs: &[f64]) -> f64 {
    match kurtosis(xs) {
        Some(b2) if (NORMAL_KURTOSIS.0..=NORMAL_KURTOSIS.1).contains(&b2) => 2.0,
        _ => 20f64.sqrt(),
    }
}

type GroupKey<'a> = (&'a str, Dimension);

fn group_by_caption(ratings: &[RatingRecord]) -> BTreeMap<GroupKey<'_>, Vec<&RatingRecord>> {
    let mut groups: BTreeMap<GroupKey<'_>, Vec<&RatingRecord>> = BTreeMap::new();
    for r in ratings {
        groups.entry((r.caption_id.as_str(), r.dimension)).or_default().push(r);
    }
    groups
}

/// Flag ratings farther than k standard deviations from their group mean.
/// Groups with fewer than two ratings are skipped.
pub fn detect_outliers(ratings: &[RatingRecord]) -> BTreeSet<String> {
    let mut flagged = BTreeSet::new();
    for ((caption, dim), group) in group_by_caption(ratings) {
        if group.len() < 2 {
            tracing::warn!(caption, dimension = %dim, "group has fewer than 2 ratings; outlier test skipped");
            continue;
        }
        let scores: Vec<f64> = group.iter().map(|r| r.score).collect();
        let (m, s) = mean_std(&scores);
        let bound = rejection_width(&scores) * s;
        for r in group {
            if (r.score - m).abs() > bound {
                flagged.insert(r.rating_id.clone());
            }
        }
    }
    flagged
}

/// Per (subject, dimension) screening. A subject-dimension is excluded when
/// more than 5% of its ratings are outliers or its screened ratings have no spread.
pub fn screen_subjects(ratings: &[RatingRecord], outliers: &BTreeSet<String>) -> Vec<SubjectStats> {
    let mut by_subject: BTreeMap<(&str, Dimension), Vec<&RatingRecord>> = BTreeMap::new();
    for r in ratings {
        by_subject.entry((r.subject_id.as_str(), r.dimension)).or_default().push(r);
    }
    by_subject
        .into_iter()
        .map(|((subject, dim), rs)| {
            let n_ratings = rs.len();
            let kept: Vec<f64> = rs
                .iter()
                .filter(|r| !outliers.contains(&r.rating_id))
                .map(|r| r.score)
                .collect();
            let n_outliers = n_ratings - kept.len();
            let (mean, stddev) = if kept.is_empty() {
                tracing::warn!(subject, dimension = %dim, "no ratings left after outlier removal");
                (0.0, 0.0)
            } else {
                mean_std(&kept)
            };
            // n_outliers / n_ratings > 1/20, kept in integers so 5/100 is not excluded
            let too_many = n_outliers * 20 > n_ratings;
            SubjectStats {
                subject_id: subject.to_string(),
                dimension: dim,
                mean,
                stddev,
                n_ratings,
                n_outliers,
                excluded: too_many || stddev < DEGENERATE_STDDEV,
            }
        })
        .collect()
}

/// Map a mean z-score onto the [0, 100] MOS scale.
pub fn z_to_mos(z: f64) -> f64 {
    (100.0 * (z + 3.0) / 6.0).clamp(0.0, 100.0)
}

pub fn mos_pipeline(ratings: &[RatingRecord]) -> Result<MosOutput, RatingsError> {
    if ratings.is_empty() {
        return Err(RatingsError::Empty);
    }
    let outliers = detect_outliers(ratings);
    let subjects = screen_subjects(ratings, &outliers);
    let params: BTreeMap<(&str, Dimension), &SubjectStats> = subjects
        .iter()
        .filter(|s| !s.excluded)
        .map(|s| ((s.subject_id.as_str(), s.dimension), s))
        .collect();

    let mut removed = Vec::new();
    let mut z_by_pair: BTreeMap<GroupKey<'_>, Vec<f64>> = BTreeMap::new();
    for r in ratings {
        z_by_pair.entry((r.caption_id.as_str(), r.dimension)).or_default();
        let stats = params.get(&(r.subject_id.as_str(), r.dimension));
        match stats {
            Some(st) if !outliers.contains(&r.rating_id) => {
                let z = (r.score - st.mean) / st.stddev;
                z_by_pair.get_mut(&(r.caption_id.as_str(), r.dimension)).unwrap().push(z);
            }
            _ => removed.push(r.rating_id.clone()),
        }
    }
    removed.sort();

    let mut entries = Vec::new();
    let mut omitted = Vec::new();
    for ((caption, dim), zs) in z_by_pair {
        if zs.is_empty() {
            tracing::warn!(caption, dimension = %dim, "no valid ratings; MOS omitted");
            omitted.push(OmittedPair {
                caption_id: caption.to_string(),
                dimension: dim,
            });
            continue;
        }
        let z_mean = zs.iter().sum::<f64>() / zs.len() as f64;
        entries.push(MosEntry {
            caption_id: caption.to_string(),
            dimension: dim,
            mos: z_to_mos(z_mean),
            z_mean,
            n_valid: zs.len(),
        });
    }

    let removed_fraction = removed.len() as f64 / ratings.len() as f64;
    Ok(MosOutput {
        entries,
        report: ScreeningReport {
            subjects,
            removed_rating_ids: removed,
            removed_fraction,
            omitted,
        },
    })
}

pub fn load_mos(path: &Path) -> Result<Vec<MosEntry>, JsonlError> {
    jsonl::read(path)
}
