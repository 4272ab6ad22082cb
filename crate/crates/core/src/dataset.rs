//! Caption records, evaluation dimensions and the image-grouped dataset split.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

/// The twelve content categories used by the benchmark images.
pub const DEFAULT_CATEGORIES: [&str; 12] = [
    "portrait",
    "architecture",
    "landscape",
    "food",
    "art",
    "fashion",
    "drinks",
    "animals",
    "sports",
    "technology",
    "transportation",
    "indoor",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    Short,
    Long,
}

impl LengthClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LengthClass::Short => "short",
            LengthClass::Long => "long",
        }
    }

    /// Dimensions rated for captions of this length.
    pub fn dimensions(self) -> &'static [Dimension] {
        match self {
            LengthClass::Short => &[Dimension::Fluency, Dimension::Relevance, Dimension::Conciseness],
            LengthClass::Long => &[Dimension::Fluency, Dimension::Relevance, Dimension::Completeness],
        }
    }

    pub fn allows(self, dim: Dimension) -> bool {
        self.dimensions().contains(&dim)
    }
}

impl fmt::Display for LengthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(LengthClass::Short),
            "long" => Ok(LengthClass::Long),
            other => Err(format!("unknown length_class {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Fluency,
    Relevance,
    Conciseness,
    Completeness,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Fluency,
        Dimension::Relevance,
        Dimension::Conciseness,
        Dimension::Completeness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Fluency => "fluency",
            Dimension::Relevance => "relevance",
            Dimension::Conciseness => "conciseness",
            Dimension::Completeness => "completeness",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown dimension {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub caption_id: String,
    pub image_ref: String,
    pub model_id: String,
    pub category: String,
    pub length_class: LengthClass,
    pub text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate caption_id {0:?}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    Empty,
    #[error("split ratios must be positive integers, got {0:?}")]
    BadRatios([u32; 3]),
}

// Wire form; length_class stays a string so the error can name it.
#[derive(Deserialize)]
struct RawSample {
    caption_id: String,
    image_ref: String,
    model_id: String,
    category: String,
    length_class: String,
    text: String,
}

pub fn load_dataset(path: &Path) -> Result<Vec<CaptionSample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, &path.display().to_string(), &DEFAULT_CATEGORIES)
}

/// Parse and validate captions.jsonl content. Unknown categories only warn.
pub fn parse_dataset(
    text: &str,
    origin: &str,
    categories: &[&str],
) -> Result<Vec<CaptionSample>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line).map_err(|e| JsonlError::Parse {
            path: origin.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        let length_class = raw
            .length_class
            .parse::<LengthClass>()
            .map_err(|message| DatasetError::Invalid { line: line_no, message })?;
        if raw.text.trim().is_empty() {
            return Err(DatasetError::Invalid {
                line: line_no,
                message: format!("caption {:?} has empty text", raw.caption_id),
            });
        }
        if raw.caption_id.is_empty() {
            return Err(DatasetError::Invalid {
                line: line_no,
                message: "empty caption_id".into(),
            });
        }
        if !seen.insert(raw.caption_id.clone()) {
            return Err(DatasetError::DuplicateId(raw.caption_id));
        }
        if !categories.contains(&raw.category.as_str()) {
            tracing::warn!(line = line_no, category = %raw.category, "unknown category");
        }
        out.push(CaptionSample {
            caption_id: raw.caption_id,
            image_ref: raw.image_ref,
            model_id: raw.model_id,
            category: raw.category,
            length_class,
            text: raw.text,
        });
    }
    Ok(out)
}

pub fn dataset_to_string(samples: &[CaptionSample]) -> String {
    jsonl::to_string(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub caption_id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// One assignment per input sample, in input order.
    pub assignments: Vec<SplitAssignment>,
    /// Distinct images per split, indexed like [`Split::ALL`].
    pub image_counts: [usize; 3],
    pub warnings: Vec<String>,
}

impl SplitPlan {
    pub fn split_of(&self, caption_id: &str) -> Option<Split> {
        self.assignments
            .iter()
            .find(|a| a.caption_id == caption_id)
            .map(|a| a.split)
    }
}

/// Largest-remainder allocation of `n` groups to buckets weighted by `ratios`.
/// Remainder ties go to the earlier bucket.
pub fn allocate_counts(n: usize, ratios: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let mut counts = [0usize; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        let num = n as u64 * ratios[i] as u64;
        counts[i] = (num / total) as usize;
        rems[i] = num % total;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Split by distinct `image_ref` so no image straddles splits.
///
/// Images are sorted, shuffled with a seeded ChaCha8 stream, then cut into
/// contiguous runs sized by [`allocate_counts`]. The result depends only on
/// the set of samples and the seed, not on their order in the file.
pub fn split_dataset(
    samples: &[CaptionSample],
    ratios: [u32; 3],
    seed: u64,
) -> Result<SplitPlan, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    if ratios.contains(&0) {
        return Err(DatasetError::BadRatios(ratios));
    }
    let mut images: Vec<&str> = samples.iter().map(|s| s.image_ref.as_str()).collect();
    images.sort_unstable();
    images.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.shuffle(&mut rng);

    let counts = allocate_counts(images.len(), ratios);
    let mut by_image = BTreeMap::new();
    let mut cursor = 0;
    for (split, &count) in Split::ALL.iter().zip(counts.iter()) {
        for img in &images[cursor..cursor + count] {
            by_image.insert(*img, *split);
        }
        cursor += count;
    }

    let mut warnings = Vec::new();
    for (split, &count) in Split::ALL.iter().zip(counts.iter()) {
        if count == 0 {
            let msg = format!("{split:?} split is empty ({} images total)", images.len());
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let assignments = samples
        .iter()
        .map(|s| SplitAssignment {
            caption_id: s.caption_id.clone(),
            split: by_image[s.image_ref.as_str()],
            seed,
        })
        .collect();
    Ok(SplitPlan {
        assignments,
        image_counts: counts,
        warnings,
    })
}
