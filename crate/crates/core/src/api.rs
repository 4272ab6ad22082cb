//! Request and response bodies of the HTTP service, shared by server and client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionSample, Dimension, LengthClass};
use crate::leaderboard::{Leaderboard, RankAgreement};
use crate::report::{CorrelationTable, MetricScore};
use crate::subjective::{MosEntry, RatingRecord};

pub const SESSIONS_PATH: &str = "/api/sessions";
pub const QUALIFICATION_PATH: &str = "/api/qualification";
pub const NEXT_TASK_PATH: &str = "/api/tasks/next";
pub const RATINGS_PATH: &str = "/api/ratings";
pub const EXPORT_PATH: &str = "/api/export";
pub const PROGRESS_PATH: &str = "/api/progress";

pub const MOS_PATH: &str = "/v1/mos";
pub const REPORT_PATH: &str = "/v1/report";
pub const LEADERBOARD_PATH: &str = "/v1/leaderboard";
pub const SPLIT_PATH: &str = "/v1/split";
pub const HEALTH_PATH: &str = "/healthz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Session,
    NotFound,
    Conflict,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: ErrorKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub subject_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Expired,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub subject_id: String,
    /// UTC seconds.
    pub started_at: i64,
    pub expires_at: i64,
    pub status: SessionStatus,
    pub qualified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationAnswer {
    pub caption_id: String,
    pub dimension: Dimension,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationRequest {
    pub session_id: String,
    pub answers: Vec<QualificationAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationResult {
    pub subject_id: String,
    pub accuracy: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub caption_id: String,
    pub image_ref: String,
    pub text: String,
    pub length_class: LengthClass,
    pub dimensions: Vec<Dimension>,
    pub assigned_to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub session_id: String,
    pub task_id: String,
    pub dimension: Dimension,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionProgress {
    pub caption_id: String,
    /// Open or finished assignments holding a slot.
    pub assigned: usize,
    pub ratings: BTreeMap<Dimension, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub target: usize,
    pub total_ratings: usize,
    /// Every caption has `target` ratings on each of its dimensions.
    pub complete: bool,
    pub captions: Vec<CaptionProgress>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRequest {
    pub ratings: Vec<RatingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub scores: Vec<MetricScore>,
    pub mos: Vec<MosEntry>,
    #[serde(default)]
    pub captions: Option<Vec<CaptionSample>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub table: CorrelationTable,
    pub csv: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRequest {
    pub captions: Vec<CaptionSample>,
    #[serde(default)]
    pub mos: Option<Vec<MosEntry>>,
    #[serde(default)]
    pub scores: Option<Vec<MetricScore>>,
    #[serde(default)]
    pub subset: Option<LengthClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardResponse {
    pub human: Option<Leaderboard>,
    pub metric: Option<Leaderboard>,
    pub agreement: Option<RankAgreement>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRequest {
    pub captions: Vec<CaptionSample>,
    pub ratios: [u32; 3],
    pub seed: u64,
}

impl ReportRequest {
    pub fn run(&self) -> Result<ReportResponse, crate::report::ReportError> {
        let table = crate::report::correlation_table(&self.scores, &self.mos, self.captions.as_deref())?;
        Ok(ReportResponse {
            csv: table.to_csv(),
            text: table.to_text(),
            table,
        })
    }
}

impl LeaderboardRequest {
    /// Build whichever boards the inputs allow; with both, add the SRCC to human.
    pub fn run(&self) -> Result<LeaderboardResponse, crate::report::ReportError> {
        use crate::leaderboard::{comparison_text, srcc_to_human, Observation};

        let human = self
            .mos
            .as_ref()
            .map(|mos| {
                let obs = mos.iter().map(|m| Observation {
                    caption_id: &m.caption_id,
                    dimension: m.dimension,
                    value: m.mos,
                });
                Leaderboard::build(obs, &self.captions, self.subset)
            })
            .transpose()?;
        let metric = self
            .scores
            .as_ref()
            .map(|scores| {
                let obs = scores.iter().map(|s| Observation {
                    caption_id: &s.caption_id,
                    dimension: s.dimension,
                    value: s.score,
                });
                Leaderboard::build(obs, &self.captions, self.subset)
            })
            .transpose()?;
        let (agreement, text) = match (&human, &metric) {
            (Some(h), Some(m)) => {
                let a = srcc_to_human(h, m);
                let text = comparison_text(h, m, &a);
                (Some(a), text)
            }
            (Some(b), None) | (None, Some(b)) => (None, b.to_csv()),
            (None, None) => return Err(crate::report::ReportError::MissingInput),
        };
        Ok(LeaderboardResponse {
            human,
            metric,
            agreement,
            text,
        })
    }
}
