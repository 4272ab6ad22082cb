//! Annotation study state: sessions, qualification, task assignment and
//! rating intake, backed by an append-only JSONL journal.
//!
//! Every mutation is written to the journal and synced before it is applied
//! in memory, so whatever a client saw acknowledged survives a restart. The
//! whole store sits behind one mutex, which makes assignment and submission
//! linearizable per caption.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use icbench_core::api::{
    AnnotationTask, CaptionProgress, Progress, QualificationAnswer, QualificationResult, RatingSubmission, SessionInfo,
    SessionStatus,
};
use icbench_core::dataset::{CaptionSample, Dimension};
use icbench_core::subjective::{RatingRecord, SCORE_MAX, SCORE_MIN};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;

/// Inclusive range of scores counted as a correct qualification answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBand {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationItem {
    pub caption_id: String,
    pub bands: BTreeMap<Dimension, ScoreBand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub target_per_caption: usize,
    pub session_minutes: i64,
    pub qualification_threshold: f64,
    /// Answer key for the pre-test. Empty means every subject qualifies.
    pub qualification: Vec<QualificationItem>,
    /// Seeds the per-subject presentation order.
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            target_per_caption: 15,
            session_minutes: 30,
            qualification_threshold: 0.8,
            qualification: Vec::new(),
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self, StudyError> {
        let text = std::fs::read_to_string(path).map_err(|e| StudyError::Journal(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| StudyError::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Session(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("journal: {0}")]
    Journal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Session {
        session_id: String,
        subject_id: String,
        started_at: i64,
    },
    Qualification {
        session_id: String,
        accuracy: f64,
        passed: bool,
    },
    Assigned {
        task_id: String,
        session_id: String,
        caption_id: String,
    },
    /// A task that never got a rating before its session ended gives its slot back.
    Released { task_id: String },
    Rating {
        task_id: String,
        #[serde(flatten)]
        rating: RatingRecord,
    },
    Closed { session_id: String },
}

#[derive(Debug, Clone)]
struct Session {
    subject_id: String,
    started_at: i64,
    closed: bool,
    qualified: bool,
}

#[derive(Debug, Clone)]
struct Task {
    caption: usize,
    session_id: String,
    subject_id: String,
    released: bool,
}

struct State {
    captions: Vec<CaptionSample>,
    by_id: HashMap<String, usize>,
    sessions: HashMap<String, Session>,
    passed_subjects: HashSet<String>,
    tasks: HashMap<String, Task>,
    /// Tasks without ratings, candidates for release.
    unrated: HashSet<String>,
    seen: HashSet<(String, usize)>,
    slots: Vec<usize>,
    counts: Vec<BTreeMap<Dimension, usize>>,
    rated: HashSet<(String, usize, Dimension)>,
    ratings: Vec<RatingRecord>,
    order_keys: HashMap<String, Vec<u64>>,
    n_tasks: u64,
}

pub struct Study {
    cfg: StudyConfig,
    clock: Arc<dyn Clock>,
    journal_path: PathBuf,
    inner: Mutex<(State, File)>,
}

fn journal_err(path: &Path) -> impl Fn(io::Error) -> StudyError + '_ {
    move |e| StudyError::Journal(format!("{}: {e}", path.display()))
}

impl Study {
    /// Open a study over `captions`, replaying `journal` if it exists.
    pub fn open(
        cfg: StudyConfig,
        captions: Vec<CaptionSample>,
        journal: &Path,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StudyError> {
        if cfg.target_per_caption == 0 {
            return Err(StudyError::Validation("target_per_caption must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.qualification_threshold) {
            return Err(StudyError::Validation("qualification_threshold must be in [0, 1]".into()));
        }
        let n = captions.len();
        let by_id: HashMap<String, usize> = captions.iter().enumerate().map(|(i, c)| (c.caption_id.clone(), i)).collect();
        if by_id.len() != n {
            return Err(StudyError::Validation("duplicate caption ids".into()));
        }
        let mut state = State {
            captions,
            by_id,
            sessions: HashMap::new(),
            passed_subjects: HashSet::new(),
            tasks: HashMap::new(),
            unrated: HashSet::new(),
            seen: HashSet::new(),
            slots: vec![0; n],
            counts: vec![BTreeMap::new(); n],
            rated: HashSet::new(),
            ratings: Vec::new(),
            order_keys: HashMap::new(),
            n_tasks: 0,
        };

        let mut torn_at = None;
        if journal.exists() {
            let text = std::fs::read_to_string(journal).map_err(journal_err(journal))?;
            let mut offset = 0usize;
            for (i, line) in text.split_inclusive('\n').enumerate() {
                if !line.ends_with('\n') {
                    // a torn final write was never acknowledged
                    tracing::warn!(line = i + 1, "dropping incomplete final journal line");
                    torn_at = Some(offset as u64);
                    break;
                }
                offset += line.len();
                if line.trim().is_empty() {
                    continue;
                }
                let ev: Event = serde_json::from_str(line)
                    .map_err(|e| StudyError::Journal(format!("{} line {}: {e}", journal.display(), i + 1)))?;
                state.apply(ev);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(journal)
            .map_err(journal_err(journal))?;
        if let Some(len) = torn_at {
            file.set_len(len).map_err(journal_err(journal))?;
        }
        Ok(Self {
            cfg,
            clock,
            journal_path: journal.to_path_buf(),
            inner: Mutex::new((state, file)),
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    fn limit_secs(&self) -> i64 {
        self.cfg.session_minutes * 60
    }

    fn commit(&self, state: &mut State, file: &mut File, ev: Event) -> Result<(), StudyError> {
        let mut line = serde_json::to_string(&ev).map_err(|e| StudyError::Journal(e.to_string()))?;
        line.push('\n');
        let err = journal_err(&self.journal_path);
        file.write_all(line.as_bytes()).map_err(&err)?;
        file.sync_data().map_err(&err)?;
        state.apply(ev);
        Ok(())
    }

    fn status(&self, s: &Session, now: i64) -> SessionStatus {
        if s.closed {
            SessionStatus::Closed
        } else if now - s.started_at > self.limit_secs() {
            SessionStatus::Expired
        } else {
            SessionStatus::Active
        }
    }

    fn info(&self, id: &str, s: &Session, now: i64) -> SessionInfo {
        SessionInfo {
            session_id: id.to_string(),
            subject_id: s.subject_id.clone(),
            started_at: s.started_at,
            expires_at: s.started_at + self.limit_secs(),
            status: self.status(s, now),
            qualified: s.qualified,
        }
    }

    fn active<'a>(&self, state: &'a State, session_id: &str, now: i64) -> Result<&'a Session, StudyError> {
        let s = state
            .sessions
            .get(session_id)
            .ok_or_else(|| StudyError::Session(format!("unknown session {session_id:?}")))?;
        match self.status(s, now) {
            SessionStatus::Active => Ok(s),
            SessionStatus::Expired => Err(StudyError::Session(format!("session {session_id} has expired"))),
            SessionStatus::Closed => Err(StudyError::Session(format!("session {session_id} is closed"))),
        }
    }

    pub fn create_session(&self, subject_id: &str) -> Result<SessionInfo, StudyError> {
        let subject_id = subject_id.trim();
        if subject_id.is_empty() {
            return Err(StudyError::Validation("subject_id must not be empty".into()));
        }
        let now = self.clock.now();
        let session_id = uuid::Uuid::new_v4().to_string();
        let mut guard = self.inner.lock();
        let (state, file) = &mut *guard;
        self.commit(
            state,
            file,
            Event::Session {
                session_id: session_id.clone(),
                subject_id: subject_id.to_string(),
                started_at: now,
            },
        )?;
        Ok(self.info(&session_id, &state.sessions[&session_id], now))
    }

    pub fn session(&self, session_id: &str) -> Result<SessionInfo, StudyError> {
        let now = self.clock.now();
        let guard = self.inner.lock();
        let s = guard
            .0
            .sessions
            .get(session_id)
            .ok_or_else(|| StudyError::NotFound(format!("unknown session {session_id:?}")))?;
        Ok(self.info(session_id, s, now))
    }

    pub fn close_session(&self, session_id: &str) -> Result<SessionInfo, StudyError> {
        let now = self.clock.now();
        let mut guard = self.inner.lock();
        let (state, file) = &mut *guard;
        let s = state
            .sessions
            .get(session_id)
            .ok_or_else(|| StudyError::NotFound(format!("unknown session {session_id:?}")))?;
        if !s.closed {
            self.commit(
                state,
                file,
                Event::Closed {
                    session_id: session_id.to_string(),
                },
            )?;
        }
        Ok(self.info(session_id, &state.sessions[session_id], now))
    }

    /// Score the pre-test: the fraction of keyed (caption, dimension) items
    /// answered inside their band. Unanswered items count as wrong.
    pub fn qualify(&self, session_id: &str, answers: &[QualificationAnswer]) -> Result<QualificationResult, StudyError> {
        for a in answers {
            if !a.score.is_finite() {
                return Err(StudyError::Validation(format!("answer for {} is not a number", a.caption_id)));
            }
        }
        let given: HashMap<(&str, Dimension), f64> =
            answers.iter().map(|a| ((a.caption_id.as_str(), a.dimension), a.score)).collect();
        let mut total = 0usize;
        let mut correct = 0usize;
        for item in &self.cfg.qualification {
            for (d, band) in &item.bands {
                total += 1;
                if given
                    .get(&(item.caption_id.as_str(), *d))
                    .is_some_and(|v| (band.min..=band.max).contains(v))
                {
                    correct += 1;
                }
            }
        }
        let accuracy = if total == 0 { 1.0 } else { correct as f64 / total as f64 };
        let passed = accuracy >= self.cfg.qualification_threshold;

        let now = self.clock.now();
        let mut guard = self.inner.lock();
        let (state, file) = &mut *guard;
        let subject_id = self.active(state, session_id, now)?.subject_id.clone();
        self.commit(
            state,
            file,
            Event::Qualification {
                session_id: session_id.to_string(),
                accuracy,
                passed,
            },
        )?;
        Ok(QualificationResult {
            subject_id,
            accuracy,
            threshold: self.cfg.qualification_threshold,
            passed,
        })
    }

    /// Next caption for this session's subject: never one they have seen,
    /// fewest held slots first, ties in the subject's own random order.
    pub fn next_task(&self, session_id: &str) -> Result<Option<AnnotationTask>, StudyError> {
        let now = self.clock.now();
        let mut guard = self.inner.lock();
        let (state, file) = &mut *guard;
        let session = self.active(state, session_id, now)?;
        if !session.qualified {
            return Err(StudyError::Session(format!("session {session_id} has not passed qualification")));
        }
        let subject = session.subject_id.clone();
        self.release_stale(state, file, now)?;

        let seed = self.cfg.seed;
        let n = state.captions.len();
        let captions = &state.captions;
        let keys = state
            .order_keys
            .entry(subject.clone())
            .or_insert_with_key(|s| captions.iter().map(|c| order_key(seed, s, &c.caption_id)).collect());
        let target = self.cfg.target_per_caption;
        let pick = (0..n)
            .filter(|&i| state.slots[i] < target && !state.seen.contains(&(subject.clone(), i)))
            .min_by_key(|&i| (state.slots[i], keys[i], i));
        let Some(caption) = pick else {
            return Ok(None);
        };
        let task_id = format!("t-{:06}", state.n_tasks + 1);
        self.commit(
            state,
            file,
            Event::Assigned {
                task_id: task_id.clone(),
                session_id: session_id.to_string(),
                caption_id: state.captions[caption].caption_id.clone(),
            },
        )?;
        Ok(Some(state.task_view(&task_id)))
    }

    fn release_stale(&self, state: &mut State, file: &mut File, now: i64) -> Result<(), StudyError> {
        let mut stale: Vec<String> = state
            .unrated
            .iter()
            .filter(|t| {
                let s = &state.sessions[&state.tasks[*t].session_id];
                self.status(s, now) != SessionStatus::Active
            })
            .cloned()
            .collect();
        stale.sort();
        for task_id in stale {
            self.commit(state, file, Event::Released { task_id })?;
        }
        Ok(())
    }

    pub fn submit(&self, sub: &RatingSubmission) -> Result<RatingRecord, StudyError> {
        if !(SCORE_MIN..=SCORE_MAX).contains(&sub.score) {
            return Err(StudyError::Validation(format!(
                "score {} outside [{SCORE_MIN}, {SCORE_MAX}]",
                sub.score
            )));
        }
        let now = self.clock.now();
        let mut guard = self.inner.lock();
        let (state, file) = &mut *guard;
        let subject = self.active(state, &sub.session_id, now)?.subject_id.clone();
        let task = state
            .tasks
            .get(&sub.task_id)
            .ok_or_else(|| StudyError::NotFound(format!("unknown task {:?}", sub.task_id)))?;
        if task.subject_id != subject {
            return Err(StudyError::Session(format!("task {} is not assigned to {subject}", sub.task_id)));
        }
        if task.released {
            return Err(StudyError::Session(format!("task {} was released when its session ended", sub.task_id)));
        }
        let caption = task.caption;
        let c = &state.captions[caption];
        if !c.length_class.allows(sub.dimension) {
            return Err(StudyError::Validation(format!(
                "{} is not rated on {} captions",
                sub.dimension, c.length_class
            )));
        }
        if state.rated.contains(&(subject.clone(), caption, sub.dimension)) {
            return Err(StudyError::Conflict(format!(
                "{subject} already rated {} on {}",
                c.caption_id, sub.dimension
            )));
        }
        let rating = RatingRecord {
            rating_id: format!("r-{:08}", state.ratings.len() + 1),
            subject_id: subject,
            caption_id: c.caption_id.clone(),
            dimension: sub.dimension,
            score: sub.score,
            session_id: sub.session_id.clone(),
            timestamp: now,
        };
        self.commit(
            state,
            file,
            Event::Rating {
                task_id: sub.task_id.clone(),
                rating: rating.clone(),
            },
        )?;
        Ok(rating)
    }

    /// All acknowledged ratings ordered by (timestamp, rating_id).
    pub fn export(&self) -> Vec<RatingRecord> {
        let mut out = self.inner.lock().0.ratings.clone();
        out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.rating_id.cmp(&b.rating_id)));
        out
    }

    pub fn progress(&self) -> Progress {
        let guard = self.inner.lock();
        let state = &guard.0;
        let target = self.cfg.target_per_caption;
        let captions: Vec<CaptionProgress> = state
            .captions
            .iter()
            .enumerate()
            .map(|(i, c)| CaptionProgress {
                caption_id: c.caption_id.clone(),
                assigned: state.slots[i],
                ratings: c
                    .length_class
                    .dimensions()
                    .iter()
                    .map(|d| (*d, state.counts[i].get(d).copied().unwrap_or(0)))
                    .collect(),
            })
            .collect();
        Progress {
            target,
            total_ratings: state.ratings.len(),
            complete: captions.iter().all(|c| c.ratings.values().all(|&n| n >= target)),
            captions,
        }
    }
}

impl State {
    fn apply(&mut self, ev: Event) {
        match ev {
            Event::Session {
                session_id,
                subject_id,
                started_at,
            } => {
                let qualified = self.passed_subjects.contains(&subject_id);
                self.sessions.insert(
                    session_id,
                    Session {
                        subject_id,
                        started_at,
                        closed: false,
                        qualified,
                    },
                );
            }
            Event::Qualification { session_id, passed, .. } => {
                if let Some(s) = self.sessions.get_mut(&session_id) {
                    if passed {
                        s.qualified = true;
                        self.passed_subjects.insert(s.subject_id.clone());
                    }
                }
            }
            Event::Assigned {
                task_id,
                session_id,
                caption_id,
            } => {
                let Some(&caption) = self.by_id.get(&caption_id) else {
                    tracing::warn!(%caption_id, "journal names a caption missing from the study");
                    return;
                };
                let Some(subject_id) = self.sessions.get(&session_id).map(|s| s.subject_id.clone()) else {
                    tracing::warn!(%session_id, "journal assigns a task to an unknown session");
                    return;
                };
                self.seen.insert((subject_id.clone(), caption));
                self.slots[caption] += 1;
                self.unrated.insert(task_id.clone());
                self.n_tasks += 1;
                self.tasks.insert(
                    task_id,
                    Task {
                        caption,
                        session_id,
                        subject_id,
                        released: false,
                    },
                );
            }
            Event::Released { task_id } => {
                if let Some(t) = self.tasks.get_mut(&task_id) {
                    t.released = true;
                    self.slots[t.caption] -= 1;
                    self.unrated.remove(&task_id);
                }
            }
            Event::Rating { task_id, rating } => {
                if let Some(t) = self.tasks.get_mut(&task_id) {
                    self.unrated.remove(&task_id);
                    *self.counts[t.caption].entry(rating.dimension).or_default() += 1;
                    self.rated.insert((rating.subject_id.clone(), t.caption, rating.dimension));
                }
                self.ratings.push(rating);
            }
            Event::Closed { session_id } => {
                if let Some(s) = self.sessions.get_mut(&session_id) {
                    s.closed = true;
                }
            }
        }
    }

    fn task_view(&self, task_id: &str) -> AnnotationTask {
        let t = &self.tasks[task_id];
        let c = &self.captions[t.caption];
        AnnotationTask {
            task_id: task_id.to_string(),
            caption_id: c.caption_id.clone(),
            image_ref: c.image_ref.clone(),
            text: c.text.clone(),
            length_class: c.length_class,
            dimensions: c.length_class.dimensions().to_vec(),
            assigned_to: t.subject_id.clone(),
        }
    }
}

fn order_key(seed: u64, subject: &str, caption_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(subject.as_bytes());
    h.update([0]);
    h.update(caption_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
