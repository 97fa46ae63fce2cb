//! One task episode end to end: retrieve, answer with the retrieved
//! experiences injected, grade, and feed the outcome back into the graph.
//!
//! Episodes are logged as JSON lines. Replaying a log's feedback events over
//! the starting snapshot reproduces the final snapshot exactly.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::construction::{answers_match, solve};
use crate::evolution::{apply_feedback, delta_from_outcome, EvolutionConfig, EvolutionError, FeedbackEvent, UpdateReport};
use crate::graph::{load_snapshot, save_snapshot, GraphSnapshot, MemoryGraph, SnapshotError};
use crate::model::{CaseRecord, ExperienceId};
use crate::providers::{CallError, ChatProvider, EmbeddingProvider, DETERMINISTIC_TEMPERATURE};
use crate::retrieval::{retrieve, ActionPolicy, RetrievalConfig, RetrievalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    /// Collected experiences in rank order.
    pub retrieved: Vec<ExperienceId>,
    pub answer: String,
    pub correct: bool,
    pub delta: f64,
    pub update: UpdateReport,
}

impl EpisodeRecord {
    pub fn feedback(&self) -> FeedbackEvent {
        FeedbackEvent::new(self.task_id.clone(), self.delta, self.retrieved.clone())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("retrieve: {0}")]
    Retrieve(#[from] RetrievalError),
    #[error("answer: {0}")]
    Answer(CallError),
    #[error("judge: {0}")]
    Judge(CallError),
    #[error("feedback: {0}")]
    Feedback(#[from] EvolutionError),
}

impl EpisodeError {
    pub fn stage(&self) -> &'static str {
        match self {
            EpisodeError::Retrieve(_) => "retrieve",
            EpisodeError::Answer(_) => "answer",
            EpisodeError::Judge(_) => "judge",
            EpisodeError::Feedback(_) => "feedback",
        }
    }

    /// True when the root cause is a model call that failed in transport.
    pub fn is_provider_failure(&self) -> bool {
        match self {
            EpisodeError::Retrieve(RetrievalError::Provider(_)) => true,
            EpisodeError::Answer(CallError::Provider(_)) | EpisodeError::Judge(CallError::Provider(_)) => true,
            _ => false,
        }
    }
}

/// Providers and settings for [`run_episode`].
pub struct EpisodeContext<'a> {
    pub chat: &'a dyn ChatProvider,
    pub embed: &'a dyn EmbeddingProvider,
    pub policy: &'a dyn ActionPolicy,
    pub retrieval: &'a RetrievalConfig,
    pub evolution: &'a EvolutionConfig,
}

/// Runs one episode on `g`. The graph changes only if every stage succeeds.
pub fn run_episode(g: &mut MemoryGraph, case: &CaseRecord, ctx: &EpisodeContext<'_>) -> Result<EpisodeRecord, EpisodeError> {
    let (experiences, trace) = retrieve(g, &case.prompt, ctx.chat, ctx.embed, ctx.policy, ctx.retrieval)?;
    let refs: Vec<_> = experiences.iter().collect();
    let attempt = solve(case, &refs, ctx.chat, DETERMINISTIC_TEMPERATURE, None).map_err(EpisodeError::Answer)?;
    let correct = answers_match(case, &attempt.final_answer, ctx.chat).map_err(EpisodeError::Judge)?;
    let delta = delta_from_outcome(correct);
    let event = FeedbackEvent::from_trace(case.case_id.clone(), delta, &trace);
    let update = apply_feedback(g, &event, ctx.evolution)?;
    Ok(EpisodeRecord {
        task_id: case.case_id.clone(),
        retrieved: trace.collected,
        answer: attempt.final_answer,
        correct,
        delta,
        update,
    })
}

/// Appends one record as a single JSON line.
pub fn append_record(log: &Path, record: &EpisodeRecord) -> io::Result<()> {
    let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(log)?;
    f.write_all(line.as_bytes())?;
    f.sync_all()
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("cannot read episode log: {0}")]
    Io(#[from] io::Error),
    #[error("episode log line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

pub fn read_log(log: &Path) -> Result<Vec<EpisodeRecord>, LogError> {
    let f = fs::File::open(log)?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("record {index} ({task_id}): {source}")]
    Apply { index: usize, task_id: String, source: EvolutionError },
    #[error("record {index} ({task_id}): recomputed update differs from the logged one")]
    Diverged { index: usize, task_id: String },
}

/// Re-applies every record's feedback, checking each recomputed update
/// against the logged report.
pub fn replay(g: &mut MemoryGraph, records: &[EpisodeRecord], cfg: &EvolutionConfig) -> Result<(), ReplayError> {
    for (index, r) in records.iter().enumerate() {
        let report = apply_feedback(g, &r.feedback(), cfg)
            .map_err(|source| ReplayError::Apply { index, task_id: r.task_id.clone(), source })?;
        if report != r.update {
            return Err(ReplayError::Diverged { index, task_id: r.task_id.clone() });
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Snapshot { path: PathBuf, source: SnapshotError },
}

pub fn read_snapshot(path: &Path) -> Result<MemoryGraph, StoreError> {
    let text = fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    load_snapshot(&GraphSnapshot::from_text(text)).map_err(|source| StoreError::Snapshot { path: path.to_path_buf(), source })
}

/// Writes to a sibling temporary file, then renames over `path`, so a
/// reader never sees a partial snapshot.
pub fn write_snapshot(path: &Path, g: &MemoryGraph) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io { path: path.to_path_buf(), source };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "snapshot".into());
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(save_snapshot(g).as_str().as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err)
}
