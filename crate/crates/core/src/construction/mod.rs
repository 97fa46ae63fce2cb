//! Building the memory from historical cases.
//!
//! Per case: sample trajectories, distil indications from the successes and
//! one contraindication per failure (paired with its closest success). Then,
//! across cases: deduplicate, parse entity structure, run validation trials
//! for the initial quality, embed, and connect similar experiences.

mod erv;
mod extract;
mod sampling;
mod structure;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use erv::{erv_baseline, erv_quality, run_erv, ErvResult};
pub use extract::{
    analyze_divergence, case_info, deduplicate, extract_contraindication, extract_indications,
    pair_failure_with_success, Divergence, ExperienceDraft, ExperienceText, MAX_INDICATIONS,
};
pub use sampling::{
    answers_match, parse_solution, render_experiences, sample_trajectories, solve, solve_and_grade, SampleError,
    REPAIR_RETRIES,
};
pub use structure::{entities_from, parse_entities_and_edges, role_edges_from};

use crate::graph::{ExperienceNode, GraphError, MemoryGraph};
use crate::model::{CaseRecord, ExperienceId, Violation};
use crate::providers::{CallError, ChatProvider, EmbeddingProvider, ProviderError};
use crate::similarity::{EdgeBuildError, EdgeBuildReport, EdgeBuilder, SimilarityWeights, DEFAULT_THETA_EDGE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructionConfig {
    pub n_traj: usize,
    pub n_erv: usize,
    pub dedup_threshold: f64,
    pub theta_edge: f64,
    pub similarity_weights: SimilarityWeights,
    /// Seeds the choice of validation cases.
    pub erv_seed: u64,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        Self {
            n_traj: 5,
            n_erv: 5,
            dedup_threshold: 0.95,
            theta_edge: DEFAULT_THETA_EDGE,
            similarity_weights: SimilarityWeights::default(),
            erv_seed: 0,
        }
    }
}

impl ConstructionConfig {
    pub fn validate(&self) -> Result<(), ConstructionError> {
        let bad = |m: String| Err(ConstructionError::Precondition(m));
        if self.n_traj < 1 || self.n_erv < 1 {
            return bad(format!("n_traj and n_erv must be >= 1 (got {}, {})", self.n_traj, self.n_erv));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return bad(format!("dedup_threshold must be in (0,1] (got {})", self.dedup_threshold));
        }
        if !(0.0..=1.0).contains(&self.theta_edge) {
            return bad(format!("theta_edge must be in [0,1] (got {})", self.theta_edge));
        }
        self.similarity_weights.validate().map_err(|e| ConstructionError::Precondition(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConstructionError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{stage} failed: {source}")]
    Call { stage: &'static str, source: CallError },
    #[error(transparent)]
    Provider(ProviderError),
    #[error("extracted experience is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("validation trial {trial} of {id} failed: {source}")]
    Erv { id: ExperienceId, trial: usize, source: CallError },
    #[error("no experience survived construction ({} failures)", failures.len())]
    NoExperiences {
        failures: Vec<(String, String)>,
        /// Every failure was a model or network error.
        all_provider: bool,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Edges(#[from] EdgeBuildError),
}

impl ConstructionError {
    /// Whether the root cause is a model or network failure rather than bad data.
    pub fn is_provider_failure(&self) -> bool {
        fn call(c: &CallError) -> bool {
            matches!(c, CallError::Provider(_))
        }
        match self {
            Self::Call { source, .. } | Self::Erv { source, .. } => call(source),
            Self::Sample(s) => call(&s.source),
            Self::Provider(_) => true,
            Self::NoExperiences { failures, all_provider } => *all_provider && !failures.is_empty(),
            Self::Edges(EdgeBuildError::Provider { .. }) => true,
            _ => false,
        }
    }
}

/// What happened during [`build_memory`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    pub cases: usize,
    /// Cases with no successful trajectory.
    pub skipped_cases: Vec<String>,
    /// `(case or experience id, message)` for every recoverable failure.
    pub failures: Vec<(String, String)>,
    pub drafts: usize,
    pub removed_as_duplicates: usize,
    pub experiences: usize,
    pub erv: BTreeMap<ExperienceId, ErvResult>,
    pub pairs_scored: usize,
    pub edges: usize,
}

fn case_drafts(
    case: &CaseRecord,
    chat: &dyn ChatProvider,
    embed: &dyn EmbeddingProvider,
    cfg: &ConstructionConfig,
) -> Result<Option<Vec<ExperienceDraft>>, ConstructionError> {
    let trajectories = sample_trajectories(case, chat, cfg.n_traj)?;
    let (successes, failures): (Vec<_>, Vec<_>) = trajectories.into_iter().partition(|t| t.is_success());
    if successes.is_empty() {
        return Ok(None);
    }
    let mut drafts = extract_indications(case, &successes, chat)?;
    for failure in &failures {
        let success = pair_failure_with_success(failure, &successes, embed)?;
        let divergence = analyze_divergence(success, failure, &case.gold_answer, chat)?;
        drafts.push(extract_contraindication(case, &divergence, failure, success, chat)?);
    }
    Ok(Some(drafts))
}

/// Runs the whole construction pipeline over `cases`.
///
/// Failures confined to one case or one experience are recorded in the
/// report and skipped. The build aborts only when nothing survives or when
/// edge scoring loses its provider.
pub fn build_memory(
    cases: &[CaseRecord],
    chat: &dyn ChatProvider,
    embed: &dyn EmbeddingProvider,
    cfg: &ConstructionConfig,
) -> Result<(MemoryGraph, BuildReport), ConstructionError> {
    if cases.is_empty() {
        return Err(ConstructionError::Precondition("no cases to build from".into()));
    }
    cfg.validate()?;
    let mut seen = BTreeSet::new();
    if let Some(dup) = cases.iter().find(|c| !seen.insert(c.case_id.as_str())) {
        return Err(ConstructionError::Precondition(format!("duplicate case_id {}", dup.case_id)));
    }
    let mut ordered: Vec<&CaseRecord> = cases.iter().collect();
    ordered.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let mut report = BuildReport { cases: cases.len(), ..Default::default() };
    let mut drafts = Vec::new();
    let mut provider_failures = 0;
    for case in &ordered {
        match case_drafts(case, chat, embed, cfg) {
            Ok(Some(d)) => drafts.extend(d),
            Ok(None) => {
                log::warn!("case {}: no successful trajectory, skipped", case.case_id);
                report.skipped_cases.push(case.case_id.clone());
            }
            Err(e) => {
                log::warn!("case {}: {e}", case.case_id);
                provider_failures += usize::from(e.is_provider_failure());
                report.failures.push((case.case_id.clone(), e.to_string()));
            }
        }
    }
    report.drafts = drafts.len();
    let drafts = deduplicate(drafts, embed, cfg.dedup_threshold).map_err(ConstructionError::Provider)?;
    report.removed_as_duplicates = report.drafts - drafts.len();

    let mut nodes = Vec::new();
    for (i, draft) in drafts.into_iter().enumerate() {
        let source = draft.source_case.clone();
        let mut exp = draft.into_experience(ExperienceId::numbered(i + 1), 0.5, 0);
        let held_out: Vec<CaseRecord> = ordered.iter().filter(|c| c.case_id != source).map(|c| (*c).clone()).collect();
        let outcome = parse_entities_and_edges(&exp, chat).and_then(|structure| {
            let erv = run_erv(&exp, &held_out, chat, cfg.n_erv, cfg.erv_seed)?;
            Ok((structure, erv))
        });
        match outcome {
            Ok(((entities, edges), erv)) => {
                exp.quality = erv.q0;
                report.erv.insert(exp.id.clone(), erv);
                let mut node = ExperienceNode::new(exp);
                node.core_entities = entities;
                node.role_edges = edges;
                nodes.push(node);
            }
            Err(e) => {
                log::warn!("{}: {e}", exp.id);
                provider_failures += usize::from(e.is_provider_failure());
                report.failures.push((exp.id.to_string(), e.to_string()));
            }
        }
    }
    if nodes.is_empty() {
        let all_provider = provider_failures == report.failures.len();
        return Err(ConstructionError::NoExperiences { failures: report.failures, all_provider });
    }

    let texts: Vec<String> = nodes.iter().map(ExperienceNode::indexed_text).collect();
    let vectors = embed.embed(&texts).map_err(ConstructionError::Provider)?;
    let mut g = MemoryGraph::new();
    for (mut node, v) in nodes.into_iter().zip(vectors) {
        node.embedding = Some(v);
        g.add_node(node)?;
    }
    report.experiences = g.doc_count();

    if g.doc_count() >= 2 {
        let builder = EdgeBuilder::new(cfg.similarity_weights, cfg.theta_edge);
        let EdgeBuildReport { pairs_scored, edges_created } = builder.build(&mut g, chat)?;
        report.pairs_scored = pairs_scored;
        report.edges = edges_created;
    } else {
        log::warn!("only one experience; no edges to build");
    }
    Ok((g, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{HashEmbedder, ScriptRule, ScriptedChat};

    fn case(id: &str, gold: &str) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            prompt: format!("Patient {id} presents."),
            gold_answer: gold.into(),
            task_type: "diagnosis".into(),
            open_ended: false,
        }
    }

    fn cfg() -> ConstructionConfig {
        ConstructionConfig { n_traj: 2, n_erv: 1, ..Default::default() }
    }

    #[test]
    fn empty_cases_rejected() {
        let chat = ScriptedChat::queue(["x"]);
        assert!(matches!(
            build_memory(&[], &chat, &HashEmbedder, &cfg()),
            Err(ConstructionError::Precondition(_))
        ));
    }

    #[test]
    fn all_failed_case_is_skipped() {
        let chat = ScriptedChat::new(vec![ScriptRule::new("Patient c1", "Step 1: guess\nFinal answer: wrong")]);
        match build_memory(&[case("c1", "right")], &chat, &HashEmbedder, &cfg()) {
            Err(ConstructionError::NoExperiences { failures, .. }) => assert!(failures.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ConstructionConfig::default().validate().is_ok());
        assert!(ConstructionConfig { n_traj: 0, ..Default::default() }.validate().is_err());
        assert!(ConstructionConfig { dedup_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(ConstructionConfig { theta_edge: 1.5, ..Default::default() }.validate().is_err());
    }
}
