//! Query-time retrieval: hybrid seed recall, then policy-guided traversal.

mod policy;
mod recall;
mod traverse;

use serde::{Deserialize, Serialize};

pub use policy::{parse_action, ActionPolicy, GreedyPolicy, LlmPolicy, PolicyView, ScriptedPolicy};
pub use recall::{embedding_recall, entity_recall, entity_recall_terms, query_terms, rerank, Bm25, Candidate};
pub use traverse::{forward_candidates, traverse, Action, Offer, RetrievalTrace, TraceStep};

use crate::graph::{GraphError, MemoryGraph};
use crate::model::{Experience, ExperienceId};
use crate::providers::{ChatProvider, EmbeddingProvider, ProviderError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_seed: usize,
    pub k_neighbors: usize,
    pub t_max: usize,
    pub rerank_lambda: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// Entry score the greedy policy needs before it collects.
    pub collect_threshold: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_seed: 5,
            k_neighbors: 5,
            t_max: 60,
            rerank_lambda: 0.5,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            collect_threshold: 0.5,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k_seed < 1 || self.k_neighbors < 1 || self.t_max < 1 {
            return Err(RetrievalError::Precondition("k_seed, k_neighbors and t_max must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rerank_lambda) {
            return Err(RetrievalError::Precondition(format!("rerank_lambda {} outside [0,1]", self.rerank_lambda)));
        }
        if self.bm25_k1 < 0.0 || !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(RetrievalError::Precondition("bm25_k1 must be >= 0 and bm25_b in [0,1]".into()));
        }
        Ok(())
    }

    pub fn bm25(&self) -> Bm25 {
        Bm25 { k1: self.bm25_k1, b: self.bm25_b }
    }

    pub fn greedy(&self) -> GreedyPolicy {
        GreedyPolicy { collect_threshold: self.collect_threshold }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot retrieve from an empty graph")]
    EmptyGraph,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("experience {0} has no embedding")]
    MissingEmbedding(ExperienceId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("step {step}: illegal action {action} ({reason})")]
    IllegalAction { step: usize, action: Action, reason: &'static str },
}

/// Recall, rerank and traverse. Returns the collected experiences in rank
/// order with the full trace. An empty result is legal.
pub fn retrieve(
    g: &MemoryGraph,
    query: &str,
    chat: &dyn ChatProvider,
    embed: &dyn EmbeddingProvider,
    policy: &dyn ActionPolicy,
    cfg: &RetrievalConfig,
) -> Result<(Vec<Experience>, RetrievalTrace), RetrievalError> {
    if g.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    cfg.validate()?;
    let (terms, query_entities, fallback) = query_terms(query, chat);
    let sparse = entity_recall_terms(g, &terms, cfg.bm25(), cfg.k_seed);
    let dense = embedding_recall(g, query, embed, cfg.k_seed)?;
    let seeds = rerank(&sparse, &dense, cfg.rerank_lambda, cfg.k_seed);
    let mut trace = if seeds.is_empty() {
        RetrievalTrace {
            query: query.to_string(),
            query_entities: Vec::new(),
            sparse_fallback: false,
            seeds: Vec::new(),
            seed_candidates: Vec::new(),
            steps: Vec::new(),
            collected: Vec::new(),
            steps_used: 0,
        }
    } else {
        traverse(g, query, &seeds, policy, cfg)?
    };
    trace.query_entities = query_entities;
    trace.sparse_fallback = fallback;
    let experiences = trace
        .collected
        .iter()
        .map(|id| g.node(id).expect("collected from graph").experience.clone())
        .collect();
    Ok((experiences, trace))
}
