//! Multi-seed traversal under a shared step budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::policy::{ActionPolicy, PolicyView};
use super::recall::Candidate;
use super::{RetrievalConfig, RetrievalError};
use crate::graph::{GraphError, MemoryGraph};
use crate::model::ExperienceId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "snake_case")]
pub enum Action {
    Collect,
    Explore(ExperienceId),
    Backtrack(ExperienceId),
    Stop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Collect => write!(f, "COLLECT"),
            Action::Explore(id) => write!(f, "EXPLORE {id}"),
            Action::Backtrack(id) => write!(f, "BACKTRACK {id}"),
            Action::Stop => write!(f, "STOP"),
        }
    }
}

/// A neighbor offered to the policy, with its association score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offer {
    pub id: ExperienceId,
    pub score: f64,
}

/// Unvisited out-neighbors scored by the mean of edge weight and target
/// quality, best first, ties by id, at most `k_n`.
pub fn forward_candidates(
    g: &MemoryGraph,
    position: &ExperienceId,
    visited: &BTreeSet<ExperienceId>,
    k_n: usize,
) -> Result<Vec<Offer>, GraphError> {
    if !g.contains(position) {
        return Err(GraphError::UnknownNode(position.clone()));
    }
    let mut out: Vec<Offer> = g
        .out_edges(position)
        .filter(|e| !visited.contains(&e.dst))
        .map(|e| {
            let q = g.node(&e.dst).expect("edge endpoint exists").experience.quality;
            Offer { id: e.dst.clone(), score: 0.5 * (e.effective_weight() + q) }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    out.truncate(k_n);
    Ok(out)
}

/// One decision in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Index of the seed path that acted.
    pub path: usize,
    pub position: ExperienceId,
    pub forward: Vec<Offer>,
    pub backtrack: Vec<Offer>,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub query: String,
    /// Entities extracted from the query (empty when raw words were used).
    pub query_entities: Vec<String>,
    pub sparse_fallback: bool,
    pub seeds: Vec<ExperienceId>,
    pub seed_candidates: Vec<Candidate>,
    pub steps: Vec<TraceStep>,
    /// Collection order; an experience's rank is its index here.
    pub collected: Vec<ExperienceId>,
    pub steps_used: usize,
}

impl RetrievalTrace {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn rank_of(&self, id: &ExperienceId) -> Option<usize> {
        self.collected.iter().position(|c| c == id)
    }
}

struct SeedPath {
    position: ExperienceId,
    /// Positions between the seed and the current one, seed first.
    ancestors: Vec<ExperienceId>,
    entry_score: f64,
    done: bool,
}

/// Best offer per id from the forward lists of every ancestor.
fn backtrack_candidates(
    g: &MemoryGraph,
    ancestors: &[ExperienceId],
    visited: &BTreeSet<ExperienceId>,
    k_n: usize,
) -> Result<Vec<(Offer, usize)>, GraphError> {
    let mut best: BTreeMap<ExperienceId, (f64, usize)> = BTreeMap::new();
    for (depth, a) in ancestors.iter().enumerate() {
        for o in forward_candidates(g, a, visited, k_n)? {
            let slot = best.entry(o.id).or_insert((f64::NEG_INFINITY, depth));
            if o.score > slot.0 {
                *slot = (o.score, depth);
            }
        }
    }
    let mut out: Vec<(Offer, usize)> =
        best.into_iter().map(|(id, (score, depth))| (Offer { id, score }, depth)).collect();
    out.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then_with(|| a.0.id.cmp(&b.0.id)));
    Ok(out)
}

/// Walks from every seed at once, one action per path in turn, until all
/// paths stop or `t_max` actions have been taken in total.
///
/// Seeds start visited and can be collected where they stand. A repeated
/// Collect is a step that changes nothing.
pub fn traverse(
    g: &MemoryGraph,
    query: &str,
    seeds: &[Candidate],
    policy: &dyn ActionPolicy,
    cfg: &RetrievalConfig,
) -> Result<RetrievalTrace, RetrievalError> {
    if seeds.is_empty() {
        return Err(RetrievalError::Precondition("traversal needs at least one seed".into()));
    }
    for s in seeds {
        if !g.contains(&s.id) {
            return Err(GraphError::UnknownNode(s.id.clone()).into());
        }
    }
    let mut visited: BTreeSet<ExperienceId> = seeds.iter().map(|s| s.id.clone()).collect();
    let mut paths: Vec<SeedPath> = seeds
        .iter()
        .map(|s| SeedPath { position: s.id.clone(), ancestors: Vec::new(), entry_score: s.rerank_score, done: false })
        .collect();
    let mut collected: Vec<ExperienceId> = Vec::new();
    let mut steps = Vec::new();

    'outer: while paths.iter().any(|p| !p.done) {
        for (pi, path) in paths.iter_mut().enumerate() {
            if path.done {
                continue;
            }
            if steps.len() >= cfg.t_max {
                break 'outer;
            }
            let forward = forward_candidates(g, &path.position, &visited, cfg.k_neighbors)?;
            let backtrack = backtrack_candidates(g, &path.ancestors, &visited, cfg.k_neighbors)?;
            let backtrack_offers: Vec<Offer> = backtrack.iter().map(|(o, _)| o.clone()).collect();
            let position = path.position.clone();
            let node = g.node(&position).expect("positions exist");
            let view = PolicyView {
                query,
                position: &position,
                condition: &node.experience.condition,
                entry_score: path.entry_score,
                is_collected: collected.contains(&position),
                forward: &forward,
                backtrack: &backtrack_offers,
            };
            let action = policy.decide(g, &view);
            let step = steps.len();
            match &action {
                Action::Collect => {
                    if !collected.contains(&path.position) {
                        collected.push(path.position.clone());
                    }
                }
                Action::Stop => path.done = true,
                Action::Explore(target) => {
                    let Some(o) = forward.iter().find(|o| &o.id == target) else {
                        return Err(RetrievalError::IllegalAction { step, action: action.clone(), reason: "not a forward candidate" });
                    };
                    path.ancestors.push(std::mem::replace(&mut path.position, target.clone()));
                    path.entry_score = o.score;
                    visited.insert(target.clone());
                }
                Action::Backtrack(target) => {
                    let Some((o, depth)) = backtrack.iter().find(|(o, _)| &o.id == target) else {
                        return Err(RetrievalError::IllegalAction {
                            step,
                            action: action.clone(),
                            reason: "not a backtrack candidate",
                        });
                    };
                    path.ancestors.truncate(depth + 1);
                    path.position = target.clone();
                    path.entry_score = o.score;
                    visited.insert(target.clone());
                }
            }
            steps.push(TraceStep {
                step,
                path: pi,
                position,
                forward,
                backtrack: backtrack_offers,
                action,
            });
        }
    }
    let steps_used = steps.len();
    Ok(RetrievalTrace {
        query: query.to_string(),
        query_entities: Vec::new(),
        sparse_fallback: false,
        seeds: seeds.iter().map(|s| s.id.clone()).collect(),
        seed_candidates: seeds.to_vec(),
        steps,
        collected,
        steps_used,
    })
}
