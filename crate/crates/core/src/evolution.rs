//! Online calibration from task feedback, and insertion of new experiences.
//!
//! Collected experiences share the feedback by rank: credit decays
//! geometrically with collection order. Edges between collected experiences
//! share it by the product of their endpoint credits. Quality moves and is
//! clipped to `[0, 1]`; edges accumulate an unclipped offset `phi` on top of
//! their construction prior, and the weight used downstream is the clipped sum.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::construction::{parse_entities_and_edges, ConstructionError};
use crate::graph::{ExperienceNode, GraphError, MemoryGraph};
use crate::model::{validate_experience, Experience, ExperienceId};
use crate::providers::{ChatProvider, EmbeddingProvider, ProviderError};
use crate::retrieval::RetrievalTrace;
use crate::similarity::{EdgeBuildError, EdgeBuildReport, EdgeBuilder};

/// How feedback turns into the edge weight used for traversal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `clip(w_prior + phi)`: the prior is kept, `phi` carries the history.
    #[default]
    PriorPlusOffset,
    /// `W <- clip(W + phi)` every update, compounding the accumulated offset.
    Recurrence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub eta_q: f64,
    pub eta_w: f64,
    pub rho: f64,
    pub weight_rule: WeightRule,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self { eta_q: 0.1, eta_w: 0.05, rho: 0.8, weight_rule: WeightRule::PriorPlusOffset }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.eta_q > 0.0) || !(self.eta_w > 0.0) {
            return Err(EvolutionError::Precondition(format!(
                "need 0 < rho < 1 and positive learning rates (got rho {}, eta_q {}, eta_w {})",
                self.rho, self.eta_q, self.eta_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Construction(#[from] ConstructionError),
    #[error(transparent)]
    Edges(#[from] EdgeBuildError),
}

/// Feedback for one task: the signal and the experiences it applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub task_id: String,
    pub delta: f64,
    /// Collected experiences in rank order.
    pub collected: Vec<ExperienceId>,
}

impl FeedbackEvent {
    pub fn new(task_id: impl Into<String>, delta: f64, collected: Vec<ExperienceId>) -> Self {
        Self { task_id: task_id.into(), delta, collected }
    }

    pub fn from_trace(task_id: impl Into<String>, delta: f64, trace: &RetrievalTrace) -> Self {
        Self::new(task_id, delta, trace.collected.clone())
    }
}

/// `+1` for a correct answer, `-1` otherwise.
pub fn delta_from_outcome(correct: bool) -> f64 {
    if correct {
        1.0
    } else {
        -1.0
    }
}

/// `a_i = rho^r_i / sum_j rho^r_j`.
pub fn node_credits(
    ranks: &BTreeMap<ExperienceId, usize>,
    rho: f64,
) -> Result<BTreeMap<ExperienceId, f64>, EvolutionError> {
    if ranks.is_empty() {
        return Err(EvolutionError::Precondition("no ranked experiences to credit".into()));
    }
    let distinct: BTreeSet<usize> = ranks.values().copied().collect();
    if distinct.len() != ranks.len() {
        return Err(EvolutionError::Precondition("ranks must be distinct".into()));
    }
    let raw: Vec<(ExperienceId, f64)> = ranks.iter().map(|(id, r)| (id.clone(), rho.powi(*r as i32))).collect();
    let total: f64 = raw.iter().map(|(_, x)| x).sum();
    Ok(raw.into_iter().map(|(id, x)| (id, x / total)).collect())
}

/// `b_ij = a_i a_j / sum over induced edges of a_k a_l`; empty when there are no edges.
pub fn edge_credits(
    a: &BTreeMap<ExperienceId, f64>,
    induced: &BTreeSet<(ExperienceId, ExperienceId)>,
) -> Result<BTreeMap<(ExperienceId, ExperienceId), f64>, EvolutionError> {
    let mut products = BTreeMap::new();
    for (s, d) in induced {
        let (Some(x), Some(y)) = (a.get(s), a.get(d)) else {
            return Err(EvolutionError::Precondition(format!("edge {s} -> {d} has an endpoint without credit")));
        };
        products.insert((s.clone(), d.clone()), x * y);
    }
    let total: f64 = products.values().sum();
    Ok(products.into_iter().map(|(k, p)| (k, p / total)).collect())
}

/// Existing edges whose endpoints were both collected.
pub fn induced_edges(g: &MemoryGraph, collected: &[ExperienceId]) -> BTreeSet<(ExperienceId, ExperienceId)> {
    let set: BTreeSet<&ExperienceId> = collected.iter().collect();
    collected
        .iter()
        .flat_map(|s| g.out_edges(s).filter(|e| set.contains(&e.dst)).map(|e| (e.src.clone(), e.dst.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeUpdate {
    pub id: ExperienceId,
    pub q_before: f64,
    pub q_after: f64,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeUpdate {
    pub src: ExperienceId,
    pub dst: ExperienceId,
    pub phi_before: f64,
    pub phi_after: f64,
    pub w_before: f64,
    pub w_after: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub task_id: String,
    pub delta: f64,
    /// Episode counter after the update.
    pub episode: u64,
    /// In rank order.
    pub node_updates: Vec<NodeUpdate>,
    /// In `(src, dst)` order.
    pub edge_updates: Vec<EdgeUpdate>,
}

impl UpdateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Applies one feedback event. Either every update lands or none does.
pub fn apply_feedback(
    g: &mut MemoryGraph,
    event: &FeedbackEvent,
    cfg: &EvolutionConfig,
) -> Result<UpdateReport, EvolutionError> {
    cfg.validate()?;
    if !(-1.0..=1.0).contains(&event.delta) {
        return Err(EvolutionError::Precondition(format!("delta {} outside [-1,1]", event.delta)));
    }
    // validate everything before touching the graph
    let mut ranks = BTreeMap::new();
    for (r, id) in event.collected.iter().enumerate() {
        if !g.contains(id) {
            return Err(GraphError::UnknownNode(id.clone()).into());
        }
        if ranks.insert(id.clone(), r).is_some() {
            return Err(EvolutionError::Precondition(format!("{id} collected twice")));
        }
    }
    let mut node_updates = Vec::new();
    let mut edge_updates = Vec::new();
    if !ranks.is_empty() {
        let a = node_credits(&ranks, cfg.rho)?;
        let b = edge_credits(&a, &induced_edges(g, &event.collected))?;
        for id in &event.collected {
            let q_before = g.node(id).expect("checked").experience.quality;
            let q_after = (q_before + cfg.eta_q * a[id] * event.delta).clamp(0.0, 1.0);
            node_updates.push(NodeUpdate { id: id.clone(), q_before, q_after, a: a[id] });
        }
        for ((s, d), bij) in &b {
            let e = g.edge(s, d).expect("induced edges exist");
            let phi_after = e.phi + cfg.eta_w * bij * event.delta;
            let w_before = e.effective_weight();
            let w_after = match cfg.weight_rule {
                WeightRule::PriorPlusOffset => crate::graph::effective_weight(e.w_prior, phi_after),
                WeightRule::Recurrence => (e.w_current.unwrap_or(e.w_prior) + phi_after).clamp(0.0, 1.0),
            };
            edge_updates.push(EdgeUpdate {
                src: s.clone(),
                dst: d.clone(),
                phi_before: e.phi,
                phi_after,
                w_before,
                w_after,
                b: *bij,
            });
        }
    }
    for u in &node_updates {
        g.set_quality(&u.id, u.q_after)?;
    }
    for u in &edge_updates {
        let e = g.edge_mut(&u.src, &u.dst).expect("induced edges exist");
        e.phi = u.phi_after;
        if cfg.weight_rule == WeightRule::Recurrence {
            e.w_current = Some(u.w_after);
        }
    }
    g.bump_episode();
    Ok(UpdateReport {
        task_id: event.task_id.clone(),
        delta: event.delta,
        episode: g.episode_counter(),
        node_updates,
        edge_updates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsertReport {
    pub id: ExperienceId,
    pub entities: usize,
    pub role_edges: usize,
    pub edges: EdgeBuildReport,
}

/// Adds a new experience with quality `q0` and connects it to the graph with
/// the construction-time scoring. Entity statistics include the new node
/// before any pair is scored. On error the graph is left as it was.
pub fn insert_experience(
    g: &mut MemoryGraph,
    mut e: Experience,
    q0: f64,
    chat: &dyn ChatProvider,
    embed: &dyn EmbeddingProvider,
    builder: &EdgeBuilder,
) -> Result<InsertReport, EvolutionError> {
    if g.contains(&e.id) {
        return Err(GraphError::DuplicateNode(e.id).into());
    }
    e.quality = q0;
    e.created_at = g.episode_counter();
    let violations = validate_experience(&e);
    if !violations.is_empty() {
        return Err(ConstructionError::Invalid(violations).into());
    }
    let (entities, role_edges) = parse_entities_and_edges(&e, chat)?;
    let mut node = ExperienceNode::new(e);
    node.embedding = Some(embed.embed_one(&node.indexed_text())?);
    node.core_entities = entities;
    node.role_edges = role_edges;
    let id = node.id().clone();
    let report = InsertReport {
        id: id.clone(),
        entities: node.core_entities.len(),
        role_edges: node.role_edges.len(),
        edges: EdgeBuildReport::default(),
    };

    let mut next = g.clone();
    next.add_node(node)?;
    let edges = if next.doc_count() > 1 { builder.connect(&mut next, &id, chat)? } else { EdgeBuildReport::default() };
    *g = next;
    Ok(InsertReport { edges, ..report })
}
