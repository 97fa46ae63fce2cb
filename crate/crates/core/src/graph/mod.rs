//! The dual-layer memory graph.
//!
//! The experience layer holds nodes (experience + decision entities + optional
//! embedding) and directed weighted edges. The entity layer is an index from
//! normalized entity surface to the experiences that mention it; it is derived
//! from the nodes and kept consistent on every insertion, together with the
//! document frequencies used for TF-IDF.

mod snapshot;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{validate_experience, Entity, EntityRole, Experience, ExperienceId, RoleEdge};
use crate::providers::EmbeddingVector;
use crate::similarity::EdgeScoreBreakdown;

pub use snapshot::{load_snapshot, save_snapshot, GraphSnapshot, SnapshotError, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("experience {0} already exists")]
    DuplicateNode(ExperienceId),
    #[error("unknown experience {0}")]
    UnknownNode(ExperienceId),
    #[error("edge {src} -> {dst} references a missing endpoint")]
    MissingEndpoint { src: ExperienceId, dst: ExperienceId },
    #[error("edge {src} -> {dst} already exists")]
    DuplicateEdge { src: ExperienceId, dst: ExperienceId },
    #[error("invalid node {id}: {reason}")]
    InvalidNode { id: ExperienceId, reason: String },
    #[error("invalid edge {src} -> {dst}: {reason}")]
    InvalidEdge { src: ExperienceId, dst: ExperienceId, reason: String },
}

/// Entity-layer node: a surface and the experiences linked to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityNode {
    pub surface: String,
    /// Every role this surface was given across linked experiences.
    pub roles: BTreeSet<EntityRole>,
    pub linked_experiences: BTreeSet<ExperienceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceNode {
    pub experience: Experience,
    pub core_entities: Vec<Entity>,
    pub role_edges: Vec<RoleEdge>,
    pub embedding: Option<EmbeddingVector>,
}

impl ExperienceNode {
    pub fn new(experience: Experience) -> Self {
        Self { experience, core_entities: Vec::new(), role_edges: Vec::new(), embedding: None }
    }

    pub fn id(&self) -> &ExperienceId {
        &self.experience.id
    }

    /// Text used for dense indexing and deduplication: condition, newline, content.
    pub fn indexed_text(&self) -> String {
        indexed_text(&self.experience.condition, &self.experience.content)
    }

    /// Entity term frequencies by surface.
    pub fn term_frequencies(&self) -> BTreeMap<&str, usize> {
        let mut tf = BTreeMap::new();
        for e in &self.core_entities {
            *tf.entry(e.surface.as_str()).or_insert(0) += 1;
        }
        tf
    }

    fn check(&self) -> Result<(), String> {
        let violations = validate_experience(&self.experience);
        if !violations.is_empty() {
            let msgs: Vec<_> = violations.iter().map(ToString::to_string).collect();
            return Err(msgs.join("; "));
        }
        for edge in &self.role_edges {
            for end in [&edge.from_entity, &edge.to_entity] {
                if !self.core_entities.contains(end) {
                    return Err(format!("role edge endpoint {:?} is not a core entity", end.surface));
                }
            }
        }
        if let Some(emb) = &self.embedding {
            if (emb.norm() - 1.0).abs() > 1e-6 {
                return Err(format!("embedding norm {} is not 1", emb.norm()));
            }
        }
        Ok(())
    }
}

pub fn indexed_text(condition: &str, content: &str) -> String {
    format!("{condition}\n{content}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceEdge {
    pub src: ExperienceId,
    pub dst: ExperienceId,
    /// Construction-time prior weight.
    pub w_prior: f64,
    /// Accumulated feedback; stored unclipped.
    pub phi: f64,
    pub breakdown: EdgeScoreBreakdown,
    /// Only set under the literal recurrence weight rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_current: Option<f64>,
}

impl ExperienceEdge {
    pub fn new(src: ExperienceId, dst: ExperienceId, breakdown: EdgeScoreBreakdown) -> Self {
        Self { src, dst, w_prior: breakdown.combined, phi: 0.0, breakdown, w_current: None }
    }

    /// `clip(w_prior + phi, 0, 1)`.
    pub fn effective_weight(&self) -> f64 {
        match self.w_current {
            Some(w) => w.clamp(0.0, 1.0),
            None => effective_weight(self.w_prior, self.phi),
        }
    }
}

pub fn effective_weight(w_prior: f64, phi: f64) -> f64 {
    (w_prior + phi).clamp(0.0, 1.0)
}

/// Corpus statistics for TF-IDF: experience count and entity document frequencies.
#[derive(Debug, Clone, Copy)]
pub struct CorpusStats<'a> {
    pub doc_count: usize,
    pub df: &'a BTreeMap<String, usize>,
}

impl CorpusStats<'_> {
    pub fn df(&self, surface: &str) -> usize {
        self.df.get(surface).copied().unwrap_or(0)
    }

    /// `ln((N + 1) / (df + 1)) + 1`.
    pub fn idf(&self, surface: &str) -> f64 {
        ((self.doc_count as f64 + 1.0) / (self.df(surface) as f64 + 1.0)).ln() + 1.0
    }
}

type EdgeKey = (ExperienceId, ExperienceId);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryGraph {
    nodes: BTreeMap<ExperienceId, ExperienceNode>,
    edges: BTreeMap<EdgeKey, ExperienceEdge>,
    entity_index: BTreeMap<String, EntityNode>,
    entity_df: BTreeMap<String, usize>,
    episode_counter: u64,
}

impl MemoryGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn doc_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn episode_counter(&self) -> u64 {
        self.episode_counter
    }

    pub fn set_episode_counter(&mut self, value: u64) {
        self.episode_counter = value;
    }

    pub(crate) fn bump_episode(&mut self) {
        self.episode_counter += 1;
    }

    pub fn stats(&self) -> CorpusStats<'_> {
        CorpusStats { doc_count: self.nodes.len(), df: &self.entity_df }
    }

    pub fn entity_df(&self, surface: &str) -> usize {
        self.entity_df.get(surface).copied().unwrap_or(0)
    }

    pub fn entity_index(&self) -> &BTreeMap<String, EntityNode> {
        &self.entity_index
    }

    pub fn node(&self, id: &ExperienceId) -> Option<&ExperienceNode> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &ExperienceId) -> bool {
        self.nodes.contains_key(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &ExperienceNode> {
        self.nodes.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ExperienceId> {
        self.nodes.keys()
    }

    /// Edges in `(src, dst)` order.
    pub fn edges(&self) -> impl Iterator<Item = &ExperienceEdge> {
        self.edges.values()
    }

    pub fn edge(&self, src: &ExperienceId, dst: &ExperienceId) -> Option<&ExperienceEdge> {
        self.edges.get(&(src.clone(), dst.clone()))
    }

    pub fn has_edge(&self, src: &ExperienceId, dst: &ExperienceId) -> bool {
        self.edge(src, dst).is_some()
    }

    pub(crate) fn edge_mut(&mut self, src: &ExperienceId, dst: &ExperienceId) -> Option<&mut ExperienceEdge> {
        self.edges.get_mut(&(src.clone(), dst.clone()))
    }

    pub(crate) fn set_quality(&mut self, id: &ExperienceId, quality: f64) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(id).ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
        node.experience.quality = quality;
        Ok(())
    }

    pub fn add_node(&mut self, node: ExperienceNode) -> Result<(), GraphError> {
        let id = node.id().clone();
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        node.check().map_err(|reason| GraphError::InvalidNode { id: id.clone(), reason })?;
        let surfaces: BTreeSet<&str> = node.core_entities.iter().map(|e| e.surface.as_str()).collect();
        for surface in surfaces {
            *self.entity_df.entry(surface.to_string()).or_insert(0) += 1;
        }
        for e in &node.core_entities {
            let entry = self.entity_index.entry(e.surface.clone()).or_insert_with(|| EntityNode {
                surface: e.surface.clone(),
                roles: BTreeSet::new(),
                linked_experiences: BTreeSet::new(),
            });
            entry.roles.insert(e.role);
            entry.linked_experiences.insert(id.clone());
        }
        self.nodes.insert(id, node);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: ExperienceEdge) -> Result<(), GraphError> {
        let (src, dst) = (edge.src.clone(), edge.dst.clone());
        if !self.nodes.contains_key(&src) || !self.nodes.contains_key(&dst) {
            return Err(GraphError::MissingEndpoint { src, dst });
        }
        if src == dst {
            return Err(GraphError::InvalidEdge { src, dst, reason: "self-loop".into() });
        }
        if !(0.0..=1.0).contains(&edge.w_prior) || !edge.phi.is_finite() {
            return Err(GraphError::InvalidEdge { src, dst, reason: "w_prior outside [0,1] or phi not finite".into() });
        }
        let key = (src, dst);
        if self.edges.contains_key(&key) {
            return Err(GraphError::DuplicateEdge { src: key.0, dst: key.1 });
        }
        self.edges.insert(key, edge);
        Ok(())
    }

    /// Out-edges of `id` in `(dst)` order.
    pub fn out_edges<'a>(&'a self, id: &ExperienceId) -> impl Iterator<Item = &'a ExperienceEdge> + 'a {
        let id = id.clone();
        self.edges
            .range((id.clone(), ExperienceId::new(""))..)
            .take_while(move |((s, _), _)| *s == id)
            .map(|(_, e)| e)
    }

    /// Out-neighbors with effective weight, heaviest first, ties by id.
    pub fn neighbors(&self, id: &ExperienceId) -> Result<Vec<(ExperienceId, f64)>, GraphError> {
        if !self.nodes.contains_key(id) {
            return Err(GraphError::UnknownNode(id.clone()));
        }
        let mut out: Vec<_> = self.out_edges(id).map(|e| (e.dst.clone(), e.effective_weight())).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }
}
