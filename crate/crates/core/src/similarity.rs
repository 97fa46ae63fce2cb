//! Edge-weight initialization between experiences.
//!
//! Four components, each in `[0, 1]`, are combined convexly:
//!
//! * entity overlap: cosine of TF-IDF entity vectors,
//! * reasoning structure: length-weighted Jaccard over role-edge paths,
//! * synergy: a model judgement of joint-use value,
//! * task match: 1 if the task types agree.
//!
//! A pair is connected (in both directions) when the combined score is
//! strictly above `theta_edge`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{CorpusStats, ExperienceEdge, ExperienceNode, GraphError, MemoryGraph};
use crate::model::{normalize_task_type, EntityRole, Experience, ExperienceId};
use crate::prompts;
use crate::providers::{call_parsed, parse_json_object, CallError, ChatProvider, ProviderError};

/// Longest role-edge path considered by the structure score.
pub const MAX_PATH_LEN: usize = 4;
pub const DEFAULT_THETA_EDGE: f64 = 0.35;
pub const DEFAULT_SYNERGY_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimilarityError {
    #[error("similarity weights must lie in [0,1] and sum to 1 (got {0:?})")]
    InvalidWeights([f64; 4]),
    #[error("component {name} = {value} is outside [0,1]")]
    ComponentOutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self { alpha: 0.25, beta: 0.25, gamma: 0.25, delta: 0.25 }
    }
}

impl SimilarityWeights {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        let in_range = w.iter().all(|x| (0.0..=1.0).contains(x));
        if !in_range || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SimilarityError::InvalidWeights(w));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreBreakdown {
    pub s_entity: f64,
    pub s_structure: f64,
    pub s_synergy: f64,
    pub s_task: f64,
    pub combined: f64,
}

impl EdgeScoreBreakdown {
    /// Every component and the combined score set to `w`.
    pub fn constant(w: f64) -> Self {
        Self { s_entity: w, s_structure: w, s_synergy: w, s_task: w, combined: w }
    }

    #[cfg(test)]
    pub(crate) fn uniform_constant(w: f64) -> Self {
        Self::constant(w)
    }
}

/// Cosine of TF-IDF entity vectors; 0 when either vector is empty.
pub fn entity_similarity(a: &ExperienceNode, b: &ExperienceNode, stats: CorpusStats<'_>) -> f64 {
    let weigh = |n: &ExperienceNode| -> BTreeMap<String, f64> {
        n.term_frequencies()
            .into_iter()
            .map(|(u, tf)| (u.to_string(), tf as f64 * stats.idf(u)))
            .collect()
    };
    let (xa, xb) = (weigh(a), weigh(b));
    let norm = |x: &BTreeMap<String, f64>| x.values().map(|v| v * v).sum::<f64>().sqrt();
    let (na, nb) = (norm(&xa), norm(&xb));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = xa.iter().filter_map(|(u, va)| xb.get(u).map(|vb| va * vb)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// A sequence of role-typed edges, e.g. `[Condition->Action, Action->Outcome]`.
pub type RolePath = Vec<(EntityRole, EntityRole)>;

/// Role-label projections of every simple path of exactly `k` entity edges.
pub fn role_paths(node: &ExperienceNode, k: usize) -> BTreeSet<RolePath> {
    let mut adj: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut vertices = Vec::new();
    let index = |e: &crate::model::Entity, vertices: &mut Vec<crate::model::Entity>| {
        match vertices.iter().position(|v| v == e) {
            Some(i) => i,
            None => {
                vertices.push(e.clone());
                vertices.len() - 1
            }
        }
    };
    for edge in &node.role_edges {
        let f = index(&edge.from_entity, &mut vertices);
        let t = index(&edge.to_entity, &mut vertices);
        if f != t {
            adj.entry(f).or_default().insert(t);
        }
    }
    let mut out = BTreeSet::new();
    if k == 0 {
        return out;
    }
    fn walk(
        at: usize,
        k: usize,
        adj: &BTreeMap<usize, BTreeSet<usize>>,
        vertices: &[crate::model::Entity],
        on_path: &mut Vec<usize>,
        labels: &mut RolePath,
        out: &mut BTreeSet<RolePath>,
    ) {
        if labels.len() == k {
            out.insert(labels.clone());
            return;
        }
        for &next in adj.get(&at).into_iter().flatten() {
            if on_path.contains(&next) {
                continue;
            }
            on_path.push(next);
            labels.push((vertices[at].role, vertices[next].role));
            walk(next, k, adj, vertices, on_path, labels, out);
            labels.pop();
            on_path.pop();
        }
    }
    for start in 0..vertices.len() {
        walk(start, k, &adj, &vertices, &mut vec![start], &mut Vec::new(), &mut out);
    }
    out
}

fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// `sum_k (k / 10) * Jaccard(P_k(a), P_k(b))` for k = 1..=4.
pub fn structure_similarity(a: &ExperienceNode, b: &ExperienceNode) -> f64 {
    let total: f64 = (1..=MAX_PATH_LEN).map(|k| k as f64).sum();
    (1..=MAX_PATH_LEN)
        .map(|k| (k as f64 / total) * jaccard(&role_paths(a, k), &role_paths(b, k)))
        .sum()
}

pub fn task_similarity(a: &Experience, b: &Experience) -> f64 {
    if normalize_task_type(&a.task_type) == normalize_task_type(&b.task_type) {
        1.0
    } else {
        0.0
    }
}

fn parse_similarity(reply: &str) -> Result<f64, String> {
    let obj = parse_json_object(reply)?;
    let value = obj.get("similarity").ok_or("missing \"similarity\"")?;
    let x = match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|x: &f64| x.is_finite())
    .ok_or("\"similarity\" is not a number")?;
    Ok(x.clamp(0.0, 1.0))
}

/// Model-judged joint-use value of two experiences.
///
/// Transport failures that survive `retries` are returned as errors. A reply
/// that never parses scores 0.0, so a confused judge cannot create edges.
pub fn synergy_similarity(
    a: &Experience,
    b: &Experience,
    judge: &dyn ChatProvider,
    retries: u32,
) -> Result<f64, ProviderError> {
    let req = prompts::SIMILARITY.request(&[
        ("condition_a", &a.condition),
        ("content_a", &a.content),
        ("condition_b", &b.condition),
        ("content_b", &b.content),
    ]);
    match call_parsed(judge, &req, retries, parse_similarity) {
        Ok(x) => Ok(x),
        Err(CallError::Parse { reason, .. }) => {
            log::warn!("synergy judge for {} / {} unparseable ({reason}); scoring 0", a.id, b.id);
            Ok(0.0)
        }
        Err(CallError::Provider(e)) => Err(e),
    }
}

/// Convex combination of the four components.
pub fn initial_edge_weight(
    s_entity: f64,
    s_structure: f64,
    s_synergy: f64,
    s_task: f64,
    w: &SimilarityWeights,
) -> Result<EdgeScoreBreakdown, SimilarityError> {
    w.validate()?;
    for (name, value) in
        [("s_entity", s_entity), ("s_structure", s_structure), ("s_synergy", s_synergy), ("s_task", s_task)]
    {
        if !(0.0..=1.0).contains(&value) {
            return Err(SimilarityError::ComponentOutOfRange { name, value });
        }
    }
    let combined = w.alpha * s_entity + w.beta * s_structure + w.gamma * s_synergy + w.delta * s_task;
    Ok(EdgeScoreBreakdown { s_entity, s_structure, s_synergy, s_task, combined: combined.clamp(0.0, 1.0) })
}

#[derive(Debug, thiserror::Error)]
pub enum EdgeBuildError {
    #[error("edge construction needs at least 2 experiences, graph has {0}")]
    TooFewNodes(usize),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("synergy judge failed on pair {a} / {b} after {pairs_scored} pairs ({edges_created} edges created): {source}")]
    Provider {
        a: ExperienceId,
        b: ExperienceId,
        pairs_scored: usize,
        edges_created: usize,
        source: ProviderError,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeBuildReport {
    pub pairs_scored: usize,
    /// Directed edges inserted.
    pub edges_created: usize,
}

/// Scores experience pairs and inserts edges above the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeBuilder {
    pub weights: SimilarityWeights,
    pub theta_edge: f64,
    pub synergy_retries: u32,
}

impl Default for EdgeBuilder {
    fn default() -> Self {
        Self::new(SimilarityWeights::default(), DEFAULT_THETA_EDGE)
    }
}

impl EdgeBuilder {
    pub fn new(weights: SimilarityWeights, theta_edge: f64) -> Self {
        Self { weights, theta_edge, synergy_retries: DEFAULT_SYNERGY_RETRIES }
    }

    pub fn score_pair(
        &self,
        a: &ExperienceNode,
        b: &ExperienceNode,
        stats: CorpusStats<'_>,
        judge: &dyn ChatProvider,
    ) -> Result<Result<EdgeScoreBreakdown, SimilarityError>, ProviderError> {
        let synergy = synergy_similarity(&a.experience, &b.experience, judge, self.synergy_retries)?;
        Ok(initial_edge_weight(
            entity_similarity(a, b, stats),
            structure_similarity(a, b),
            synergy,
            task_similarity(&a.experience, &b.experience),
            &self.weights,
        ))
    }

    /// Whether a combined score creates an edge (strictly above the threshold).
    pub fn connects(&self, combined: f64) -> bool {
        combined > self.theta_edge
    }

    fn score_pairs(
        &self,
        g: &mut MemoryGraph,
        pairs: Vec<(ExperienceId, ExperienceId)>,
        judge: &dyn ChatProvider,
    ) -> Result<EdgeBuildReport, EdgeBuildError> {
        self.weights.validate()?;
        let mut report = EdgeBuildReport::default();
        for (a, b) in pairs {
            let (na, nb) = (g.node(&a).expect("pair from graph"), g.node(&b).expect("pair from graph"));
            let breakdown = match self.score_pair(na, nb, g.stats(), judge) {
                Ok(bd) => bd?,
                Err(source) => {
                    return Err(EdgeBuildError::Provider {
                        a,
                        b,
                        pairs_scored: report.pairs_scored,
                        edges_created: report.edges_created,
                        source,
                    })
                }
            };
            report.pairs_scored += 1;
            if self.connects(breakdown.combined) {
                for (s, d) in [(&a, &b), (&b, &a)] {
                    if !g.has_edge(s, d) {
                        g.add_edge(ExperienceEdge::new(s.clone(), d.clone(), breakdown))?;
                        report.edges_created += 1;
                    }
                }
            }
        }
        Ok(report)
    }

    /// Scores every unordered pair not yet connected, in id order.
    pub fn build(&self, g: &mut MemoryGraph, judge: &dyn ChatProvider) -> Result<EdgeBuildReport, EdgeBuildError> {
        if g.doc_count() < 2 {
            return Err(EdgeBuildError::TooFewNodes(g.doc_count()));
        }
        let ids: Vec<ExperienceId> = g.ids().cloned().collect();
        let mut pairs = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                if !g.has_edge(a, b) && !g.has_edge(b, a) {
                    pairs.push((a.clone(), b.clone()));
                }
            }
        }
        self.score_pairs(g, pairs, judge)
    }

    /// Scores `id` against every other node (used when inserting one experience).
    pub fn connect(
        &self,
        g: &mut MemoryGraph,
        id: &ExperienceId,
        judge: &dyn ChatProvider,
    ) -> Result<EdgeBuildReport, EdgeBuildError> {
        if !g.contains(id) {
            return Err(GraphError::UnknownNode(id.clone()).into());
        }
        let pairs = g.ids().filter(|o| *o != id).map(|o| (id.clone(), o.clone())).collect();
        self.score_pairs(g, pairs, judge)
    }
}

/// `build_edges(g, w, theta_edge, judge)` with the default retry count.
pub fn build_edges(
    g: &mut MemoryGraph,
    w: SimilarityWeights,
    theta_edge: f64,
    judge: &dyn ChatProvider,
) -> Result<EdgeBuildReport, EdgeBuildError> {
    EdgeBuilder::new(w, theta_edge).build(g, judge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{exp, node_with};
    use crate::model::{Entity, RoleEdge};
    use crate::providers::{ScriptRule, ScriptedChat};
    use EntityRole::*;

    fn ent(s: &str, r: EntityRole) -> Entity {
        Entity { surface: s.into(), role: r }
    }

    fn structured(id: &str, edges: &[(&str, EntityRole, &str, EntityRole)]) -> ExperienceNode {
        let mut n = ExperienceNode::new(exp(id));
        for (fs, fr, ts, tr) in edges {
            let (f, t) = (ent(fs, *fr), ent(ts, *tr));
            for e in [&f, &t] {
                if !n.core_entities.contains(e) {
                    n.core_entities.push(e.clone());
                }
            }
            n.role_edges.push(RoleEdge::new(f, t).unwrap());
        }
        n
    }

    #[test]
    fn entity_similarity_examples() {
        let mut g = MemoryGraph::new();
        g.add_node(node_with("e1", &["sepsis", "lactate"])).unwrap();
        g.add_node(node_with("e2", &["sepsis", "antibiotics"])).unwrap();
        let (a, b) = (g.node(&"e1".into()).unwrap(), g.node(&"e2".into()).unwrap());
        // hand oracle: idf(sepsis) = 1, idf(other) = ln(1.5) + 1
        let idf = 1.5f64.ln() + 1.0;
        let expected = 1.0 / (1.0 + idf * idf);
        assert!((entity_similarity(a, b, g.stats()) - expected).abs() < 1e-12);
        assert!((expected - 0.33610).abs() < 1e-5);
        assert!((entity_similarity(a, a, g.stats()) - 1.0).abs() < 1e-12);

        let c = node_with("c", &["fracture"]);
        assert_eq!(entity_similarity(a, &c, g.stats()), 0.0);
        let empty = node_with("d", &[]);
        assert_eq!(entity_similarity(&empty, &empty, g.stats()), 0.0);
    }

    #[test]
    fn role_path_examples() {
        let n = structured("a", &[("sepsis", Condition, "fluids", Action), ("fluids", Action, "perfusion", Outcome)]);
        let p2 = role_paths(&n, 2);
        assert_eq!(p2, BTreeSet::from([vec![(Condition, Action), (Action, Outcome)]]));
        assert_eq!(role_paths(&n, 1).len(), 2);
        assert!(role_paths(&n, 3).is_empty());

        let single = structured("b", &[("sepsis", Condition, "fluids", Action)]);
        assert!(role_paths(&single, 2).is_empty());
        assert!(role_paths(&node_with("c", &["x"]), 1).is_empty());
    }

    #[test]
    fn role_paths_are_simple_on_cycles() {
        // a -> b -> a style cycle through Action->Action edges
        let n = structured("a", &[("x", Action, "y", Action), ("y", Action, "x", Action)]);
        assert_eq!(role_paths(&n, 2).len(), 0);
        assert_eq!(role_paths(&n, 1), BTreeSet::from([vec![(Action, Action)]]));
    }

    #[test]
    fn structure_similarity_examples() {
        let a = structured("a", &[("sepsis", Condition, "fluids", Action), ("fluids", Action, "perfusion", Outcome)]);
        assert!((structure_similarity(&a, &a) - 0.3).abs() < 1e-12);

        let b = structured("b", &[("shock", Condition, "pressors", Action)]);
        assert!((structure_similarity(&a, &b) - 0.05).abs() < 1e-12);

        let c = structured("c", &[("x", Rationale, "y", Constraint)]);
        assert_eq!(structure_similarity(&a, &c), 0.0);
        assert_eq!(structure_similarity(&node_with("e", &[]), &node_with("f", &[])), 0.0);
    }

    #[test]
    fn task_similarity_examples() {
        let mut a = exp("a");
        let mut b = exp("b");
        a.task_type = "diagnosis".into();
        b.task_type = "diagnosis".into();
        assert_eq!(task_similarity(&a, &b), 1.0);
        b.task_type = "treatment".into();
        assert_eq!(task_similarity(&a, &b), 0.0);
        a.task_type = "Diagnosis".into();
        b.task_type = "diagnosis".into();
        assert_eq!(task_similarity(&a, &b), 1.0);
    }

    #[test]
    fn synergy_examples() {
        let (a, b) = (exp("a"), exp("b"));
        let judge = ScriptedChat::queue([r#"{"similarity": 0.7, "reason": "close"}"#]);
        assert_eq!(synergy_similarity(&a, &b, &judge, 2).unwrap(), 0.7);
        let judge = ScriptedChat::queue([r#"{"similarity": 1.3, "reason": "x"}"#]);
        assert_eq!(synergy_similarity(&a, &b, &judge, 2).unwrap(), 1.0);
        let judge = ScriptedChat::queue(["I think they are similar."]);
        assert_eq!(synergy_similarity(&a, &b, &judge, 2).unwrap(), 0.0);
        assert_eq!(judge.requests().len(), 3);
        let judge = ScriptedChat::new(vec![ScriptRule::failing("", "down")]);
        assert!(synergy_similarity(&a, &b, &judge, 2).is_err());
        assert_eq!(judge.requests().len(), 3);
    }

    #[test]
    fn synergy_prompt_carries_both_experiences() {
        let (a, b) = (exp("a"), exp("b"));
        let judge = ScriptedChat::queue([r#"{"similarity": 0.5, "reason": "x"}"#]);
        synergy_similarity(&a, &b, &judge, 0).unwrap();
        let req = &judge.requests()[0];
        assert!(req.user.contains("Condition: condition of a\nContent: content of a"));
        assert!(req.user.contains("## Experience B\nCondition: condition of b"));
        assert!(req.system.starts_with("You are evaluating the semantic similarity"));
    }

    #[test]
    fn initial_edge_weight_examples() {
        let w = SimilarityWeights::default();
        assert_eq!(initial_edge_weight(1.0, 1.0, 1.0, 1.0, &w).unwrap().combined, 1.0);
        assert_eq!(initial_edge_weight(1.0, 0.0, 0.0, 1.0, &w).unwrap().combined, 0.5);
        let bd = initial_edge_weight(0.33610, 0.05, 0.7, 1.0, &w).unwrap();
        assert!((bd.combined - 0.521525).abs() < 1e-9);
        assert!(matches!(
            initial_edge_weight(1.2, 0.0, 0.0, 0.0, &w),
            Err(SimilarityError::ComponentOutOfRange { name: "s_entity", .. })
        ));
        let bad = SimilarityWeights { alpha: 0.5, ..w };
        assert!(initial_edge_weight(0.0, 0.0, 0.0, 0.0, &bad).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let b = EdgeBuilder::default();
        assert!(b.connects(0.521525));
        assert!(!b.connects(0.35));
        assert!(b.connects(0.35 + 1e-12));
    }

    #[test]
    fn build_edges_on_pairs() {
        let mut g = MemoryGraph::new();
        g.add_node(node_with("a", &["sepsis", "lactate"])).unwrap();
        g.add_node(node_with("b", &["sepsis", "lactate"])).unwrap();
        g.add_node(node_with("c", &["fracture"])).unwrap();
        let judge = ScriptedChat::new(vec![
            ScriptRule::new("Content: content of a\n\n## Experience B\nCondition: condition of b", r#"{"similarity": 0.9, "reason": ""}"#),
            ScriptRule::new("", r#"{"similarity": 0.0, "reason": ""}"#),
        ]);
        let report = build_edges(&mut g, SimilarityWeights::default(), 0.35, &judge).unwrap();
        assert_eq!(report.pairs_scored, 3);
        // a/b: entity 1, structure 0, synergy 0.9, task 1 -> 0.725; a/c and b/c: task only -> 0.25
        assert_eq!(report.edges_created, 2);
        let e = g.edge(&"a".into(), &"b".into()).unwrap();
        assert!((e.w_prior - 0.725).abs() < 1e-12);
        assert_eq!(g.edge(&"b".into(), &"a".into()).unwrap().breakdown, e.breakdown);
        assert!(!g.has_edge(&"a".into(), &"c".into()));
        // each unordered pair is judged once
        assert_eq!(judge.requests().len(), 3);
    }

    #[test]
    fn build_edges_needs_two_nodes() {
        let mut g = MemoryGraph::new();
        g.add_node(node_with("a", &[])).unwrap();
        let judge = ScriptedChat::queue(["{}"]);
        assert!(matches!(build_edges(&mut g, SimilarityWeights::default(), 0.35, &judge), Err(EdgeBuildError::TooFewNodes(1))));
    }

    #[test]
    fn provider_failure_reports_progress() {
        let mut g = MemoryGraph::new();
        for id in ["a", "b", "c"] {
            g.add_node(node_with(id, &["sepsis"])).unwrap();
        }
        let judge = ScriptedChat::new(vec![
            ScriptRule::new("Content: content of a\n\n## Experience B\nCondition: condition of b", r#"{"similarity": 1.0}"#),
            ScriptRule::failing("", "connection reset"),
        ]);
        match build_edges(&mut g, SimilarityWeights::default(), 0.35, &judge) {
            Err(EdgeBuildError::Provider { pairs_scored, edges_created, a, b, .. }) => {
                assert_eq!((pairs_scored, edges_created), (1, 2));
                assert_eq!((a.as_str(), b.as_str()), ("a", "c"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
