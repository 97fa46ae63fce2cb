//! Versioned JSON snapshots of a [`MemoryGraph`].
//!
//! Layout: `schema_version`, `episode_counter`, `nodes` (sorted by id),
//! `edges` (sorted by `(src, dst)`). Reals use the shortest representation
//! that parses back to the same `f64`, so a save/load cycle is bit-exact.
//! The entity index and document frequencies are derived, not stored.

use serde::{Deserialize, Serialize};

use super::{ExperienceEdge, ExperienceNode, GraphError, MemoryGraph};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSnapshot {
    pub schema_version: u32,
    text: String,
}

impl GraphSnapshot {
    /// Wraps snapshot text read from disk. The version is checked on load.
    pub fn from_text(text: impl Into<String>) -> Self {
        Self { schema_version: 0, text: text.into() }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("unsupported snapshot schema_version {found} (supported: {SCHEMA_VERSION})")]
    UnsupportedVersion { found: u64 },
    #[error("snapshot parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("snapshot is inconsistent: {0}")]
    Graph(#[from] GraphError),
}

impl From<serde_json::Error> for SnapshotError {
    fn from(e: serde_json::Error) -> Self {
        SnapshotError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

#[derive(Serialize)]
struct DocOut<'a> {
    schema_version: u32,
    episode_counter: u64,
    nodes: Vec<&'a ExperienceNode>,
    edges: Vec<&'a ExperienceEdge>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocIn {
    #[allow(dead_code)]
    schema_version: u32,
    episode_counter: u64,
    nodes: Vec<ExperienceNode>,
    edges: Vec<ExperienceEdge>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u64>,
}

pub fn save_snapshot(g: &MemoryGraph) -> GraphSnapshot {
    let doc = DocOut {
        schema_version: SCHEMA_VERSION,
        episode_counter: g.episode_counter,
        nodes: g.nodes.values().collect(),
        edges: g.edges.values().collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("graph values serialize");
    text.push('\n');
    GraphSnapshot { schema_version: SCHEMA_VERSION, text }
}

pub fn load_snapshot(s: &GraphSnapshot) -> Result<MemoryGraph, SnapshotError> {
    let probe: VersionProbe = serde_json::from_str(&s.text)?;
    match probe.schema_version {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(found) => return Err(SnapshotError::UnsupportedVersion { found }),
        None => {
            return Err(SnapshotError::Parse { line: 1, column: 1, message: "missing schema_version".into() })
        }
    }
    let doc: DocIn = serde_json::from_str(&s.text)?;
    let mut g = MemoryGraph::new();
    for node in doc.nodes {
        g.add_node(node)?;
    }
    for edge in doc.edges {
        g.add_edge(edge)?;
    }
    g.episode_counter = doc.episode_counter;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::node_with;
    use crate::similarity::EdgeScoreBreakdown;

    #[test]
    fn empty_graph_round_trip() {
        let g = MemoryGraph::new();
        let snap = save_snapshot(&g);
        assert_eq!(load_snapshot(&snap).unwrap(), g);
    }

    #[test]
    fn small_graph_round_trip_with_phi() {
        let mut g = MemoryGraph::new();
        for (id, ents) in [("a", &["sepsis", "lactate"][..]), ("b", &["sepsis"][..]), ("c", &[][..])] {
            g.add_node(node_with(id, ents)).unwrap();
        }
        let bd = EdgeScoreBreakdown { s_entity: 0.1, s_structure: 0.2, s_synergy: 0.3, s_task: 1.0, combined: 0.4 };
        let mut e = ExperienceEdge::new("a".into(), "b".into(), bd);
        e.phi = -0.1 / 3.0;
        g.add_edge(e).unwrap();
        let mut e = ExperienceEdge::new("b".into(), "c".into(), bd);
        e.phi = 0.1 + 0.2;
        g.add_edge(e).unwrap();
        g.set_episode_counter(7);

        let back = load_snapshot(&save_snapshot(&g)).unwrap();
        // field-by-field oracle
        assert_eq!(back.episode_counter(), 7);
        assert_eq!(back.doc_count(), 3);
        for (x, y) in g.nodes().zip(back.nodes()) {
            assert_eq!(x, y);
        }
        for (x, y) in g.edges().zip(back.edges()) {
            assert_eq!(x.phi.to_bits(), y.phi.to_bits());
            assert_eq!(x, y);
        }
        assert_eq!(back.entity_df("sepsis"), 2);
        assert_eq!(back, g);
    }

    #[test]
    fn top_level_key_order() {
        let text = save_snapshot(&MemoryGraph::new()).into_string();
        let keys: Vec<_> = ["schema_version", "episode_counter", "nodes", "edges"]
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unsupported_version() {
        let snap = GraphSnapshot::from_text(r#"{"schema_version": 99, "episode_counter": 0, "nodes": [], "edges": []}"#);
        assert!(matches!(load_snapshot(&snap), Err(SnapshotError::UnsupportedVersion { found: 99 })));
    }

    #[test]
    fn parse_error_has_location() {
        let snap = GraphSnapshot::from_text("{\n  \"schema_version\": 1,\n  oops\n}");
        match load_snapshot(&snap) {
            Err(SnapshotError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let text = r#"{"schema_version": 1, "episode_counter": 0, "nodes": [],
            "edges": [{"src": "a", "dst": "b", "w_prior": 0.5, "phi": 0.0,
            "breakdown": {"s_entity": 0, "s_structure": 0, "s_synergy": 0, "s_task": 0, "combined": 0.5}}]}"#;
        assert!(matches!(load_snapshot(&GraphSnapshot::from_text(text)), Err(SnapshotError::Graph(_))));
    }
}
