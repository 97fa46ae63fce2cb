//! GraphViz export of the experience layer or of one experience's entities.

use std::fmt::Write;

use crate::graph::{GraphError, MemoryGraph};
use crate::model::ExperienceId;

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// One node per experience (pen width grows with quality), one edge line
/// per directed edge labelled with its effective weight.
pub fn experience_dot(g: &MemoryGraph) -> String {
    let mut out = String::from("digraph experiences {\n");
    for n in g.nodes() {
        let q = n.experience.quality;
        let _ = writeln!(
            out,
            "  {} [label={}, penwidth={:.3}, tooltip={}];",
            quote(n.id().as_str()),
            quote(n.id().as_str()),
            1.0 + 4.0 * q,
            quote(&format!("Q={q:.3}"))
        );
    }
    for e in g.edges() {
        let _ = writeln!(
            out,
            "  {} -> {} [label=\"{:.3}\"];",
            quote(e.src.as_str()),
            quote(e.dst.as_str()),
            e.effective_weight()
        );
    }
    out.push_str("}\n");
    out
}

/// The entities of one experience with their role-labelled flow edges.
pub fn entity_dot(g: &MemoryGraph, id: &ExperienceId) -> Result<String, GraphError> {
    let node = g.node(id).ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
    let mut out = format!("digraph {} {{\n", quote(&format!("entities of {id}")));
    for e in &node.core_entities {
        let _ = writeln!(out, "  {} [label={}];", quote(&e.surface), quote(&format!("{}\n{}", e.surface, e.role.as_str())));
    }
    for r in &node.role_edges {
        let (from, to) = r.roles();
        let _ = writeln!(
            out,
            "  {} -> {} [label={}];",
            quote(&r.from_entity.surface),
            quote(&r.to_entity.surface),
            quote(&format!("{}->{}", from.as_str(), to.as_str()))
        );
    }
    out.push_str("}\n");
    Ok(out)
}
