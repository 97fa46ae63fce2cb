//! Seed recall: sparse entity matching, dense similarity, and the rerank that merges them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::construction::{entities_from, REPAIR_RETRIES};
use crate::graph::MemoryGraph;
use crate::model::{normalize_text, ExperienceId};
use crate::prompts;
use crate::providers::{call_parsed, parse_json_object, ChatProvider, EmbeddingProvider, DETERMINISTIC_TEMPERATURE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: ExperienceId,
    /// Summed BM25 of matched entity nodes; 0 when not recalled sparsely.
    pub sparse_score: f64,
    /// Cosine with the query; 0 when not recalled densely.
    pub dense_score: f64,
    pub rerank_score: f64,
}

impl Candidate {
    fn sparse(id: ExperienceId, score: f64) -> Self {
        Self { id, sparse_score: score, dense_score: 0.0, rerank_score: 0.0 }
    }

    fn dense(id: ExperienceId, score: f64) -> Self {
        Self { id, sparse_score: 0.0, dense_score: score, rerank_score: 0.0 }
    }
}

/// Okapi BM25 parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25 {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25 {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25 {
    /// `ln((N - n + 0.5) / (n + 0.5) + 1)`, never negative.
    pub fn idf(n_docs: usize, n_containing: usize) -> f64 {
        let (n, df) = (n_docs as f64, n_containing as f64);
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every document (a word list) that shares a term with `query`.
    pub fn score_all(&self, docs: &[Vec<String>], query: &BTreeSet<String>) -> Vec<f64> {
        let n = docs.len();
        if n == 0 {
            return Vec::new();
        }
        let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n as f64;
        let df = |t: &str| docs.iter().filter(|d| d.iter().any(|w| w == t)).count();
        let idf: BTreeMap<&str, f64> = query.iter().map(|t| (t.as_str(), Self::idf(n, df(t)))).collect();
        docs.iter()
            .map(|d| {
                let len_norm = 1.0 - self.b + self.b * d.len() as f64 / avgdl.max(f64::MIN_POSITIVE);
                idf.iter()
                    .map(|(t, idf)| {
                        let tf = d.iter().filter(|w| w == t).count() as f64;
                        if tf == 0.0 {
                            0.0
                        } else {
                            idf * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm)
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

/// Query terms from entity extraction, or from the raw query words when the
/// model call fails. The flag reports the fallback.
pub fn query_terms(query: &str, provider: &dyn ChatProvider) -> (BTreeSet<String>, Vec<String>, bool) {
    let req = prompts::ENTITY
        .request(&[("condition", query), ("content", "N/A")])
        .with_temperature(DETERMINISTIC_TEMPERATURE);
    let parsed = call_parsed(provider, &req, REPAIR_RETRIES, |r| match parse_json_object(r)?.get("core_entities") {
        Some(serde_json::Value::Array(items)) => Ok(entities_from(items)),
        _ => Err("missing \"core_entities\" array".to_string()),
    });
    match parsed {
        Ok(entities) => {
            let surfaces: Vec<String> = entities.iter().map(|e| e.surface.clone()).collect();
            let terms = surfaces.iter().flat_map(|s| s.split_whitespace().map(str::to_string)).collect();
            (terms, surfaces, false)
        }
        Err(e) => {
            log::warn!("query entity extraction failed ({e}); matching raw query words");
            let terms = query.split_whitespace().map(normalize_text).filter(|t| !t.is_empty()).collect();
            (terms, Vec::new(), true)
        }
    }
}

fn top_k(mut items: Vec<Candidate>, key: impl Fn(&Candidate) -> f64, k: usize) -> Vec<Candidate> {
    items.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.id.cmp(&b.id)));
    items.truncate(k);
    items
}

/// Experiences linked to entity nodes matching `terms`, scored by summed BM25.
pub fn entity_recall_terms(g: &MemoryGraph, terms: &BTreeSet<String>, bm25: Bm25, k: usize) -> Vec<Candidate> {
    let entity_nodes: Vec<_> = g.entity_index().values().collect();
    let docs: Vec<Vec<String>> =
        entity_nodes.iter().map(|e| e.surface.split_whitespace().map(str::to_string).collect()).collect();
    let scores = bm25.score_all(&docs, terms);
    let mut per_exp: BTreeMap<ExperienceId, f64> = BTreeMap::new();
    for (node, score) in entity_nodes.iter().zip(scores) {
        if score > 0.0 {
            for id in &node.linked_experiences {
                *per_exp.entry(id.clone()).or_insert(0.0) += score;
            }
        }
    }
    top_k(per_exp.into_iter().map(|(id, s)| Candidate::sparse(id, s)).collect(), |c| c.sparse_score, k)
}

/// Sparse recall through the entity layer.
pub fn entity_recall(
    g: &MemoryGraph,
    query: &str,
    provider: &dyn ChatProvider,
    bm25: Bm25,
    k: usize,
) -> Vec<Candidate> {
    let (terms, _, _) = query_terms(query, provider);
    entity_recall_terms(g, &terms, bm25, k)
}

/// Dense recall by cosine with the query embedding.
pub fn embedding_recall(
    g: &MemoryGraph,
    query: &str,
    embed: &dyn EmbeddingProvider,
    k: usize,
) -> Result<Vec<Candidate>, RetrievalError> {
    if g.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(n) = g.nodes().find(|n| n.embedding.is_none()) {
        return Err(RetrievalError::MissingEmbedding(n.id().clone()));
    }
    let q = embed.embed_one(query)?;
    let all = g
        .nodes()
        .map(|n| Candidate::dense(n.id().clone(), q.cosine(n.embedding.as_ref().expect("checked above"))))
        .collect();
    Ok(top_k(all, |c| c.dense_score, k))
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    move |x| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 }
}

/// Merges both recall lists into the seed set.
///
/// Each score is min-max normalized over the candidates that have it; a
/// candidate missing from one list gets 0 for that part. A constant (or
/// single) score set normalizes to 1.
pub fn rerank(sparse: &[Candidate], dense: &[Candidate], lambda: f64, k_seed: usize) -> Vec<Candidate> {
    let s_norm = min_max(sparse.iter().map(|c| c.sparse_score));
    let d_norm = min_max(dense.iter().map(|c| c.dense_score));
    let mut merged: BTreeMap<ExperienceId, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for c in sparse {
        merged.entry(c.id.clone()).or_default().0 = Some(c.sparse_score);
    }
    for c in dense {
        merged.entry(c.id.clone()).or_default().1 = Some(c.dense_score);
    }
    let all = merged
        .into_iter()
        .map(|(id, (s, d))| {
            let ns = s.map_or(0.0, &s_norm);
            let nd = d.map_or(0.0, &d_norm);
            Candidate {
                id,
                sparse_score: s.unwrap_or(0.0),
                dense_score: d.unwrap_or(0.0),
                rerank_score: lambda * nd + (1.0 - lambda) * ns,
            }
        })
        .collect();
    top_k(all, |c| c.rerank_score, k_seed)
}
