//! Synthetic environment for checking that feedback recovers planted utility.
//!
//! Experiences get random entities, a hidden utility, and an initial quality
//! drawn the way validation trials would produce it. Each episode issues a
//! random query, retrieves greedily, and succeeds with a probability that
//! rises linearly with the mean utility of what was retrieved. Everything
//! flows from one seeded ChaCha8 stream, and every reduction runs in id
//! order, so a run is bit-identical across machines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::construction::erv_quality;
use crate::evolution::{apply_feedback, delta_from_outcome, EvolutionConfig, EvolutionError, FeedbackEvent};
use crate::graph::{ExperienceNode, GraphError, MemoryGraph};
use crate::model::{normalize_entity, EntityRole, Experience, ExperienceId, Polarity, RoleEdge};
use crate::providers::{hash_embedding, EmbeddingSynergyJudge, HashEmbedder};
use crate::retrieval::{embedding_recall, entity_recall_terms, rerank, traverse, RetrievalConfig, RetrievalError};
use crate::similarity::{EdgeBuildError, EdgeBuilder};
use crate::stats::spearman;

pub const CSV_HEADER: &str = "episode,mean_q_good,mean_q_bad,spearman";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScenario {
    pub n_good: usize,
    pub n_bad: usize,
    pub good_utility: f64,
    pub bad_utility: f64,
    /// Per-id overrides of the utility drawn from the two groups.
    pub planted_utility: BTreeMap<ExperienceId, f64>,
    pub p_correct_base: f64,
    pub utility_gain: f64,
    pub n_episodes: usize,
    pub rng_seed: u64,
    /// Distinct entity surfaces to draw from.
    pub vocabulary: usize,
    pub entities_per_experience: usize,
    pub query_words: usize,
    /// Trials behind each initial quality.
    pub n_erv: usize,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        Self {
            n_good: 10,
            n_bad: 10,
            good_utility: 0.9,
            bad_utility: 0.1,
            planted_utility: BTreeMap::new(),
            p_correct_base: 0.5,
            utility_gain: 1.0,
            n_episodes: 200,
            rng_seed: 42,
            vocabulary: 24,
            entities_per_experience: 3,
            query_words: 2,
            n_erv: 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Edges(#[from] EdgeBuildError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::Invalid(m));
        let n = self.n_good + self.n_bad;
        if n == 0 {
            return bad("need at least one planted experience".into());
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        for (name, v) in [
            ("good_utility", self.good_utility),
            ("bad_utility", self.bad_utility),
            ("p_correct_base", self.p_correct_base),
        ] {
            if !unit(v) {
                return bad(format!("{name} {v} outside [0,1]"));
            }
        }
        if !self.utility_gain.is_finite() {
            return bad("utility_gain must be finite".into());
        }
        if self.vocabulary == 0 || self.entities_per_experience == 0 || self.query_words == 0 || self.n_erv == 0 {
            return bad("vocabulary, entities_per_experience, query_words and n_erv must be >= 1".into());
        }
        if self.entities_per_experience > self.vocabulary || self.query_words > self.vocabulary {
            return bad("cannot draw more distinct words than the vocabulary holds".into());
        }
        for (id, u) in &self.planted_utility {
            if !unit(*u) {
                return bad(format!("planted utility of {id} ({u}) outside [0,1]"));
            }
            if !(1..=n).any(|i| ExperienceId::numbered(i) == *id) {
                return bad(format!("planted utility names unknown experience {id}"));
            }
        }
        Ok(())
    }
}

/// Distinct pseudo-words of three consonant-vowel syllables, so unrelated
/// surfaces share few character trigrams.
fn vocabulary(size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let w: String = (0..3)
            .flat_map(|_| [*CONSONANTS.choose(rng).expect("non-empty"), *VOWELS.choose(rng).expect("non-empty")])
            .map(char::from)
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// The synthetic graph, its entity vocabulary and the hidden utility of each node. Edges come from
/// the construction-time scoring, with synergy judged by embedding cosine.
pub fn planted_graph(
    s: &SyntheticScenario,
    edges: &EdgeBuilder,
    rng: &mut ChaCha8Rng,
) -> Result<(MemoryGraph, Vec<String>, BTreeMap<ExperienceId, f64>), SimulationError> {
    s.validate()?;
    let n = s.n_good + s.n_bad;
    let mut groups: Vec<f64> = [vec![s.good_utility; s.n_good], vec![s.bad_utility; s.n_bad]].concat();
    groups.shuffle(rng);
    let vocab = vocabulary(s.vocabulary, rng);
    let mut g = MemoryGraph::new();
    let mut utility = BTreeMap::new();
    for (i, u) in groups.into_iter().enumerate() {
        let id = ExperienceId::numbered(i + 1);
        let words: Vec<&String> = vocab.choose_multiple(rng, s.entities_per_experience).collect();
        let entities: Vec<_> = words
            .iter()
            .map(|w| {
                let role = *EntityRole::ALL.choose(rng).expect("roles exist");
                normalize_entity(w, role).expect("synthetic surfaces are valid")
            })
            .collect();
        let successes = (0..s.n_erv).filter(|_| rng.random_bool(0.5)).count();
        let q0 = erv_quality(successes, s.n_erv).expect("n_erv >= 1").q0;
        let surfaces: Vec<&str> = entities.iter().map(|e| e.surface.as_str()).collect();
        let condition = surfaces.join(", ");
        let experience = Experience {
            id: id.clone(),
            condition,
            content: surfaces.iter().rev().copied().collect::<Vec<_>>().join(" then "),
            polarity: Polarity::Indication,
            quality: q0,
            task_type: "synthetic".into(),
            evidence: String::new(),
            created_at: 0,
        };
        let mut node = ExperienceNode::new(experience);
        node.role_edges = entities
            .iter()
            .enumerate()
            .flat_map(|(i, a)| entities[i + 1..].iter().filter_map(|b| RoleEdge::new(a.clone(), b.clone())))
            .collect();
        node.core_entities = entities;
        node.embedding = Some(hash_embedding(&node.indexed_text()));
        g.add_node(node)?;
        utility.insert(id.clone(), s.planted_utility.get(&id).copied().unwrap_or(u));
    }
    if n > 1 {
        edges.build(&mut g, &EmbeddingSynergyJudge::new(HashEmbedder))?;
    }
    Ok((g, vocab, utility))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationRow {
    pub episode: usize,
    pub mean_q_good: Option<f64>,
    pub mean_q_bad: Option<f64>,
    pub spearman: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Planted-good means utility at least 0.5.
pub fn snapshot_row(episode: usize, g: &MemoryGraph, utility: &BTreeMap<ExperienceId, f64>) -> SimulationRow {
    let (mut good, mut bad, mut qs, mut us) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (id, u) in utility {
        let q = g.node(id).expect("planted node").experience.quality;
        if *u >= 0.5 { good.push(q) } else { bad.push(q) }
        qs.push(q);
        us.push(*u);
    }
    SimulationRow { episode, mean_q_good: mean(&good), mean_q_bad: mean(&bad), spearman: spearman(&qs, &us) }
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub rows: Vec<SimulationRow>,
    pub graph: MemoryGraph,
    pub utility: BTreeMap<ExperienceId, f64>,
    pub correct_episodes: usize,
}

impl SimulationResult {
    pub fn final_row(&self) -> &SimulationRow {
        self.rows.last().expect("row 0 always exists")
    }

    /// CSV with one row per episode, row 0 being the initial state. Missing
    /// values are written as empty fields.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.episode, cell(r.mean_q_good), cell(r.mean_q_bad), cell(r.spearman));
        }
        out
    }
}

/// Runs the scenario with greedy retrieval under `retrieval` and updates under `evolution`.
pub fn simulate(
    s: &SyntheticScenario,
    edges: &EdgeBuilder,
    retrieval: &RetrievalConfig,
    evolution: &EvolutionConfig,
) -> Result<SimulationResult, SimulationError> {
    retrieval.validate()?;
    evolution.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
    let (mut g, vocab, utility) = planted_graph(s, edges, &mut rng)?;
    let policy = retrieval.greedy();
    let mut rows = vec![snapshot_row(0, &g, &utility)];
    let mut correct_episodes = 0;
    for episode in 1..=s.n_episodes {
        let words: Vec<String> = vocab.choose_multiple(&mut rng, s.query_words).cloned().collect();
        let query = words.join(" ");
        let terms: BTreeSet<String> = words.into_iter().collect();
        let sparse = entity_recall_terms(&g, &terms, retrieval.bm25(), retrieval.k_seed);
        let dense = embedding_recall(&g, &query, &HashEmbedder, retrieval.k_seed)?;
        let seeds = rerank(&sparse, &dense, retrieval.rerank_lambda, retrieval.k_seed);
        let trace = traverse(&g, &query, &seeds, &policy, retrieval)?;

        let ordered: BTreeSet<&ExperienceId> = trace.collected.iter().collect();
        let utilities: Vec<f64> = ordered.iter().map(|id| utility[*id]).collect();
        let p = (s.p_correct_base + s.utility_gain * (mean(&utilities).unwrap_or(0.5) - 0.5)).clamp(0.0, 1.0);
        let correct = rng.random::<f64>() < p;
        correct_episodes += usize::from(correct);
        let event = FeedbackEvent::new(format!("episode_{episode}"), delta_from_outcome(correct), trace.collected);
        apply_feedback(&mut g, &event, evolution)?;
        rows.push(snapshot_row(episode, &g, &utility));
    }
    Ok(SimulationResult { rows, graph: g, utility, correct_episodes })
}
