//! Random graph generators and from-scratch oracles shared by the
//! integration tests. The oracles deliberately avoid the library's own
//! helpers so that agreement means something.
#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use gsem_core::graph::{ExperienceEdge, ExperienceNode, MemoryGraph};
use gsem_core::model::{Entity, EntityRole, Experience, ExperienceId, Polarity, RoleEdge};
use gsem_core::retrieval::{Action, ActionPolicy, Candidate, Offer, PolicyView, RetrievalConfig, RetrievalTrace};
use gsem_core::similarity::EdgeScoreBreakdown;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 10] =
    ["sepsis", "lactate", "fever", "fluids", "antibiotics", "imaging", "stridor", "croup", "troponin", "ecg"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn experience(id: &str, quality: f64) -> Experience {
    Experience {
        id: id.into(),
        condition: format!("condition {id}"),
        content: format!("content {id}"),
        polarity: Polarity::Indication,
        quality,
        task_type: "diagnosis".into(),
        evidence: String::new(),
        created_at: 0,
    }
}

/// A node with up to `max_entities` random entities (repeats allowed, so
/// term frequencies above 1 occur) and random grammatical role edges.
pub fn random_node(r: &mut ChaCha8Rng, id: &str, max_entities: usize) -> ExperienceNode {
    let mut n = ExperienceNode::new(experience(id, r.random_range(0.0..=1.0)));
    n.experience.polarity = if r.random_bool(0.5) { Polarity::Indication } else { Polarity::Contraindication };
    let count = r.random_range(0..=max_entities);
    for _ in 0..count {
        let surface = WORDS[r.random_range(0..WORDS.len())].to_string();
        let role = EntityRole::ALL[r.random_range(0..EntityRole::ALL.len())];
        n.core_entities.push(Entity { surface, role });
    }
    let distinct: Vec<Entity> = n.core_entities.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if distinct.len() >= 2 {
        for _ in 0..r.random_range(0..=8) {
            let a = &distinct[r.random_range(0..distinct.len())];
            let b = &distinct[r.random_range(0..distinct.len())];
            if let Some(e) = RoleEdge::new(a.clone(), b.clone()) {
                if !n.role_edges.contains(&e) {
                    n.role_edges.push(e);
                }
            }
        }
    }
    n
}

pub fn id(i: usize) -> ExperienceId {
    ExperienceId::new(format!("n{i:02}"))
}

/// `n` nodes, each ordered pair linked with probability `p`, random
/// priors and nonzero offsets.
pub fn random_graph(r: &mut ChaCha8Rng, n: usize, p: f64) -> MemoryGraph {
    let mut g = MemoryGraph::new();
    for i in 0..n {
        g.add_node(random_node(r, id(i).as_str(), 6)).unwrap();
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && r.random_bool(p) {
                let mut e = ExperienceEdge::new(id(i), id(j), EdgeScoreBreakdown::constant(r.random_range(0.0..=1.0)));
                e.phi = r.random_range(-0.5..0.5);
                g.add_edge(e).unwrap();
            }
        }
    }
    g.set_episode_counter(r.random_range(0..1000));
    g
}

/// TF-IDF cosine recomputed from the raw node list.
pub fn tfidf_cosine_oracle(all: &[&ExperienceNode], a: &ExperienceNode, b: &ExperienceNode) -> f64 {
    let n = all.len() as f64;
    let df = |u: &str| all.iter().filter(|x| x.core_entities.iter().any(|e| e.surface == u)).count() as f64;
    let vector = |x: &ExperienceNode| {
        let mut v: BTreeMap<String, f64> = BTreeMap::new();
        for e in &x.core_entities {
            *v.entry(e.surface.clone()).or_default() += 1.0;
        }
        for (u, w) in v.iter_mut() {
            *w *= ((n + 1.0) / (df(u) + 1.0)).ln() + 1.0;
        }
        v
    };
    let (va, vb) = (vector(a), vector(b));
    let dot: f64 = va.iter().map(|(u, x)| x * vb.get(u).unwrap_or(&0.0)).sum();
    let na: f64 = va.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = vb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

type Label = (EntityRole, EntityRole);

/// Every chain of `k` role edges with no repeated entity, projected to role labels.
/// Enumerates edge sequences directly rather than walking an adjacency map.
pub fn paths_oracle(node: &ExperienceNode, k: usize) -> BTreeSet<Vec<Label>> {
    fn extend(
        edges: &[RoleEdge],
        k: usize,
        chain: &mut Vec<usize>,
        out: &mut BTreeSet<Vec<Label>>,
    ) {
        if chain.len() == k {
            out.insert(chain.iter().map(|&i| (edges[i].from_entity.role, edges[i].to_entity.role)).collect());
            return;
        }
        for i in 0..edges.len() {
            if let Some(&last) = chain.last() {
                if edges[i].from_entity != edges[last].to_entity {
                    continue;
                }
            }
            let mut seen: Vec<&Entity> = chain.iter().map(|&c| &edges[c].from_entity).collect();
            if let Some(&last) = chain.last() {
                seen.push(&edges[last].to_entity);
            } else {
                seen.push(&edges[i].from_entity);
            }
            if seen.contains(&&edges[i].to_entity) {
                continue;
            }
            chain.push(i);
            extend(edges, k, chain, out);
            chain.pop();
        }
    }
    let mut out = BTreeSet::new();
    if k > 0 {
        extend(&node.role_edges, k, &mut Vec::new(), &mut out);
    }
    out
}

pub fn structure_oracle(a: &ExperienceNode, b: &ExperienceNode) -> f64 {
    (1..=4)
        .map(|k| {
            let (pa, pb) = (paths_oracle(a, k), paths_oracle(b, k));
            let union = pa.union(&pb).count();
            let jac = if union == 0 { 0.0 } else { pa.intersection(&pb).count() as f64 / union as f64 };
            k as f64 / 10.0 * jac
        })
        .sum()
}

/// Spearman correlation written out independently: average ranks for ties,
/// then the Pearson coefficient of the ranks.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for i in 0..v.len() {
            let less = v.iter().filter(|&&o| o < v[i]).count() as f64;
            let equal = v.iter().filter(|&&o| o == v[i]).count() as f64;
            out[i] = less + (equal + 1.0) / 2.0;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Picks uniformly among the legal actions.
pub struct RandomPolicy(pub RefCell<ChaCha8Rng>);

impl ActionPolicy for RandomPolicy {
    fn decide(&self, _g: &MemoryGraph, v: &PolicyView<'_>) -> Action {
        let mut options = vec![Action::Collect, Action::Stop];
        options.extend(v.forward.iter().map(|o| Action::Explore(o.id.clone())));
        options.extend(v.backtrack.iter().map(|o| Action::Backtrack(o.id.clone())));
        let i = self.0.borrow_mut().random_range(0..options.len());
        options.swap_remove(i)
    }
}

/// All unvisited out-neighbors scored by hand, best first, ties by id.
pub fn forward_oracle(g: &MemoryGraph, at: &ExperienceId, visited: &BTreeSet<ExperienceId>, k: usize) -> Vec<Offer> {
    let mut all: Vec<Offer> = g
        .edges()
        .filter(|e| &e.src == at && !visited.contains(&e.dst))
        .map(|e| {
            let w = (e.w_prior + e.phi).clamp(0.0, 1.0);
            Offer { id: e.dst.clone(), score: (w + g.node(&e.dst).unwrap().experience.quality) / 2.0 }
        })
        .collect();
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    all.truncate(k);
    all
}

pub fn random_seeds(r: &mut ChaCha8Rng, g: &MemoryGraph) -> Vec<Candidate> {
    let ids: Vec<ExperienceId> = g.ids().cloned().collect();
    let n = r.random_range(1..=ids.len().min(3));
    let mut picked: Vec<ExperienceId> = Vec::new();
    while picked.len() < n {
        let c = ids[r.random_range(0..ids.len())].clone();
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
        .into_iter()
        .map(|id| Candidate { id, sparse_score: 0.0, dense_score: 0.0, rerank_score: r.random_range(0.0..=1.0) })
        .collect()
}

/// Checks one trace against every invariant, replaying the visited set.
pub fn check_trace(g: &MemoryGraph, seeds: &[Candidate], trace: &RetrievalTrace, cfg: &RetrievalConfig) -> Result<(), String> {
    if trace.steps_used > cfg.t_max || trace.steps.len() != trace.steps_used {
        return Err(format!("budget: {} steps of {}", trace.steps_used, cfg.t_max));
    }
    let mut visited: BTreeSet<ExperienceId> = seeds.iter().map(|s| s.id.clone()).collect();
    let mut collected = Vec::new();
    for s in &trace.steps {
        if s.forward.len() > cfg.k_neighbors {
            return Err(format!("step {}: {} forward candidates", s.step, s.forward.len()));
        }
        if let Some(o) = s.forward.iter().chain(&s.backtrack).find(|o| visited.contains(&o.id)) {
            return Err(format!("step {}: visited {} offered again", s.step, o.id));
        }
        if s.forward != forward_oracle(g, &s.position, &visited, cfg.k_neighbors) {
            return Err(format!("step {}: forward list differs from the oracle", s.step));
        }
        match &s.action {
            Action::Collect if !collected.contains(&s.position) => collected.push(s.position.clone()),
            Action::Explore(t) | Action::Backtrack(t) => {
                visited.insert(t.clone());
            }
            _ => {}
        }
    }
    if collected != trace.collected {
        return Err("collected list disagrees with the Collect steps".into());
    }
    for (r, id) in trace.collected.iter().enumerate() {
        if trace.rank_of(id) != Some(r) {
            return Err(format!("rank of {id} is not {r}"));
        }
    }
    Ok(())
}
