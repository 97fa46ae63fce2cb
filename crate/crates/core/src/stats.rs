//! Summary statistics over a graph, and rank correlation.

use serde::Serialize;

use crate::graph::MemoryGraph;
use crate::model::Polarity;

pub const HISTOGRAM_BINS: usize = 10;

/// Counts of values in `[0,1]` over ten equal bins; 1.0 lands in the last bin.
pub fn histogram(values: impl IntoIterator<Item = f64>) -> [usize; HISTOGRAM_BINS] {
    let mut bins = [0; HISTOGRAM_BINS];
    for v in values {
        let i = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        bins[i] += 1;
    }
    bins
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation: Pearson over average ranks. `None` when either
/// side is constant or the lengths differ or are below 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub indications: usize,
    pub contraindications: usize,
    pub mean_quality: Option<f64>,
    pub quality_histogram: [usize; HISTOGRAM_BINS],
    pub weight_histogram: [usize; HISTOGRAM_BINS],
    pub episode_counter: u64,
}

impl GraphStats {
    pub fn of(g: &MemoryGraph) -> Self {
        let qs: Vec<f64> = g.nodes().map(|n| n.experience.quality).collect();
        let count = |p: Polarity| g.nodes().filter(|n| n.experience.polarity == p).count();
        Self {
            nodes: g.doc_count(),
            edges: g.edge_count(),
            indications: count(Polarity::Indication),
            contraindications: count(Polarity::Contraindication),
            mean_quality: (!qs.is_empty()).then(|| qs.iter().sum::<f64>() / qs.len() as f64),
            quality_histogram: histogram(qs.iter().copied()),
            weight_histogram: histogram(g.edges().map(|e| e.effective_weight())),
            episode_counter: g.episode_counter(),
        }
    }

    /// Plain-text report, one fact per line.
    pub fn render(&self) -> String {
        let mut out = format!(
            "nodes: {}\nedges: {}\nindications: {}\ncontraindications: {}\nepisodes: {}\n",
            self.nodes, self.edges, self.indications, self.contraindications, self.episode_counter
        );
        match self.mean_quality {
            Some(q) => out.push_str(&format!("mean_quality: {q:.6}\n")),
            None => out.push_str("mean_quality: n/a\n"),
        }
        for (name, bins) in [("quality", &self.quality_histogram), ("weight", &self.weight_histogram)] {
            out.push_str(&format!("{name}_histogram:\n"));
            for (i, c) in bins.iter().enumerate() {
                let lo = i as f64 / HISTOGRAM_BINS as f64;
                let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
                let close = if i + 1 == HISTOGRAM_BINS { ']' } else { ')' };
                out.push_str(&format!("  [{lo:.1}, {hi:.1}{close} {c}\n"));
            }
        }
        out
    }
}
