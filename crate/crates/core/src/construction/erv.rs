//! Initial quality from held-out validation trials.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::solve_and_grade;
use super::ConstructionError;
use crate::model::{CaseRecord, Experience};
use crate::providers::{ChatProvider, DETERMINISTIC_TEMPERATURE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErvResult {
    pub successes: usize,
    pub trials: usize,
    pub accuracy: f64,
    pub q0: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Baseline accuracy `ceil(n/2) / n` that maps to quality 0.5.
pub fn erv_baseline(n_erv: usize) -> f64 {
    n_erv.div_ceil(2) as f64 / n_erv as f64
}

/// `q0 = sigmoid(successes / n_erv - baseline)`.
pub fn erv_quality(successes: usize, n_erv: usize) -> Result<ErvResult, ConstructionError> {
    if n_erv == 0 || successes > n_erv {
        return Err(ConstructionError::Precondition(format!(
            "validation needs 0 <= successes <= trials and trials >= 1 (got {successes}/{n_erv})"
        )));
    }
    let accuracy = successes as f64 / n_erv as f64;
    Ok(ErvResult { successes, trials: n_erv, accuracy, q0: sigmoid(accuracy - erv_baseline(n_erv)) })
}

/// Answers `n_erv` held-out cases with `e` injected and scores the accuracy.
///
/// The trial cases are drawn without replacement by a generator seeded from
/// `seed` and the experience id, so reruns pick the same cases.
pub fn run_erv(
    e: &Experience,
    held_out: &[CaseRecord],
    provider: &dyn ChatProvider,
    n_erv: usize,
    seed: u64,
) -> Result<ErvResult, ConstructionError> {
    if n_erv == 0 || held_out.len() < n_erv {
        return Err(ConstructionError::Precondition(format!(
            "validation of {} needs {n_erv} held-out cases, have {}",
            e.id,
            held_out.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::providers::mock::fnv1a(e.id.as_str().as_bytes()));
    let mut picks = sample(&mut rng, held_out.len(), n_erv).into_vec();
    picks.sort_unstable();
    let mut successes = 0;
    for (trial, &i) in picks.iter().enumerate() {
        let t = solve_and_grade(&held_out[i], &[e], provider, DETERMINISTIC_TEMPERATURE, None)
            .map_err(|source| ConstructionError::Erv { id: e.id.clone(), trial, source })?;
        successes += usize::from(t.is_success());
    }
    erv_quality(successes, n_erv)
}
