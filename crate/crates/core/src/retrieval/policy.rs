//! Action policies that steer traversal.

use std::collections::VecDeque;
use std::sync::Mutex;

use super::traverse::{Action, Offer};
use crate::construction::REPAIR_RETRIES;
use crate::graph::MemoryGraph;
use crate::model::ExperienceId;
use crate::prompts;
use crate::providers::{call_parsed, ChatProvider, DETERMINISTIC_TEMPERATURE};

/// What a policy sees at one step.
#[derive(Debug, Clone, Copy)]
pub struct PolicyView<'a> {
    pub query: &'a str,
    pub position: &'a ExperienceId,
    pub condition: &'a str,
    /// Rerank score for a seed, association score for a node reached by a move.
    pub entry_score: f64,
    pub is_collected: bool,
    pub forward: &'a [Offer],
    pub backtrack: &'a [Offer],
}

impl PolicyView<'_> {
    pub fn is_legal(&self, action: &Action) -> bool {
        match action {
            Action::Collect | Action::Stop => true,
            Action::Explore(id) => self.forward.iter().any(|o| &o.id == id),
            Action::Backtrack(id) => self.backtrack.iter().any(|o| &o.id == id),
        }
    }
}

pub trait ActionPolicy {
    fn decide(&self, g: &MemoryGraph, view: &PolicyView<'_>) -> Action;
}

/// Collect when the entry score clears the threshold, otherwise move to the
/// best forward candidate, then the best backtrack candidate, then stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyPolicy {
    pub collect_threshold: f64,
}

impl Default for GreedyPolicy {
    fn default() -> Self {
        Self { collect_threshold: 0.5 }
    }
}

impl ActionPolicy for GreedyPolicy {
    fn decide(&self, _g: &MemoryGraph, v: &PolicyView<'_>) -> Action {
        if !v.is_collected && v.entry_score >= self.collect_threshold {
            Action::Collect
        } else if let Some(o) = v.forward.first() {
            Action::Explore(o.id.clone())
        } else if let Some(o) = v.backtrack.first() {
            Action::Backtrack(o.id.clone())
        } else {
            Action::Stop
        }
    }
}

/// Replays a fixed list of actions, then stops.
#[derive(Debug, Default)]
pub struct ScriptedPolicy {
    actions: Mutex<VecDeque<Action>>,
}

impl ScriptedPolicy {
    pub fn new(actions: impl IntoIterator<Item = Action>) -> Self {
        Self { actions: Mutex::new(actions.into_iter().collect()) }
    }
}

impl ActionPolicy for ScriptedPolicy {
    fn decide(&self, _g: &MemoryGraph, _v: &PolicyView<'_>) -> Action {
        self.actions.lock().expect("script poisoned").pop_front().unwrap_or(Action::Stop)
    }
}

/// Parses `COLLECT`, `STOP`, `EXPLORE <id>` or `BACKTRACK <id>`.
pub fn parse_action(reply: &str) -> Result<Action, String> {
    let line = reply
        .lines()
        .map(|l| l.trim().trim_matches(|c: char| c == '`' || c == '*' || c == '"'))
        .find(|l| !l.is_empty())
        .ok_or("empty reply")?;
    let mut words = line.split_whitespace();
    let verb = words.next().unwrap_or_default().trim_matches(|c: char| !c.is_ascii_alphabetic()).to_ascii_uppercase();
    let target = words.next().map(|t| ExperienceId::new(t.trim_matches(|c: char| !c.is_alphanumeric() && c != '_')));
    match (verb.as_str(), target) {
        ("COLLECT", _) => Ok(Action::Collect),
        ("STOP", _) => Ok(Action::Stop),
        ("EXPLORE", Some(id)) => Ok(Action::Explore(id)),
        ("BACKTRACK", Some(id)) => Ok(Action::Backtrack(id)),
        _ => Err(format!("no action in {line:?}")),
    }
}

fn listing(g: &MemoryGraph, offers: &[Offer]) -> String {
    if offers.is_empty() {
        return "(none)".into();
    }
    offers
        .iter()
        .map(|o| {
            let cond = g.node(&o.id).map_or("", |n| n.experience.condition.as_str());
            format!("- {}: {}", o.id, cond)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks a model for each action. Only ids and conditions are shown. A reply
/// that stays unusable (or a failed call) falls back to the greedy rule for
/// that step.
pub struct LlmPolicy<'a> {
    pub provider: &'a dyn ChatProvider,
    pub fallback: GreedyPolicy,
}

impl<'a> LlmPolicy<'a> {
    pub fn new(provider: &'a dyn ChatProvider, fallback: GreedyPolicy) -> Self {
        Self { provider, fallback }
    }
}

impl ActionPolicy for LlmPolicy<'_> {
    fn decide(&self, g: &MemoryGraph, v: &PolicyView<'_>) -> Action {
        let state = if v.is_collected { "collected" } else { "not collected" };
        let req = prompts::POLICY
            .request(&[
                ("query", v.query),
                ("current_id", v.position.as_str()),
                ("collected_state", state),
                ("current_condition", v.condition),
                ("forward", &listing(g, v.forward)),
                ("backtrack", &listing(g, v.backtrack)),
            ])
            .with_temperature(DETERMINISTIC_TEMPERATURE);
        let parse = |reply: &str| {
            let a = parse_action(reply)?;
            if v.is_legal(&a) {
                Ok(a)
            } else {
                Err(format!("{a} is not one of the offered moves"))
            }
        };
        match call_parsed(self.provider, &req, REPAIR_RETRIES, parse) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("policy at {}: {e}; using the greedy rule", v.position);
                self.fallback.decide(g, v)
            }
        }
    }
}
