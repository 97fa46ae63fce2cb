//! Experience tuples, decision entities and the role-edge grammar.
//!
//! Everything here is an immutable value type. Validation returns data
//! (a list of [`Violation`]s) rather than failing, so callers decide whether
//! a bad experience is fatal or merely dropped.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque experience identifier, e.g. `exp_0907`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperienceId(String);

impl ExperienceId {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    /// Sequential id used by the construction pipeline: `exp_0001`, `exp_0002`, ...
    pub fn numbered(n: usize) -> Self {
        Self(format!("exp_{n:04}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ExperienceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ExperienceId {
    fn from(value: &str) -> Self {
        Self(value.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    /// Pattern associated with success under the condition.
    Indication,
    /// Error pattern to avoid under the condition.
    Contraindication,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Indication => f.write_str("Indication"),
            Polarity::Contraindication => f.write_str("Contraindication"),
        }
    }
}

/// The atomic memory unit: condition, strategy content, polarity and quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub id: ExperienceId,
    pub condition: String,
    pub content: String,
    pub polarity: Polarity,
    pub quality: f64,
    pub task_type: String,
    pub evidence: String,
    /// Episode counter at insertion time.
    pub created_at: u64,
}

/// One broken rule on one field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every [`Experience`] invariant. An empty list means the experience is valid.
pub fn validate_experience(e: &Experience) -> Vec<Violation> {
    let mut out = Vec::new();
    if e.id.as_str().is_empty() {
        out.push(Violation { field: "id", rule: "id empty".into() });
    }
    if e.condition.trim().is_empty() {
        out.push(Violation { field: "condition", rule: "condition empty".into() });
    }
    if e.content.trim().is_empty() {
        out.push(Violation { field: "content", rule: "content empty".into() });
    }
    if !(0.0..=1.0).contains(&e.quality) {
        // NaN lands here too
        out.push(Violation { field: "quality", rule: "quality out of [0,1]".into() });
    }
    if e.task_type.trim().is_empty() {
        out.push(Violation { field: "task_type", rule: "task_type empty".into() });
    }
    out
}

/// Lowercases, collapses whitespace and trims surrounding punctuation.
///
/// Shared by task-type comparison, answer matching and entity surfaces.
pub fn normalize_text(raw: &str) -> String {
    let trimmed = raw.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Normalized task-type tag.
pub fn normalize_task_type(raw: &str) -> String {
    normalize_text(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityRole {
    Condition,
    Constraint,
    Action,
    Rationale,
    Outcome,
}

impl EntityRole {
    pub const ALL: [EntityRole; 5] = [
        EntityRole::Condition,
        EntityRole::Constraint,
        EntityRole::Action,
        EntityRole::Rationale,
        EntityRole::Outcome,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityRole::Condition => "Condition",
            EntityRole::Constraint => "Constraint",
            EntityRole::Action => "Action",
            EntityRole::Rationale => "Rationale",
            EntityRole::Outcome => "Outcome",
        }
    }

    /// Case-insensitive parse of a role name as models tend to write it.
    pub fn parse(raw: &str) -> Option<Self> {
        let s = raw.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|r| r.as_str().to_ascii_lowercase() == s)
    }
}

impl fmt::Display for EntityRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed decision entity with a normalized 1-3 word surface.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub role: EntityRole,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("rejected entity {raw:?}: {reason}")]
pub struct EntityRejection {
    pub raw: String,
    pub reason: String,
}

pub const MAX_ENTITY_WORDS: usize = 3;

pub fn normalize_entity(raw: &str, role: EntityRole) -> Result<Entity, EntityRejection> {
    let surface = normalize_text(raw);
    let words = surface.split(' ').filter(|w| !w.is_empty()).count();
    if words == 0 {
        return Err(EntityRejection { raw: raw.to_string(), reason: "empty".into() });
    }
    if words > MAX_ENTITY_WORDS {
        return Err(EntityRejection { raw: raw.to_string(), reason: format!("{words} words") });
    }
    Ok(Entity { surface, role })
}

/// The permitted role transitions. Outcome has no outgoing edges.
pub const ALLOWED_ROLE_EDGES: [(EntityRole, EntityRole); 15] = {
    use EntityRole::*;
    [
        (Condition, Action),
        (Condition, Condition),
        (Condition, Constraint),
        (Condition, Outcome),
        (Condition, Rationale),
        (Constraint, Action),
        (Constraint, Rationale),
        (Constraint, Outcome),
        (Action, Outcome),
        (Action, Rationale),
        (Action, Constraint),
        (Action, Action),
        (Rationale, Action),
        (Rationale, Outcome),
        (Rationale, Constraint),
    ]
};

pub fn role_edge_allowed(from: EntityRole, to: EntityRole) -> bool {
    ALLOWED_ROLE_EDGES.contains(&(from, to))
}

/// True iff the role pair is in the allowed grammar.
pub fn validate_role_edge(from: &Entity, to: &Entity) -> bool {
    role_edge_allowed(from.role, to.role)
}

/// Directed decision-flow edge between two entities of one experience.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoleEdge {
    pub from_entity: Entity,
    pub to_entity: Entity,
}

impl RoleEdge {
    /// Builds an edge if it is grammatical and not a self-loop.
    pub fn new(from_entity: Entity, to_entity: Entity) -> Option<Self> {
        (from_entity != to_entity && validate_role_edge(&from_entity, &to_entity))
            .then_some(Self { from_entity, to_entity })
    }

    pub fn roles(&self) -> (EntityRole, EntityRole) {
        (self.from_entity.role, self.to_entity.role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure,
}

/// One sampled reasoning trace for a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub case_id: String,
    pub steps: Vec<String>,
    pub outcome: Outcome,
    pub final_answer: String,
}

impl Trajectory {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// `Step 1: ...` lines followed by the final answer.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!("Step {}: {}\n", i + 1, step));
        }
        out.push_str(&format!("Final answer: {}", self.final_answer));
        out
    }
}

/// A task instance with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub prompt: String,
    pub gold_answer: String,
    pub task_type: String,
    /// Open-ended answers are judged by a model; closed-form ones by normalized exact match.
    #[serde(default)]
    pub open_ended: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Experience {
        Experience {
            id: "exp_0001".into(),
            condition: "suspected sepsis; elevated lactate".into(),
            content: "Start broad-spectrum antibiotics within one hour.".into(),
            polarity: Polarity::Indication,
            quality: 0.5,
            task_type: "treatment".into(),
            evidence: "traj 1 step 2".into(),
            created_at: 0,
        }
    }

    #[test]
    fn well_formed_experience_is_ok() {
        assert!(validate_experience(&sample()).is_empty());
    }

    #[test]
    fn quality_out_of_range() {
        let e = Experience { quality: 1.2, ..sample() };
        let v = validate_experience(&e);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "quality");
        assert_eq!(v[0].rule, "quality out of [0,1]");
        let e = Experience { quality: f64::NAN, ..sample() };
        assert_eq!(validate_experience(&e)[0].field, "quality");
    }

    #[test]
    fn empty_condition() {
        let e = Experience { condition: String::new(), ..sample() };
        let v = validate_experience(&e);
        assert_eq!(v, vec![Violation { field: "condition", rule: "condition empty".into() }]);
    }

    #[test]
    fn multiple_violations_are_all_reported() {
        let e = Experience {
            content: " ".into(),
            task_type: String::new(),
            quality: -0.1,
            ..sample()
        };
        let fields: Vec<_> = validate_experience(&e).iter().map(|v| v.field).collect();
        assert_eq!(fields, vec!["content", "quality", "task_type"]);
    }

    #[test]
    fn entity_normalization() {
        let e = normalize_entity("  Pancreatic Head Injury ", EntityRole::Condition).unwrap();
        assert_eq!(e.surface, "pancreatic head injury");
        assert_eq!(normalize_entity("IVC", EntityRole::Condition).unwrap().surface, "ivc");
        assert_eq!(normalize_entity("\"Sepsis.\"", EntityRole::Condition).unwrap().surface, "sepsis");
        assert_eq!(normalize_entity("b-cell   lymphoma", EntityRole::Condition).unwrap().surface, "b-cell lymphoma");
    }

    #[test]
    fn entity_word_count_rejection() {
        let err = normalize_entity("emergency damage control laparotomy with packing", EntityRole::Action)
            .unwrap_err();
        assert_eq!(err.reason, "6 words");
        let err = normalize_entity("emergency damage control laparotomy packing", EntityRole::Action)
            .unwrap_err();
        assert_eq!(err.reason, "5 words");
        assert_eq!(normalize_entity(" ... ", EntityRole::Action).unwrap_err().reason, "empty");
    }

    #[test]
    fn role_edge_table_covers_all_25_pairs() {
        use EntityRole::*;
        let allowed: &[(EntityRole, &[EntityRole])] = &[
            (Condition, &[Action, Condition, Constraint, Outcome, Rationale]),
            (Constraint, &[Action, Rationale, Outcome]),
            (Action, &[Outcome, Rationale, Constraint, Action]),
            (Rationale, &[Action, Outcome, Constraint]),
            (Outcome, &[]),
        ];
        let mut count = 0;
        for from in EntityRole::ALL {
            for to in EntityRole::ALL {
                let expected = allowed.iter().find(|(f, _)| *f == from).unwrap().1.contains(&to);
                assert_eq!(role_edge_allowed(from, to), expected, "{from}->{to}");
                count += usize::from(expected);
            }
        }
        assert_eq!(count, ALLOWED_ROLE_EDGES.len());
    }

    #[test]
    fn role_edge_examples() {
        let e = |s: &str, r| Entity { surface: s.into(), role: r };
        assert!(validate_role_edge(&e("sepsis", EntityRole::Condition), &e("antibiotics", EntityRole::Action)));
        assert!(!validate_role_edge(&e("survival", EntityRole::Outcome), &e("sepsis", EntityRole::Condition)));
        assert!(!validate_role_edge(&e("renal failure", EntityRole::Constraint), &e("sepsis", EntityRole::Condition)));
        let same = e("sepsis", EntityRole::Condition);
        assert!(RoleEdge::new(same.clone(), same).is_none());
    }

    #[test]
    fn role_parse_is_case_insensitive() {
        assert_eq!(EntityRole::parse("action"), Some(EntityRole::Action));
        assert_eq!(EntityRole::parse(" OUTCOME "), Some(EntityRole::Outcome));
        assert_eq!(EntityRole::parse("Goal"), None);
    }

    proptest! {
        #[test]
        fn normalize_entity_is_idempotent(raw in "[ A-Za-z.,;:!-]{0,40}") {
            if let Ok(once) = normalize_entity(&raw, EntityRole::Condition) {
                let twice = normalize_entity(&once.surface, EntityRole::Condition).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
