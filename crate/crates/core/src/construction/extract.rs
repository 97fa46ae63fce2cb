//! Turning trajectories into experience drafts.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::sampling::REPAIR_RETRIES;
use super::ConstructionError;
use crate::model::{validate_experience, CaseRecord, Experience, ExperienceId, Polarity, Trajectory};
use crate::prompts;
use crate::providers::{
    call_parsed, parse_json_array, parse_json_object, ChatProvider, EmbeddingProvider, ProviderError,
    DETERMINISTIC_TEMPERATURE,
};

/// Condition, content and polarity: what deduplication looks at.
pub trait ExperienceText {
    fn condition(&self) -> &str;
    fn content(&self) -> &str;
    fn polarity(&self) -> Polarity;

    fn dedup_text(&self) -> String {
        format!("{}\n{}", self.condition(), self.content())
    }
}

impl ExperienceText for Experience {
    fn condition(&self) -> &str {
        &self.condition
    }
    fn content(&self) -> &str {
        &self.content
    }
    fn polarity(&self) -> Polarity {
        self.polarity
    }
}

/// An extracted experience before it has an id or a quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceDraft {
    pub condition: String,
    pub content: String,
    pub polarity: Polarity,
    pub task_type: String,
    pub evidence: String,
    /// Case the draft was distilled from; excluded from its validation trials.
    pub source_case: String,
}

impl ExperienceText for ExperienceDraft {
    fn condition(&self) -> &str {
        &self.condition
    }
    fn content(&self) -> &str {
        &self.content
    }
    fn polarity(&self) -> Polarity {
        self.polarity
    }
}

impl ExperienceDraft {
    pub fn into_experience(self, id: ExperienceId, quality: f64, created_at: u64) -> Experience {
        Experience {
            id,
            condition: self.condition,
            content: self.content,
            polarity: self.polarity,
            quality,
            task_type: crate::model::normalize_task_type(&self.task_type),
            evidence: self.evidence,
            created_at,
        }
    }

    /// Checks the draft as an experience would be checked (quality aside).
    pub fn check(&self) -> Result<(), ConstructionError> {
        let probe = self.clone().into_experience(ExperienceId::new("draft"), 0.5, 0);
        let violations = validate_experience(&probe);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConstructionError::Invalid(violations))
        }
    }
}

/// Case text shown to the extraction prompts.
pub fn case_info(case: &CaseRecord) -> String {
    format!("Case ID: {}\nTask type: {}\n\n{}", case.case_id, case.task_type, case.prompt)
}

fn text_field(obj: &Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.trim().to_string()),
        Some(Value::Null) | None => Err(format!("missing \"{key}\"")),
        Some(other) => Ok(other.to_string()),
    }
}

fn optional_text(obj: &Map<String, Value>, key: &str) -> String {
    text_field(obj, key).unwrap_or_default()
}

fn draft_from(obj: &Map<String, Value>, polarity: Polarity, case: &CaseRecord) -> Result<ExperienceDraft, String> {
    let task_type = optional_text(obj, "task_type");
    Ok(ExperienceDraft {
        condition: text_field(obj, "condition")?,
        content: text_field(obj, "content")?,
        polarity,
        task_type: if task_type.is_empty() { case.task_type.clone() } else { task_type },
        evidence: optional_text(obj, "evidence"),
        source_case: case.case_id.clone(),
    })
}

/// Most drafts kept from one indication reply.
pub const MAX_INDICATIONS: usize = 2;

/// One call over all successful trajectories of a case.
pub fn extract_indications(
    case: &CaseRecord,
    successes: &[Trajectory],
    provider: &dyn ChatProvider,
) -> Result<Vec<ExperienceDraft>, ConstructionError> {
    if successes.is_empty() {
        return Err(ConstructionError::Precondition("indication extraction needs a successful trajectory".into()));
    }
    if let Some(t) = successes.iter().find(|t| !t.is_success()) {
        return Err(ConstructionError::Precondition(format!("trajectory of case {} is not a success", t.case_id)));
    }
    let trajectories = successes
        .iter()
        .enumerate()
        .map(|(i, t)| format!("## Trajectory T{}\n{}", i + 1, t.render()))
        .collect::<Vec<_>>()
        .join("\n\n");
    let req = prompts::INDICATION
        .request(&[("case_info", &case_info(case)), ("trajectory", &trajectories)])
        .with_temperature(DETERMINISTIC_TEMPERATURE);
    let parse = |reply: &str| -> Result<Vec<ExperienceDraft>, String> {
        let items = parse_json_array(reply)?;
        if items.is_empty() {
            return Err("empty array".into());
        }
        if items.len() > MAX_INDICATIONS {
            log::warn!("case {}: {} indications returned, keeping {MAX_INDICATIONS}", case.case_id, items.len());
        }
        items
            .iter()
            .take(MAX_INDICATIONS)
            .map(|v| v.as_object().ok_or("array item is not an object").map_err(String::from))
            .map(|o| o.and_then(|o| draft_from(o, Polarity::Indication, case)))
            .collect()
    };
    let drafts = call_parsed(provider, &req, REPAIR_RETRIES, parse)
        .map_err(|source| ConstructionError::Call { stage: "indication extraction", source })?;
    for d in &drafts {
        d.check()?;
    }
    Ok(drafts)
}

/// Where a failed trajectory parted ways with a successful one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub divergence_step: usize,
    pub success_decision: String,
    pub failure_decision: String,
    pub why_fatal: String,
    pub consequence: String,
}

fn parse_divergence(reply: &str, failure_steps: usize) -> Result<Divergence, String> {
    let obj = parse_json_object(reply)?;
    let step = match obj.get("divergence_step") {
        Some(Value::Number(n)) => n.as_u64(),
        Some(Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or("\"divergence_step\" is not a non-negative integer")? as usize;
    if !(1..=failure_steps).contains(&step) {
        return Err(format!("divergence_step {step} outside 1..={failure_steps}"));
    }
    Ok(Divergence {
        divergence_step: step,
        success_decision: text_field(&obj, "success_decision")?,
        failure_decision: text_field(&obj, "failure_decision")?,
        why_fatal: text_field(&obj, "why_fatal")?,
        consequence: text_field(&obj, "consequence")?,
    })
}

pub fn analyze_divergence(
    success: &Trajectory,
    failure: &Trajectory,
    gold: &str,
    provider: &dyn ChatProvider,
) -> Result<Divergence, ConstructionError> {
    if !success.is_success() || failure.is_success() {
        return Err(ConstructionError::Precondition(
            "divergence analysis needs one successful and one failed trajectory".into(),
        ));
    }
    let req = prompts::DIVERGENCE
        .request(&[
            ("success_trajectory", &success.render()),
            ("failure_trajectory", &failure.render()),
            ("gold_answer", gold),
            ("wrong_answer", &failure.final_answer),
        ])
        .with_temperature(DETERMINISTIC_TEMPERATURE);
    let n = failure.steps.len();
    call_parsed(provider, &req, REPAIR_RETRIES, |r| parse_divergence(r, n))
        .map_err(|source| ConstructionError::Call { stage: "divergence analysis", source })
}

/// The success whose step text embeds closest to the failure's; the earliest wins ties.
pub fn pair_failure_with_success<'a>(
    failure: &Trajectory,
    successes: &'a [Trajectory],
    embed: &dyn EmbeddingProvider,
) -> Result<&'a Trajectory, ConstructionError> {
    match successes {
        [] => Err(ConstructionError::Precondition("no successful trajectory to pair with".into())),
        [only] => Ok(only),
        _ => {
            let mut texts = vec![failure.steps.join("\n")];
            texts.extend(successes.iter().map(|s| s.steps.join("\n")));
            let v = embed.embed(&texts).map_err(ConstructionError::Provider)?;
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, e) in v[1..].iter().enumerate() {
                let sim = v[0].cosine(e);
                if sim > best_sim {
                    best = i;
                    best_sim = sim;
                }
            }
            Ok(&successes[best])
        }
    }
}

pub fn extract_contraindication(
    case: &CaseRecord,
    divergence: &Divergence,
    failure: &Trajectory,
    success: &Trajectory,
    provider: &dyn ChatProvider,
) -> Result<ExperienceDraft, ConstructionError> {
    if divergence.divergence_step == 0 || divergence.divergence_step > failure.steps.len() {
        return Err(ConstructionError::Precondition(format!(
            "divergence_step {} outside the failed trajectory",
            divergence.divergence_step
        )));
    }
    let divergence_json = serde_json::to_string_pretty(divergence).expect("divergence serializes");
    let reference = format!("The correct outcome is: {}", case.gold_answer);
    let req = prompts::CONTRAINDICATION
        .request(&[
            ("case_info", &case_info(case)),
            ("reference_analysis", &reference),
            ("divergence", &divergence_json),
            ("failure_trajectory", &failure.render()),
            ("success_trajectory", &success.render()),
        ])
        .with_temperature(DETERMINISTIC_TEMPERATURE);
    let parse = |reply: &str| draft_from(&parse_json_object(reply)?, Polarity::Contraindication, case);
    let draft = call_parsed(provider, &req, REPAIR_RETRIES, parse)
        .map_err(|source| ConstructionError::Call { stage: "contraindication extraction", source })?;
    draft.check()?;
    Ok(draft)
}

/// Greedy near-duplicate removal in input order.
///
/// An item is dropped when its embedding cosine with an already kept item of
/// the same polarity reaches `threshold`.
pub fn deduplicate<T: ExperienceText>(
    items: Vec<T>,
    embed: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<Vec<T>, ProviderError> {
    if items.is_empty() {
        return Ok(items);
    }
    let texts: Vec<String> = items.iter().map(ExperienceText::dedup_text).collect();
    let vectors = embed.embed(&texts)?;
    let mut kept: Vec<(T, crate::providers::EmbeddingVector)> = Vec::new();
    for (item, v) in items.into_iter().zip(vectors) {
        let duplicate = kept.iter().any(|(k, kv)| k.polarity() == item.polarity() && kv.cosine(&v) >= threshold);
        if !duplicate {
            kept.push((item, v));
        }
    }
    Ok(kept.into_iter().map(|(t, _)| t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Outcome;
    use crate::providers::{CallError, EmbeddingVector, HashEmbedder, ScriptedChat};

    fn case() -> CaseRecord {
        CaseRecord {
            case_id: "c1".into(),
            prompt: "A febrile patient".into(),
            gold_answer: "sepsis".into(),
            task_type: "Diagnosis".into(),
            open_ended: false,
        }
    }

    fn traj(outcome: Outcome, steps: usize) -> Trajectory {
        Trajectory {
            case_id: "c1".into(),
            steps: (1..=steps).map(|i| format!("step text {i}")).collect(),
            outcome,
            final_answer: if outcome == Outcome::Success { "sepsis".into() } else { "flu".into() },
        }
    }

    const TWO: &str = r#"[{"content": "In fever with hypotension, measure lactate.", "condition": "fever; hypotension",
        "task_type": "diagnosis", "evidence": "T1 step 2"},
        {"content": "Start antibiotics early.", "condition": "suspected sepsis", "task_type": "treatment", "evidence": "T2"}]"#;

    #[test]
    fn two_indications() {
        let chat = ScriptedChat::queue([TWO]);
        let d = extract_indications(&case(), &[traj(Outcome::Success, 2)], &chat).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|x| x.polarity == Polarity::Indication && x.source_case == "c1"));
        assert_eq!(d[1].task_type, "treatment");
        let user = &chat.requests()[0].user;
        assert!(user.contains("## Trajectory T1\nStep 1: step text 1"));
        assert!(user.contains("Case ID: c1"));
    }

    #[test]
    fn fenced_json_is_accepted() {
        let chat = ScriptedChat::queue([format!("```json\n{TWO}\n```")]);
        assert_eq!(extract_indications(&case(), &[traj(Outcome::Success, 2)], &chat).unwrap().len(), 2);
    }

    #[test]
    fn object_instead_of_array_fails_after_retry() {
        let chat = ScriptedChat::queue([r#"{"content": "x", "condition": "y"}"#]);
        let err = extract_indications(&case(), &[traj(Outcome::Success, 2)], &chat).unwrap_err();
        assert!(matches!(err, ConstructionError::Call { source: CallError::Parse { .. }, .. }));
        let reqs = chat.requests();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1].user.contains("could not be used"));
    }

    #[test]
    fn missing_task_type_falls_back_to_case() {
        let chat = ScriptedChat::queue([r#"[{"content": "x y", "condition": "z"}]"#]);
        let d = extract_indications(&case(), &[traj(Outcome::Success, 1)], &chat).unwrap();
        assert_eq!(d[0].task_type, "Diagnosis");
        let e = d[0].clone().into_experience("exp_0001".into(), 0.5, 0);
        assert_eq!(e.task_type, "diagnosis");
    }

    const DIV: &str = r#"{"divergence_step": 4, "success_decision": "lactate", "failure_decision": "discharge",
        "why_fatal": "missed shock", "consequence": "death"}"#;

    #[test]
    fn divergence_in_range() {
        let chat = ScriptedChat::queue([DIV]);
        let d = analyze_divergence(&traj(Outcome::Success, 5), &traj(Outcome::Failure, 6), "sepsis", &chat).unwrap();
        assert_eq!(d.divergence_step, 4);
        assert!(chat.requests()[0].user.contains("The failed trajectory resulted in: flu"));
    }

    #[test]
    fn divergence_out_of_range() {
        let chat = ScriptedChat::queue([DIV.replace(": 4", ": 99")]);
        let err = analyze_divergence(&traj(Outcome::Success, 5), &traj(Outcome::Failure, 6), "sepsis", &chat);
        match err {
            Err(ConstructionError::Call { source: CallError::Parse { reason, .. }, .. }) => {
                assert!(reason.contains("99"))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(chat.requests().len(), 2);
    }

    #[test]
    fn divergence_precondition() {
        let chat = ScriptedChat::queue([DIV]);
        let err = analyze_divergence(&traj(Outcome::Failure, 5), &traj(Outcome::Failure, 6), "sepsis", &chat);
        assert!(matches!(err, Err(ConstructionError::Precondition(_))));
        assert!(chat.requests().is_empty());
    }

    struct FixedEmbedder(Vec<Vec<f64>>);

    impl EmbeddingProvider for FixedEmbedder {
        fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
            Ok(self.0.iter().take(texts.len()).cloned().map(EmbeddingVector::normalized).collect())
        }
    }

    #[test]
    fn pairing_picks_most_similar() {
        let fail = traj(Outcome::Failure, 2);
        let succ = vec![traj(Outcome::Success, 1), traj(Outcome::Success, 3)];
        let only = pair_failure_with_success(&fail, &succ[..1], &HashEmbedder).unwrap();
        assert!(std::ptr::eq(only, &succ[0]));

        // cosines 0.9 and 0.2 with the failure
        let e = FixedEmbedder(vec![
            vec![1.0, 0.0],
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.2, (1.0f64 - 0.04).sqrt()],
        ]);
        assert!(std::ptr::eq(pair_failure_with_success(&fail, &succ, &e).unwrap(), &succ[0]));
        let e = FixedEmbedder(vec![vec![1.0, 0.0], vec![0.2, 0.9798], vec![0.9, 0.4359]]);
        assert!(std::ptr::eq(pair_failure_with_success(&fail, &succ, &e).unwrap(), &succ[1]));
        let tie = FixedEmbedder(vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(std::ptr::eq(pair_failure_with_success(&fail, &succ, &tie).unwrap(), &succ[0]));
    }

    fn div() -> Divergence {
        serde_json::from_str(DIV).unwrap()
    }

    #[test]
    fn contraindication_parses() {
        let chat = ScriptedChat::queue([
            r#"{"content": "In hypotension, do not discharge.", "condition": "fever; hypotension", "task_type": "diagnosis", "evidence": "step 4"}"#,
        ]);
        let d = extract_contraindication(&case(), &div(), &traj(Outcome::Failure, 6), &traj(Outcome::Success, 5), &chat)
            .unwrap();
        assert_eq!(d.polarity, Polarity::Contraindication);
        let user = &chat.requests()[0].user;
        assert!(user.contains("The correct outcome is: sepsis"));
        assert!(user.contains("\"divergence_step\": 4"));
    }

    #[test]
    fn contraindication_missing_condition() {
        let chat = ScriptedChat::queue([r#"{"content": "do not discharge"}"#]);
        let err =
            extract_contraindication(&case(), &div(), &traj(Outcome::Failure, 6), &traj(Outcome::Success, 5), &chat);
        assert!(matches!(err, Err(ConstructionError::Call { source: CallError::Parse { .. }, .. })));
    }

    #[test]
    fn contraindication_empty_content() {
        let chat = ScriptedChat::queue([r#"{"content": "  ", "condition": "x"}"#]);
        let err =
            extract_contraindication(&case(), &div(), &traj(Outcome::Failure, 6), &traj(Outcome::Success, 5), &chat);
        match err {
            Err(ConstructionError::Invalid(v)) => assert_eq!(v[0].rule, "content empty"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn draft(cond: &str, content: &str, polarity: Polarity) -> ExperienceDraft {
        ExperienceDraft {
            condition: cond.into(),
            content: content.into(),
            polarity,
            task_type: "diagnosis".into(),
            evidence: String::new(),
            source_case: "c1".into(),
        }
    }

    #[test]
    fn dedup_examples() {
        let a = draft("fever", "measure lactate", Polarity::Indication);
        let kept = deduplicate(vec![a.clone(), a.clone()], &HashEmbedder, 0.95).unwrap();
        assert_eq!(kept.len(), 1);
        let mut b = a.clone();
        b.polarity = Polarity::Contraindication;
        assert_eq!(deduplicate(vec![a.clone(), b], &HashEmbedder, 0.95).unwrap().len(), 2);
        let c = draft("fractured wrist", "splint and x-ray", Polarity::Indication);
        let kept = deduplicate(vec![a.clone(), c.clone()], &HashEmbedder, 0.95).unwrap();
        assert_eq!(kept, vec![a, c]);
    }
}
