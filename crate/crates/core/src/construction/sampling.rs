//! Solving cases with the generation model and grading the answers.

use crate::model::{normalize_text, CaseRecord, Experience, Outcome, Polarity, Trajectory};
use crate::prompts;
use crate::providers::{
    call_parsed, CallError, ChatProvider, DETERMINISTIC_TEMPERATURE, SAMPLING_TEMPERATURE,
};

/// Repair retries for replies that do not parse.
pub const REPAIR_RETRIES: u32 = 1;

/// Block prepended to a case prompt for each injected experience.
pub fn render_experiences(experiences: &[&Experience]) -> String {
    let mut out = String::new();
    for e in experiences {
        let kind = match e.polarity {
            Polarity::Indication => "indication",
            Polarity::Contraindication => "contraindication (avoid this)",
        };
        out.push_str(&format!(
            "Relevant experience:\nType: {kind}\nCondition: {}\nContent: {}\n\n",
            e.condition, e.content
        ));
    }
    out
}

/// Splits a solver reply into reasoning steps and the final answer.
///
/// Every non-empty line before the answer is a step; a leading `Step N:`
/// label is removed. The last `Final answer:` line wins.
pub fn parse_solution(reply: &str) -> Result<(Vec<String>, String), String> {
    let mut steps = Vec::new();
    let mut answer = None;
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(rest) = strip_prefix_ci(line, "final answer:") {
            answer = Some(rest.trim().to_string());
            continue;
        }
        let step = strip_prefix_ci(line, "step")
            .and_then(|r| r.trim_start().split_once(':').filter(|(n, _)| n.trim().parse::<u32>().is_ok()))
            .map_or(line, |(_, body)| body.trim());
        if !step.is_empty() {
            steps.push(step.to_string());
        }
    }
    let answer = answer.filter(|a| !a.is_empty()).ok_or("no \"Final answer:\" line")?;
    if steps.is_empty() {
        return Err("no reasoning steps".into());
    }
    Ok((steps, answer))
}

fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    let head = line.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &line[prefix.len()..])
}

/// One solver call. Returns the trajectory with its outcome still unset
/// (reported as `Failure` until graded).
pub fn solve(
    case: &CaseRecord,
    experiences: &[&Experience],
    provider: &dyn ChatProvider,
    temperature: f64,
    seed: Option<u64>,
) -> Result<Trajectory, CallError> {
    let injected = render_experiences(experiences);
    let mut req = prompts::SOLVER
        .request(&[("experiences", &injected), ("case_prompt", &case.prompt)])
        .with_temperature(temperature);
    if let Some(s) = seed {
        req = req.with_seed(s);
    }
    let (steps, final_answer) = call_parsed(provider, &req, REPAIR_RETRIES, parse_solution)?;
    Ok(Trajectory { case_id: case.case_id.clone(), steps, outcome: Outcome::Failure, final_answer })
}

fn parse_verdict(reply: &str) -> Result<bool, String> {
    let word: String = reply
        .trim()
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err("expected yes or no".into()),
    }
}

/// Normalized exact match for closed-form cases; a yes/no model judgement
/// for open-ended ones.
pub fn answers_match(case: &CaseRecord, answer: &str, judge: &dyn ChatProvider) -> Result<bool, CallError> {
    if !case.open_ended {
        return Ok(normalize_text(answer) == normalize_text(&case.gold_answer));
    }
    let req = prompts::JUDGE
        .request(&[("gold_answer", &case.gold_answer), ("answer", answer)])
        .with_temperature(DETERMINISTIC_TEMPERATURE);
    call_parsed(judge, &req, REPAIR_RETRIES, parse_verdict)
}

/// Solves then grades.
pub fn solve_and_grade(
    case: &CaseRecord,
    experiences: &[&Experience],
    provider: &dyn ChatProvider,
    temperature: f64,
    seed: Option<u64>,
) -> Result<Trajectory, CallError> {
    let mut t = solve(case, experiences, provider, temperature, seed)?;
    if answers_match(case, &t.final_answer, provider)? {
        t.outcome = Outcome::Success;
    }
    Ok(t)
}

/// Sampling failed part-way; `completed` holds the trajectories already drawn.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("trajectory {index} of case {case_id} failed: {source}")]
pub struct SampleError {
    pub case_id: String,
    pub index: usize,
    pub completed: Vec<Trajectory>,
    pub source: CallError,
}

/// Draws `n` trajectories at sampling temperature, each with its own seed.
pub fn sample_trajectories(
    case: &CaseRecord,
    provider: &dyn ChatProvider,
    n: usize,
) -> Result<Vec<Trajectory>, SampleError> {
    let base = crate::providers::mock::fnv1a(case.case_id.as_bytes());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base.wrapping_add(i as u64);
        match solve_and_grade(case, &[], provider, SAMPLING_TEMPERATURE, Some(seed)) {
            Ok(t) => out.push(t),
            Err(source) => {
                return Err(SampleError { case_id: case.case_id.clone(), index: i, completed: out, source })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{ScriptRule, ScriptedChat};

    pub(crate) fn case(id: &str, gold: &str) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            prompt: format!("prompt of {id}"),
            gold_answer: gold.into(),
            task_type: "diagnosis".into(),
            open_ended: false,
        }
    }

    #[test]
    fn parse_solution_forms() {
        let (s, a) = parse_solution("Step 1: look\nStep 2: think\nFinal answer: Sepsis.").unwrap();
        assert_eq!(s, vec!["look", "think"]);
        assert_eq!(a, "Sepsis.");
        let (s, _) = parse_solution("first idea\nstep 10: second\nFINAL ANSWER: x").unwrap();
        assert_eq!(s, vec!["first idea", "second"]);
        assert!(parse_solution("Step 1: only thinking").is_err());
        assert!(parse_solution("Final answer: x").is_err());
    }

    #[test]
    fn scripted_three_of_five() {
        let replies = ["Step 1: a\nFinal answer: sepsis", "Step 1: b\nFinal answer: flu"];
        let chat = ScriptedChat::new(vec![ScriptRule::sequence(
            "prompt of c1",
            [replies[0], replies[1], replies[0], replies[1], replies[0]],
        )]);
        let ts = sample_trajectories(&case("c1", "Sepsis"), &chat, 5).unwrap();
        assert_eq!(ts.iter().filter(|t| t.is_success()).count(), 3);
        assert_eq!(ts.len(), 5);
        let reqs = chat.requests();
        assert!(reqs.iter().all(|r| r.temperature == SAMPLING_TEMPERATURE));
        let seeds: std::collections::BTreeSet<_> = reqs.iter().map(|r| r.sample_seed).collect();
        assert_eq!(seeds.len(), 5);
    }

    #[test]
    fn single_success() {
        let chat = ScriptedChat::queue(["Step 1: a\nFinal answer: sepsis"]);
        let ts = sample_trajectories(&case("c1", "sepsis"), &chat, 1).unwrap();
        assert_eq!(ts.len(), 1);
        assert!(ts[0].is_success());
    }

    #[test]
    fn failing_provider_keeps_partial_results() {
        let chat = ScriptedChat::from_json(
            r#"[{"match": "", "replies": ["Step 1: a\nFinal answer: sepsis", {"error": "down"}]}]"#,
        )
        .unwrap();
        let err = sample_trajectories(&case("c1", "sepsis"), &chat, 3).unwrap_err();
        assert_eq!(err.index, 1);
        assert_eq!(err.completed.len(), 1);
        assert!(matches!(err.source, CallError::Provider(_)));
    }

    #[test]
    fn open_ended_uses_judge() {
        let mut c = case("c1", "septic shock from pneumonia");
        c.open_ended = true;
        let chat = ScriptedChat::new(vec![
            ScriptRule::new("# Reference answer", "Yes."),
            ScriptRule::new("prompt of c1", "Step 1: a\nFinal answer: pneumonia with shock"),
        ]);
        let ts = sample_trajectories(&c, &chat, 1).unwrap();
        assert!(ts[0].is_success());
        let judge_req = &chat.requests()[1];
        assert_eq!(judge_req.temperature, DETERMINISTIC_TEMPERATURE);
        assert!(judge_req.user.contains("pneumonia with shock"));
    }

    #[test]
    fn injected_experience_block() {
        let mut e = crate::graph::tests::exp("e1");
        e.polarity = Polarity::Contraindication;
        let text = render_experiences(&[&e]);
        assert!(text.starts_with("Relevant experience:\n"));
        assert!(text.contains("Condition: condition of e1\nContent: content of e1\n\n"));
    }
}
