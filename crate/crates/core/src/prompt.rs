//! Message construction for each prompting strategy.
//!
//! Shapes (system message first in every case):
//!
//! * zero-shot: `user(target + question)`
//! * one/few-shot: per demonstration `user(demo + question)`, `assistant(label)`,
//!   then `user(target + question)`
//! * chain-of-thought: phase 1 is the optional demonstration blocks
//!   `user(demo + reasoning question)`, `assistant(reasoning)`,
//!   `user(classification question)`, `assistant(label)` followed by
//!   `user(target + reasoning question)`; phase 2 is a single
//!   `user(classification question)` sent after the model's reasoning.
//! * self-consistency: the base strategy's script, run once per path.

use thiserror::Error;

use crate::inference::{InferenceClient, InferenceError};
use crate::model::{
    validate_plan, ChatMessage, Demonstration, LabelSchema, ModelProfile, PlanViolation,
    PromptPlan, QuestionOrder, Strategy,
};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("target text is empty")]
    EmptyTarget,
    #[error("plan `{plan}` does not fit its strategy: {reason}")]
    StrategyMismatch { plan: String, reason: String },
    #[error("plan `{plan}` is invalid: {}", join_violations(.violations))]
    Invalid {
        plan: String,
        violations: Vec<PlanViolation>,
    },
}

fn join_violations(v: &[PlanViolation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Ordered messages for one annotation, split into protocol phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnScript {
    phase_one: Vec<ChatMessage>,
    phase_two: Option<ChatMessage>,
}

impl TurnScript {
    pub fn single(messages: Vec<ChatMessage>) -> Self {
        TurnScript {
            phase_one: messages,
            phase_two: None,
        }
    }

    pub fn two_phase(phase_one: Vec<ChatMessage>, follow_up: ChatMessage) -> Self {
        TurnScript {
            phase_one,
            phase_two: Some(follow_up),
        }
    }

    /// 1 for single-turn strategies, 2 for chain-of-thought.
    pub fn phases(&self) -> usize {
        if self.phase_two.is_some() {
            2
        } else {
            1
        }
    }

    pub fn phase_one(&self) -> &[ChatMessage] {
        &self.phase_one
    }

    pub fn phase_two(&self) -> Option<&ChatMessage> {
        self.phase_two.as_ref()
    }
}

/// Joins a text and a question with a newline, optionally placing a
/// delimiter line such as `--- End of essay.` directly before the question.
pub fn interleave_question(
    text: &str,
    question: &str,
    order: QuestionOrder,
    delimiter: Option<&str>,
) -> String {
    match (order, delimiter) {
        (QuestionOrder::TextThenQuestion, None) => format!("{text}\n{question}"),
        (QuestionOrder::TextThenQuestion, Some(d)) => format!("{text}\n{d} {question}"),
        (QuestionOrder::QuestionThenText, None) => format!("{question}\n{text}"),
        (QuestionOrder::QuestionThenText, Some(d)) => format!("{question}\n{text}\n{d}"),
    }
}

fn with_question(plan: &PromptPlan, text: &str, question: &str) -> String {
    interleave_question(text, question, plan.order, plan.delimiter.as_deref())
}

fn mismatch(plan: &PromptPlan, reason: impl Into<String>) -> PromptError {
    PromptError::StrategyMismatch {
        plan: plan.name.clone(),
        reason: reason.into(),
    }
}

/// Builds the message script for `target_text` under `plan`.
///
/// Structural checks are repeated here so a plan that skipped
/// [`validate_plan`] cannot yield a malformed conversation. Demonstration
/// labels are not checked (that needs the schema); use
/// [`build_checked`] when one is at hand.
pub fn build_messages(plan: &PromptPlan, target_text: &str) -> Result<TurnScript, PromptError> {
    if target_text.trim().is_empty() {
        return Err(PromptError::EmptyTarget);
    }
    let strategy = plan
        .message_strategy()
        .ok_or_else(|| mismatch(plan, "self_consistency without base strategy"))?;
    if strategy == Strategy::SelfConsistency {
        return Err(mismatch(plan, "self_consistency cannot wrap itself"));
    }
    if plan.strategy == Strategy::SelfConsistency && plan.path_count() < 2 {
        return Err(mismatch(plan, "self_consistency needs at least 2 paths"));
    }

    let demos = &plan.demonstrations;
    let mut messages = vec![ChatMessage::system(plan.system_prompt.as_str())];

    match strategy {
        Strategy::ZeroShot | Strategy::OneShot | Strategy::FewShot => {
            match (strategy, demos.len()) {
                (Strategy::ZeroShot, 0) | (Strategy::OneShot, 1) => {}
                (Strategy::FewShot, n) if n >= 2 => {}
                (s, n) => return Err(mismatch(plan, format!("{s} with {n} demonstrations"))),
            }
            for demo in demos {
                messages.push(ChatMessage::user(with_question(plan, &demo.text, &plan.question)));
                messages.push(ChatMessage::assistant(demo.label.as_str()));
            }
            messages.push(ChatMessage::user(with_question(plan, target_text, &plan.question)));
            Ok(TurnScript::single(messages))
        }
        Strategy::ChainOfThought => {
            let reasoning_question = plan
                .reasoning_question
                .as_deref()
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| mismatch(plan, "chain_of_thought without reasoning question"))?;
            let final_question = plan.phase_two_question();
            for (i, demo) in demos.iter().enumerate() {
                let reasoning = demo
                    .reasoning
                    .as_deref()
                    .ok_or_else(|| mismatch(plan, format!("demonstration {i} lacks reasoning")))?;
                messages.push(ChatMessage::user(with_question(
                    plan,
                    &demo.text,
                    reasoning_question,
                )));
                messages.push(ChatMessage::assistant(reasoning));
                messages.push(ChatMessage::user(final_question));
                messages.push(ChatMessage::assistant(demo.label.as_str()));
            }
            messages.push(ChatMessage::user(with_question(
                plan,
                target_text,
                reasoning_question,
            )));
            Ok(TurnScript::two_phase(
                messages,
                ChatMessage::user(final_question),
            ))
        }
        Strategy::SelfConsistency => unreachable!("rejected above"),
    }
}

/// Validates the plan against `schema`, then builds the script.
pub fn build_checked(
    plan: &PromptPlan,
    schema: &LabelSchema,
    target_text: &str,
) -> Result<TurnScript, PromptError> {
    validate_plan(plan, schema).map_err(|violations| PromptError::Invalid {
        plan: plan.name.clone(),
        violations,
    })?;
    build_messages(plan, target_text)
}

/// What to do when the model fails to explain a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplainPolicy {
    FailFast,
    /// Drop the demonstration and keep going.
    Skip,
}

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("demonstration {index}: {source}")]
    Backend {
        index: usize,
        #[source]
        source: InferenceError,
    },
    #[error("demonstration {index}: model returned an empty explanation")]
    Empty { index: usize },
}

/// The request used to have the model explain a gold demonstration.
pub fn explanation_messages(plan: &PromptPlan, demo: &Demonstration) -> Vec<ChatMessage> {
    let task = with_question(plan, &demo.text, &plan.question);
    vec![
        ChatMessage::system(plan.system_prompt.as_str()),
        ChatMessage::user(format!(
            "{task}\nThe correct answer is '{}'. Briefly explain why this answer is correct.",
            demo.label
        )),
    ]
}

/// Explain-then-annotate, first step: asks the model to justify each gold
/// label and attaches the explanation as the demonstration's reasoning.
///
/// Requests use the profile's reasoning token budget. Order is preserved;
/// under [`ExplainPolicy::Skip`] failed demonstrations are left out.
pub async fn generate_explanations(
    demonstrations: &[Demonstration],
    plan: &PromptPlan,
    profile: &ModelProfile,
    client: &InferenceClient,
    policy: ExplainPolicy,
) -> Result<Vec<Demonstration>, ExplainError> {
    let max_tokens = profile.generation.reasoning_max_tokens();
    let calls = demonstrations.iter().map(|demo| {
        let messages = explanation_messages(plan, demo);
        async move {
            client
                .complete_with(profile, &messages, profile.generation.seed(), max_tokens)
                .await
        }
    });
    let replies = futures::future::join_all(calls).await;

    let mut out = Vec::with_capacity(demonstrations.len());
    for (index, (demo, reply)) in demonstrations.iter().zip(replies).enumerate() {
        let outcome = match reply {
            Err(source) => Err(ExplainError::Backend { index, source }),
            Ok(result) if result.content.trim().is_empty() => Err(ExplainError::Empty { index }),
            Ok(result) => Ok(demo.clone().with_reasoning(result.content.trim())),
        };
        match (outcome, policy) {
            (Ok(d), _) => out.push(d),
            (Err(e), ExplainPolicy::FailFast) => return Err(e),
            (Err(e), ExplainPolicy::Skip) => {
                tracing::warn!(plan = %plan.name, "skipping demonstration: {e}");
            }
        }
    }
    Ok(out)
}
