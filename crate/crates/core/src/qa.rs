//! Prompted answer generation over retrieved passages.

use crate::corpus::Passage;
use crate::error::Result;
use crate::llm::{ChatClient, ChatMessage};

pub const QA_INSTRUCTION: &str = "As an advanced reading comprehension assistant, your task is \
to analyze the provided passages and answer the question. Reply with the answer only: a short \
phrase or entity, with no explanation.";

/// Instruction, then titled passages in rank order, then the question.
pub fn build_answer_prompt(query: &str, passages: &[&Passage]) -> Vec<ChatMessage> {
    let mut user = String::new();
    for p in passages {
        user.push_str("Wikipedia Title: ");
        user.push_str(&p.title);
        user.push('\n');
        user.push_str(&p.text);
        user.push_str("\n\n");
    }
    user.push_str("Question: ");
    user.push_str(query);
    user.push_str("\nAnswer:");
    vec![ChatMessage::system(QA_INSTRUCTION), ChatMessage::user(user)]
}

pub enum Answerer {
    /// Deterministic stand-in for pipeline tests: the title of the top
    /// passage, or "unknown" with no context.
    Offline,
    Remote(ChatClient),
}

pub fn answer(query: &str, passages: &[&Passage], llm: &Answerer) -> Result<String> {
    match llm {
        Answerer::Offline => Ok(passages
            .first()
            .map(|p| p.title.trim().to_string())
            .filter(|t| !t.is_empty())
            .unwrap_or_else(|| "unknown".to_string())),
        Answerer::Remote(client) => {
            let reply = client.complete(&build_answer_prompt(query, passages))?;
            Ok(reply.trim().to_string())
        }
    }
}
