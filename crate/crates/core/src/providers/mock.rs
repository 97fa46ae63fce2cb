//! Deterministic providers: scripted chat, trigram-hash embeddings and an
//! embedding-backed synergy judge. None of them touch the network, the
//! clock or a global RNG.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, ChatResponse, EmbeddingProvider, EmbeddingVector, ProviderError};
use crate::model::normalize_text;

pub const HASH_EMBEDDING_DIM: usize = 64;

/// One scripted reply: literal text, or a simulated transport failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    Text(String),
    Error { error: String },
}

/// Replies for requests whose user text contains `matcher`.
///
/// Replies are handed out in order; the last one repeats once the list is exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: String,
    pub replies: Vec<ScriptReply>,
}

impl ScriptRule {
    pub fn new(matcher: impl Into<String>, reply: impl Into<String>) -> Self {
        Self { matcher: matcher.into(), replies: vec![ScriptReply::Text(reply.into())] }
    }

    pub fn sequence<I, S>(matcher: impl Into<String>, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            matcher: matcher.into(),
            replies: replies.into_iter().map(|r| ScriptReply::Text(r.into())).collect(),
        }
    }

    pub fn failing(matcher: impl Into<String>, error: impl Into<String>) -> Self {
        Self { matcher: matcher.into(), replies: vec![ScriptReply::Error { error: error.into() }] }
    }
}

/// Chat provider that replays canned replies. First matching rule wins;
/// an unmatched request is an error so tests fail loudly.
#[derive(Debug)]
pub struct ScriptedChat {
    rules: Vec<ScriptRule>,
    cursors: Mutex<Vec<usize>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let n = rules.len();
        Self { rules, cursors: Mutex::new(vec![0; n]), log: Mutex::new(Vec::new()) }
    }

    /// Plain queue: every request matches, replies come out in order.
    pub fn queue<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(vec![ScriptRule::sequence("", replies)])
    }

    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let rules: Vec<ScriptRule> = serde_json::from_str(text)
            .map_err(|e| ProviderError::Config(format!("chat script: {e}")))?;
        Ok(Self::new(rules))
    }

    /// Every request seen so far, in order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("script log poisoned").clone()
    }
}

impl ChatProvider for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.check()?;
        self.log.lock().expect("script log poisoned").push(req.clone());
        let Some(idx) = self.rules.iter().position(|r| req.user.contains(&r.matcher)) else {
            let head: String = req.user.chars().take(200).collect();
            return Err(ProviderError::Unmatched(head));
        };
        let rule = &self.rules[idx];
        if rule.replies.is_empty() {
            return Err(ProviderError::Config(format!("rule {:?} has no replies", rule.matcher)));
        }
        let mut cursors = self.cursors.lock().expect("script cursor poisoned");
        let reply = &rule.replies[cursors[idx].min(rule.replies.len() - 1)];
        cursors[idx] += 1;
        match reply {
            ScriptReply::Text(t) => Ok(ChatResponse::text(t.clone())),
            ScriptReply::Error { error } => Err(ProviderError::Transport(error.clone())),
        }
    }
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character-trigram hashing into 64 buckets, unit-normalized.
///
/// Text is normalized first (lowercase, collapsed whitespace). Texts shorter
/// than three characters count as a single gram; empty text maps to the
/// first basis vector.
pub fn hash_embedding(text: &str) -> EmbeddingVector {
    let norm = normalize_text(text);
    let chars: Vec<char> = norm.chars().collect();
    let mut buckets = vec![0.0; HASH_EMBEDDING_DIM];
    let mut bump = |gram: &[char]| {
        let s: String = gram.iter().collect();
        buckets[(fnv1a(s.as_bytes()) % HASH_EMBEDDING_DIM as u64) as usize] += 1.0;
    };
    match chars.len() {
        0 => {}
        1 | 2 => bump(&chars),
        _ => chars.windows(3).for_each(bump),
    }
    EmbeddingVector::normalized(buckets)
}

/// Embedding provider backed by [`hash_embedding`].
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::Precondition("no texts to embed".into()));
        }
        Ok(texts.iter().map(|t| hash_embedding(t)).collect())
    }
}

/// Chat provider that answers only the pairwise similarity prompt, scoring
/// the two experiences by embedding cosine (floored at 0).
pub struct EmbeddingSynergyJudge<E> {
    embedder: E,
}

impl<E: EmbeddingProvider> EmbeddingSynergyJudge<E> {
    pub fn new(embedder: E) -> Self {
        Self { embedder }
    }
}

fn section<'a>(user: &'a str, header: &str) -> Option<(&'a str, &'a str)> {
    let rest = &user[user.find(header)? + header.len()..];
    let cond_start = rest.find("Condition: ")? + "Condition: ".len();
    let after_cond = &rest[cond_start..];
    let cond_end = after_cond.find("\nContent: ")?;
    let condition = &after_cond[..cond_end];
    let after_content = &after_cond[cond_end + "\nContent: ".len()..];
    let content_end = after_content.find("\n\n").unwrap_or(after_content.len());
    Some((condition, &after_content[..content_end]))
}

impl<E: EmbeddingProvider> ChatProvider for EmbeddingSynergyJudge<E> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.check()?;
        let (Some(a), Some(b)) = (section(&req.user, "## Experience A"), section(&req.user, "## Experience B")) else {
            let head: String = req.user.chars().take(200).collect();
            return Err(ProviderError::Unmatched(head));
        };
        let texts = vec![format!("{}\n{}", a.0, a.1), format!("{}\n{}", b.0, b.1)];
        let v = self.embedder.embed(&texts)?;
        let sim = v[0].cosine(&v[1]).clamp(0.0, 1.0);
        let reply = serde_json::json!({ "similarity": sim, "reason": "embedding cosine" });
        Ok(ChatResponse::text(reply.to_string()))
    }
}
