use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, LIST_SEP, SEP};
use crate::error::{invalid, Result};

/// Generator input: prefix, related queries, user history and profile.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserContext {
    pub prefix: String,
    pub related: Vec<String>,
    pub history: Vec<String>,
    pub profile: String,
}

impl UserContext {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputLimits {
    pub max_len: usize,
    pub max_related: usize,
    pub max_history: usize,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self {
            max_len: 160,
            max_related: 10,
            max_history: 10,
        }
    }
}

fn join_list(items: &[String], limit: usize, vocab: &Vocab) -> Vec<usize> {
    let mut ids = Vec::new();
    for (i, q) in items.iter().take(limit).enumerate() {
        if i > 0 {
            ids.push(vocab.id(LIST_SEP));
        }
        ids.extend(vocab.encode(q));
    }
    ids
}

/// `[CLS] p [SEP] H_p [SEP] H_u [SEP] U`.
///
/// When the sequence is too long, tokens are dropped from the end of H_u
/// first, then from the end of H_p. The prefix and profile are kept whole.
pub fn assemble_input(ctx: &UserContext, vocab: &Vocab, limits: &InputLimits) -> Result<Vec<usize>> {
    if ctx.prefix.is_empty() {
        return Err(invalid("assemble_input", "prefix must not be empty"));
    }
    let p = vocab.encode(&ctx.prefix);
    let u = vocab.encode(&ctx.profile);
    let mut hp = join_list(&ctx.related, limits.max_related, vocab);
    let mut hu = join_list(&ctx.history, limits.max_history, vocab);
    let fixed = p.len() + u.len() + 4;
    if fixed > limits.max_len {
        return Err(invalid(
            "assemble_input",
            format!("prefix and profile need {fixed} tokens, limit is {}", limits.max_len),
        ));
    }
    let budget = limits.max_len - fixed;
    if hp.len() + hu.len() > budget {
        hu.truncate(budget.saturating_sub(hp.len()));
        hp.truncate(budget - hu.len());
    }
    let mut ids = Vec::with_capacity(fixed + hp.len() + hu.len());
    ids.push(CLS);
    ids.extend(p);
    ids.push(SEP);
    ids.extend(hp);
    ids.push(SEP);
    ids.extend(hu);
    ids.push(SEP);
    ids.extend(u);
    Ok(ids)
}
