use std::collections::{BTreeSet, HashMap};

use crate::error::{invalid, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const PAD: usize = 4;
pub const UNK: usize = 5;
pub const SPECIALS: [&str; 6] = ["[CLS]", "[SEP]", "[BOS]", "[EOS]", "[PAD]", "[UNK]"];

/// Separator between queries inside a list field.
pub const LIST_SEP: char = ',';

/// Character vocabulary; specials occupy ids 0 to 5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    chars: HashMap<char, usize>,
}

impl Vocab {
    /// Every character seen in `texts` plus the list separator, sorted.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        set.insert(LIST_SEP);
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().map(String::from))
            .collect();
        Self::from_tokens(tokens).expect("fitted vocab is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(invalid("vocab", format!("the first tokens must be {}", SPECIALS.join(" "))));
        }
        let mut chars = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(SPECIALS.len()) {
            let mut it = t.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return Err(invalid("vocab", format!("token {i} ({t:?}) is not a single character")));
            };
            if chars.insert(c, i).is_some() {
                return Err(invalid("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, chars })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, c: char) -> usize {
        self.chars.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Query tokens followed by [EOS].
    pub fn encode_query(&self, query: &str) -> Vec<usize> {
        let mut ids = self.encode(query);
        ids.push(EOS);
        ids
    }

    /// Text of the non-special tokens, stopping at the first [EOS].
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= SPECIALS.len() && i < self.tokens.len())
            .map(|&i| self.tokens[i].as_str())
            .collect()
    }

    /// Tokens the decoder may emit: [EOS] and every character.
    pub fn is_generatable(&self, id: usize) -> bool {
        id == EOS || (id >= SPECIALS.len() && id < self.tokens.len())
    }

    /// One token per line, in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse_file(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_tokens(body.split('\n').map(String::from).collect())
    }
}
