use std::collections::{BTreeMap, HashMap};

use super::InteractionRecord;

#[derive(Debug, Default, Clone)]
struct Node {
    children: BTreeMap<char, usize>,
    /// Query ending here and its positive-interaction count.
    terminal: Option<(String, usize)>,
}

/// Most-popular-completion baseline: a character trie over queries with
/// positive feedback, weighted by frequency.
#[derive(Debug, Clone)]
pub struct MpcTrie {
    nodes: Vec<Node>,
}

impl Default for MpcTrie {
    fn default() -> Self {
        Self {
            nodes: vec![Node::default()],
        }
    }
}

impl MpcTrie {
    pub fn build(records: &[InteractionRecord]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records.iter().filter(|r| r.level.is_positive()) {
            *counts.entry(&r.query).or_default() += 1;
        }
        let mut trie = Self::default();
        let mut sorted: Vec<_> = counts.into_iter().collect();
        sorted.sort_unstable();
        for (q, c) in sorted {
            trie.insert(q, c);
        }
        trie
    }

    pub fn insert(&mut self, query: &str, count: usize) {
        let mut at = 0;
        for ch in query.chars() {
            at = match self.nodes[at].children.get(&ch) {
                Some(&next) => next,
                None => {
                    self.nodes.push(Node::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[at].children.insert(ch, next);
                    next
                }
            };
        }
        let slot = &mut self.nodes[at].terminal;
        match slot {
            Some((_, c)) => *c += count,
            None => *slot = Some((query.to_string(), count)),
        }
    }

    /// Up to `k` completions of `prefix` by descending count, ties broken
    /// lexicographically.
    pub fn suggest(&self, prefix: &str, k: usize) -> Vec<(String, usize)> {
        let mut at = 0;
        for ch in prefix.chars() {
            match self.nodes[at].children.get(&ch) {
                Some(&next) => at = next,
                None => return Vec::new(),
            }
        }
        let mut found = Vec::new();
        let mut stack = vec![at];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if let Some(t) = &node.terminal {
                found.push(t.clone());
            }
            stack.extend(node.children.values().copied());
        }
        found.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        found.truncate(k);
        found
    }
}
