use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::SemanticId;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub query: String,
    pub embedding: Vec<f64>,
    pub codes: SemanticId,
}

/// Queries bucketed by every prefix of their semantic ID.
#[derive(Debug, Clone)]
pub struct QueryIndex {
    entries: Vec<IndexEntry>,
    levels: usize,
    buckets: HashMap<Vec<usize>, Vec<usize>>,
}

impl QueryIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let levels = entries.first().map_or(0, |e| e.codes.0.len());
        if entries.is_empty() || levels == 0 || entries.iter().any(|e| e.codes.0.len() != levels) {
            return Err(invalid("query index", "need entries with equal, non-empty semantic IDs"));
        }
        let mut buckets: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            for l in 1..=levels {
                buckets.entry(e.codes.0[..l].to_vec()).or_default().push(i);
            }
        }
        Ok(Self {
            entries,
            levels,
            buckets,
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Entry positions whose ID starts with `id_prefix`, in insertion order.
    pub fn bucket(&self, id_prefix: &[usize]) -> &[usize] {
        self.buckets.get(id_prefix).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    /// Related queries returned.
    pub k: usize,
    /// Relevance weight in the diversity screen, in `(0, 1)`.
    pub lambda_div: f64,
    /// Stop widening once this many times `k` candidates are gathered.
    pub candidate_factor: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            k: 10,
            lambda_div: 0.7,
            candidate_factor: 4,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Greedy maximal marginal relevance after dropping repeated strings.
/// Each step takes the candidate maximising
/// `λ·cos(c, prefix) − (1 − λ)·max cos(c, picked)`; earlier candidates win ties.
pub fn screen_candidates(candidates: &[(&str, &[f64])], prefix_emb: &[f64], k: usize, lambda_div: f64) -> Vec<String> {
    let mut seen = HashSet::new();
    let pool: Vec<&(&str, &[f64])> = candidates.iter().filter(|(q, _)| seen.insert(*q)).collect();
    let relevance: Vec<f64> = pool.iter().map(|(_, e)| cosine(e, prefix_emb)).collect();
    let mut redundancy = vec![f64::NEG_INFINITY; pool.len()];
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(k.min(pool.len()));
    while out.len() < k && out.len() < pool.len() {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            let red = if out.is_empty() { 0.0 } else { redundancy[i] };
            let score = lambda_div * relevance[i] - (1.0 - lambda_div) * red;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (i, _) = best.expect("an untaken candidate remains");
        taken[i] = true;
        out.push(pool[i].0.to_string());
        for j in (0..pool.len()).filter(|&j| !taken[j]) {
            redundancy[j] = redundancy[j].max(cosine(pool[j].1, pool[i].1));
        }
    }
    out
}

/// Fine-to-coarse walk: the full-ID bucket first, then buckets of shorter ID
/// prefixes, until `candidate_factor · k` candidates are gathered; the pool is
/// then diversity-screened down to `k`.
pub fn related_query_search(index: &QueryIndex, prefix_id: &SemanticId, prefix_emb: &[f64], params: &SearchParams) -> Vec<String> {
    let want = params.candidate_factor.max(1) * params.k;
    let mut picked: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for l in (1..=index.levels().min(prefix_id.0.len())).rev() {
        for &i in index.bucket(&prefix_id.0[..l]) {
            if seen.insert(i) {
                picked.push(i);
            }
        }
        if picked.len() >= want {
            break;
        }
    }
    let cands: Vec<(&str, &[f64])> = picked
        .iter()
        .map(|&i| {
            let e = &index.entries()[i];
            (e.query.as_str(), e.embedding.as_slice())
        })
        .collect();
    screen_candidates(&cands, prefix_emb, params.k, params.lambda_div)
}
