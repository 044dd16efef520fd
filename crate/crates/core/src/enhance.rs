//! Prefix representation enhancement: the aligned prefix embedding is mixed
//! with the queries it co-occurs with, quantized to a semantic ID, and used to
//! pull related queries from the index.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::align::{augment_prefix, prefix_query_counts, TextEncoder};
use crate::corpus::InteractionRecord;
use crate::error::Result;
use crate::rqvae::{related_query_search, IndexEntry, QueryIndex, RqvaeModel, SearchParams, SemanticId};
use crate::sugmodel::UserContext;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceParams {
    /// Mixing weight of the co-occurring queries.
    pub w: f64,
    pub search: SearchParams,
}

impl Default for EnhanceParams {
    fn default() -> Self {
        Self {
            w: 0.5,
            search: SearchParams::default(),
        }
    }
}

/// For each prefix, its positively engaged queries by descending count,
/// ties broken by query text, at most `limit` of them.
pub fn prefix2query(records: &[InteractionRecord], limit: usize) -> BTreeMap<String, Vec<String>> {
    let mut by_prefix: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for ((p, q), c) in prefix_query_counts(records) {
        by_prefix.entry(p).or_default().push((c, q));
    }
    by_prefix
        .into_iter()
        .map(|(p, mut qs)| {
            qs.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            (p, qs.into_iter().take(limit).map(|(_, q)| q).collect())
        })
        .collect()
}

/// Queries with at least `min_positive` positive-level records, sorted.
pub fn indexable_queries(records: &[InteractionRecord], min_positive: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.level.is_positive()) {
        *counts.entry(&r.query).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|(_, c)| *c >= min_positive.max(1))
        .map(|(q, _)| q.to_string())
        .collect()
}

/// Assigns semantic IDs to pre-embedded queries.
pub fn build_index(rqvae: &RqvaeModel, embedded: Vec<(String, Vec<f64>)>) -> Result<QueryIndex> {
    let embs: Vec<Vec<f64>> = embedded.iter().map(|(_, e)| e.clone()).collect();
    let ids = rqvae.assign_batch(&embs)?;
    let entries = embedded
        .into_iter()
        .zip(ids)
        .map(|((query, embedding), codes)| IndexEntry { query, embedding, codes })
        .collect();
    QueryIndex::new(entries)
}

/// Everything needed to turn a prefix into its related-query list.
#[derive(Debug, Clone)]
pub struct Enhancer {
    pub encoder: TextEncoder,
    pub rqvae: RqvaeModel,
    pub index: QueryIndex,
    pub prefix_queries: BTreeMap<String, Vec<String>>,
    pub params: EnhanceParams,
    embeddings: HashMap<String, usize>,
}

impl Enhancer {
    pub fn new(
        encoder: TextEncoder,
        rqvae: RqvaeModel,
        index: QueryIndex,
        prefix_queries: BTreeMap<String, Vec<String>>,
        params: EnhanceParams,
    ) -> Self {
        let embeddings = index.entries().iter().enumerate().map(|(i, e)| (e.query.clone(), i)).collect();
        Self {
            encoder,
            rqvae,
            index,
            prefix_queries,
            params,
            embeddings,
        }
    }

    fn query_embedding(&self, q: &str) -> Vec<f64> {
        match self.embeddings.get(q) {
            Some(&i) => self.index.entries()[i].embedding.clone(),
            None => self.encoder.encode(q),
        }
    }

    /// `e_p*`; plain `e_p` for prefixes never seen with a positive query.
    pub fn prefix_embedding(&self, prefix: &str) -> Vec<f64> {
        let e_p = self.encoder.encode(prefix);
        let qs: Vec<Vec<f64>> = self
            .prefix_queries
            .get(prefix)
            .map(|qs| qs.iter().map(|q| self.query_embedding(q)).collect())
            .unwrap_or_default();
        augment_prefix(&e_p, &qs, self.params.w)
    }

    pub fn semantic_id(&self, prefix: &str) -> Result<SemanticId> {
        self.rqvae.assign_semantic_id(&self.prefix_embedding(prefix))
    }

    /// `H_p` for `prefix`.
    pub fn related(&self, prefix: &str) -> Result<Vec<String>> {
        let e = self.prefix_embedding(prefix);
        let id = self.rqvae.assign_semantic_id(&e)?;
        Ok(related_query_search(&self.index, &id, &e, &self.params.search))
    }

    /// Fills `ctx.related` in place.
    pub fn enhance(&self, ctx: &mut UserContext) -> Result<()> {
        ctx.related = self.related(&ctx.prefix)?;
        Ok(())
    }
}
