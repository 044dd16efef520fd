//! Text encoder with batch-contrastive prefix/query alignment and
//! co-occurrence prefix augmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndgrad::{Adam, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionRecord;
use crate::error::{invalid, Result};
use crate::nn::{self, StoredTensor};

/// Character unigrams plus within-word bigrams, with `^` marking a word start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignTokenizer {
    /// Feature strings; id 0 is the unknown feature.
    features: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

pub const UNK_FEATURE: &str = "<unk>";

fn features_of(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut prev = '^';
        for c in word.chars() {
            out.push(c.to_string());
            out.push(format!("{prev}{c}"));
            prev = c;
        }
    }
    out
}

impl AlignTokenizer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(features_of).collect();
        let features = std::iter::once(UNK_FEATURE.to_string()).chain(set).collect();
        Self::from_features(features)
    }

    pub fn from_features(features: Vec<String>) -> Self {
        let ids = features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        Self { features, ids }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Feature ids of `text`; unknown features are dropped, and a text with no
    /// known feature maps to the unknown id alone.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = features_of(text).iter().filter_map(|f| self.ids.get(f).copied()).collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

/// Mean-pooled feature embeddings through a tanh layer and a linear layer,
/// L2-normalised.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub tokenizer: AlignTokenizer,
    pub dims: EncoderDims,
    pub tau: f64,
    /// `[table, w1, b1, w2, b2]`.
    pub params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredEncoder {
    features: Vec<String>,
    dims: EncoderDims,
    tau: f64,
    tensors: Vec<StoredTensor>,
}

const PARAM_NAMES: [&str; 5] = ["table", "w1", "b1", "w2", "b2"];

impl TextEncoder {
    pub fn new(tokenizer: AlignTokenizer, dims: EncoderDims, tau: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            nn::uniform(&mut rng, &[tokenizer.len(), dims.d_emb], 1.0),
            nn::glorot(&mut rng, dims.d_emb, dims.d_hidden),
            nn::zeros(&[dims.d_hidden]),
            nn::glorot(&mut rng, dims.d_hidden, dims.d_out),
            nn::zeros(&[dims.d_out]),
        ];
        Self {
            tokenizer,
            dims,
            tau,
            params,
        }
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dims;
        let shapes = [
            vec![self.tokenizer.len(), d.d_emb],
            vec![d.d_emb, d.d_hidden],
            vec![d.d_hidden],
            vec![d.d_hidden, d.d_out],
            vec![d.d_out],
        ];
        PARAM_NAMES.iter().map(|n| n.to_string()).zip(shapes).collect()
    }

    /// Embeds a batch of texts as rows of a `[B, d_out]` node.
    pub fn forward(&self, g: &mut Graph<'_>, p: &[Var], texts: &[&str]) -> Result<Var> {
        if texts.is_empty() {
            return Err(invalid("encode_text", "empty batch"));
        }
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenizer.encode(t)).collect();
        let total: usize = ids.iter().map(Vec::len).sum();
        let mut pool = vec![0.0; texts.len() * total];
        let mut col = 0;
        for (row, t) in ids.iter().enumerate() {
            let w = 1.0 / t.len() as f64;
            for _ in t {
                pool[row * total + col] = w;
                col += 1;
            }
        }
        let flat: Vec<usize> = ids.concat();
        let emb = g.embedding(p[0], &flat)?;
        let pool = g.constant(vec![texts.len(), total], pool)?;
        let x = g.matmul(pool, emb)?;
        let h = g.matmul(x, p[1])?;
        let h = g.add_row(h, p[2])?;
        let h = g.tanh(h);
        let o = g.matmul(h, p[3])?;
        let o = g.add_row(o, p[4])?;
        Ok(g.l2_normalize(o))
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        self.encode_batch(&[text]).pop().expect("one row")
    }

    pub fn encode_batch(&self, texts: &[&str]) -> Vec<Vec<f64>> {
        if texts.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let p = nn::bind_frozen(&mut g, &self.params);
        let out = self.forward(&mut g, &p, texts).expect("encoder shapes are consistent");
        g.value(out).chunks(self.dims.d_out).map(<[f64]>::to_vec).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let names: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
        serde_json::to_value(StoredEncoder {
            features: self.tokenizer.features.clone(),
            dims: self.dims,
            tau: self.tau,
            tensors: nn::store(&names, &self.params),
        })
        .expect("encoder serialises")
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        let s: StoredEncoder = serde_json::from_value(v)?;
        let mut enc = Self {
            tokenizer: AlignTokenizer::from_features(s.features),
            dims: s.dims,
            tau: s.tau,
            params: Vec::new(),
        };
        enc.params = nn::restore(s.tensors, &enc.shapes())?;
        Ok(enc)
    }
}

/// Symmetrised in-batch softmax cross-entropy over cosine/tau logits; row
/// `i` of each side is the positive for row `i` of the other.
pub fn batch_contrastive_loss(g: &mut Graph<'_>, trigger: Var, target: Var, tau: f64) -> Result<Var> {
    let b = g.shape(trigger)[0];
    if b == 0 || g.shape(trigger) != g.shape(target) {
        return Err(invalid("batch_contrastive_loss", "need equal, non-empty batches"));
    }
    if !(tau > 0.0) {
        return Err(invalid("batch_contrastive_loss", "tau must be positive"));
    }
    let diag: Vec<usize> = (0..b).collect();
    let s = g.matmul_nt(trigger, target)?;
    let s = g.scale(s, 1.0 / tau);
    let fwd = g.log_softmax(s);
    let fwd = g.pick(fwd, &diag)?;
    let st = g.transpose(s);
    let bwd = g.log_softmax(st);
    let bwd = g.pick(bwd, &diag)?;
    let both = g.add(fwd, bwd)?;
    let m = g.mean(both);
    Ok(g.scale(m, -0.5))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningParams {
    pub min_cooccur: usize,
    pub min_sim: f64,
    /// Gap in seconds that closes a user session.
    pub session_gap: i64,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            min_cooccur: 1,
            min_sim: 0.3,
            session_gap: 1800,
        }
    }
}

/// Positive-level `(prefix, query)` co-occurrence counts.
pub fn prefix_query_counts(records: &[InteractionRecord]) -> BTreeMap<(String, String), usize> {
    let mut counts = BTreeMap::new();
    for r in records.iter().filter(|r| r.level.is_positive()) {
        *counts.entry((r.prefix.clone(), r.query.clone())).or_default() += 1;
    }
    counts
}

/// Unordered pairs of distinct queries positively engaged by one user
/// within a session, as `(smaller, larger)`.
pub fn session_query_pairs(records: &[InteractionRecord], session_gap: i64) -> BTreeSet<(String, String)> {
    let mut by_user: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.level.is_positive()) {
        by_user.entry(&r.user_id).or_default().push((r.ts, &r.query));
    }
    let mut pairs = BTreeSet::new();
    for events in by_user.values_mut() {
        events.sort();
        let mut start = 0;
        for i in 0..=events.len() {
            if i == events.len() || (i > 0 && events[i].0 - events[i - 1].0 > session_gap) {
                let session = &events[start..i];
                for (a, &(_, qa)) in session.iter().enumerate() {
                    for &(_, qb) in &session[a + 1..] {
                        if qa != qb {
                            let (x, y) = if qa < qb { (qa, qb) } else { (qb, qa) };
                            pairs.insert((x.to_string(), y.to_string()));
                        }
                    }
                }
                start = i;
            }
        }
    }
    pairs
}

/// Trigger/target training pairs: frequent prefix→query pairs plus session
/// query→query pairs, filtered by cosine under `encoder`.
pub fn mine_pairs(records: &[InteractionRecord], params: &MiningParams, encoder: &TextEncoder) -> Vec<(String, String)> {
    let mut raw: BTreeSet<(String, String)> = prefix_query_counts(records)
        .into_iter()
        .filter(|(_, c)| *c >= params.min_cooccur)
        .map(|(k, _)| k)
        .collect();
    raw.extend(session_query_pairs(records, params.session_gap));
    let texts: BTreeSet<&str> = raw.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    let texts: Vec<&str> = texts.into_iter().collect();
    let embs: HashMap<&str, Vec<f64>> = texts.iter().copied().zip(encoder.encode_batch(&texts)).collect();
    raw.iter()
        .filter(|(a, b)| cosine(&embs[a.as_str()], &embs[b.as_str()]) >= params.min_sim)
        .cloned()
        .collect()
}

/// `e_p* = (1 − w)·e_p + w·mean(query_embs)`, re-normalised. Returns `e_p`
/// unchanged when there is nothing to mix in.
pub fn augment_prefix(e_p: &[f64], query_embs: &[Vec<f64>], w: f64) -> Vec<f64> {
    if query_embs.is_empty() {
        return e_p.to_vec();
    }
    let mut mean = vec![0.0; e_p.len()];
    for q in query_embs {
        for (m, x) in mean.iter_mut().zip(q) {
            *m += x;
        }
    }
    let k = query_embs.len() as f64;
    let mut out: Vec<f64> = e_p.iter().zip(&mean).map(|(p, m)| (1.0 - w) * p + w * m / k).collect();
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for AlignTraining {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 32,
            lr: 3e-3,
        }
    }
}

/// Adam on the contrastive loss; returns the mean batch loss per epoch.
pub fn train_alignment(
    encoder: &mut TextEncoder,
    pairs: &[(String, String)],
    cfg: &AlignTraining,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.batch == 0 || pairs.len() < cfg.batch {
        return Err(invalid(
            "train_alignment",
            format!("{} pairs is fewer than the batch size {}", pairs.len(), cfg.batch),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch).filter(|c| c.len() >= 2) {
            let trig: Vec<&str> = chunk.iter().map(|&i| pairs[i].0.as_str()).collect();
            let targ: Vec<&str> = chunk.iter().map(|&i| pairs[i].1.as_str()).collect();
            let (loss, grads) = {
                let mut g = Graph::new();
                let p = nn::bind(&mut g, &encoder.params);
                let a = encoder.forward(&mut g, &p, &trig)?;
                let b = encoder.forward(&mut g, &p, &targ)?;
                let l = batch_contrastive_loss(&mut g, a, b, encoder.tau)?;
                g.backward(l)?;
                let grads: Vec<Vec<f64>> = p.iter().map(|&v| g.grad(v).expect("trainable").to_vec()).collect();
                (g.item(l), grads)
            };
            for (t, gr) in encoder.params.iter_mut().zip(&grads) {
                t.accumulate_grad(gr)?;
            }
            opt.step(&mut encoder.params)?;
            total += loss;
            n += 1;
        }
        curve.push(total / n.max(1) as f64);
    }
    Ok(curve)
}
