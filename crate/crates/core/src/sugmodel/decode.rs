//! Inference path: cached incremental decoding, beam search and scoring.
//!
//! The cached decoder calls the same kernels in the same order as the graph
//! path, so beam scores equal [`score_sequence`] bit for bit.

use ndgrad::kernels::{gemm, layer_norm_rows, log_softmax_rows, softmax_rows, MatRef};
use ndgrad::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use super::model::*;
use super::vocab::{BOS, EOS};
use crate::error::{invalid, Result};
use crate::nn;

/// Cross-attention keys and values of one encoded input, per layer and head.
pub struct EncodedInput {
    len: usize,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
}

/// Self-attention cache of one partial hypothesis.
#[derive(Clone)]
struct DecoderState {
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    len: usize,
}

fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, MatRef::rows(x, k), MatRef::rows(w.data(), n), &mut out, false);
    let bias = b.data();
    for r in out.chunks_exact_mut(n) {
        for (o, bb) in r.iter_mut().zip(bias) {
            *o = *o + bb;
        }
    }
    out
}

fn norm(x: &[f64], d: usize, g: &Tensor, b: &Tensor) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    layer_norm_rows(x, d, g.data(), b.data(), LN_EPS, &mut out, &mut xhat, &mut inv);
    out
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

/// Columns `[start, start + len)` of a row-major `[rows, cols]` matrix.
fn columns(x: &[f64], cols: usize, start: usize, len: usize) -> Vec<f64> {
    x.chunks_exact(cols).flat_map(|r| r[start..start + len].iter().copied()).collect()
}

/// One query row against `t` cached keys and values of width `dh`.
fn attend(q: &[f64], k: &[f64], v: &[f64], t: usize, dh: usize, scale: f64, out: &mut [f64]) {
    let mut s = vec![0.0; t];
    gemm(1, dh, t, MatRef::rows(q, dh), MatRef::transposed(k, dh), &mut s, false);
    s.iter_mut().for_each(|x| *x = *x * scale);
    let mut a = vec![0.0; t];
    softmax_rows(&s, t, &mut a);
    gemm(1, t, dh, MatRef::rows(&a, t), MatRef::rows(v, dh), out, false);
}

impl GenModel {
    fn head_dim(&self) -> usize {
        self.cfg.d_model / self.cfg.heads
    }

    pub fn encode_input(&self, ids: &[usize]) -> Result<EncodedInput> {
        let mut g = Graph::new();
        let p = nn::bind_frozen(&mut g, &self.params);
        let mem = self.encode_graph(&mut g, &p, ids)?;
        let mem = g.value(mem).to_vec();
        let (d, dh, t) = (self.cfg.d_model, self.head_dim(), ids.len());
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for l in 0..self.cfg.layers {
            let o = self.dec(l);
            let kv = linear(&mem, t, &self.params[o + D_CKV], &self.params[o + D_CKV + 1]);
            for h in 0..self.cfg.heads {
                cross_k.push(columns(&kv, 2 * d, h * dh, dh));
                cross_v.push(columns(&kv, 2 * d, d + h * dh, dh));
            }
        }
        Ok(EncodedInput { len: t, cross_k, cross_v })
    }

    fn empty_state(&self) -> DecoderState {
        let n = self.cfg.layers * self.cfg.heads;
        DecoderState {
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feeds one token to every state and returns next-token log-probs.
    fn step(&self, enc: &EncodedInput, states: &mut [DecoderState], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (d, dh, heads) = (self.cfg.d_model, self.head_dim(), self.cfg.heads);
        let rows = tokens.len();
        let pos = states[0].len;
        if pos >= self.cfg.max_dec_len {
            return Err(invalid("decode", "maximum decoder length reached"));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let emb = self.params[EMB].data();
        let sq = (d as f64).sqrt();
        let pe = &self.pe()[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = tokens
            .iter()
            .flat_map(|&t| emb[t * d..(t + 1) * d].iter().zip(pe).map(move |(e, p)| e * sq + p))
            .collect();
        let p = &self.params;
        for l in 0..self.cfg.layers {
            let o = self.dec(l);
            let h = norm(&x, d, &p[o + D_LN1], &p[o + D_LN1 + 1]);
            let qkv = linear(&h, rows, &p[o + D_QKV], &p[o + D_QKV + 1]);
            let mut att = vec![0.0; rows * d];
            for (r, st) in states.iter_mut().enumerate() {
                let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
                for hd in 0..heads {
                    let c = l * heads + hd;
                    st.self_k[c].extend_from_slice(&row[d + hd * dh..d + (hd + 1) * dh]);
                    st.self_v[c].extend_from_slice(&row[2 * d + hd * dh..2 * d + (hd + 1) * dh]);
                    let out = &mut att[r * d + hd * dh..r * d + (hd + 1) * dh];
                    attend(&row[hd * dh..(hd + 1) * dh], &st.self_k[c], &st.self_v[c], pos + 1, dh, scale, out);
                }
            }
            add_into(&mut x, &linear(&att, rows, &p[o + D_O], &p[o + D_O + 1]));

            let h = norm(&x, d, &p[o + D_LNC], &p[o + D_LNC + 1]);
            let q = linear(&h, rows, &p[o + D_CQ], &p[o + D_CQ + 1]);
            let mut att = vec![0.0; rows * d];
            for r in 0..rows {
                for hd in 0..heads {
                    let c = l * heads + hd;
                    let out = &mut att[r * d + hd * dh..r * d + (hd + 1) * dh];
                    attend(&q[r * d + hd * dh..r * d + (hd + 1) * dh], &enc.cross_k[c], &enc.cross_v[c], enc.len, dh, scale, out);
                }
            }
            add_into(&mut x, &linear(&att, rows, &p[o + D_CO], &p[o + D_CO + 1]));

            let h = norm(&x, d, &p[o + D_LN2], &p[o + D_LN2 + 1]);
            let mut f = linear(&h, rows, &p[o + D_FF1], &p[o + D_FF1 + 1]);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            add_into(&mut x, &linear(&f, rows, &p[o + D_FF2], &p[o + D_FF2 + 1]));
        }
        for st in states.iter_mut() {
            st.len += 1;
        }
        let h = norm(&x, d, &p[DEC_LN], &p[DEC_LN + 1]);
        let v = self.vocab.len();
        let mut logits = vec![0.0; rows * v];
        gemm(rows, d, v, MatRef::rows(&h, d), MatRef::transposed(emb, d), &mut logits, false);
        let mut lp = vec![0.0; rows * v];
        log_softmax_rows(&logits, v, &mut lp);
        Ok(lp.chunks_exact(v).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum generated tokens, [EOS] included.
    pub max_len: usize,
    /// Final ranking divides scores by `len^length_penalty`; 0 disables it.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 32,
            max_len: 24,
            length_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens; ends with [EOS] when finished.
    pub ids: Vec<usize>,
    pub text: String,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

struct Alive {
    ids: Vec<usize>,
    score: f64,
    state: DecoderState,
}

fn by_score(a: (f64, &[usize]), b: (f64, &[usize])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Breadth-first beam search over summed log-probabilities.
///
/// Each step keeps the best `beam_size` extensions; those ending in [EOS]
/// retire to the finished pool. The search stops at `max_len` or once no
/// live hypothesis can beat the worst of a full pool. Returns finished
/// hypotheses plus any that reached `max_len`, sorted by score (ties by
/// token ids), with duplicate strings removed.
pub fn beam_search(model: &GenModel, input: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_size == 0 {
        return Err(invalid("beam_search", "beam size must be at least 1"));
    }
    let max_len = cfg.max_len.min(model.cfg.max_dec_len);
    let enc = model.encode_input(input)?;
    let b = cfg.beam_size;
    let allowed: Vec<usize> = (0..model.vocab.len()).filter(|&i| model.vocab.is_generatable(i)).collect();
    let mut alive = vec![Alive {
        ids: Vec::new(),
        score: 0.0,
        state: model.empty_state(),
    }];
    let mut pool: Vec<(Vec<usize>, f64)> = Vec::new();
    let prune = cfg.length_penalty == 0.0;
    let mut reached_max = false;

    for step in 0..max_len {
        let tokens: Vec<usize> = alive.iter().map(|a| a.ids.last().copied().unwrap_or(BOS)).collect();
        let (heads, mut states): (Vec<(Vec<usize>, f64)>, Vec<DecoderState>) =
            alive.into_iter().map(|a| ((a.ids, a.score), a.state)).unzip();
        let lp = model.step(&enc, &mut states, &tokens)?;

        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::with_capacity(heads.len() * allowed.len());
        for (i, (ids, score)) in heads.iter().enumerate() {
            for &t in &allowed {
                let mut ids = ids.clone();
                ids.push(t);
                cands.push((score + lp[i][t], ids, i));
            }
        }
        cands.sort_by(|x, y| by_score((x.0, &x.1), (y.0, &y.1)));
        cands.truncate(b);

        let mut next = Vec::new();
        for (score, ids, parent) in cands {
            if ids.last() == Some(&EOS) {
                pool.push((ids, score));
            } else {
                next.push(Alive {
                    ids,
                    score,
                    state: states[parent].clone(),
                });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if step + 1 == max_len {
            reached_max = true;
            break;
        }
        if prune && pool.len() >= b {
            pool.sort_by(|x, y| by_score((x.1, &x.0), (y.1, &y.0)));
            pool.truncate(b);
            let worst = pool[b - 1].1;
            let best = alive.iter().map(|a| a.score).fold(f64::NEG_INFINITY, f64::max);
            if best < worst {
                break;
            }
        }
    }

    let mut out: Vec<Hypothesis> = pool
        .into_iter()
        .map(|(ids, score)| (ids, score, true))
        .chain(alive.into_iter().filter(|_| reached_max).map(|a| (a.ids, a.score, false)))
        .map(|(ids, score, finished)| Hypothesis {
            text: model.vocab.decode(&ids),
            ids,
            score,
            finished,
        })
        .collect();
    let key = |h: &Hypothesis| {
        if cfg.length_penalty == 0.0 {
            h.score
        } else {
            h.score / (h.ids.len() as f64).powf(cfg.length_penalty)
        }
    };
    out.sort_by(|x, y| by_score((key(x), &x.ids), (key(y), &y.ids)));
    let mut seen = std::collections::HashSet::new();
    out.retain(|h| seen.insert(h.text.clone()));
    out.truncate(b);
    Ok(out)
}

/// Teacher-forced log-probability of `target` (append [EOS] to score a
/// complete query).
pub fn score_sequence(model: &GenModel, input: &[usize], target: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = nn::bind_frozen(&mut g, &model.params);
    let mem = model.encode_graph(&mut g, &p, input)?;
    let s = model.sequence_logprob(&mut g, &p, mem, target)?;
    Ok(g.item(s))
}

/// Log-probabilities of several targets sharing one encoder pass.
pub fn score_many(model: &GenModel, input: &[usize], targets: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = nn::bind_frozen(&mut g, &model.params);
    let mem = model.encode_graph(&mut g, &p, input)?;
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let mark = g.len();
        let s = model.sequence_logprob(&mut g, &p, mem, t)?;
        out.push(g.item(s));
        g.truncate(mark);
    }
    Ok(out)
}
