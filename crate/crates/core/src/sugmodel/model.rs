use ndgrad::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOS};
use crate::error::{invalid, Result};
use crate::nn::{self, StoredTensor};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 2,
            d_ff: 128,
            max_enc_len: 160,
            max_dec_len: 24,
        }
    }
}

// Parameter layout: globals, then encoder layers, then decoder layers.
pub(crate) const EMB: usize = 0;
pub(crate) const ENC_LN: usize = 1;
pub(crate) const DEC_LN: usize = 3;
const GLOBALS: usize = 5;
const ENC_PER: usize = 12;
const DEC_PER: usize = 20;

// Offsets inside an encoder layer.
pub(crate) const E_LN1: usize = 0;
pub(crate) const E_QKV: usize = 2;
pub(crate) const E_O: usize = 4;
pub(crate) const E_LN2: usize = 6;
pub(crate) const E_FF1: usize = 8;
pub(crate) const E_FF2: usize = 10;

// Offsets inside a decoder layer.
pub(crate) const D_LN1: usize = 0;
pub(crate) const D_QKV: usize = 2;
pub(crate) const D_O: usize = 4;
pub(crate) const D_LNC: usize = 6;
pub(crate) const D_CQ: usize = 8;
pub(crate) const D_CKV: usize = 10;
pub(crate) const D_CO: usize = 12;
pub(crate) const D_LN2: usize = 14;
pub(crate) const D_FF1: usize = 16;
pub(crate) const D_FF2: usize = 18;

/// Encoder-decoder transformer with tied input/output embeddings.
#[derive(Debug, Clone)]
pub struct GenModel {
    pub cfg: GenConfig,
    pub vocab: Vocab,
    pub params: Vec<Tensor>,
    pe: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredGen {
    cfg: GenConfig,
    tokens: Vec<String>,
    tensors: Vec<StoredTensor>,
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / d as f64);
            let a = pos as f64 * freq;
            pe[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

/// Additive mask hiding keys after each query position.
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = MASKED;
        }
    }
    m
}

fn layer_shapes(cfg: &GenConfig, vocab: usize) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("emb".into(), vec![vocab, d]),
        ("enc_ln.g".into(), vec![d]),
        ("enc_ln.b".into(), vec![d]),
        ("dec_ln.g".into(), vec![d]),
        ("dec_ln.b".into(), vec![d]),
    ];
    let lin = |out: &mut Vec<(String, Vec<usize>)>, name: String, a: usize, b: usize| {
        out.push((format!("{name}.w"), vec![a, b]));
        out.push((format!("{name}.b"), vec![b]));
    };
    let ln = |out: &mut Vec<(String, Vec<usize>)>, name: String| {
        out.push((format!("{name}.g"), vec![d]));
        out.push((format!("{name}.b"), vec![d]));
    };
    for l in 0..cfg.layers {
        ln(&mut out, format!("enc{l}.ln1"));
        lin(&mut out, format!("enc{l}.qkv"), d, 3 * d);
        lin(&mut out, format!("enc{l}.o"), d, d);
        ln(&mut out, format!("enc{l}.ln2"));
        lin(&mut out, format!("enc{l}.ff1"), d, f);
        lin(&mut out, format!("enc{l}.ff2"), f, d);
    }
    for l in 0..cfg.layers {
        ln(&mut out, format!("dec{l}.ln1"));
        lin(&mut out, format!("dec{l}.qkv"), d, 3 * d);
        lin(&mut out, format!("dec{l}.o"), d, d);
        ln(&mut out, format!("dec{l}.lnc"));
        lin(&mut out, format!("dec{l}.cq"), d, d);
        lin(&mut out, format!("dec{l}.ckv"), d, 2 * d);
        lin(&mut out, format!("dec{l}.co"), d, d);
        ln(&mut out, format!("dec{l}.ln2"));
        lin(&mut out, format!("dec{l}.ff1"), d, f);
        lin(&mut out, format!("dec{l}.ff2"), f, d);
    }
    out
}

impl GenModel {
    pub fn new(vocab: Vocab, cfg: GenConfig, seed: u64) -> Result<Self> {
        if cfg.d_model == 0 || cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(invalid("gen_model", "d_model must be a positive multiple of heads"));
        }
        if cfg.layers == 0 || cfg.d_ff == 0 || cfg.max_enc_len == 0 || cfg.max_dec_len == 0 {
            return Err(invalid("gen_model", "layers, d_ff and lengths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let params = layer_shapes(&cfg, vocab.len())
            .into_iter()
            .map(|(name, shape)| {
                if name == "emb" {
                    nn::uniform(&mut rng, &shape, (3.0 / d as f64).sqrt())
                } else if name.ends_with(".g") {
                    nn::filled(&shape, 1.0)
                } else if shape.len() == 1 {
                    nn::zeros(&shape)
                } else {
                    nn::glorot(&mut rng, shape[0], shape[1])
                }
            })
            .collect();
        Ok(Self::assemble(cfg, vocab, params))
    }

    fn assemble(cfg: GenConfig, vocab: Vocab, params: Vec<Tensor>) -> Self {
        let pe = positional_encoding(cfg.max_enc_len.max(cfg.max_dec_len), cfg.d_model);
        Self { cfg, vocab, params, pe }
    }

    pub fn param_names(&self) -> Vec<String> {
        layer_shapes(&self.cfg, self.vocab.len()).into_iter().map(|(n, _)| n).collect()
    }

    pub(crate) fn enc(&self, l: usize) -> usize {
        GLOBALS + ENC_PER * l
    }

    pub(crate) fn dec(&self, l: usize) -> usize {
        GLOBALS + ENC_PER * self.cfg.layers + DEC_PER * l
    }

    pub(crate) fn pe(&self) -> &[f64] {
        &self.pe
    }

    fn embed(&self, g: &mut Graph<'_>, p: &[Var], ids: &[usize]) -> Result<Var> {
        let d = self.cfg.d_model;
        let e = g.embedding(p[EMB], ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        Ok(g.add_const(e, &self.pe[..ids.len() * d])?)
    }

    fn linear(g: &mut Graph<'_>, p: &[Var], at: usize, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[at])?;
        Ok(g.add_row(y, p[at + 1])?)
    }

    fn norm(g: &mut Graph<'_>, p: &[Var], at: usize, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[at], p[at + 1], LN_EPS)?)
    }

    /// Multi-head attention of `q[Tq, d]` over `k, v[Tk, d]`.
    fn attention(&self, g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<&[f64]>) -> Result<Var> {
        let dh = self.cfg.d_model / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add_const(s, m)?;
            }
            let a = g.softmax(s);
            heads.push(g.matmul(a, vh)?);
        }
        Ok(g.concat(&heads, 1)?)
    }

    fn feed_forward(g: &mut Graph<'_>, p: &[Var], ff1: usize, ff2: usize, x: Var) -> Result<Var> {
        let h = Self::linear(g, p, ff1, x)?;
        let h = g.relu(h);
        Self::linear(g, p, ff2, h)
    }

    /// Encoder states `[T, d]` for an assembled input.
    pub fn encode_graph(&self, g: &mut Graph<'_>, p: &[Var], ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.cfg.max_enc_len {
            return Err(invalid(
                "encode",
                format!("input length {} outside 1..={}", ids.len(), self.cfg.max_enc_len),
            ));
        }
        let d = self.cfg.d_model;
        let mut x = self.embed(g, p, ids)?;
        for l in 0..self.cfg.layers {
            let o = self.enc(l);
            let h = Self::norm(g, p, o + E_LN1, x)?;
            let qkv = Self::linear(g, p, o + E_QKV, h)?;
            let q = g.slice(qkv, 1, 0, d)?;
            let k = g.slice(qkv, 1, d, d)?;
            let v = g.slice(qkv, 1, 2 * d, d)?;
            let a = self.attention(g, q, k, v, None)?;
            let a = Self::linear(g, p, o + E_O, a)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, p, o + E_LN2, x)?;
            let f = Self::feed_forward(g, p, o + E_FF1, o + E_FF2, h)?;
            x = g.add(x, f)?;
        }
        Self::norm(g, p, ENC_LN, x)
    }

    /// Next-token logits `[T, V]` for decoder inputs `ids` given encoder states.
    pub fn decode_graph(&self, g: &mut Graph<'_>, p: &[Var], memory: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.cfg.max_dec_len {
            return Err(invalid(
                "decode",
                format!("decoder length {} outside 1..={}", ids.len(), self.cfg.max_dec_len),
            ));
        }
        let d = self.cfg.d_model;
        let mask = causal_mask(ids.len());
        let mut y = self.embed(g, p, ids)?;
        for l in 0..self.cfg.layers {
            let o = self.dec(l);
            let h = Self::norm(g, p, o + D_LN1, y)?;
            let qkv = Self::linear(g, p, o + D_QKV, h)?;
            let q = g.slice(qkv, 1, 0, d)?;
            let k = g.slice(qkv, 1, d, d)?;
            let v = g.slice(qkv, 1, 2 * d, d)?;
            let a = self.attention(g, q, k, v, Some(&mask))?;
            let a = Self::linear(g, p, o + D_O, a)?;
            y = g.add(y, a)?;

            let h = Self::norm(g, p, o + D_LNC, y)?;
            let q = Self::linear(g, p, o + D_CQ, h)?;
            let kv = Self::linear(g, p, o + D_CKV, memory)?;
            let k = g.slice(kv, 1, 0, d)?;
            let v = g.slice(kv, 1, d, d)?;
            let a = self.attention(g, q, k, v, None)?;
            let a = Self::linear(g, p, o + D_CO, a)?;
            y = g.add(y, a)?;

            let h = Self::norm(g, p, o + D_LN2, y)?;
            let f = Self::feed_forward(g, p, o + D_FF1, o + D_FF2, h)?;
            y = g.add(y, f)?;
        }
        let h = Self::norm(g, p, DEC_LN, y)?;
        Ok(g.matmul_nt(h, p[EMB])?)
    }

    /// Per-token log-probabilities `[T]` of `target` (teacher forced).
    pub fn token_logprobs(&self, g: &mut Graph<'_>, p: &[Var], memory: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(invalid("score", "empty target"));
        }
        let mut inputs = Vec::with_capacity(target.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.decode_graph(g, p, memory, &inputs)?;
        let lp = g.log_softmax(logits);
        Ok(g.pick(lp, target)?)
    }

    /// Sum of log-probabilities of `target` given `input`, as a graph node.
    pub fn sequence_logprob(&self, g: &mut Graph<'_>, p: &[Var], memory: Var, target: &[usize]) -> Result<Var> {
        let lp = self.token_logprobs(g, p, memory, target)?;
        Ok(g.sum(lp))
    }

    pub fn to_json(&self) -> String {
        let stored = StoredGen {
            cfg: self.cfg,
            tokens: self.vocab.tokens().to_vec(),
            tensors: nn::store(&self.param_names(), &self.params),
        };
        serde_json::to_string(&stored).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: StoredGen = serde_json::from_str(text)?;
        let vocab = Vocab::from_tokens(s.tokens)?;
        let params = nn::restore(s.tensors, &layer_shapes(&s.cfg, vocab.len()))?;
        Ok(Self::assemble(s.cfg, vocab, params))
    }
}
