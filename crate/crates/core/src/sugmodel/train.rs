use ndgrad::{clip_grad_norm, Adam, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::GenModel;
use crate::error::{invalid, Result};
use crate::nn;
use crate::par::Execution;

/// Assembled encoder input and target ids ending in [EOS].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    /// Set from the run configuration; never serialised.
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for SftTraining {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch: 16,
            lr: 1e-3,
            clip: 1.0,
            exec: Execution::Parallel,
        }
    }
}

/// Summed token cross-entropy of one example, scaled by `1 / norm`.
///
/// With `norm` set to the token count of the whole batch, the per-example
/// terms add up to the batch's mean token-level cross-entropy.
pub fn sft_loss(model: &GenModel, g: &mut Graph<'_>, p: &[Var], ex: &TokenizedExample, norm: f64) -> Result<Var> {
    let mem = model.encode_graph(g, p, &ex.input)?;
    let lp = model.sequence_logprob(g, p, mem, &ex.target)?;
    Ok(g.scale(lp, -1.0 / norm))
}

/// Mean token-level cross-entropy of a batch (values only).
pub fn batch_sft_loss(model: &GenModel, batch: &[TokenizedExample]) -> Result<f64> {
    let norm = token_count(batch)?;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let p = nn::bind_frozen(&mut g, &model.params);
        let l = sft_loss(model, &mut g, &p, ex, norm)?;
        total += g.item(l);
    }
    Ok(total)
}

fn token_count(batch: &[TokenizedExample]) -> Result<f64> {
    if batch.iter().any(|e| e.target.is_empty()) {
        return Err(invalid("sft_loss", "target must contain at least one token"));
    }
    Ok(batch.iter().map(|e| e.target.len()).sum::<usize>() as f64)
}

/// Adam on the token-level cross-entropy. Calls `on_epoch(epoch, model,
/// mean_loss)` after every epoch and returns the per-epoch mean losses.
pub fn train_sft<F>(model: &mut GenModel, data: &[TokenizedExample], cfg: &SftTraining, seed: u64, mut on_epoch: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &GenModel, f64) -> Result<()>,
{
    if data.is_empty() {
        return Err(invalid("train_sft", "empty dataset"));
    }
    if cfg.batch == 0 {
        return Err(invalid("train_sft", "batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut tokens) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&TokenizedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let norm = batch.iter().map(|e| e.target.len()).sum::<usize>() as f64;
            let m: &GenModel = model;
            let mut params = m.params.clone();
            let losses = nn::accumulate_gradients(cfg.exec, &mut params, &batch, |g, p, ex| sft_loss(m, g, p, ex, norm))?;
            let batch_loss: f64 = losses.iter().sum();
            sum += batch_loss * norm;
            tokens += norm;
            nn::ensure_grads(&mut params)?;
            if cfg.clip > 0.0 {
                clip_grad_norm(&mut params, cfg.clip);
            }
            opt.step(&mut params)?;
            model.params = params;
        }
        let mean = sum / tokens;
        curve.push(mean);
        on_epoch(epoch, model, mean)?;
    }
    Ok(curve)
}
