//! Residual-quantised autoencoder, semantic IDs and clustered related-query
//! search.

mod index;
mod kmeans;

use ndgrad::{Adam, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{self, StoredTensor};

pub use index::{related_query_search, screen_candidates, IndexEntry, QueryIndex, SearchParams};
pub use kmeans::kmeans;

/// Ordered codeword indices, coarsest level first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RqvaeDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_latent: usize,
    /// Linear layers in each of the encoder and decoder.
    pub blocks: usize,
    /// Codebook levels.
    pub levels: usize,
    /// Codewords per level.
    pub codebook_size: usize,
}

#[derive(Debug, Clone)]
pub struct RqvaeModel {
    pub dims: RqvaeDims,
    /// Commitment weight.
    pub beta: f64,
    /// Encoder `[w, b]` pairs, decoder `[w, b]` pairs, then one `[W, d_latent]`
    /// table per level.
    pub params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredRqvae {
    dims: RqvaeDims,
    beta: f64,
    tensors: Vec<StoredTensor>,
}

fn layer_sizes(from: usize, hidden: usize, to: usize, blocks: usize) -> Vec<(usize, usize)> {
    (0..blocks)
        .map(|i| {
            let a = if i == 0 { from } else { hidden };
            let b = if i + 1 == blocks { to } else { hidden };
            (a, b)
        })
        .collect()
}

/// Index of the nearest codeword by squared distance; lowest index wins ties.
pub fn quantize_level(residual: &[f64], table: &[f64]) -> (usize, Vec<f64>) {
    let d = residual.len();
    let mut best = (0, f64::INFINITY);
    for (i, cw) in table.chunks_exact(d).enumerate() {
        let dist: f64 = residual.iter().zip(cw).map(|(r, c)| (r - c) * (r - c)).sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    (best.0, table[best.0 * d..(best.0 + 1) * d].to_vec())
}

/// Recorded values of the stop-gradient nodes, in graph order.
#[derive(Debug, Clone, Default)]
pub struct StopValues(Vec<Vec<f64>>);

/// Loss components of one batch.
#[derive(Debug, Clone, Copy)]
pub struct RqvaeLoss {
    pub total: Var,
    pub recon: Var,
    pub commit: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub total: f64,
    pub recon: f64,
    pub commit: f64,
    /// Fraction of codewords used, averaged over levels.
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqvaeTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kmeans_iters: usize,
}

impl Default for RqvaeTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 2e-3,
            kmeans_iters: 10,
        }
    }
}

impl RqvaeModel {
    pub fn new(dims: RqvaeDims, beta: f64, seed: u64) -> Result<Self> {
        if dims.blocks == 0 || dims.levels == 0 || dims.codebook_size == 0 {
            return Err(invalid("rqvae", "blocks, levels and codebook size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (a, b) in layer_sizes(dims.d_in, dims.d_hidden, dims.d_latent, dims.blocks)
            .into_iter()
            .chain(layer_sizes(dims.d_latent, dims.d_hidden, dims.d_in, dims.blocks))
        {
            params.push(nn::glorot(&mut rng, a, b));
            params.push(nn::zeros(&[b]));
        }
        for _ in 0..dims.levels {
            params.push(nn::uniform(&mut rng, &[dims.codebook_size, dims.d_latent], 0.1));
        }
        Ok(Self { dims, beta, params })
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dims;
        let mut out = Vec::new();
        for (part, sizes) in [
            ("enc", layer_sizes(d.d_in, d.d_hidden, d.d_latent, d.blocks)),
            ("dec", layer_sizes(d.d_latent, d.d_hidden, d.d_in, d.blocks)),
        ] {
            for (i, (a, b)) in sizes.into_iter().enumerate() {
                out.push((format!("{part}{i}.w"), vec![a, b]));
                out.push((format!("{part}{i}.b"), vec![b]));
            }
        }
        for l in 0..d.levels {
            out.push((format!("codebook{l}"), vec![d.codebook_size, d.d_latent]));
        }
        out
    }

    fn codebook_offset(&self) -> usize {
        4 * self.dims.blocks
    }

    pub fn codebook(&self, level: usize) -> &Tensor {
        &self.params[self.codebook_offset() + level]
    }

    fn mlp(&self, g: &mut Graph<'_>, p: &[Var], mut x: Var, first: usize) -> Result<Var> {
        for i in 0..self.dims.blocks {
            x = g.matmul(x, p[first + 2 * i])?;
            x = g.add_row(x, p[first + 2 * i + 1])?;
            if i + 1 < self.dims.blocks {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn encoder_graph(&self, g: &mut Graph<'_>, p: &[Var], x: Var) -> Result<Var> {
        self.mlp(g, p, x, 0)
    }

    pub fn decoder_graph(&self, g: &mut Graph<'_>, p: &[Var], z: Var) -> Result<Var> {
        self.mlp(g, p, z, 2 * self.dims.blocks)
    }

    /// Latent codes of a batch of inputs (values only).
    pub fn encode(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = nn::bind_frozen(&mut g, &self.params);
        let x = g.input(Tensor::from_rows(xs));
        let z = self.encoder_graph(&mut g, &p, x)?;
        Ok(g.value(z).chunks(self.dims.d_latent).map(<[f64]>::to_vec).collect())
    }

    /// Greedy residual quantisation of a latent vector.
    pub fn quantize_latent(&self, z: &[f64]) -> SemanticId {
        let mut r = z.to_vec();
        let mut codes = Vec::with_capacity(self.dims.levels);
        for l in 0..self.dims.levels {
            let (i, cw) = quantize_level(&r, self.codebook(l).data());
            r.iter_mut().zip(&cw).for_each(|(a, c)| *a -= c);
            codes.push(i);
        }
        SemanticId(codes)
    }

    pub fn assign_semantic_id(&self, embedding: &[f64]) -> Result<SemanticId> {
        let z = self.encode(&[embedding.to_vec()])?;
        Ok(self.quantize_latent(&z[0]))
    }

    pub fn assign_batch(&self, embeddings: &[Vec<f64>]) -> Result<Vec<SemanticId>> {
        Ok(self.encode(embeddings)?.iter().map(|z| self.quantize_latent(z)).collect())
    }

    /// Builds the objective for a batch. With `codes` given, the codeword
    /// assignment is held fixed instead of recomputed from the residuals.
    pub fn loss(&self, g: &mut Graph<'_>, p: &[Var], batch: &[Vec<f64>], codes: Option<&[SemanticId]>) -> Result<RqvaeLoss> {
        Ok(self.loss_with(g, p, batch, codes, None)?.0)
    }

    /// Same loss with every stop-gradient replaced by the constant it took
    /// at `stops`. Its exact gradient equals the straight-through gradient at
    /// that point, so it can be checked with finite differences.
    pub fn frozen_loss(&self, g: &mut Graph<'_>, p: &[Var], batch: &[Vec<f64>], codes: &[SemanticId], stops: &StopValues) -> Result<RqvaeLoss> {
        Ok(self.loss_with(g, p, batch, Some(codes), Some(stops))?.0)
    }

    /// Values of the stop-gradient nodes for the current parameters.
    pub fn stop_values(&self, batch: &[Vec<f64>], codes: &[SemanticId]) -> Result<StopValues> {
        let mut g = Graph::new();
        let p = nn::bind_frozen(&mut g, &self.params);
        Ok(self.loss_with(&mut g, &p, batch, Some(codes), None)?.1)
    }

    fn loss_with(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        batch: &[Vec<f64>],
        codes: Option<&[SemanticId]>,
        frozen: Option<&StopValues>,
    ) -> Result<(RqvaeLoss, StopValues)> {
        if batch.is_empty() {
            return Err(invalid("rqvae_loss", "empty batch"));
        }
        let n = batch.len();
        let mut seen = StopValues::default();
        // Detaches `v`, or substitutes the recorded constant in frozen mode.
        let mut stop = |g: &mut Graph<'_>, v: Var, slot: usize| -> Result<Var> {
            let out = match frozen {
                Some(f) => g.constant(g.shape(v).to_vec(), f.0[slot].clone())?,
                None => g.detach(v),
            };
            seen.0.push(g.value(out).to_vec());
            Ok(out)
        };
        let x = g.input(Tensor::from_rows(batch));
        let z = self.encoder_graph(g, p, x)?;
        let mut r = z;
        let mut qsum: Option<Var> = None;
        let mut commit: Option<Var> = None;
        let mut slot = 0;
        for l in 0..self.dims.levels {
            let idx: Vec<usize> = match codes {
                Some(c) => c.iter().map(|s| s.0[l]).collect(),
                None => {
                    let rv = g.value(r).to_vec();
                    let table = self.codebook(l).data();
                    rv.chunks(self.dims.d_latent).map(|row| quantize_level(row, table).0).collect()
                }
            };
            let e = g.embedding(p[self.codebook_offset() + l], &idx)?;
            let r_sg = stop(g, r, slot)?;
            let e_sg = stop(g, e, slot + 1)?;
            slot += 2;
            let d_cb = g.sub(r_sg, e)?;
            let d_cb = g.square(d_cb);
            let cb = g.sum(d_cb);
            let d_cm = g.sub(r, e_sg)?;
            let d_cm = g.square(d_cm);
            let cm = g.sum(d_cm);
            let cm = g.scale(cm, self.beta);
            let term = g.add(cb, cm)?;
            commit = Some(match commit {
                Some(c) => g.add(c, term)?,
                None => term,
            });
            qsum = Some(match qsum {
                Some(q) => g.add(q, e_sg)?,
                None => e_sg,
            });
            r = g.sub(r, e_sg)?;
        }
        let qsum = qsum.expect("at least one level");
        // Straight-through: the decoder sees the quantised sum, the encoder
        // receives the decoder-input gradient unchanged.
        let gap = g.sub(qsum, z)?;
        let gap = stop(g, gap, slot)?;
        let z_q = g.add(z, gap)?;
        let x_hat = self.decoder_graph(g, p, z_q)?;
        let diff = g.sub(x, x_hat)?;
        let sq = g.square(diff);
        let recon = g.sum(sq);
        let recon = g.scale(recon, 1.0 / n as f64);
        let commit = commit.expect("at least one level");
        let commit = g.scale(commit, 1.0 / n as f64);
        let total = g.add(recon, commit)?;
        Ok((RqvaeLoss { total, recon, commit }, seen))
    }

    /// Loss values on a batch without tracking gradients.
    pub fn evaluate(&self, batch: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let p = nn::bind_frozen(&mut g, &self.params);
        let l = self.loss(&mut g, &p, batch, None)?;
        Ok((g.item(l.total), g.item(l.recon), g.item(l.commit)))
    }

    /// Latent residual entering each level, for every input.
    fn residuals(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let zs = self.encode(xs)?;
        let mut levels = Vec::with_capacity(self.dims.levels);
        let mut cur = zs;
        for l in 0..self.dims.levels {
            let table = self.codebook(l).data();
            let next: Vec<Vec<f64>> = cur
                .iter()
                .map(|r| {
                    let (_, cw) = quantize_level(r, table);
                    r.iter().zip(&cw).map(|(a, c)| a - c).collect()
                })
                .collect();
            levels.push(std::mem::replace(&mut cur, next));
        }
        Ok(levels)
    }

    /// Fraction of codewords that at least one input maps to, averaged over
    /// levels.
    pub fn utilization(&self, xs: &[Vec<f64>]) -> Result<f64> {
        let ids = self.assign_batch(xs)?;
        let w = self.dims.codebook_size;
        let mut total = 0.0;
        for l in 0..self.dims.levels {
            let mut used = vec![false; w];
            for id in &ids {
                used[id.0[l]] = true;
            }
            total += used.iter().filter(|u| **u).count() as f64 / w as f64;
        }
        Ok(total / self.dims.levels as f64)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let names: Vec<String> = self.shapes().into_iter().map(|(n, _)| n).collect();
        serde_json::to_value(StoredRqvae {
            dims: self.dims,
            beta: self.beta,
            tensors: nn::store(&names, &self.params),
        })
        .expect("rqvae serialises")
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        let s: StoredRqvae = serde_json::from_value(v)?;
        let mut m = Self {
            dims: s.dims,
            beta: s.beta,
            params: Vec::new(),
        };
        m.params = nn::restore(s.tensors, &m.shapes())?;
        Ok(m)
    }
}

/// Trains with Adam after seeding each level's codebook by k-means on that
/// level's residuals. Codewords unused over a whole epoch are re-seeded to
/// random residuals. Returns stats before training followed by one entry
/// per epoch.
pub fn train_rqvae(model: &mut RqvaeModel, data: &[Vec<f64>], cfg: &RqvaeTraining, seed: u64) -> Result<Vec<EpochStats>> {
    let w = model.dims.codebook_size;
    if data.len() < w {
        return Err(invalid(
            "train_rqvae",
            format!("{} embeddings cannot fill a codebook of {w}; use a smaller codebook size", data.len()),
        ));
    }
    if cfg.batch == 0 {
        return Err(invalid("train_rqvae", "batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off = model.codebook_offset();

    // Level-by-level k-means initialisation.
    let mut cur = model.encode(data)?;
    for l in 0..model.dims.levels {
        let centroids = kmeans(&cur, w, cfg.kmeans_iters, &mut rng);
        let flat: Vec<f64> = centroids.concat();
        model.params[off + l].data_mut().copy_from_slice(&flat);
        let table = model.codebook(l).data();
        cur = cur
            .iter()
            .map(|r| {
                let (_, cw) = quantize_level(r, table);
                r.iter().zip(&cw).map(|(a, c)| a - c).collect()
            })
            .collect();
    }

    let stats = |m: &RqvaeModel| -> Result<EpochStats> {
        let (total, recon, commit) = m.evaluate(data)?;
        Ok(EpochStats {
            total,
            recon,
            commit,
            utilization: m.utilization(data)?,
        })
    };
    let mut curve = vec![stats(model)?];
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![vec![false; w]; model.dims.levels];
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let grads: Vec<Option<Vec<f64>>> = {
                let mut g = Graph::new();
                let p = nn::bind(&mut g, &model.params);
                let loss = model.loss(&mut g, &p, &batch, None)?;
                g.backward(loss.total)?;
                p.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect()
            };
            for (t, gr) in model.params.iter_mut().zip(grads) {
                if let Some(gr) = gr {
                    t.accumulate_grad(&gr)?;
                }
            }
            nn::ensure_grads(&mut model.params)?;
            opt.step(&mut model.params)?;
            for id in model.assign_batch(&batch)? {
                for (l, &c) in id.0.iter().enumerate() {
                    used[l][c] = true;
                }
            }
        }
        let residuals = model.residuals(data)?;
        let d = model.dims.d_latent;
        for (l, used) in used.iter().enumerate() {
            for (c, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
                let pick = &residuals[l][rng.random_range(0..data.len())];
                model.params[off + l].data_mut()[c * d..(c + 1) * d].copy_from_slice(pick);
            }
        }
        curve.push(stats(model)?);
    }
    Ok(curve)
}
