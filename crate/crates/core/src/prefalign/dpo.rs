use ndgrad::{clip_grad_norm, Adam, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reward::RewardParams;
use crate::corpus::PreferenceGroup;
use crate::error::{invalid, Result};
use crate::nn;
use crate::par::{self, Execution};
use crate::sugmodel::{assemble_input, score_many, GenModel, InputLimits};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Pair,
    #[default]
    List,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreferenceLoss {
    pub mode: LossMode,
    /// Pair-wise argument `−max(0, δ − (r̂_w − r̂_l))` instead of
    /// `max(0, r̂_w − r̂_l − δ)`.
    pub corrected_pair_hinge: bool,
}

/// A preference group in token ids, with reference log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoGroup {
    pub input: Vec<usize>,
    pub win: Vec<usize>,
    pub loses: Vec<Vec<usize>>,
    pub rw: Vec<f64>,
    pub ref_win: f64,
    pub ref_loses: Vec<f64>,
}

impl DpoGroup {
    /// Scores `win` and `loses` under the frozen reference model.
    pub fn new(reference: &GenModel, input: Vec<usize>, win: Vec<usize>, loses: Vec<Vec<usize>>, rw: Vec<f64>) -> Result<Self> {
        if loses.is_empty() || loses.len() != rw.len() {
            return Err(invalid("dpo_group", "need at least one lose and one weight per lose"));
        }
        let mut targets = Vec::with_capacity(loses.len() + 1);
        targets.push(win.clone());
        targets.extend(loses.iter().cloned());
        let scores = score_many(reference, &input, &targets)?;
        Ok(Self {
            input,
            win,
            loses,
            rw,
            ref_win: scores[0],
            ref_loses: scores[1..].to_vec(),
        })
    }
}

/// Tokenises preference groups and scores them under `reference`.
pub fn prepare_groups(reference: &GenModel, groups: &[PreferenceGroup], limits: &InputLimits, exec: Execution) -> Result<Vec<DpoGroup>> {
    let v = &reference.vocab;
    par::map(exec, groups, |g| {
        let input = assemble_input(&g.context, v, limits)?;
        let loses = g.loses.iter().map(|s| v.encode_query(&s.query)).collect();
        DpoGroup::new(reference, input, v.encode_query(&g.win.query), loses, g.rw.clone())
    })
    .into_iter()
    .collect()
}

/// `β·(log π_θ(q|x) − log π_ref(q|x))` for a precomputed reference score.
pub fn implicit_reward(policy_logprob: f64, reference_logprob: f64, beta_dpo: f64) -> f64 {
    beta_dpo * (policy_logprob - reference_logprob)
}

fn implicit_reward_var(g: &mut Graph<'_>, logprob: Var, reference: f64, beta: f64) -> Var {
    let s = g.scale(logprob, beta);
    g.add_scalar(s, -beta * reference)
}

/// Per-group loss terms built in `g`.
pub struct GroupTerms {
    pub total: Var,
    pub preference: Var,
    pub sft: Var,
    pub win_reward: Var,
}

/// Hybrid preference loss of one group, scaled by `1 / norm`.
///
/// Pair mode: `−log σ(rw·max(0, r̂_w − r̂_l − δ)) − α·log π(q_w)`.
/// List mode: `−log σ(−log Σ_l exp(rw_l·max(0, r̂_l − r̂_w − δ))) − α·log π(q_w)`.
/// The SFT term is the per-token mean log-probability of the win.
pub fn group_loss(
    policy: &GenModel,
    g: &mut Graph<'_>,
    p: &[Var],
    group: &DpoGroup,
    loss: &PreferenceLoss,
    params: &RewardParams,
    norm: f64,
) -> Result<GroupTerms> {
    if group.loses.is_empty() {
        return Err(invalid("preference_loss", "group has no lose"));
    }
    if loss.mode == LossMode::Pair && group.loses.len() != 1 {
        return Err(invalid("pairwise_loss", format!("expected one lose, got {}", group.loses.len())));
    }
    let beta = params.beta_dpo;
    let mem = policy.encode_graph(g, p, &group.input)?;
    let win_tokens = policy.token_logprobs(g, p, mem, &group.win)?;
    let win_lp = g.sum(win_tokens);
    let r_w = implicit_reward_var(g, win_lp, group.ref_win, beta);

    let mut terms = Vec::with_capacity(group.loses.len());
    for ((lose, &ref_l), &rw) in group.loses.iter().zip(&group.ref_loses).zip(&group.rw) {
        let lp = policy.sequence_logprob(g, p, mem, lose)?;
        let r_l = implicit_reward_var(g, lp, ref_l, beta);
        let t = match (loss.mode, loss.corrected_pair_hinge) {
            (LossMode::Pair, false) => {
                let d = g.sub(r_w, r_l)?;
                let d = g.add_scalar(d, -params.delta);
                g.hinge(d)
            }
            (LossMode::Pair, true) => {
                let d = g.sub(r_l, r_w)?;
                let d = g.add_scalar(d, params.delta);
                let h = g.hinge(d);
                g.neg(h)
            }
            (LossMode::List, _) => {
                let d = g.sub(r_l, r_w)?;
                let d = g.add_scalar(d, -params.delta);
                g.hinge(d)
            }
        };
        terms.push(g.scale(t, rw));
    }
    let preference = match loss.mode {
        LossMode::Pair => {
            let ls = g.log_sigmoid(terms[0]);
            g.neg(ls)
        }
        LossMode::List => {
            // log Σ exp(t) = t_0 − log_softmax(t)_0
            let row = g.concat(&terms, 1)?;
            let lsm = g.log_softmax(row);
            let first = g.slice(lsm, 1, 0, 1)?;
            let first = g.sum(first);
            let lse = g.sub(terms[0], first)?;
            let arg = g.neg(lse);
            let ls = g.log_sigmoid(arg);
            g.neg(ls)
        }
    };
    let mean_lp = g.mean(win_tokens);
    let sft = g.scale(mean_lp, -params.alpha);
    let total = g.add(preference, sft)?;
    let total = g.scale(total, 1.0 / norm);
    Ok(GroupTerms {
        total,
        preference,
        sft,
        win_reward: r_w,
    })
}

/// Unscaled loss value of one group (no gradients).
pub fn group_loss_value(policy: &GenModel, group: &DpoGroup, loss: &PreferenceLoss, params: &RewardParams) -> Result<f64> {
    let mut g = Graph::new();
    let p = nn::bind_frozen(&mut g, &policy.params);
    let t = group_loss(policy, &mut g, &p, group, loss, params, 1.0)?;
    Ok(g.item(t.total))
}

/// Mean implicit reward of the win samples under `policy`.
pub fn mean_win_reward(policy: &GenModel, groups: &[DpoGroup], beta_dpo: f64, exec: Execution) -> Result<f64> {
    if groups.is_empty() {
        return Err(invalid("mean_win_reward", "no groups"));
    }
    let rs = par::map(exec, groups, |gr| -> Result<f64> {
        let lp = score_many(policy, &gr.input, std::slice::from_ref(&gr.win))?[0];
        Ok(implicit_reward(lp, gr.ref_win, beta_dpo))
    });
    let mut sum = 0.0;
    for r in rs {
        sum += r?;
    }
    Ok(sum / groups.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    /// Set from the run configuration; never serialised.
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for DpoTraining {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch: 16,
            lr: 5e-4,
            clip: 1.0,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoEpoch {
    pub loss: f64,
    pub preference: f64,
    pub sft: f64,
    /// Mean win implicit reward seen during the epoch.
    pub win_reward: f64,
}

/// Adam on the hybrid preference loss. The reference log-probabilities in
/// `groups` stay fixed; only `policy` changes.
pub fn train_dpo<F>(
    policy: &mut GenModel,
    groups: &[DpoGroup],
    loss: &PreferenceLoss,
    params: &RewardParams,
    cfg: &DpoTraining,
    seed: u64,
    mut on_epoch: F,
) -> Result<Vec<DpoEpoch>>
where
    F: FnMut(usize, &GenModel, &DpoEpoch) -> Result<()>,
{
    params.validate()?;
    if groups.is_empty() {
        return Err(invalid("train_dpo", "no preference groups"));
    }
    if cfg.batch == 0 {
        return Err(invalid("train_dpo", "batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 4];
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&DpoGroup> = chunk.iter().map(|&i| &groups[i]).collect();
            let norm = batch.len() as f64;
            let m: &GenModel = policy;
            let mut ps = m.params.clone();
            let parts = nn::accumulate_gradients_with(cfg.exec, &mut ps, &batch, |g, p, gr| {
                let t = group_loss(m, g, p, gr, loss, params, norm)?;
                Ok((t.total, [g.item(t.preference), g.item(t.sft), g.item(t.win_reward)]))
            })?;
            for (_, v) in parts {
                acc[0] += v[0] + v[1];
                acc[1] += v[0];
                acc[2] += v[1];
                acc[3] += v[2];
            }
            nn::ensure_grads(&mut ps)?;
            if cfg.clip > 0.0 {
                clip_grad_norm(&mut ps, cfg.clip);
            }
            opt.step(&mut ps)?;
            policy.params = ps;
        }
        let n = groups.len() as f64;
        let e = DpoEpoch {
            loss: acc[0] / n,
            preference: acc[1] / n,
            sft: acc[2] / n,
            win_reward: acc[3] / n,
        };
        on_epoch(epoch, policy, &e)?;
        curve.push(e);
    }
    Ok(curve)
}
