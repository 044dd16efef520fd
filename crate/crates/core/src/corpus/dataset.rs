use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, FeedbackLevel, InteractionRecord};
use crate::error::{CoreError, Result};
use crate::prefalign::{reward, reward_weight, RewardParams};
use crate::sugmodel::UserContext;

/// Per-(prefix, level) query counts.
#[derive(Debug, Default, Clone)]
pub struct LevelStats {
    slices: HashMap<(String, FeedbackLevel), (usize, HashMap<String, usize>)>,
}

impl LevelStats {
    pub fn new(records: &[InteractionRecord]) -> Self {
        let mut slices: HashMap<(String, FeedbackLevel), (usize, HashMap<String, usize>)> = HashMap::new();
        for r in records {
            let s = slices.entry((r.prefix.clone(), r.level)).or_default();
            s.0 += 1;
            *s.1.entry(r.query.clone()).or_default() += 1;
        }
        Self { slices }
    }

    /// `count(prefix, level, query) / count(prefix, level)`.
    pub fn ratio(&self, prefix: &str, level: FeedbackLevel, query: &str) -> Result<f64> {
        let (total, counts) = self
            .slices
            .get(&(prefix.to_string(), level))
            .ok_or_else(|| CoreError::EmptySlice {
                prefix: prefix.to_string(),
                level: level.to_string(),
            })?;
        Ok(counts.get(query).copied().unwrap_or(0) as f64 / *total as f64)
    }
}

pub fn compute_level_ratio(
    records: &[InteractionRecord],
    prefix: &str,
    level: FeedbackLevel,
    query: &str,
) -> Result<f64> {
    LevelStats::new(records).ratio(prefix, level, query)
}

/// All records logged for one rendering of the panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PageView {
    pub user_id: String,
    pub prefix: String,
    pub ts: i64,
    pub items: Vec<(String, FeedbackLevel)>,
}

impl PageView {
    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.items.iter().filter(|(_, l)| l.is_positive()).map(|(q, _)| q.as_str())
    }
}

/// Groups records by `(user, prefix, ts)` in time order. Repeated
/// `(query, level)` items within a view are kept once.
pub fn page_views(records: &[InteractionRecord]) -> Vec<PageView> {
    let mut map: BTreeMap<(i64, &str, &str), Vec<(String, FeedbackLevel)>> = BTreeMap::new();
    for r in records {
        let items = map.entry((r.ts, r.user_id.as_str(), r.prefix.as_str())).or_default();
        if !items.iter().any(|(q, l)| *q == r.query && *l == r.level) {
            items.push((r.query.clone(), r.level));
        }
    }
    map.into_iter()
        .map(|((ts, user, prefix), items)| PageView {
            user_id: user.to_string(),
            prefix: prefix.to_string(),
            ts,
            items,
        })
        .collect()
}

/// Per-user positive queries in time order, for history lookups.
#[derive(Debug, Default, Clone)]
pub struct HistoryIndex {
    by_user: HashMap<String, Vec<(i64, String)>>,
}

impl HistoryIndex {
    pub fn new(records: &[InteractionRecord]) -> Self {
        let mut by_user: HashMap<String, Vec<(i64, String)>> = HashMap::new();
        for r in records.iter().filter(|r| r.level.is_positive()) {
            by_user.entry(r.user_id.clone()).or_default().push((r.ts, r.query.clone()));
        }
        for v in by_user.values_mut() {
            v.sort_by_key(|(ts, _)| *ts);
        }
        Self { by_user }
    }

    /// Up to `n` positive queries logged strictly before `ts`, most recent first.
    pub fn before(&self, user: &str, ts: i64, n: usize) -> Vec<String> {
        let Some(events) = self.by_user.get(user) else {
            return Vec::new();
        };
        let end = events.partition_point(|(t, _)| *t < ts);
        events[..end].iter().rev().take(n).map(|(_, q)| q.clone()).collect()
    }

    pub fn latest(&self, user: &str, n: usize) -> Vec<String> {
        self.before(user, i64::MAX, n)
    }

    pub fn push(&mut self, user: &str, ts: i64, query: &str) {
        let v = self.by_user.entry(user.to_string()).or_default();
        let at = v.partition_point(|(t, _)| *t <= ts);
        v.insert(at, (ts, query.to_string()));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub user_id: String,
    pub ts: i64,
    pub context: UserContext,
    pub target: String,
}

/// One example per positive-level record, in page-view order. `H_p` is left
/// empty for the enhancer to fill.
pub fn build_sft_dataset(
    records: &[InteractionRecord],
    profiles: &HashMap<String, String>,
    history_len: usize,
) -> Vec<SftExample> {
    let history = HistoryIndex::new(records);
    page_views(records)
        .into_iter()
        .flat_map(|pv| {
            let ctx = UserContext {
                prefix: pv.prefix.clone(),
                related: Vec::new(),
                history: history.before(&pv.user_id, pv.ts, history_len),
                profile: profiles.get(&pv.user_id).cloned().unwrap_or_default(),
            };
            pv.positives()
                .map(|q| SftExample {
                    user_id: pv.user_id.clone(),
                    ts: pv.ts,
                    context: ctx.clone(),
                    target: q.to_string(),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub query: String,
    pub level: FeedbackLevel,
    pub pi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceGroup {
    pub user_id: String,
    pub ts: i64,
    pub context: UserContext,
    pub win: Sample,
    pub loses: Vec<Sample>,
    /// Reward weight of each lose, aligned with `loses`.
    pub rw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairPolicy {
    /// Merge all loses of one win into a single group.
    pub listwise: bool,
    /// Also let any strictly stronger level act as the win.
    pub adjacent_level_pairs: bool,
    /// Random catalog negatives drawn per page view.
    pub n_rand: usize,
}

impl Default for PairPolicy {
    fn default() -> Self {
        Self {
            listwise: true,
            adjacent_level_pairs: false,
            n_rand: 1,
        }
    }
}

fn is_negative(level: FeedbackLevel) -> bool {
    matches!(level, FeedbackLevel::Show | FeedbackLevel::NotShow | FeedbackLevel::Rand)
}

/// Builds win/lose groups per page view. Pairs whose reward gap is not
/// positive are skipped.
pub fn build_preference_groups(
    records: &[InteractionRecord],
    catalog: &Catalog,
    profiles: &HashMap<String, String>,
    policy: &PairPolicy,
    params: &RewardParams,
    history_len: usize,
    seed: u64,
) -> Result<Vec<PreferenceGroup>> {
    let stats = LevelStats::new(records);
    let history = HistoryIndex::new(records);
    let mut seen_for_prefix: HashMap<&str, HashSet<&str>> = HashMap::new();
    for r in records {
        seen_for_prefix.entry(&r.prefix).or_default().insert(&r.query);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();

    for pv in page_views(records) {
        let mut items: Vec<Sample> = pv
            .items
            .iter()
            .map(|(q, l)| {
                Ok(Sample {
                    query: q.clone(),
                    level: *l,
                    pi: stats.ratio(&pv.prefix, *l, q)?,
                })
            })
            .collect::<Result<_>>()?;
        if policy.n_rand > 0 {
            let seen = &seen_for_prefix[pv.prefix.as_str()];
            let pool: Vec<&str> = catalog
                .entries()
                .iter()
                .map(|e| e.query.as_str())
                .filter(|q| !seen.contains(q))
                .collect();
            let n = policy.n_rand.min(pool.len());
            let mut picks = sample(&mut rng, pool.len(), n).into_vec();
            picks.sort_unstable();
            items.extend(picks.into_iter().map(|i| Sample {
                query: pool[i].to_string(),
                level: FeedbackLevel::Rand,
                pi: 0.0,
            }));
        }
        let rewards: Vec<f64> = items
            .iter()
            .map(|s| reward(s.level, s.pi, params))
            .collect::<Result<_>>()?;
        let ctx = UserContext {
            prefix: pv.prefix.clone(),
            related: Vec::new(),
            history: history.before(&pv.user_id, pv.ts, history_len),
            profile: profiles.get(&pv.user_id).cloned().unwrap_or_default(),
        };

        for (wi, win) in items.iter().enumerate() {
            let may_win = if policy.adjacent_level_pairs {
                win.level != FeedbackLevel::Rand
            } else {
                win.level.is_positive()
            };
            if !may_win {
                continue;
            }
            let mut loses = Vec::new();
            let mut rw = Vec::new();
            for (li, lose) in items.iter().enumerate() {
                let eligible = if policy.adjacent_level_pairs {
                    lose.level < win.level
                } else {
                    is_negative(lose.level)
                };
                if li == wi || !eligible || rewards[wi] - rewards[li] <= 0.0 {
                    continue;
                }
                loses.push(lose.clone());
                rw.push(reward_weight(rewards[wi], rewards[li], params)?);
            }
            if loses.is_empty() {
                continue;
            }
            let group = |loses: Vec<Sample>, rw: Vec<f64>| PreferenceGroup {
                user_id: pv.user_id.clone(),
                ts: pv.ts,
                context: ctx.clone(),
                win: win.clone(),
                loses,
                rw,
            };
            if policy.listwise {
                groups.push(group(loses, rw));
            } else {
                groups.extend(loses.into_iter().zip(rw).map(|(l, w)| group(vec![l], vec![w])));
            }
        }
    }
    Ok(groups)
}
