use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{modifier_group, Catalog, FeedbackLevel, InteractionRecord};
use crate::error::{invalid, Result};

/// Conditioning cell for the intended query's feedback level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LevelCell {
    MatchPopular,
    MatchTail,
    MissPopular,
    MissTail,
}

impl LevelCell {
    pub const ALL: [LevelCell; 4] = [
        LevelCell::MatchPopular,
        LevelCell::MatchTail,
        LevelCell::MissPopular,
        LevelCell::MissTail,
    ];

    fn new(affinity_match: bool, popular: bool) -> Self {
        match (affinity_match, popular) {
            (true, true) => LevelCell::MatchPopular,
            (true, false) => LevelCell::MatchTail,
            (false, true) => LevelCell::MissPopular,
            (false, false) => LevelCell::MissTail,
        }
    }
}

/// P(level | cell) over `[Order, ItemClick, Click, Show]` for the query the
/// user was looking for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTable {
    pub match_popular: [f64; 4],
    pub match_tail: [f64; 4],
    pub miss_popular: [f64; 4],
    pub miss_tail: [f64; 4],
}

impl Default for LevelTable {
    fn default() -> Self {
        Self {
            match_popular: [0.12, 0.22, 0.50, 0.16],
            match_tail: [0.08, 0.18, 0.50, 0.24],
            miss_popular: [0.05, 0.12, 0.53, 0.30],
            miss_tail: [0.03, 0.09, 0.50, 0.38],
        }
    }
}

impl LevelTable {
    pub const LEVELS: [FeedbackLevel; 4] = [
        FeedbackLevel::Order,
        FeedbackLevel::ItemClick,
        FeedbackLevel::Click,
        FeedbackLevel::Show,
    ];

    pub fn row(&self, cell: LevelCell) -> &[f64; 4] {
        match cell {
            LevelCell::MatchPopular => &self.match_popular,
            LevelCell::MatchTail => &self.match_tail,
            LevelCell::MissPopular => &self.miss_popular,
            LevelCell::MissTail => &self.miss_tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_users: usize,
    /// Number of interaction records to emit.
    pub n_events: usize,
    /// Category prior is proportional to `(rank + 1)^-category_exponent`.
    pub category_exponent: f64,
    /// Chance that a session targets the user's own category.
    pub affinity_prob: f64,
    /// Weight multiplier for queries whose modifier matches the user's group.
    pub group_boost: f64,
    /// Completions displayed per page view, the sought query included.
    pub panel_size: usize,
    /// Completions ranked just below the panel, logged as NotShow.
    pub not_show: usize,
    /// Chance that a displayed, unsought completion is clicked anyway.
    pub stray_click: f64,
    pub max_session_len: usize,
    /// Longest typed prefix in characters; 0 allows any proper prefix.
    pub max_prefix_chars: usize,
    pub level_table: LevelTable,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_events: 5000,
            category_exponent: 0.6,
            affinity_prob: 0.75,
            group_boost: 4.0,
            panel_size: 5,
            not_show: 1,
            stray_click: 0.02,
            max_session_len: 3,
            max_prefix_chars: 0,
            level_table: LevelTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub category: String,
    pub group: usize,
}

impl UserProfile {
    /// Attribute string fed to the generator.
    pub fn profile_string(&self) -> String {
        format!("cat:{}|grp:{}", self.category, if self.group == 0 { 'a' } else { 'b' })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub users: Vec<UserProfile>,
    pub records: Vec<InteractionRecord>,
    /// For the record of the sought query: the cell its level was drawn from.
    pub cells: Vec<Option<LevelCell>>,
}

struct CategoryModel {
    name: String,
    members: Vec<usize>,
    /// One sampler per modifier group.
    by_group: [WeightedIndex<f64>; 2],
}

fn modifier_of(query: &str) -> &str {
    query.rsplit(' ').next().unwrap_or(query)
}

/// Simulates page views of the suggestion panel until `n_events` records
/// have been produced.
pub fn simulate_logs(catalog: &Catalog, cfg: &SimConfig, seed: u64) -> Result<SimOutput> {
    if cfg.n_events == 0 || cfg.n_users == 0 || cfg.panel_size == 0 || catalog.is_empty() {
        return Err(invalid("simulate_logs", "need n_events, n_users, panel_size >= 1 and a non-empty catalog"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = catalog.entries();

    let cats: Vec<CategoryModel> = catalog
        .categories()
        .iter()
        .map(|name| {
            let members: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].category == *name).collect();
            let sampler = |g: usize| {
                let w = members.iter().map(|&i| {
                    let boost = if modifier_group(modifier_of(&entries[i].query)) == g { cfg.group_boost } else { 1.0 };
                    entries[i].weight * boost
                });
                WeightedIndex::new(w).expect("positive weights")
            };
            CategoryModel {
                name: name.clone(),
                by_group: [sampler(0), sampler(1)],
                members,
            }
        })
        .collect();
    let cat_prior: Vec<f64> = (0..cats.len()).map(|c| ((c + 1) as f64).powf(-cfg.category_exponent)).collect();
    let cat_dist = WeightedIndex::new(&cat_prior).expect("positive prior");
    let cat_index: HashMap<&str, usize> = cats.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect();

    // Global popularity used by the legacy panel ranking.
    let pop: Vec<f64> = entries.iter().map(|e| e.weight * cat_prior[cat_index[e.category.as_str()]]).collect();
    let popular: Vec<bool> = cats.iter().fold(vec![false; entries.len()], |mut acc, c| {
        let uniform = 1.0 / c.members.len() as f64;
        for &i in &c.members {
            acc[i] = entries[i].weight >= uniform;
        }
        acc
    });
    let mut completions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        for (end, _) in e.query.char_indices().skip(1).chain([(e.query.len(), ' ')]) {
            completions.entry(&e.query[..end]).or_default().push(i);
        }
    }
    for list in completions.values_mut() {
        list.sort_by(|&a, &b| pop[b].total_cmp(&pop[a]).then(entries[a].query.cmp(&entries[b].query)));
    }

    let users: Vec<UserProfile> = (0..cfg.n_users)
        .map(|u| UserProfile {
            user_id: format!("u{u:04}"),
            category: cats[cat_dist.sample(&mut rng)].name.clone(),
            group: rng.random_range(0..2),
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.n_events + cfg.panel_size);
    let mut cells = Vec::with_capacity(records.capacity());
    let mut ts: i64 = 1_700_000_000;
    'outer: loop {
        let user = &users[rng.random_range(0..users.len())];
        let own = cat_index[user.category.as_str()];
        let mut cat = if rng.random_bool(cfg.affinity_prob) { own } else { cat_dist.sample(&mut rng) };
        let session_len = rng.random_range(1..=cfg.max_session_len.max(1));
        ts += rng.random_range(120..900);
        for step in 0..session_len {
            if step > 0 {
                ts += rng.random_range(5..60);
                if !rng.random_bool(0.7) {
                    cat = if rng.random_bool(cfg.affinity_prob) { own } else { cat_dist.sample(&mut rng) };
                }
            }
            let cm = &cats[cat];
            let sought = cm.members[cm.by_group[user.group].sample(&mut rng)];
            let query = &entries[sought].query;
            let n_chars = query.chars().count();
            let longest = match cfg.max_prefix_chars {
                0 => n_chars.saturating_sub(1),
                m => m.min(n_chars.saturating_sub(1)),
            };
            let cut = if n_chars > 1 { rng.random_range(1..=longest.max(1)) } else { 1 };
            let prefix: String = query.chars().take(cut).collect();

            let ranked = &completions[prefix.as_str()];
            let mut panel: Vec<usize> = ranked.iter().copied().take(cfg.panel_size).collect();
            if !panel.contains(&sought) {
                panel.pop();
                panel.push(sought);
            }
            let below: Vec<usize> = ranked
                .iter()
                .copied()
                .filter(|i| !panel.contains(i))
                .take(cfg.not_show)
                .collect();

            let cell = LevelCell::new(cm.name == user.category, popular[sought]);
            for &i in &panel {
                let (level, c) = if i == sought {
                    let row = cfg.level_table.row(cell);
                    let k = WeightedIndex::new(row).expect("valid level table").sample(&mut rng);
                    (LevelTable::LEVELS[k], Some(cell))
                } else if rng.random_bool(cfg.stray_click) {
                    (FeedbackLevel::Click, None)
                } else {
                    (FeedbackLevel::Show, None)
                };
                records.push(InteractionRecord {
                    user_id: user.user_id.clone(),
                    prefix: prefix.clone(),
                    query: entries[i].query.clone(),
                    level,
                    ts,
                });
                cells.push(c);
                if records.len() == cfg.n_events {
                    break 'outer;
                }
            }
            for &i in &below {
                records.push(InteractionRecord {
                    user_id: user.user_id.clone(),
                    prefix: prefix.clone(),
                    query: entries[i].query.clone(),
                    level: FeedbackLevel::NotShow,
                    ts,
                });
                cells.push(None);
                if records.len() == cfg.n_events {
                    break 'outer;
                }
            }
        }
    }
    Ok(SimOutput { users, records, cells })
}
