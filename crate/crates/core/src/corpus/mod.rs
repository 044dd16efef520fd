//! Synthetic search logs, feedback levels, training-set builders and the
//! most-popular-completion baseline.

mod catalog;
mod dataset;
mod mpc;
mod simulate;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use catalog::{generate_catalog, modifier_group, Catalog, CatalogEntry};
pub use dataset::{
    build_preference_groups, build_sft_dataset, compute_level_ratio, page_views, HistoryIndex, LevelStats,
    PageView, PairPolicy, PreferenceGroup, Sample, SftExample,
};
pub use mpc::MpcTrie;
pub use simulate::{simulate_logs, LevelCell, LevelTable, SimConfig, SimOutput, UserProfile};

/// User feedback strength for a shown query, strongest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeedbackLevel {
    Order,
    ItemClick,
    Click,
    Show,
    NotShow,
    Rand,
}

impl FeedbackLevel {
    pub const ALL: [FeedbackLevel; 6] = [
        FeedbackLevel::Order,
        FeedbackLevel::ItemClick,
        FeedbackLevel::Click,
        FeedbackLevel::Show,
        FeedbackLevel::NotShow,
        FeedbackLevel::Rand,
    ];

    /// Position in [`FeedbackLevel::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FeedbackLevel::Order => "Order",
            FeedbackLevel::ItemClick => "ItemClick",
            FeedbackLevel::Click => "Click",
            FeedbackLevel::Show => "Show",
            FeedbackLevel::NotShow => "NotShow",
            FeedbackLevel::Rand => "Rand",
        }
    }

    /// Order, ItemClick and Click.
    pub fn is_positive(self) -> bool {
        matches!(
            self,
            FeedbackLevel::Order | FeedbackLevel::ItemClick | FeedbackLevel::Click
        )
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl PartialOrd for FeedbackLevel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// `Order > ItemClick > Click > Show > NotShow > Rand`.
impl Ord for FeedbackLevel {
    fn cmp(&self, other: &Self) -> Ordering {
        other.index().cmp(&self.index())
    }
}

impl fmt::Display for FeedbackLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown feedback level {given:?}; expected one of: {valid}")]
pub struct UnknownLevel {
    pub given: String,
    pub valid: String,
}

impl FromStr for FeedbackLevel {
    type Err = UnknownLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| UnknownLevel {
                given: s.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// One logged suggestion event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub prefix: String,
    pub query: String,
    pub level: FeedbackLevel,
    pub ts: i64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_order_is_total_and_strongest_first() {
        for w in FeedbackLevel::ALL.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert_eq!("ItemClick".parse::<FeedbackLevel>().unwrap(), FeedbackLevel::ItemClick);
        let err = "Tap".parse::<FeedbackLevel>().unwrap_err();
        for l in FeedbackLevel::ALL {
            assert!(err.to_string().contains(l.name()));
        }
    }

    #[test]
    fn record_json_field_names() {
        let r = InteractionRecord {
            user_id: "u1".into(),
            prefix: "dr".into(),
            query: "dress red".into(),
            level: FeedbackLevel::NotShow,
            ts: 12,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"user_id":"u1","prefix":"dr","query":"dress red","level":"NotShow","ts":12}"#
        );
        assert_eq!(serde_json::from_str::<InteractionRecord>(&s).unwrap(), r);
    }
}
