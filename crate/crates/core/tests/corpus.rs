use std::collections::{BTreeMap, HashMap};

use onesug_core::corpus::{
    build_preference_groups, build_sft_dataset, compute_level_ratio, generate_catalog, simulate_logs,
    Catalog, FeedbackLevel, InteractionRecord, LevelCell, LevelTable, MpcTrie, PairPolicy, SimConfig,
};
use onesug_core::prefalign::{reward, RewardParams};
use onesug_core::CoreError;
use proptest::prelude::*;

fn rec(user: &str, prefix: &str, query: &str, level: FeedbackLevel, ts: i64) -> InteractionRecord {
    InteractionRecord {
        user_id: user.into(),
        prefix: prefix.into(),
        query: query.into(),
        level,
        ts,
    }
}

#[test]
fn catalog_is_deterministic() {
    let a = generate_catalog(7, 2, 10, 4, 1.0).unwrap();
    let b = generate_catalog(7, 2, 10, 4, 1.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
    assert_ne!(a, generate_catalog(8, 2, 10, 4, 1.0).unwrap());
}

#[test]
fn one_query_per_category() {
    let c = generate_catalog(1, 5, 5, 4, 1.0).unwrap();
    assert_eq!(c.categories().len(), 5);
    for cat in c.categories() {
        let members: Vec<_> = c.in_category(cat).collect();
        assert_eq!(members.len(), 1);
        assert_eq!(members[0].weight, 1.0);
    }
}

#[test]
fn catalog_rejects_bad_sizes() {
    assert!(generate_catalog(1, 3, 2, 4, 1.0).is_err());
    assert!(generate_catalog(1, 0, 2, 4, 1.0).is_err());
}

#[test]
fn weights_normalize_and_queries_are_unique() {
    let c = generate_catalog(3, 6, 900, 4, 1.1).unwrap();
    for cat in c.categories() {
        let total: f64 = c.in_category(cat).map(|e| e.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    let mut qs: Vec<_> = c.entries().iter().map(|e| &e.query).collect();
    qs.sort();
    qs.dedup();
    assert_eq!(qs.len(), 900);
    for e in c.entries() {
        assert_eq!(e.query.split(' ').count(), 2, "{}", e.query);
    }
}

/// Least-squares slope of log(weight) against log(rank).
#[test]
fn popularity_follows_power_law_at_10k() {
    for &s in &[0.8, 1.2] {
        let c = generate_catalog(11, 1, 10_000, 4, s).unwrap();
        let mut w: Vec<f64> = c.entries().iter().map(|e| e.weight).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        let pts: Vec<(f64, f64)> = w.iter().enumerate().map(|(r, w)| (((r + 1) as f64).ln(), w.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((-slope - s).abs() <= 0.1 * s, "exponent {s}: fitted {}", -slope);
    }
}

fn small_sim(n_events: usize, seed: u64) -> (Catalog, onesug_core::corpus::SimOutput) {
    let catalog = generate_catalog(seed, 6, 240, 4, 1.0).unwrap();
    let cfg = SimConfig {
        n_users: 50,
        n_events,
        ..SimConfig::default()
    };
    let out = simulate_logs(&catalog, &cfg, seed).unwrap();
    (catalog, out)
}

#[test]
fn simulation_is_deterministic() {
    let (_, a) = small_sim(2000, 5);
    let (_, b) = small_sim(2000, 5);
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 2000);
}

#[test]
fn simulated_records_are_well_formed() {
    let (catalog, out) = small_sim(3000, 6);
    let mut last_ts = i64::MIN;
    for (r, cell) in out.records.iter().zip(&out.cells) {
        assert!(!r.prefix.is_empty() && r.prefix.len() < r.query.len());
        assert!(r.query.starts_with(&r.prefix), "{r:?}");
        assert!(catalog.contains(&r.query));
        assert!(r.ts >= last_ts);
        last_ts = r.ts;
        if cell.is_some() {
            let word = r.query.split(' ').next().unwrap();
            assert!(r.query.contains(word));
            assert_ne!(r.level, FeedbackLevel::NotShow);
        }
    }
}

/// Level counts in each conditioning cell stay within 3σ of the table.
#[test]
fn level_frequencies_match_table_within_three_sigma() {
    let catalog = generate_catalog(21, 8, 400, 4, 1.0).unwrap();
    let cfg = SimConfig {
        n_users: 300,
        n_events: 100_000,
        ..SimConfig::default()
    };
    let out = simulate_logs(&catalog, &cfg, 21).unwrap();
    let mut counts: HashMap<LevelCell, [usize; 4]> = HashMap::new();
    for (r, cell) in out.records.iter().zip(&out.cells) {
        if let Some(cell) = cell {
            let k = LevelTable::LEVELS.iter().position(|l| *l == r.level).unwrap();
            counts.entry(*cell).or_default()[k] += 1;
        }
    }
    for cell in LevelCell::ALL {
        let c = counts[&cell];
        let n: usize = c.iter().sum();
        assert!(n > 500, "{cell:?} has only {n} samples");
        for (k, &p) in cfg.level_table.row(cell).iter().enumerate() {
            let expect = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c[k] as f64 - expect).abs() <= 3.0 * sigma, "{cell:?} level {k}: {} vs {expect}", c[k]);
        }
    }
    let total = |l: FeedbackLevel| out.records.iter().filter(|r| r.level == l).count();
    assert!(total(FeedbackLevel::Order) < total(FeedbackLevel::Click));
    assert!(total(FeedbackLevel::Click) < total(FeedbackLevel::Show));
}

#[test]
fn level_ratio_examples() {
    let logs = vec![
        rec("a", "dr", "dress red", FeedbackLevel::Click, 1),
        rec("b", "dr", "dress red", FeedbackLevel::Click, 2),
        rec("c", "dr", "dress red", FeedbackLevel::Click, 3),
        rec("d", "dr", "dress blue", FeedbackLevel::Click, 4),
        rec("d", "dr", "drone pro", FeedbackLevel::Order, 4),
    ];
    assert_eq!(compute_level_ratio(&logs, "dr", FeedbackLevel::Order, "drone pro").unwrap(), 1.0);
    assert_eq!(compute_level_ratio(&logs, "dr", FeedbackLevel::Click, "dress red").unwrap(), 0.75);
    assert_eq!(compute_level_ratio(&logs, "dr", FeedbackLevel::Click, "dress blue").unwrap(), 0.25);
    assert!(matches!(
        compute_level_ratio(&logs, "dr", FeedbackLevel::Show, "dress red"),
        Err(CoreError::EmptySlice { .. })
    ));
}

#[test]
fn level_ratios_sum_to_one() {
    let (_, out) = small_sim(3000, 9);
    let mut slices: BTreeMap<(String, FeedbackLevel), Vec<String>> = BTreeMap::new();
    for r in &out.records {
        slices.entry((r.prefix.clone(), r.level)).or_default().push(r.query.clone());
    }
    for ((prefix, level), mut qs) in slices.into_iter().take(200) {
        qs.sort();
        qs.dedup();
        let total: f64 = qs
            .iter()
            .map(|q| compute_level_ratio(&out.records, &prefix, level, q).unwrap())
            .sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn sft_dataset_history_and_count() {
    let profiles = HashMap::from([("u".to_string(), "cat:toys|grp:a".to_string())]);
    let mut logs = Vec::new();
    for t in 0..13 {
        logs.push(rec("u", "k", &format!("kite q{t}"), FeedbackLevel::Click, 10 * t));
        logs.push(rec("u", "k", &format!("kite s{t}"), FeedbackLevel::Show, 10 * t));
    }
    let ds = build_sft_dataset(&logs, &profiles, 10);
    assert_eq!(ds.len(), 13);
    assert!(ds[0].context.history.is_empty());
    assert_eq!(ds[0].context.profile, "cat:toys|grp:a");
    let last = &ds[12].context.history;
    assert_eq!(last.len(), 10);
    assert_eq!(last[0], "kite q11");
    assert_eq!(last[9], "kite q2");
}

#[test]
fn sft_count_matches_positive_records() {
    let (_, out) = small_sim(4000, 3);
    let ds = build_sft_dataset(&out.records, &HashMap::new(), 10);
    let positives = out.records.iter().filter(|r| r.level.is_positive()).count();
    assert_eq!(ds.len(), positives);
}

fn no_rand(listwise: bool) -> PairPolicy {
    PairPolicy {
        listwise,
        adjacent_level_pairs: false,
        n_rand: 0,
    }
}

#[test]
fn click_over_show_gives_single_group() {
    let catalog = generate_catalog(1, 1, 4, 4, 1.0).unwrap();
    let logs = vec![
        rec("u", "d", "dress red", FeedbackLevel::Click, 5),
        rec("u", "d", "dress blue", FeedbackLevel::Show, 5),
    ];
    let p = RewardParams::default();
    let groups = build_preference_groups(&logs, &catalog, &HashMap::new(), &no_rand(true), &p, 10, 0).unwrap();
    assert_eq!(groups.len(), 1);
    // Both queries are alone at their level, so pi = 1.
    let e = std::f64::consts::E;
    let want = 1.0 / (1.0 * e - 0.5 * e);
    assert!((groups[0].rw[0] - want).abs() < 1e-15);
    assert_eq!(groups[0].win.query, "dress red");

    let only_pos = vec![
        rec("u", "d", "dress red", FeedbackLevel::Click, 5),
        rec("u", "d", "dress blue", FeedbackLevel::Order, 5),
    ];
    assert!(build_preference_groups(&only_pos, &catalog, &HashMap::new(), &no_rand(true), &p, 10, 0)
        .unwrap()
        .is_empty());
}

/// Brute-force count over the nine (positive, negative) type combinations.
fn oracle_pair_count(logs: &[InteractionRecord], p: &RewardParams) -> usize {
    let pos = [FeedbackLevel::Order, FeedbackLevel::ItemClick, FeedbackLevel::Click];
    let neg = [FeedbackLevel::Show, FeedbackLevel::NotShow, FeedbackLevel::Rand];
    let ratio = |prefix: &str, level, query: &str| {
        let at: Vec<_> = logs.iter().filter(|r| r.prefix == prefix && r.level == level).collect();
        at.iter().filter(|r| r.query == query).count() as f64 / at.len() as f64
    };
    let mut contexts: BTreeMap<(i64, &str, &str), Vec<&InteractionRecord>> = BTreeMap::new();
    for r in logs {
        contexts.entry((r.ts, &r.user_id, &r.prefix)).or_default().push(r);
    }
    let mut n = 0;
    for rs in contexts.values() {
        for pl in pos {
            for nl in neg {
                for w in rs.iter().filter(|r| r.level == pl) {
                    for l in rs.iter().filter(|r| r.level == nl) {
                        let rw = p.lambda[pl.index()] * ratio(&w.prefix, pl, &w.query).exp();
                        let rl = p.lambda[nl.index()] * ratio(&l.prefix, nl, &l.query).exp();
                        if rw - rl > 0.0 {
                            n += 1;
                        }
                    }
                }
            }
        }
    }
    n
}

#[test]
fn pair_count_matches_exhaustive_enumeration() {
    let (catalog, out) = small_sim(50, 12);
    let p = RewardParams::default();
    let groups =
        build_preference_groups(&out.records, &catalog, &HashMap::new(), &no_rand(false), &p, 10, 0).unwrap();
    let want = oracle_pair_count(&out.records, &p);
    assert!(want > 0);
    assert_eq!(groups.len(), want);
    let lists =
        build_preference_groups(&out.records, &catalog, &HashMap::new(), &no_rand(true), &p, 10, 0).unwrap();
    assert_eq!(lists.iter().map(|g| g.loses.len()).sum::<usize>(), want);
}

#[test]
fn rand_negatives_are_unseen_for_the_prefix() {
    let (catalog, out) = small_sim(600, 4);
    let policy = PairPolicy {
        n_rand: 2,
        ..PairPolicy::default()
    };
    let p = RewardParams::default();
    let a = build_preference_groups(&out.records, &catalog, &HashMap::new(), &policy, &p, 10, 77).unwrap();
    let b = build_preference_groups(&out.records, &catalog, &HashMap::new(), &policy, &p, 10, 77).unwrap();
    assert_eq!(a, b);
    let mut rands = 0;
    for g in &a {
        for l in g.loses.iter().filter(|l| l.level == FeedbackLevel::Rand) {
            rands += 1;
            assert_eq!(l.pi, 0.0);
            assert!(!out.records.iter().any(|r| r.prefix == g.context.prefix && r.query == l.query));
        }
    }
    assert!(rands > 0);
}

#[test]
fn mpc_examples() {
    let mut logs = Vec::new();
    for t in 0..5 {
        logs.push(rec("u", "r", "red dress", FeedbackLevel::Click, t));
    }
    for t in 0..3 {
        logs.push(rec("u", "r", "red shoes", FeedbackLevel::Order, t));
    }
    logs.push(rec("u", "r", "red hat", FeedbackLevel::Show, 9));
    let trie = MpcTrie::build(&logs);
    let names = |v: Vec<(String, usize)>| v.into_iter().map(|x| x.0).collect::<Vec<_>>();
    assert_eq!(names(trie.suggest("red", 16)), ["red dress", "red shoes"]);
    assert!(trie.suggest("blue", 16).is_empty());
    assert_eq!(names(trie.suggest("red shoes", 16)), ["red shoes"]);
    assert_eq!(names(trie.suggest("red", 1)), ["red dress"]);
}

fn mpc_oracle(logs: &[InteractionRecord], prefix: &str, k: usize) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in logs.iter().filter(|r| r.level.is_positive()) {
        *counts.entry(&r.query).or_default() += 1;
    }
    let mut v: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(q, _)| q.starts_with(prefix))
        .map(|(q, c)| (q.to_string(), c))
        .collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

#[test]
fn mpc_matches_scan_and_sort() {
    let (_, out) = small_sim(5000, 31);
    let trie = MpcTrie::build(&out.records);
    let mut prefixes: Vec<&str> = out.records.iter().map(|r| r.prefix.as_str()).collect();
    prefixes.sort();
    prefixes.dedup();
    for p in prefixes {
        for k in [1, 3, 16] {
            assert_eq!(trie.suggest(p, k), mpc_oracle(&out.records, p, k), "prefix {p:?} k {k}");
        }
    }
}

fn arb_log() -> impl Strategy<Value = Vec<InteractionRecord>> {
    let levels = prop::sample::select(FeedbackLevel::ALL[..5].to_vec());
    let queries = prop::sample::select(vec!["dress red", "dress blue", "drone pro", "dress mini"]);
    prop::collection::vec((0..3usize, 0..4i64, queries, levels), 1..40).prop_map(|rows| {
        rows.into_iter()
            .map(|(u, t, q, l)| rec(&format!("u{u}"), &q[..2], q, l, t))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn groups_always_prefer_the_win(logs in arb_log(), adjacent in any::<bool>(), listwise in any::<bool>()) {
        let catalog = generate_catalog(2, 2, 12, 4, 1.0).unwrap();
        let p = RewardParams::default();
        let policy = PairPolicy { listwise, adjacent_level_pairs: adjacent, n_rand: 1 };
        let groups = build_preference_groups(&logs, &catalog, &HashMap::new(), &policy, &p, 10, 3).unwrap();
        for g in groups {
            prop_assert!(!g.loses.is_empty());
            prop_assert_eq!(g.loses.len(), g.rw.len());
            let rw = reward(g.win.level, g.win.pi, &p).unwrap();
            for (l, w) in g.loses.iter().zip(&g.rw) {
                prop_assert!(rw > reward(l.level, l.pi, &p).unwrap());
                prop_assert!(*w > 0.0 && *w <= p.rw_max);
            }
        }
    }

    #[test]
    fn mpc_agrees_with_oracle_on_random_logs(logs in arb_log(), k in 1usize..5) {
        let trie = MpcTrie::build(&logs);
        for p in ["d", "dr", "dress", "dress red", "x"] {
            prop_assert_eq!(trie.suggest(p, k), mpc_oracle(&logs, p, k));
        }
    }
}
