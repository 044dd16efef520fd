//! Offline ranking metrics, popularity slicing and the system comparison
//! report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::par::{self, Execution};
use crate::sugmodel::UserContext;

/// 1 if any of the first `k` ranked queries is relevant, else 0.
pub fn hit_rate_at_k(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if ranked.iter().take(k).any(|q| relevant.contains(q)) {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of the first relevant query, 0 when none appears.
pub fn mrr(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
    ranked
        .iter()
        .position(|q| relevant.contains(q))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Popularity {
    Top,
    Middle,
    LongTail,
}

impl Popularity {
    pub const ALL: [Popularity; 3] = [Popularity::Top, Popularity::Middle, Popularity::LongTail];

    pub fn name(self) -> &'static str {
        match self {
            Popularity::Top => "top",
            Popularity::Middle => "middle",
            Popularity::LongTail => "long-tail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub top: usize,
    pub mid: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { top: 50, mid: 10 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.top > self.mid && self.mid > 0 {
            Ok(())
        } else {
            Err(invalid(
                "popularity thresholds",
                format!("need top > mid > 0, got top {} and mid {}", self.top, self.mid),
            ))
        }
    }

    /// `top` above `self.top`, `middle` on `[mid, top]`, `long-tail` below.
    pub fn classify(&self, count: usize) -> Popularity {
        if count > self.top {
            Popularity::Top
        } else if count >= self.mid {
            Popularity::Middle
        } else {
            Popularity::LongTail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub context: UserContext,
    pub relevant: BTreeSet<String>,
    pub popularity: Popularity,
}

/// Relabels every case by the interaction count of its prefix.
pub fn slice_by_popularity(
    mut cases: Vec<EvalCase>,
    prefix_counts: &HashMap<String, usize>,
    thresholds: &Thresholds,
) -> Result<Vec<EvalCase>> {
    thresholds.validate()?;
    for c in &mut cases {
        let n = prefix_counts.get(&c.context.prefix).copied().unwrap_or(0);
        c.popularity = thresholds.classify(n);
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub hr: f64,
    pub mrr: f64,
}

impl Metrics {
    fn mean(scores: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut n, mut hr, mut mrr) = (0, 0.0, 0.0);
        for (h, m) in scores {
            n += 1;
            hr += h;
            mrr += m;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            n,
            hr: hr / n as f64,
            mrr: mrr / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub name: String,
    pub overall: Metrics,
    pub slices: BTreeMap<Popularity, Metrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Hr,
    Mrr,
}

/// `a ≥ b + margin` on one metric, overall or on a slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub better: String,
    pub worse: String,
    pub metric: Metric,
    pub slice: Option<Popularity>,
    pub margin: f64,
    pub passed: bool,
    pub observed: f64,
}

impl OrderingCheck {
    pub fn describe(&self) -> String {
        let metric = match self.metric {
            Metric::Hr => "HR",
            Metric::Mrr => "MRR",
        };
        let slice = self.slice.map_or(String::new(), |s| format!(" [{}]", s.name()));
        format!(
            "{} {} >= {} + {:.3}{}: observed difference {:+.4}",
            metric, self.better, self.worse, self.margin, slice, self.observed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub seed: u64,
    pub config_hash: String,
    pub systems: Vec<SystemRow>,
    pub checks: Vec<OrderingCheck>,
}

/// A named suggestion function evaluated on every case.
pub type SystemFn<'a> = &'a (dyn Fn(&UserContext) -> Result<Vec<String>> + Sync);

/// Runs every system on the same cases, in order, and tabulates HR@k and MRR
/// overall and per popularity slice.
pub fn run_ablation(
    systems: &[(&str, SystemFn<'_>)],
    cases: &[EvalCase],
    k: usize,
    exec: Execution,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    if systems.is_empty() || k == 0 {
        return Err(invalid("run_ablation", "need at least one system and k >= 1"));
    }
    let mut rows = Vec::with_capacity(systems.len());
    for (name, f) in systems {
        let scored: Vec<(f64, f64)> = par::map(exec, cases, |c| -> Result<(f64, f64)> {
            let mut ranked = f(&c.context)?;
            ranked.truncate(k);
            Ok((hit_rate_at_k(&ranked, &c.relevant, k), mrr(&ranked, &c.relevant)))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let slices = Popularity::ALL
            .iter()
            .map(|&p| {
                let m = Metrics::mean(cases.iter().zip(&scored).filter(|(c, _)| c.popularity == p).map(|(_, s)| *s));
                (p, m)
            })
            .collect();
        rows.push(SystemRow {
            name: name.to_string(),
            overall: Metrics::mean(scored.iter().copied()),
            slices,
        });
    }
    Ok(EvalReport {
        k,
        seed,
        config_hash: config_hash.to_string(),
        systems: rows,
        checks: Vec::new(),
    })
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&SystemRow> {
        self.systems.iter().find(|r| r.name == name)
    }

    fn value(&self, name: &str, metric: Metric, slice: Option<Popularity>) -> Result<f64> {
        let row = self
            .row(name)
            .ok_or_else(|| invalid("eval report", format!("no system named {name:?}")))?;
        let m = match slice {
            None => row.overall,
            Some(s) => row.slices.get(&s).copied().unwrap_or_default(),
        };
        Ok(match metric {
            Metric::Hr => m.hr,
            Metric::Mrr => m.mrr,
        })
    }

    /// Evaluates and records `better ≥ worse + margin`.
    pub fn check(&mut self, better: &str, worse: &str, metric: Metric, slice: Option<Popularity>, margin: f64) -> Result<bool> {
        let observed = self.value(better, metric, slice)? - self.value(worse, metric, slice)?;
        // Absorbs rounding in the difference of two means.
        let passed = observed >= margin - 1e-12;
        self.checks.push(OrderingCheck {
            better: better.to_string(),
            worse: worse.to_string(),
            metric,
            slice,
            margin,
            passed,
            observed,
        });
        Ok(passed)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Aligned plain-text table followed by one line per check.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.systems.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
        let _ = write!(out, "{:<width$}  {:>6}  {:>7}  {:>7}", "system", "n", format!("HR@{}", self.k), "MRR");
        for p in Popularity::ALL {
            let _ = write!(out, "  {:>16}", format!("HR {}", p.name()));
        }
        out.push('\n');
        for r in &self.systems {
            let _ = write!(out, "{:<width$}  {:>6}  {:>7.4}  {:>7.4}", r.name, r.overall.n, r.overall.hr, r.overall.mrr);
            for p in Popularity::ALL {
                let m = r.slices.get(&p).copied().unwrap_or_default();
                let _ = write!(out, "  {:>16}", format!("{:.4} (n={})", m.hr, m.n));
            }
            out.push('\n');
        }
        for c in &self.checks {
            let _ = writeln!(out, "[{}] {}", if c.passed { "pass" } else { "FAIL" }, c.describe());
        }
        let _ = writeln!(out, "config {} seed {}", self.config_hash, self.seed);
        out
    }
}
