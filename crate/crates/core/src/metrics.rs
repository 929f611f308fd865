//! Full-ranking hit rate and NDCG, plus popularity and length buckets.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::SplitView;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("item {0} appears twice in the ranking")]
    Duplicate(usize),
}

fn check_unique(ranked: &[usize]) -> Result<(), MetricError> {
    let mut seen = BTreeSet::new();
    match ranked.iter().find(|&&i| !seen.insert(i)) {
        Some(&dup) => Err(MetricError::Duplicate(dup)),
        None => Ok(()),
    }
}

/// One-based position of `target`, if present.
pub fn position(ranked: &[usize], target: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn hr_at_k(ranked: &[usize], target: usize, k: usize) -> Result<Scalar, MetricError> {
    check_unique(ranked)?;
    Ok(position(ranked, target).map_or(0.0, |r| hit(r, k)))
}

pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> Result<Scalar, MetricError> {
    check_unique(ranked)?;
    Ok(position(ranked, target).map_or(0.0, |r| ndcg(r, k)))
}

/// Hit indicator for a one-based rank.
pub fn hit(rank: usize, k: usize) -> Scalar {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

/// `1/log₂(rank+1)` inside the top `k`, else 0.
pub fn ndcg(rank: usize, k: usize) -> Scalar {
    if rank >= 1 && rank <= k {
        1.0 / libm::log2(rank as Scalar + 1.0)
    } else {
        0.0
    }
}

/// Outcome of ranking one user's held-out item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserResult {
    pub user: usize,
    pub target: usize,
    pub rank: usize,
    pub train_len: usize,
}

/// Means over users, as percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub users: usize,
    pub hr1: Scalar,
    pub hr5: Scalar,
    pub hr10: Scalar,
    pub ndcg5: Scalar,
    pub ndcg10: Scalar,
}

impl MetricSet {
    /// `None` for an empty group.
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Option<Self> {
        let mut m = MetricSet { users: 0, hr1: 0.0, hr5: 0.0, hr10: 0.0, ndcg5: 0.0, ndcg10: 0.0 };
        for r in ranks {
            m.users += 1;
            m.hr1 += hit(r, 1);
            m.hr5 += hit(r, 5);
            m.hr10 += hit(r, 10);
            m.ndcg5 += ndcg(r, 5);
            m.ndcg10 += ndcg(r, 10);
        }
        if m.users == 0 {
            return None;
        }
        let s = 100.0 / m.users as Scalar;
        m.hr1 *= s;
        m.hr5 *= s;
        m.hr10 *= s;
        m.ndcg5 *= s;
        m.ndcg10 *= s;
        Some(m)
    }

    fn rows(&self) -> [(&'static str, usize, Scalar); 5] {
        [
            ("HR", 1, self.hr1),
            ("HR", 5, self.hr5),
            ("HR", 10, self.hr10),
            ("NDCG", 5, self.ndcg5),
            ("NDCG", 10, self.ndcg10),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bucket {
    Popular,
    LongTail,
    Short,
    Medium,
    Long,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::Popular, Bucket::LongTail, Bucket::Short, Bucket::Medium, Bucket::Long];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Popular => "popular",
            Bucket::LongTail => "long-tail",
            Bucket::Short => "short",
            Bucket::Medium => "medium",
            Bucket::Long => "long",
        }
    }

    /// Short is at most 5 items, medium 6 to 10, long above 10.
    pub fn for_length(len: usize) -> Bucket {
        match len {
            0..=5 => Bucket::Short,
            6..=10 => Bucket::Medium,
            _ => Bucket::Long,
        }
    }
}

/// Marks the `ceil(0.2·V)` most frequent items (ties to the lower id).
pub fn popular_items(counts: &[usize]) -> Vec<bool> {
    let v = counts.len();
    let top = (v as u64 * 2).div_ceil(10) as usize;
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut flags = vec![false; v];
    for &i in &order[..top] {
        flags[i] = true;
    }
    flags
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: MetricSet,
    /// Every bucket in [`Bucket::ALL`] order; `None` when no user falls in it.
    pub buckets: Vec<(Bucket, Option<MetricSet>)>,
    pub skipped: usize,
}

/// Aggregates per-user results; popularity is taken from training prefixes.
pub fn bucket_report(results: &[UserResult], split: &SplitView, skipped: usize) -> Option<EvalReport> {
    let popular = popular_items(&split.train_counts());
    let overall = MetricSet::from_ranks(results.iter().map(|r| r.rank))?;
    let buckets = Bucket::ALL
        .iter()
        .map(|&b| {
            let ranks = results
                .iter()
                .filter(|r| match b {
                    Bucket::Popular => popular[r.target],
                    Bucket::LongTail => !popular[r.target],
                    _ => Bucket::for_length(r.train_len) == b,
                })
                .map(|r| r.rank);
            (b, MetricSet::from_ranks(ranks))
        })
        .collect();
    Some(EvalReport { overall, buckets, skipped })
}

impl EvalReport {
    pub fn bucket(&self, b: Bucket) -> Option<&MetricSet> {
        self.buckets.iter().find(|(x, _)| *x == b).and_then(|(_, m)| m.as_ref())
    }

    /// Columns `metric,k,bucket,value`; absent buckets produce no rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,bucket,value\n");
        let groups = core::iter::once(("all", Some(&self.overall)))
            .chain(self.buckets.iter().map(|(b, m)| (b.name(), m.as_ref())));
        for (name, m) in groups {
            if let Some(m) = m {
                for (metric, k, v) in m.rows() {
                    out.push_str(&format!("{metric},{k},{name},{v:.4}\n"));
                }
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "bucket", "users", "HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10"
        );
        let groups = core::iter::once(("all", Some(&self.overall)))
            .chain(self.buckets.iter().map(|(b, m)| (b.name(), m.as_ref())));
        for (name, m) in groups {
            match m {
                Some(m) => out.push_str(&format!(
                    "{:<10} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                    name, m.users, m.hr1, m.hr5, m.hr10, m.ndcg5, m.ndcg10
                )),
                None => out.push_str(&format!("{name:<10} {:>6} {:>8}\n", 0, "absent")),
            }
        }
        if self.skipped > 0 {
            out.push_str(&format!("skipped users: {}\n", self.skipped));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    #[test]
    fn hand_cases() {
        let ranked = [4, 2, 9, 1, 0, 3, 7, 5];
        assert_eq!(hr_at_k(&ranked, 4, 5), Ok(1.0));
        assert_eq!(ndcg_at_k(&ranked, 4, 5), Ok(1.0));
        assert_eq!(ndcg_at_k(&ranked, 9, 5), Ok(0.5));
        assert_eq!(hr_at_k(&ranked, 7, 5), Ok(0.0));
        assert_eq!(ndcg_at_k(&ranked, 7, 5), Ok(0.0));
        assert_eq!(hr_at_k(&[1, 2, 1], 2, 5), Err(MetricError::Duplicate(1)));
    }

    #[test]
    fn popularity_threshold() {
        assert_eq!(popular_items(&[0, 5, 5, 1, 9]).iter().filter(|&&p| p).count(), 1);
        let flags = popular_items(&[3, 1, 3, 0, 0, 0, 0, 0, 0, 0, 2]);
        assert_eq!(flags.iter().filter(|&&p| p).count(), 3);
        assert!(flags[0] && flags[2] && flags[10]);
    }

    #[test]
    fn length_buckets() {
        assert_eq!(Bucket::for_length(5), Bucket::Short);
        assert_eq!(Bucket::for_length(6), Bucket::Medium);
        assert_eq!(Bucket::for_length(10), Bucket::Medium);
        assert_eq!(Bucket::for_length(11), Bucket::Long);
    }

    #[test]
    fn single_bucket_matches_global_and_empty_is_absent() {
        let ds = Dataset::parse("a 0 1 2 3\nb 1 2 3 4\n").unwrap().dataset;
        let split = ds.split();
        let results = [
            UserResult { user: 0, target: 2, rank: 1, train_len: 2 },
            UserResult { user: 1, target: 3, rank: 7, train_len: 2 },
        ];
        let r = bucket_report(&results, &split, 0).unwrap();
        assert_eq!(r.bucket(Bucket::Short), Some(&r.overall));
        assert_eq!(r.bucket(Bucket::Long), None);
        assert_eq!(r.overall.hr5, 50.0);
        assert!(r.to_csv().lines().all(|l| !l.contains(",long,")));
        assert!(r.to_table().contains("absent"));
    }
}
