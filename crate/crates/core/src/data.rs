//! Interaction datasets, leave-one-out splits and a synthetic generator.
//!
//! Line format, one user per line in chronological order:
//!
//! ```text
//! # num_items=20
//! u0 3 4 0 1
//! u1 7 8 9
//! ```
//!
//! Lines starting with `#` are comments; `# num_items=V` fixes the
//! vocabulary size, otherwise it is one past the largest id seen.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::rng;
use crate::Scalar;

pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("user {user} has {len} interactions, need at least {MIN_SEQUENCE_LEN}")]
    TooShort { user: String, len: usize },
    #[error("item {item} outside vocabulary of {num_items}")]
    Vocabulary { item: usize, num_items: usize },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    users: Vec<UserSequence>,
    num_items: usize,
}

/// Result of parsing a dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub dataset: Dataset,
    /// Users dropped for having fewer than three interactions.
    pub dropped: Vec<String>,
}

impl Dataset {
    pub fn new(users: Vec<UserSequence>, num_items: usize) -> Result<Self, DataError> {
        if users.is_empty() {
            return Err(DataError::Empty);
        }
        for u in &users {
            if u.items.len() < MIN_SEQUENCE_LEN {
                return Err(DataError::TooShort { user: u.user.clone(), len: u.items.len() });
            }
            if let Some(&item) = u.items.iter().find(|&&i| i >= num_items) {
                return Err(DataError::Vocabulary { item, num_items });
            }
        }
        Ok(Self { users, num_items })
    }

    pub fn parse(text: &str) -> Result<Ingested, DataError> {
        let mut declared = None;
        let mut users = Vec::new();
        let mut dropped = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| DataError::Parse { line: i + 1, msg };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("num_items=") {
                    declared = Some(v.trim().parse::<usize>().map_err(|_| err(format!("bad num_items {v:?}")))?);
                }
                continue;
            }
            let mut tokens = line.split_whitespace();
            let user = tokens.next().expect("non-empty line").to_string();
            let items = tokens
                .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad item id {t:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if !seen.insert(user.clone()) {
                return Err(err(format!("duplicate user {user}")));
            }
            if items.len() < MIN_SEQUENCE_LEN {
                dropped.push(user);
            } else {
                users.push(UserSequence { user, items });
            }
        }
        let max_seen = users.iter().flat_map(|u| u.items.iter().copied()).max();
        let num_items = match (declared, max_seen) {
            (Some(v), _) => v,
            (None, Some(m)) => m + 1,
            (None, None) => return Err(DataError::Empty),
        };
        Ok(Ingested { dataset: Dataset::new(users, num_items)?, dropped })
    }

    /// The line format accepted by [`Dataset::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("# num_items={}\n", self.num_items);
        for u in &self.users {
            out.push_str(&u.user);
            for i in &u.items {
                out.push(' ');
                out.push_str(&i.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn user_index(&self, user: &str) -> Option<usize> {
        self.users.iter().position(|u| u.user == user)
    }

    pub fn split(&self) -> SplitView {
        let users = self
            .users
            .iter()
            .map(|u| {
                let n = u.items.len();
                SplitUser { train: u.items[..n - 2].to_vec(), valid: u.items[n - 2], test: u.items[n - 1] }
            })
            .collect();
        SplitView { users, num_items: self.num_items }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitUser {
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl SplitUser {
    pub fn reconstruct(&self) -> Vec<usize> {
        let mut all = self.train.clone();
        all.push(self.valid);
        all.push(self.test);
        all
    }

    /// History and target for validation or test ranking.
    pub fn query(&self, stage: Stage) -> (Vec<usize>, usize) {
        match stage {
            Stage::Valid => (self.train.clone(), self.valid),
            Stage::Test => {
                let mut h = self.train.clone();
                h.push(self.valid);
                (h, self.test)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Valid,
    Test,
}

/// Leave-one-out partition: last item is test, second to last validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitView {
    pub users: Vec<SplitUser>,
    pub num_items: usize,
}

impl SplitView {
    /// Interaction counts over training prefixes only.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for u in &self.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// `i → i+1 mod V`.
    Markov,
    /// Items in consecutive blocks; `i` moves to the next item of its block.
    BlockCyclic,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Markov => "markov",
            Pattern::BlockCyclic => "block-cyclic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "markov" | "markov-chain" => Some(Pattern::Markov),
            "block-cyclic" | "block" => Some(Pattern::BlockCyclic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub pattern: Pattern,
    pub noise_rate: Scalar,
    pub seed: u64,
    pub block_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Exponent of the Zipf law used for start items and noise substitutions.
    pub zipf_exponent: Scalar,
    /// Users are split evenly into populations that use disjoint item ranges.
    pub populations: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 50,
            num_items: 20,
            pattern: Pattern::BlockCyclic,
            noise_rate: 0.0,
            seed: 0,
            block_size: 5,
            min_len: 8,
            max_len: 14,
            zipf_exponent: 1.0,
            populations: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.into()));
        if self.num_users == 0 || self.num_items < 2 {
            return bad("need at least one user and two items");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate must lie in [0, 1]");
        }
        if self.min_len < MIN_SEQUENCE_LEN || self.max_len < self.min_len {
            return bad("lengths must satisfy 3 <= min_len <= max_len");
        }
        if self.populations == 0 || !self.num_items.is_multiple_of(self.populations) {
            return bad("populations must divide num_items");
        }
        let range = self.num_items / self.populations;
        if self.pattern == Pattern::BlockCyclic && (self.block_size < 2 || !range.is_multiple_of(self.block_size)) {
            return bad("block_size must be at least 2 and divide the items of each population");
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be non-negative");
        }
        Ok(())
    }

    /// The noise-free successor of `item` within its population range.
    pub fn successor(&self, item: usize) -> usize {
        let range = self.num_items / self.populations;
        let base = item / range * range;
        let local = item - base;
        let next = match self.pattern {
            Pattern::Markov => (local + 1) % range,
            Pattern::BlockCyclic => {
                let b = local / self.block_size * self.block_size;
                b + (local - b + 1) % self.block_size
            }
        };
        base + next
    }

    /// Population of user `u` (users are assigned round-robin).
    pub fn population_of(&self, user: usize) -> usize {
        user % self.populations
    }

    pub fn generate(&self) -> Result<Dataset, DataError> {
        self.validate()?;
        let range = self.num_items / self.populations;
        let weights: Vec<Scalar> = (0..range).map(|r| libm::pow(r as Scalar + 1.0, -self.zipf_exponent)).collect();
        let total: Scalar = weights.iter().sum();
        let mut rng = rng::stream(self.seed, 0x5e9, 0);
        let zipf = |rng: &mut rng::StreamRng| {
            let mut u = rng.random::<Scalar>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            range - 1
        };
        let users = (0..self.num_users)
            .map(|u| {
                let base = self.population_of(u) * range;
                let len = rng.random_range(self.min_len..=self.max_len);
                let mut items = Vec::with_capacity(len);
                items.push(base + zipf(&mut rng));
                while items.len() < len {
                    let prev = *items.last().expect("non-empty");
                    let next = if self.noise_rate > 0.0 && rng.random::<Scalar>() < self.noise_rate {
                        base + zipf(&mut rng)
                    } else {
                        self.successor(prev)
                    };
                    items.push(next);
                }
                UserSequence { user: format!("u{u}"), items }
            })
            .collect();
        Dataset::new(users, self.num_items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_drop_short() {
        let got = Dataset::parse("a 1 2 3\nb 4 5\n\nc 0 0 2 9\n").unwrap();
        assert_eq!(got.dataset.num_users(), 2);
        assert_eq!(got.dropped, vec![String::from("b")]);
        assert_eq!(got.dataset.num_items(), 10);
        assert_eq!(
            Dataset::parse("a 1 2 3\nb 1 x 3\n").err(),
            Some(DataError::Parse { line: 2, msg: "bad item id \"x\"".into() })
        );
        assert!(Dataset::parse("# num_items=3\na 1 2 3\n").is_err());
        assert!(Dataset::parse("a 1 2 3\na 1 2 3\n").is_err());
    }

    #[test]
    fn split_cases() {
        let ds = Dataset::parse("a 10 11 12\nb 1 2 3 4 5\n").unwrap().dataset;
        let s = ds.split();
        assert_eq!(s.users[0], SplitUser { train: vec![10], valid: 11, test: 12 });
        assert_eq!(s.users[1], SplitUser { train: vec![1, 2, 3], valid: 4, test: 5 });
        assert_eq!(s.users[1].query(Stage::Test), (vec![1, 2, 3, 4], 5));
        for (u, su) in ds.users().iter().zip(&s.users) {
            assert_eq!(su.reconstruct(), u.items);
        }
    }

    #[test]
    fn successor_patterns() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.successor(0), 1);
        assert_eq!(spec.successor(4), 0);
        assert_eq!(spec.successor(9), 5);
        let markov = SyntheticSpec { pattern: Pattern::Markov, ..spec.clone() };
        assert_eq!(markov.successor(7), 8);
        assert_eq!(markov.successor(19), 0);
        let two = SyntheticSpec { populations: 2, ..markov };
        assert_eq!(two.successor(9), 0);
        assert_eq!(two.successor(19), 10);
    }

    #[test]
    fn noiseless_generation_follows_the_pattern() {
        for pattern in [Pattern::Markov, Pattern::BlockCyclic] {
            let spec = SyntheticSpec { pattern, num_users: 30, seed: 4, ..SyntheticSpec::default() };
            let ds = spec.generate().unwrap();
            assert_eq!(ds.num_users(), 30);
            for u in ds.users() {
                for w in u.items.windows(2) {
                    assert_eq!(w[1], spec.successor(w[0]));
                }
            }
            let back = Dataset::parse(&ds.to_text()).unwrap();
            assert_eq!(back.dataset, ds);
            assert!(back.dropped.is_empty());
        }
    }

    #[test]
    fn populations_use_disjoint_items() {
        let spec = SyntheticSpec { populations: 2, noise_rate: 0.3, num_users: 40, ..SyntheticSpec::default() };
        let ds = spec.generate().unwrap();
        for (u, seq) in ds.users().iter().enumerate() {
            let p = spec.population_of(u);
            assert!(seq.items.iter().all(|&i| i / 10 == p));
        }
    }
}
