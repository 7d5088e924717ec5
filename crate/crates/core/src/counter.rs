//! Multiply-accumulate accounting.
//!
//! One count is one scalar multiply-add inside a matrix product. Pooling
//! additions are tallied under [`Category::Pooling`] with multiplier 1.
//! Softmax, layer norm, score scaling and residual additions are not counted.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Qkv,
    AttnScores,
    Ffn,
    Router,
    Pooling,
    Aggregation,
    Other,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Qkv,
        Category::AttnScores,
        Category::Ffn,
        Category::Router,
        Category::Pooling,
        Category::Aggregation,
        Category::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Qkv => "qkv",
            Category::AttnScores => "attn_scores",
            Category::Ffn => "ffn",
            Category::Router => "router",
            Category::Pooling => "pooling",
            Category::Aggregation => "aggregation",
            Category::Other => "other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Category {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown counter category `{s}`")))
    }
}

/// Lock-free per-category MAC tally. Safe to share across expert threads.
#[derive(Debug, Default)]
pub struct OpCounter {
    macs: [AtomicU64; 7],
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, category: Category, macs: u64) {
        self.macs[category.index()].fetch_add(macs, Ordering::Relaxed);
    }

    pub fn get(&self, category: Category) -> u64 {
        self.macs[category.index()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        Category::ALL.iter().map(|&c| self.get(c)).sum()
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let mut macs = [0; 7];
        for c in Category::ALL {
            macs[c.index()] = self.get(c);
        }
        CounterSnapshot { macs }
    }

    /// Starts a new measurement scope. Requires exclusive access so no
    /// increment can race with the reset.
    pub fn reset(&mut self) {
        for slot in &mut self.macs {
            *slot.get_mut() = 0;
        }
    }

    pub fn meter(&self) -> Meter<'_> {
        Meter {
            counter: Some(self),
            redirect: None,
        }
    }
}

/// Plain-value copy of a counter at one point in time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    macs: [u64; 7],
}

impl CounterSnapshot {
    pub fn get(&self, category: Category) -> u64 {
        self.macs[category.index()]
    }

    pub fn total(&self) -> u64 {
        self.macs.iter().sum()
    }

    pub fn merged(&self, other: &CounterSnapshot) -> CounterSnapshot {
        let mut macs = self.macs;
        for (m, o) in macs.iter_mut().zip(other.macs) {
            *m += o;
        }
        CounterSnapshot { macs }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Category, u64)> + '_ {
        Category::ALL.into_iter().map(|c| (c, self.get(c)))
    }
}

/// Handle through which operations report MACs.
///
/// A meter may be detached (backward passes and finite-difference probes
/// are not measured) or may redirect every category into one bucket, which
/// is how the aggregation block is tallied.
#[derive(Debug, Clone, Copy, Default)]
pub struct Meter<'a> {
    counter: Option<&'a OpCounter>,
    redirect: Option<Category>,
}

impl<'a> Meter<'a> {
    pub fn detached() -> Meter<'static> {
        Meter {
            counter: None,
            redirect: None,
        }
    }

    pub fn redirected(self, category: Category) -> Meter<'a> {
        Meter {
            counter: self.counter,
            redirect: Some(category),
        }
    }

    pub fn record(&self, category: Category, macs: u64) {
        if let Some(counter) = self.counter {
            counter.add(self.redirect.unwrap_or(category), macs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_sum_of_categories() {
        let c = OpCounter::new();
        c.add(Category::Qkv, 10);
        c.add(Category::Ffn, 5);
        c.add(Category::Qkv, 1);
        assert_eq!(c.get(Category::Qkv), 11);
        assert_eq!(c.total(), 16);
        assert_eq!(c.snapshot().total(), 16);
    }

    #[test]
    fn redirect_and_detached() {
        let c = OpCounter::new();
        c.meter()
            .redirected(Category::Aggregation)
            .record(Category::Qkv, 7);
        Meter::detached().record(Category::Qkv, 100);
        assert_eq!(c.get(Category::Aggregation), 7);
        assert_eq!(c.get(Category::Qkv), 0);
    }

    #[test]
    fn concurrent_increments_are_not_lost() {
        let c = OpCounter::new();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..10_000 {
                        c.meter().record(Category::AttnScores, 3);
                    }
                });
            }
        });
        assert_eq!(c.get(Category::AttnScores), 8 * 10_000 * 3);
    }

    #[test]
    fn category_labels_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.label().parse::<Category>().unwrap(), c);
        }
        assert!("flops".parse::<Category>().is_err());
    }
}
