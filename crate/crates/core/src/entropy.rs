//! Global Shannon entropy of source-address and destination-port frequencies.

use std::hash::Hash;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntropyError {
    #[error("entropy of an empty distribution is undefined")]
    EmptyDistribution,
}

/// Additive key → count table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable<K: Eq + Hash> {
    counts: FxHashMap<K, u64>,
    total: u64,
}

impl<K: Eq + Hash> Default for FrequencyTable<K> {
    fn default() -> Self {
        FrequencyTable {
            counts: FxHashMap::default(),
            total: 0,
        }
    }
}

impl<K: Eq + Hash + Copy> FrequencyTable<K> {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, key: K) {
        self.add_n(key, 1);
    }

    pub fn add_n(&mut self, key: K, n: u64) {
        if n == 0 {
            return;
        }
        *self.counts.entry(key).or_insert(0) += n;
        self.total += n;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, key: &K) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, &u64)> {
        self.counts.iter()
    }

    pub fn merge(&mut self, other: FrequencyTable<K>) {
        if other.counts.len() > self.counts.len() {
            let mine = std::mem::replace(self, other);
            for (k, c) in mine.counts {
                self.add_n(k, c);
            }
        } else {
            for (k, c) in other.counts {
                self.add_n(k, c);
            }
        }
    }

    pub fn shannon_entropy(&self) -> Result<f64, EntropyError> {
        shannon_entropy(self.counts.values().copied())
    }
}

impl<K: Eq + Hash + Copy> FromIterator<K> for FrequencyTable<K> {
    fn from_iter<I: IntoIterator<Item = K>>(iter: I) -> Self {
        let mut t = FrequencyTable::new();
        for k in iter {
            t.add(k);
        }
        t
    }
}

/// Shannon entropy in bits of the distribution given by `counts`.
///
/// Counts are sorted before the compensated summation so the result depends
/// only on the multiset of counts, not on iteration order.
pub fn shannon_entropy(counts: impl IntoIterator<Item = u64>) -> Result<f64, EntropyError> {
    let mut counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(EntropyError::EmptyDistribution);
    }
    counts.sort_unstable();
    let total = total as f64;
    let mut sum = 0.0f64;
    let mut compensation = 0.0f64;
    let mut i = 0;
    while i < counts.len() {
        // runs of equal counts contribute identical terms
        let c = counts[i];
        let mut j = i;
        while j < counts.len() && counts[j] == c {
            j += 1;
        }
        let p = c as f64 / total;
        let term = -(p * p.log2()) * (j - i) as f64;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            compensation += (sum - t) + term;
        } else {
            compensation += (term - t) + sum;
        }
        sum = t;
        i = j;
    }
    Ok((sum + compensation).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionEntropy {
    pub entropy_bits: f64,
    /// log2 of the number of distinct keys.
    pub max_entropy_bits: f64,
    /// entropy / max entropy; zero when only one key was seen.
    pub normalized: f64,
}

impl DimensionEntropy {
    pub fn from_table<K: Eq + Hash + Copy>(
        table: &FrequencyTable<K>,
    ) -> Result<Self, EntropyError> {
        let entropy_bits = table.shannon_entropy()?;
        let max_entropy_bits = (table.distinct() as f64).log2();
        let normalized = if max_entropy_bits > 0.0 {
            (entropy_bits / max_entropy_bits).min(1.0)
        } else {
            0.0
        };
        Ok(DimensionEntropy {
            entropy_bits: entropy_bits.min(max_entropy_bits),
            max_entropy_bits,
            normalized,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub src_ip: DimensionEntropy,
    pub dst_port: DimensionEntropy,
}

impl EntropySummary {
    pub fn from_tables(
        src_ips: &FrequencyTable<u32>,
        dst_ports: &FrequencyTable<u16>,
    ) -> Result<Self, EntropyError> {
        Ok(EntropySummary {
            src_ip: DimensionEntropy::from_table(src_ips)?,
            dst_port: DimensionEntropy::from_table(dst_ports)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Increased,
    Decreased,
    Unchanged,
}

impl Direction {
    /// Changes within a micro-bit count as unchanged.
    pub const TOLERANCE_BITS: f64 = 1e-6;

    pub fn of(delta: f64) -> Self {
        if delta > Self::TOLERANCE_BITS {
            Direction::Increased
        } else if delta < -Self::TOLERANCE_BITS {
            Direction::Decreased
        } else {
            Direction::Unchanged
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Increased => "increased",
            Direction::Decreased => "decreased",
            Direction::Unchanged => "unchanged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DimensionDelta {
    pub baseline_bits: f64,
    pub test_bits: f64,
    pub delta_bits: f64,
    pub direction: Direction,
}

impl DimensionDelta {
    fn between(baseline: f64, test: f64) -> Self {
        let delta_bits = test - baseline;
        DimensionDelta {
            baseline_bits: baseline,
            test_bits: test,
            delta_bits,
            direction: Direction::of(delta_bits),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyDelta {
    pub src_ip: DimensionDelta,
    pub dst_port: DimensionDelta,
}

pub fn entropy_delta(baseline: &EntropySummary, test: &EntropySummary) -> EntropyDelta {
    EntropyDelta {
        src_ip: DimensionDelta::between(baseline.src_ip.entropy_bits, test.src_ip.entropy_bits),
        dst_port: DimensionDelta::between(
            baseline.dst_port.entropy_bits,
            test.dst_port.entropy_bits,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_1024_is_ten_bits() {
        let t: FrequencyTable<u32> = (0..1024u32).flat_map(|k| [k, k, k]).collect();
        assert!((t.shannon_entropy().unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_is_zero() {
        let mut t = FrequencyTable::new();
        t.add_n(7u16, 12345);
        assert_eq!(t.shannon_entropy().unwrap(), 0.0);
        let d = DimensionEntropy::from_table(&t).unwrap();
        assert_eq!((d.max_entropy_bits, d.normalized), (0.0, 0.0));
    }

    #[test]
    fn one_one_two_is_one_and_a_half() {
        let t: FrequencyTable<char> = ['a', 'b', 'c', 'c'].into_iter().collect();
        assert!((t.shannon_entropy().unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn empty_distribution_errors() {
        let t = FrequencyTable::<u32>::new();
        assert_eq!(t.shannon_entropy(), Err(EntropyError::EmptyDistribution));
        assert_eq!(
            shannon_entropy([0, 0]),
            Err(EntropyError::EmptyDistribution)
        );
    }

    #[test]
    fn deltas_and_directions() {
        let dim = |bits: f64| DimensionEntropy {
            entropy_bits: bits,
            max_entropy_bits: 20.0,
            normalized: bits / 20.0,
        };
        let base = EntropySummary {
            src_ip: dim(18.0),
            dst_port: dim(12.0),
        };
        let test = EntropySummary {
            src_ip: dim(19.2),
            dst_port: dim(11.0),
        };
        let d = entropy_delta(&base, &test);
        assert!((d.src_ip.delta_bits - 1.2).abs() < 1e-12);
        assert_eq!(d.src_ip.direction, Direction::Increased);
        assert_eq!(d.dst_port.direction, Direction::Decreased);
        let same = entropy_delta(&base, &base);
        assert_eq!(same.src_ip.delta_bits, 0.0);
        assert_eq!(same.dst_port.direction, Direction::Unchanged);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a: FrequencyTable<u16> = [1, 2, 2].into_iter().collect();
        let b: FrequencyTable<u16> = [2, 3, 3, 3, 4].into_iter().collect();
        a.merge(b);
        assert_eq!(a.total(), 8);
        assert_eq!((a.get(&1), a.get(&2), a.get(&3), a.get(&4)), (1, 3, 3, 1));
    }
}
