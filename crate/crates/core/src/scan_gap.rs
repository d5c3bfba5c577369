//! Destination-address gap analysis for sequential vs. randomized scanning.
//!
//! Gaps are absolute differences between consecutive destination addresses
//! seen on one port within one file. Gap multisets are held exactly up to
//! [`EXACT_LIMIT`] values and in a log-linear sketch beyond that.

use serde::Serialize;
use thiserror::Error;

use crate::ics::{IcsError, IcsPortTable};
use crate::packet_io::PacketRecord;

pub const EXACT_LIMIT: usize = 1_000_000;
pub const MIN_GAPS: u64 = 30;
pub const THRESHOLD_FLOOR: f64 = 256.0;
pub const SPAN_DIVISOR: f64 = 1024.0;

const SUB_BITS: u32 = 5;
const SUB_BUCKETS: usize = 1 << SUB_BITS;
/// Exact values below 32, then 27 octaves of 32 sub-buckets.
pub const SKETCH_BUCKETS: usize = SUB_BUCKETS + (32 - SUB_BITS as usize) * SUB_BUCKETS;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GapError {
    #[error("no records for gap analysis")]
    NoRecords,
}

fn sketch_bucket(v: u32) -> usize {
    if v < SUB_BUCKETS as u32 {
        return v as usize;
    }
    let octave = 31 - v.leading_zeros();
    let sub = (v >> (octave - SUB_BITS)) as usize & (SUB_BUCKETS - 1);
    (octave - SUB_BITS + 1) as usize * SUB_BUCKETS + sub
}

/// Smallest gap value mapping to `bucket`.
fn sketch_lower_bound(bucket: usize) -> u64 {
    if bucket < SUB_BUCKETS {
        return bucket as u64;
    }
    let octave = (bucket / SUB_BUCKETS) as u32 + SUB_BITS - 1;
    let sub = (bucket % SUB_BUCKETS) as u64;
    (SUB_BUCKETS as u64 + sub) << (octave - SUB_BITS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum GapStore {
    Exact(Vec<u32>),
    Sketch(Box<[u64; SKETCH_BUCKETS]>),
}

impl Default for GapStore {
    fn default() -> Self {
        GapStore::Exact(Vec::new())
    }
}

impl GapStore {
    fn len_hint(&self) -> usize {
        match self {
            GapStore::Exact(v) => v.len(),
            GapStore::Sketch(_) => usize::MAX,
        }
    }

    fn into_sketch(self) -> Box<[u64; SKETCH_BUCKETS]> {
        match self {
            GapStore::Sketch(s) => s,
            GapStore::Exact(v) => {
                let mut s = Box::new([0u64; SKETCH_BUCKETS]);
                for g in v {
                    s[sketch_bucket(g)] += 1;
                }
                s
            }
        }
    }

    fn push(&mut self, gap: u32) {
        match self {
            GapStore::Exact(v) if v.len() < EXACT_LIMIT => v.push(gap),
            GapStore::Exact(_) => {
                let mut s = std::mem::take(self).into_sketch();
                s[sketch_bucket(gap)] += 1;
                *self = GapStore::Sketch(s);
            }
            GapStore::Sketch(s) => s[sketch_bucket(gap)] += 1,
        }
    }

    fn merge(&mut self, other: GapStore) {
        let combined = self.len_hint().saturating_add(other.len_hint());
        match (std::mem::take(self), other) {
            (GapStore::Exact(mut a), GapStore::Exact(b)) if combined <= EXACT_LIMIT => {
                a.extend_from_slice(&b);
                *self = GapStore::Exact(a);
            }
            (a, b) => {
                let mut s = a.into_sketch();
                for (x, y) in s.iter_mut().zip(b.into_sketch().iter()) {
                    *x += y;
                }
                *self = GapStore::Sketch(s);
            }
        }
    }

    /// Nearest-rank median: the value at rank ceil(n/2).
    fn median(&self, n: u64) -> Option<u64> {
        if n == 0 {
            return None;
        }
        let rank = n.div_ceil(2);
        match self {
            GapStore::Exact(v) => {
                let mut v = v.clone();
                let (_, m, _) = v.select_nth_unstable(rank as usize - 1);
                Some(u64::from(*m))
            }
            GapStore::Sketch(s) => {
                let mut seen = 0u64;
                for (b, &c) in s.iter().enumerate() {
                    seen += c;
                    if seen >= rank {
                        return Some(sketch_lower_bound(b));
                    }
                }
                None
            }
        }
    }
}

/// Gap state for one port, fed in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GapAccumulator {
    n_packets: u64,
    n_gaps: u64,
    gap_sum: u128,
    min_dst: u32,
    max_dst: u32,
    store: GapStore,
    prev_dst: Option<u32>,
}

impl GapAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, dst_ip: u32) {
        if self.n_packets == 0 {
            self.min_dst = dst_ip;
            self.max_dst = dst_ip;
        } else {
            self.min_dst = self.min_dst.min(dst_ip);
            self.max_dst = self.max_dst.max(dst_ip);
        }
        self.n_packets += 1;
        if let Some(prev) = self.prev_dst {
            let gap = prev.abs_diff(dst_ip);
            self.n_gaps += 1;
            self.gap_sum += u128::from(gap);
            self.store.push(gap);
        }
        self.prev_dst = Some(dst_ip);
    }

    /// Forgets the previous address so no gap bridges two files.
    pub fn end_file(&mut self) {
        self.prev_dst = None;
    }

    pub fn n_packets(&self) -> u64 {
        self.n_packets
    }

    pub fn merge(&mut self, mut other: GapAccumulator) {
        self.end_file();
        other.end_file();
        if other.n_packets == 0 {
            return;
        }
        if self.n_packets == 0 {
            *self = other;
            return;
        }
        self.n_packets += other.n_packets;
        self.n_gaps += other.n_gaps;
        self.gap_sum += other.gap_sum;
        self.min_dst = self.min_dst.min(other.min_dst);
        self.max_dst = self.max_dst.max(other.max_dst);
        self.store.merge(other.store);
    }

    pub fn profile(&self) -> Result<GapProfile, GapError> {
        if self.n_packets == 0 {
            return Err(GapError::NoRecords);
        }
        Ok(GapProfile {
            n_packets: self.n_packets,
            n_gaps: self.n_gaps,
            mean_gap: (self.n_gaps > 0).then(|| self.gap_sum as f64 / self.n_gaps as f64),
            median_gap: self.store.median(self.n_gaps),
            observed_span: u64::from(self.max_dst - self.min_dst),
            approximate: matches!(self.store, GapStore::Sketch(_)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapProfile {
    pub n_packets: u64,
    pub n_gaps: u64,
    pub mean_gap: Option<f64>,
    pub median_gap: Option<u64>,
    pub observed_span: u64,
    /// True when the median came from the sketch rather than exact values.
    pub approximate: bool,
}

/// Gap profile of one time-ordered sequence of records to a single port.
pub fn compute_gaps<'a>(
    records: impl IntoIterator<Item = &'a PacketRecord>,
) -> Result<GapProfile, GapError> {
    let mut acc = GapAccumulator::new();
    for r in records {
        acc.push(r.dst_ip);
    }
    acc.profile()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScanClass {
    Sequential,
    Randomized,
    Insufficient,
}

impl ScanClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanClass::Sequential => "sequential",
            ScanClass::Randomized => "randomized",
            ScanClass::Insufficient => "insufficient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanClassification {
    pub class: ScanClass,
    pub threshold_used: f64,
}

pub fn threshold_for_span(span: u64) -> f64 {
    THRESHOLD_FLOOR.max(span as f64 / SPAN_DIVISOR)
}

pub fn classify(profile: &GapProfile) -> ScanClassification {
    let threshold_used = threshold_for_span(profile.observed_span);
    let class = match profile.median_gap {
        _ if profile.n_gaps < MIN_GAPS => ScanClass::Insufficient,
        Some(m) if m as f64 <= threshold_used => ScanClass::Sequential,
        _ => ScanClass::Randomized,
    };
    ScanClassification {
        class,
        threshold_used,
    }
}

/// One [`GapAccumulator`] per ICS table entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanAccumulator {
    fingerprint: u64,
    per_entry: Vec<GapAccumulator>,
}

impl ScanAccumulator {
    pub fn new(table: &IcsPortTable) -> Self {
        ScanAccumulator {
            fingerprint: table.fingerprint(),
            per_entry: vec![GapAccumulator::new(); table.len()],
        }
    }

    #[inline]
    pub fn update_classified(&mut self, rec: &PacketRecord, ics_entry: Option<usize>) {
        if let Some(i) = ics_entry {
            self.per_entry[i].push(rec.dst_ip);
        }
    }

    pub fn end_file(&mut self) {
        self.per_entry.iter_mut().for_each(GapAccumulator::end_file);
    }

    pub fn entry(&self, index: usize) -> &GapAccumulator {
        &self.per_entry[index]
    }

    pub fn merge(&mut self, other: ScanAccumulator) -> Result<(), IcsError> {
        if self.fingerprint != other.fingerprint {
            return Err(IcsError::TableMismatch {
                left: self.fingerprint,
                right: other.fingerprint,
            });
        }
        for (a, b) in self.per_entry.iter_mut().zip(other.per_entry) {
            a.merge(b);
        }
        Ok(())
    }

    /// Profiles and classes for every entry that saw traffic, in table order.
    pub fn rows(&self, table: &IcsPortTable) -> Vec<ScanRow> {
        table
            .entries()
            .iter()
            .zip(&self.per_entry)
            .filter_map(|(e, acc)| {
                let profile = acc.profile().ok()?;
                let classification = classify(&profile);
                Some(ScanRow {
                    port: e.port,
                    transport: e.transport,
                    protocol_name: e.name.clone(),
                    profile,
                    classification,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub port: u16,
    pub transport: crate::ics::PortTransport,
    pub protocol_name: String,
    pub profile: GapProfile,
    pub classification: ScanClassification,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile_of(dsts: &[u32]) -> GapProfile {
        let mut acc = GapAccumulator::new();
        dsts.iter().for_each(|&d| acc.push(d));
        acc.profile().unwrap()
    }

    #[test]
    fn unit_stride() {
        let p = profile_of(&[0x0a000001, 0x0a000002, 0x0a000003, 0x0a000004]);
        assert_eq!(
            (p.mean_gap, p.median_gap, p.observed_span),
            (Some(1.0), Some(1), 3)
        );
    }

    #[test]
    fn single_packet_is_insufficient() {
        let p = profile_of(&[7]);
        assert_eq!(p.n_gaps, 0);
        assert_eq!(p.median_gap, None);
        assert_eq!(classify(&p).class, ScanClass::Insufficient);
        assert_eq!(GapAccumulator::new().profile(), Err(GapError::NoRecords));
    }

    #[test]
    fn classification_thresholds() {
        let sweep: Vec<u32> = (0..65_537).collect();
        let c = classify(&profile_of(&sweep));
        assert_eq!((c.class, c.threshold_used), (ScanClass::Sequential, 256.0));

        let ten: Vec<u32> = (0..10).collect();
        assert_eq!(classify(&profile_of(&ten)).class, ScanClass::Insufficient);

        let wide = GapProfile {
            n_packets: 1000,
            n_gaps: 999,
            mean_gap: Some(166_000.0),
            median_gap: Some(146_000),
            observed_span: 500_000,
            approximate: false,
        };
        let c = classify(&wide);
        assert_eq!(c.class, ScanClass::Randomized);
        assert!((c.threshold_used - 488.28125).abs() < 1e-9);
    }

    #[test]
    fn nearest_rank_median() {
        assert_eq!(profile_of(&[0, 1, 11, 111]).median_gap, Some(10));
        assert_eq!(profile_of(&[0, 1, 11, 111, 1111]).median_gap, Some(10));
    }

    #[test]
    fn files_do_not_bridge() {
        let mut acc = GapAccumulator::new();
        acc.push(10);
        acc.push(11);
        acc.end_file();
        acc.push(1_000_000);
        acc.push(1_000_001);
        let p = acc.profile().unwrap();
        assert_eq!((p.n_gaps, p.n_packets, p.mean_gap), (2, 4, Some(1.0)));
    }

    #[test]
    fn sketch_buckets_cover_u32() {
        assert_eq!(SKETCH_BUCKETS, 896);
        assert_eq!(sketch_bucket(u32::MAX), SKETCH_BUCKETS - 1);
        let mut last = 0;
        for v in [0u32, 1, 31, 32, 33, 63, 64, 65, 1000, 1 << 20, u32::MAX - 1] {
            let b = sketch_bucket(v);
            assert!(b >= last);
            last = b;
            let lo = sketch_lower_bound(b);
            assert!(lo <= u64::from(v));
            assert_eq!(sketch_bucket(lo as u32), b);
            if b + 1 < SKETCH_BUCKETS {
                assert!(u64::from(v) < sketch_lower_bound(b + 1));
            }
        }
    }

    #[test]
    fn sketch_median_within_one_bucket() {
        let mut exact = GapStore::default();
        let mut sketch = GapStore::Sketch(Box::new([0; SKETCH_BUCKETS]));
        let gaps: Vec<u32> = (0..5001u32)
            .map(|i| i.wrapping_mul(2_654_435_761) >> 12)
            .collect();
        for &g in &gaps {
            exact.push(g);
            sketch.push(g);
        }
        let m = exact.median(gaps.len() as u64).unwrap();
        let s = sketch.median(gaps.len() as u64).unwrap();
        assert_eq!(sketch_bucket(m as u32), sketch_bucket(s as u32));
    }
}
