//! Overview statistics: volume, rates, distinct endpoints and the ICS split.
//!
//! [`TrafficAccumulator`] is a mergeable partial aggregate: every field
//! combines by sum, set union or minimum, so per-file accumulators can be
//! reduced in any order. Active duration is file-scoped (last minus first
//! yielded timestamp of each file) and is only advanced by
//! [`TrafficAccumulator::close_file`].

use std::collections::BTreeMap;

use chrono::DateTime;
use rustc_hash::FxHashSet;
use serde::Serialize;
use thiserror::Error;

use crate::ics::{IcsCounts, IcsError, IcsPortTable};
use crate::packet_io::{IngestStats, PacketRecord, Transport};

const BYTES_PER_MIB: f64 = 1_048_576.0;

#[derive(Debug, Error, PartialEq)]
pub enum OverviewError {
    #[error("no packets were accumulated")]
    EmptyCapture,
    #[error("active duration is zero; rates are undefined")]
    ZeroDuration,
    #[error("accumulators were built against different ICS tables ({left:016x} vs {right:016x})")]
    TableMismatch { left: u64, right: u64 },
}

impl From<IcsError> for OverviewError {
    fn from(e: IcsError) -> Self {
        match e {
            IcsError::TableMismatch { left, right } => OverviewError::TableMismatch { left, right },
            _ => unreachable!("IcsCounts::merge only fails on table mismatch"),
        }
    }
}

/// Exact membership set over the 16-bit port space.
#[derive(Clone, PartialEq, Eq)]
pub struct PortSet(Box<[u64; 1024]>);

impl Default for PortSet {
    fn default() -> Self {
        PortSet(Box::new([0; 1024]))
    }
}

impl std::fmt::Debug for PortSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PortSet({} ports)", self.len())
    }
}

impl PortSet {
    #[inline]
    pub fn insert(&mut self, port: u16) {
        self.0[usize::from(port >> 6)] |= 1 << (port & 63);
    }

    pub fn contains(&self, port: u16) -> bool {
        self.0[usize::from(port >> 6)] & (1 << (port & 63)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn union_with(&mut self, other: &PortSet) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a |= b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrafficAccumulator {
    pub files: u64,
    pub total_packets: u64,
    pub total_bytes: u64,
    pub active_duration_us: u64,
    pub distinct_src_ips: FxHashSet<u32>,
    pub distinct_dst_ips: FxHashSet<u32>,
    pub distinct_dst_ports: PortSet,
    pub per_transport_counts: BTreeMap<Transport, u64>,
    pub ics_packet_count: u64,
    pub per_ics_port_counts: IcsCounts,
    pub earliest_ts_us: Option<u64>,
}

impl TrafficAccumulator {
    pub fn new(table: &IcsPortTable) -> Self {
        TrafficAccumulator {
            files: 0,
            total_packets: 0,
            total_bytes: 0,
            active_duration_us: 0,
            distinct_src_ips: FxHashSet::default(),
            distinct_dst_ips: FxHashSet::default(),
            distinct_dst_ports: PortSet::default(),
            per_transport_counts: BTreeMap::new(),
            ics_packet_count: 0,
            per_ics_port_counts: table.empty_counts(),
            earliest_ts_us: None,
        }
    }

    /// An accumulator carrying only summary totals, e.g. figures reported by
    /// an external pipeline. Distinct sets stay empty.
    pub fn with_totals(
        table: &IcsPortTable,
        total_packets: u64,
        total_bytes: u64,
        active_duration_us: u64,
    ) -> Self {
        let mut acc = TrafficAccumulator::new(table);
        acc.total_packets = total_packets;
        acc.total_bytes = total_bytes;
        acc.active_duration_us = active_duration_us;
        acc
    }

    pub fn table_fingerprint(&self) -> u64 {
        self.per_ics_port_counts.fingerprint
    }

    pub fn update(&mut self, rec: &PacketRecord, table: &IcsPortTable) {
        debug_assert_eq!(table.fingerprint(), self.table_fingerprint());
        self.update_classified(rec, table.entry_index(rec));
    }

    /// Same as [`update`](Self::update) with the ICS classification already
    /// resolved by the caller.
    #[inline]
    pub fn update_classified(&mut self, rec: &PacketRecord, ics_entry: Option<usize>) {
        self.total_packets += 1;
        self.total_bytes += u64::from(rec.ip_len);
        self.distinct_src_ips.insert(rec.src_ip);
        self.distinct_dst_ips.insert(rec.dst_ip);
        if let Some(port) = rec.dst_port {
            self.distinct_dst_ports.insert(port);
        }
        *self.per_transport_counts.entry(rec.transport).or_insert(0) += 1;
        if let Some(idx) = ics_entry {
            self.ics_packet_count += 1;
            self.per_ics_port_counts.counts[idx] += 1;
        }
        self.earliest_ts_us = Some(self.earliest_ts_us.map_or(rec.ts_us, |e| e.min(rec.ts_us)));
    }

    /// Registers one finished file and its first/last yielded timestamps.
    pub fn close_file(&mut self, first_ts_us: Option<u64>, last_ts_us: Option<u64>) {
        self.files += 1;
        if let (Some(first), Some(last)) = (first_ts_us, last_ts_us) {
            self.active_duration_us += last.saturating_sub(first);
        }
    }

    pub fn close_file_from(&mut self, stats: &IngestStats) {
        self.close_file(stats.file_first_ts_us, stats.file_last_ts_us);
    }

    pub fn merge(mut self, other: TrafficAccumulator) -> Result<Self, OverviewError> {
        self.per_ics_port_counts.merge(&other.per_ics_port_counts)?;
        self.files += other.files;
        self.total_packets += other.total_packets;
        self.total_bytes += other.total_bytes;
        self.active_duration_us += other.active_duration_us;
        let (mut big, small) = if self.distinct_src_ips.len() >= other.distinct_src_ips.len() {
            (
                std::mem::take(&mut self.distinct_src_ips),
                other.distinct_src_ips,
            )
        } else {
            (
                other.distinct_src_ips,
                std::mem::take(&mut self.distinct_src_ips),
            )
        };
        big.extend(small);
        self.distinct_src_ips = big;
        let (mut big, small) = if self.distinct_dst_ips.len() >= other.distinct_dst_ips.len() {
            (
                std::mem::take(&mut self.distinct_dst_ips),
                other.distinct_dst_ips,
            )
        } else {
            (
                other.distinct_dst_ips,
                std::mem::take(&mut self.distinct_dst_ips),
            )
        };
        big.extend(small);
        self.distinct_dst_ips = big;
        self.distinct_dst_ports
            .union_with(&other.distinct_dst_ports);
        for (t, c) in other.per_transport_counts {
            *self.per_transport_counts.entry(t).or_insert(0) += c;
        }
        self.ics_packet_count += other.ics_packet_count;
        self.earliest_ts_us = match (self.earliest_ts_us, other.earliest_ts_us) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        Ok(self)
    }

    pub fn finalize(&self, table: &IcsPortTable) -> Result<OverviewStats, OverviewError> {
        if table.fingerprint() != self.table_fingerprint() {
            return Err(OverviewError::TableMismatch {
                left: self.table_fingerprint(),
                right: table.fingerprint(),
            });
        }
        if self.total_packets == 0 {
            return Err(OverviewError::EmptyCapture);
        }
        if self.active_duration_us == 0 {
            return Err(OverviewError::ZeroDuration);
        }
        let active_duration_s = self.active_duration_us as f64 / 1e6;
        let ics_fraction_pct = self.ics_packet_count as f64 / self.total_packets as f64 * 100.0;

        let dominant_ics_protocol = table
            .entries()
            .iter()
            .zip(&self.per_ics_port_counts.counts)
            .filter(|(_, &c)| c > 0)
            .max_by(|(ea, ca), (eb, cb)| {
                ca.cmp(cb)
                    .then(eb.port.cmp(&ea.port))
                    .then(eb.transport.cmp(&ea.transport))
            })
            .map(|(e, _)| e.name.clone());

        Ok(OverviewStats {
            files_analyzed: self.files,
            initial_start_ts_us: self.earliest_ts_us,
            initial_start_utc: self.earliest_ts_us.map(format_utc),
            active_duration_s,
            total_packets: self.total_packets,
            total_bytes: self.total_bytes,
            total_volume_mib: self.total_bytes as f64 / BYTES_PER_MIB,
            avg_packet_rate_pps: self.total_packets as f64 / active_duration_s,
            avg_bandwidth_mbps: self.total_bytes as f64 * 8.0 / active_duration_s / 1e6,
            dominant_ics_protocol,
            ics_packets: self.ics_packet_count,
            ics_fraction_pct,
            non_ics_packets: self.total_packets - self.ics_packet_count,
            non_ics_fraction_pct: 100.0 - ics_fraction_pct,
            unique_src_ips: self.distinct_src_ips.len() as u64,
            unique_dst_ips: self.distinct_dst_ips.len() as u64,
            unique_dst_ports: self.distinct_dst_ports.len() as u64,
            per_transport: self
                .per_transport_counts
                .iter()
                .map(|(t, c)| (t.to_string(), *c))
                .collect(),
        })
    }
}

/// `YYYY-MM-DD HH:MM:SS` in UTC.
pub fn format_utc(ts_us: u64) -> String {
    let secs = (ts_us / 1_000_000) as i64;
    DateTime::from_timestamp(secs, 0)
        .map(|dt| dt.format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| format!("@{secs}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverviewStats {
    pub files_analyzed: u64,
    pub initial_start_ts_us: Option<u64>,
    pub initial_start_utc: Option<String>,
    pub active_duration_s: f64,
    pub total_packets: u64,
    pub total_bytes: u64,
    pub total_volume_mib: f64,
    pub avg_packet_rate_pps: f64,
    pub avg_bandwidth_mbps: f64,
    pub dominant_ics_protocol: Option<String>,
    pub ics_packets: u64,
    pub ics_fraction_pct: f64,
    pub non_ics_packets: u64,
    pub non_ics_fraction_pct: f64,
    pub unique_src_ips: u64,
    pub unique_dst_ips: u64,
    pub unique_dst_ports: u64,
    pub per_transport: BTreeMap<String, u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(ts_us: u64, src: u32, dst: u32, dport: u16, ip_len: u16) -> PacketRecord {
        PacketRecord {
            ts_us,
            src_ip: src,
            dst_ip: dst,
            transport: Transport::Tcp,
            src_port: Some(40000),
            dst_port: Some(dport),
            ip_len,
        }
    }

    #[test]
    fn ics_packets_are_counted_per_entry() {
        let t = IcsPortTable::default();
        let mut acc = TrafficAccumulator::new(&t);
        acc.update(&rec(0, 1, 2, 502, 40), &t);
        assert_eq!(acc.ics_packet_count, 1);
        let modbus = t.entries().iter().position(|e| e.port == 502).unwrap();
        assert_eq!(acc.per_ics_port_counts.counts[modbus], 1);
        acc.update(&rec(1, 1, 2, 80, 40), &t);
        assert_eq!(acc.ics_packet_count, 1);
        assert_eq!(acc.total_packets, 2);
    }

    #[test]
    fn volume_and_duration() {
        let t = IcsPortTable::default();
        let mut acc = TrafficAccumulator::new(&t);
        let n = 1000u64;
        for i in 0..n {
            acc.update(&rec(i * 10_000_000 / (n - 1), 7, 8, 80, 60), &t);
        }
        acc.close_file(Some(0), Some(10_000_000));
        assert_eq!(acc.total_bytes, 60_000);
        assert_eq!(acc.active_duration_us, 10_000_000);
        let stats = acc.finalize(&t).unwrap();
        assert!((stats.avg_packet_rate_pps - 100.0).abs() < 1e-12);
        assert_eq!(stats.files_analyzed, 1);
        assert_eq!(stats.unique_dst_ports, 1);
    }

    #[test]
    fn empty_and_zero_duration() {
        let t = IcsPortTable::default();
        let acc = TrafficAccumulator::new(&t);
        assert_eq!(acc.finalize(&t).unwrap_err(), OverviewError::EmptyCapture);
        let mut acc = TrafficAccumulator::new(&t);
        acc.update(&rec(5, 1, 2, 80, 40), &t);
        acc.close_file(Some(5), Some(5));
        assert_eq!(acc.finalize(&t).unwrap_err(), OverviewError::ZeroDuration);
    }

    #[test]
    fn merge_rejects_other_table() {
        let a = TrafficAccumulator::new(&IcsPortTable::default());
        let b = TrafficAccumulator::new(&IcsPortTable::from_csv_str("502,tcp,Modbus").unwrap());
        assert!(matches!(
            a.merge(b),
            Err(OverviewError::TableMismatch { .. })
        ));
    }

    #[test]
    fn dominant_protocol_ties_go_to_lowest_port() {
        let t = IcsPortTable::default();
        let mut acc = TrafficAccumulator::new(&t);
        acc.update(&rec(0, 1, 2, 502, 40), &t);
        acc.update(&rec(1, 1, 2, 102, 40), &t);
        acc.close_file(Some(0), Some(1));
        let stats = acc.finalize(&t).unwrap();
        assert_eq!(stats.dominant_ics_protocol.as_deref(), Some("S7/ISO-TSAP"));
        assert_eq!(stats.ics_fraction_pct + stats.non_ics_fraction_pct, 100.0);
    }

    #[test]
    fn start_time_formats_in_utc() {
        assert_eq!(format_utc(1_610_668_800_000_000), "2021-01-15 00:00:00");
    }

    fn summary(
        acc: &TrafficAccumulator,
    ) -> (
        u64,
        u64,
        u64,
        u64,
        usize,
        usize,
        usize,
        Vec<u64>,
        u64,
        Option<u64>,
    ) {
        (
            acc.files,
            acc.total_packets,
            acc.total_bytes,
            acc.active_duration_us,
            acc.distinct_src_ips.len(),
            acc.distinct_dst_ips.len(),
            acc.distinct_dst_ports.len(),
            acc.per_ics_port_counts.counts.clone(),
            acc.ics_packet_count,
            acc.earliest_ts_us,
        )
    }

    proptest! {
        #[test]
        fn split_merge_matches_single_pass(
            recs in prop::collection::vec((0u64..1_000_000, 0u32..64, 0u32..64, prop::sample::select(vec![80u16, 502, 102, 47808, 2222]), 20u16..1500), 1..200),
            split in 0usize..200,
        ) {
            let t = IcsPortTable::default();
            let records: Vec<_> = recs.iter().map(|&(ts, s, d, p, l)| rec(ts, s, d, p, l)).collect();
            let split = split.min(records.len());
            let first = records.first().map(|r| r.ts_us);
            let last = records.last().map(|r| r.ts_us);

            let mut single = TrafficAccumulator::new(&t);
            records.iter().for_each(|r| single.update(r, &t));
            single.close_file(first, last);

            let mut a = TrafficAccumulator::new(&t);
            let mut b = TrafficAccumulator::new(&t);
            records[..split].iter().for_each(|r| a.update(r, &t));
            records[split..].iter().for_each(|r| b.update(r, &t));
            // the file boundary metadata travels with one half
            a.close_file(first, last);

            let ab = a.clone().merge(b.clone()).unwrap();
            let ba = b.merge(a).unwrap();
            prop_assert_eq!(summary(&ab), summary(&single));
            prop_assert_eq!(summary(&ba), summary(&single));
            prop_assert_eq!(ab.per_transport_counts, single.per_transport_counts);
            prop_assert_eq!(ab.per_ics_port_counts.counts.iter().sum::<u64>(), ab.ics_packet_count);
        }

        #[test]
        fn bandwidth_rate_ratio_is_mean_size(
            lens in prop::collection::vec(20u16..1500, 2..100),
        ) {
            let t = IcsPortTable::default();
            let mut acc = TrafficAccumulator::new(&t);
            for (i, l) in lens.iter().enumerate() {
                acc.update(&rec(i as u64 * 1000, 1, 2, 80, *l), &t);
            }
            acc.close_file(Some(0), Some((lens.len() as u64 - 1) * 1000));
            let s = acc.finalize(&t).unwrap();
            let mean = lens.iter().map(|&l| f64::from(l)).sum::<f64>() / lens.len() as f64;
            let ratio = s.avg_bandwidth_mbps / s.avg_packet_rate_pps;
            prop_assert!((ratio - mean * 8.0 / 1e6).abs() <= 1e-9 * ratio.abs());
            prop_assert!(s.unique_src_ips <= s.total_packets);
        }
    }
}
