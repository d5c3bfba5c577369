use std::collections::BTreeMap;

use darkscope_core::entropy::{shannon_entropy, DimensionEntropy, FrequencyTable};
use darkscope_core::geo::{CountryCode, GeoAccumulator, GeoKey, PrefixTable};
use darkscope_core::iat::{bin_index, pacing_summary, IatAccumulator, IatBin, IatHistogram};
use darkscope_core::ics::{delta_table, IcsPortTable};
use darkscope_core::ids::{evaluate, fit_baseline, tune_threshold};
use darkscope_core::overview::TrafficAccumulator;
use darkscope_core::packet_io::{PacketRecord, Transport};
use darkscope_core::scan_gap::{classify, GapAccumulator, ScanClass};
use darkscope_core::synth::{generate, preset};
use ipnet::Ipv4Net;
use proptest::prelude::*;

fn packet(
    ts_us: u64,
    src_ip: u32,
    dst_ip: u32,
    transport: Transport,
    dst_port: u16,
    ip_len: u16,
) -> PacketRecord {
    let ports = transport.has_ports();
    PacketRecord {
        ts_us,
        src_ip,
        dst_ip,
        transport,
        src_port: ports.then_some(40000),
        dst_port: ports.then_some(dst_port),
        ip_len,
    }
}

fn packet_strategy() -> impl Strategy<Value = PacketRecord> {
    let transport = prop_oneof![
        Just(Transport::Tcp),
        Just(Transport::Udp),
        Just(Transport::Icmp)
    ];
    let port = prop_oneof![
        Just(502u16),
        Just(161),
        Just(2222),
        Just(47808),
        any::<u16>()
    ];
    (
        0u64..50_000_000,
        0u32..64,
        any::<u32>(),
        transport,
        port,
        40u16..1500,
    )
        .prop_map(|(ts, src, dst, t, p, len)| packet(ts, src, dst, t, p, len))
}

/// Files as sorted-timestamp record lists.
fn files_strategy() -> impl Strategy<Value = Vec<Vec<PacketRecord>>> {
    prop::collection::vec(
        prop::collection::vec(packet_strategy(), 1..40).prop_map(|mut v| {
            v.sort_by_key(|r| r.ts_us);
            v
        }),
        1..6,
    )
}

fn file_accumulator(table: &IcsPortTable, file: &[PacketRecord]) -> TrafficAccumulator {
    let mut acc = TrafficAccumulator::new(table);
    for r in file {
        acc.update(r, table);
    }
    acc.close_file(file.first().map(|r| r.ts_us), file.last().map(|r| r.ts_us));
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn overview_is_order_and_tree_independent(files in files_strategy(), seed in any::<u64>()) {
        let table = IcsPortTable::default();
        let partials: Vec<_> = files.iter().map(|f| file_accumulator(&table, f)).collect();
        let left = partials
            .iter()
            .cloned()
            .reduce(|a, b| a.merge(b).unwrap())
            .unwrap()
            .finalize(&table);

        let mut order: Vec<usize> = (0..partials.len()).collect();
        let n = order.len();
        order.rotate_left((seed as usize) % n);
        if seed & 1 == 1 {
            order.reverse();
        }
        // Balanced tree over the shuffled order.
        let mut level: Vec<_> = order.iter().map(|&i| partials[i].clone()).collect();
        while level.len() > 1 {
            let mut next = Vec::new();
            let mut it = level.into_iter();
            while let Some(a) = it.next() {
                next.push(match it.next() {
                    Some(b) => b.merge(a).unwrap(),
                    None => a,
                });
            }
            level = next;
        }
        let right = level.pop().unwrap().finalize(&table);
        match (left, right) {
            (Ok(l), Ok(r)) => {
                prop_assert_eq!(l.total_packets, r.total_packets);
                prop_assert_eq!(l.avg_packet_rate_pps.to_bits(), r.avg_packet_rate_pps.to_bits());
                prop_assert_eq!(l.avg_bandwidth_mbps.to_bits(), r.avg_bandwidth_mbps.to_bits());
                prop_assert_eq!(&l, &r);
                prop_assert!(l.unique_src_ips <= l.total_packets && l.unique_dst_ips <= l.total_packets);
                prop_assert!(l.unique_dst_ports <= l.total_packets.min(65536));
                prop_assert!((l.ics_fraction_pct + l.non_ics_fraction_pct - 100.0).abs() < 1e-9);
            }
            (Err(l), Err(r)) => prop_assert_eq!(l, r),
            (l, r) => prop_assert!(false, "diverged: {:?} vs {:?}", l, r),
        }
    }

    #[test]
    fn entropy_merge_and_relabeling(counts in prop::collection::vec(1u64..500, 1..80), split in any::<prop::sample::Index>(), salt in any::<u32>()) {
        let mut single = FrequencyTable::new();
        let (mut a, mut b) = (FrequencyTable::new(), FrequencyTable::new());
        let cut = split.index(counts.len() + 1);
        for (key, &c) in counts.iter().enumerate() {
            let key = key as u32;
            single.add_n(key, c);
            // Spread each key's count across both halves unevenly.
            if (key as usize) < cut { a.add_n(key, c) } else { a.add_n(key, c / 2); b.add_n(key, c - c / 2) }
        }
        a.merge(b);
        prop_assert_eq!(a.shannon_entropy().unwrap().to_bits(), single.shannon_entropy().unwrap().to_bits());

        let relabeled: FrequencyTable<u32> = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| ((k as u32).wrapping_mul(2_654_435_761) ^ salt, c))
            .fold(FrequencyTable::new(), |mut t, (k, c)| { t.add_n(k, c); t });
        prop_assert_eq!(relabeled.shannon_entropy().unwrap().to_bits(), single.shannon_entropy().unwrap().to_bits());

        let mut reversed = counts.clone();
        reversed.reverse();
        prop_assert_eq!(shannon_entropy(reversed).unwrap().to_bits(), single.shannon_entropy().unwrap().to_bits());
    }

    #[test]
    fn iat_conservation_merge_and_window(files in prop::collection::vec(prop::collection::vec(0u64..2_000_000, 0..50), 1..6)) {
        let mut merged = IatHistogram::new();
        let mut single_pass = IatHistogram::new();
        let mut expected = 0u64;
        let mut in_window = 0u64;
        for f in &files {
            let mut ts = f.clone();
            ts.sort_unstable();
            expected += ts.len().saturating_sub(1) as u64;
            in_window += ts.windows(2).filter(|w| (1_000..100_000).contains(&(w[1] - w[0]))).count() as u64;
            let mut acc = IatAccumulator::new();
            ts.iter().for_each(|&t| acc.push(t));
            merged.merge(&acc.finish());
            single_pass.accumulate_stream(ts.iter().copied());
        }
        prop_assert_eq!(merged.total(), expected);
        prop_assert_eq!(&merged, &single_pass);
        if expected > 0 {
            let s = pacing_summary(&merged).unwrap();
            prop_assert_eq!(s.micro_pacing_fraction, in_window as f64 / expected as f64);
        }
    }

    #[test]
    fn scan_classification_ignores_affine_shift(dsts in prop::collection::vec(0u32..3_000_000, 1..200), shift in 0u32..1_000_000_000) {
        let profile = |offset: u32| {
            let mut acc = GapAccumulator::new();
            dsts.iter().for_each(|&d| acc.push(d + offset));
            acc.profile().unwrap()
        };
        let (a, b) = (profile(0), profile(shift));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(classify(&a), classify(&b));
    }

    #[test]
    fn small_strides_are_sequential(stride in 1u32..=256, extra in 0u32..500, start in 0u32..1_000_000) {
        let n = 30 + extra;
        let mut acc = GapAccumulator::new();
        for i in 0..=n {
            acc.push(start + i * stride);
        }
        let p = acc.profile().unwrap();
        prop_assert!(p.observed_span >= 30 * u64::from(stride));
        prop_assert_eq!(classify(&p).class, ScanClass::Sequential);
    }

    #[test]
    fn ics_partition_and_purity(recs in prop::collection::vec(packet_strategy(), 1..80), src in any::<u32>(), ts in any::<u32>(), len in 40u16..9000) {
        let table = IcsPortTable::default();
        let mut acc = TrafficAccumulator::new(&table);
        for r in &recs {
            acc.update(r, &table);
            let moved = PacketRecord { src_ip: src, ts_us: u64::from(ts), ip_len: len, ..*r };
            prop_assert_eq!(table.classify(r), table.classify(&moved));
        }
        prop_assert_eq!(acc.ics_packet_count, recs.iter().filter(|r| table.classify(r).is_some()).count() as u64);
        let rows = delta_table(&table, &acc.per_ics_port_counts, &table.empty_counts()).unwrap();
        prop_assert_eq!(rows.len(), table.len());
    }

    #[test]
    fn geo_lookup_matches_linear_scan(
        prefixes in prop::collection::vec((any::<u32>(), 0u8..=32, 0usize..4), 0..40),
        probes in prop::collection::vec(any::<u32>(), 1..100),
    ) {
        let codes = ["US", "RU", "NL", "BG"];
        let mut table = PrefixTable::new("prop");
        let mut entries: Vec<(Ipv4Net, CountryCode)> = Vec::new();
        for (addr, len, c) in prefixes {
            let net = Ipv4Net::new(addr.into(), len).unwrap().trunc();
            if entries.iter().any(|(n, _)| *n == net) {
                continue;
            }
            let cc: CountryCode = codes[c].parse().unwrap();
            table.insert(net, cc).unwrap();
            entries.push((net, cc));
        }
        let mut acc = GeoAccumulator::new(&table);
        for &p in &probes {
            let expected = entries
                .iter()
                .filter(|(n, _)| n.contains(&std::net::Ipv4Addr::from(p)))
                .max_by_key(|(n, _)| n.prefix_len())
                .map_or(GeoKey::Unattributed, |(_, c)| GeoKey::Country(*c));
            prop_assert_eq!(table.lookup(p), expected);
            acc.update(p, &table);
        }
        prop_assert_eq!(acc.into_counts(&table).total(), probes.len() as u64);
    }

    #[test]
    fn ids_invariants(test in prop::collection::vec(0u64..40, 1..30), base in prop::collection::vec(0u64..40, 2..30), target_pct in 1u32..=100) {
        let target = f64::from(target_pct) / 100.0;
        let tuned = tune_threshold(&test, target, &base).unwrap();
        let max = *test.iter().max().unwrap() as i64;
        let meets = |t: i64| test.iter().filter(|&&c| c as i64 > t).count() as f64 / test.len() as f64 >= target;
        let brute = (-1..=max + 1).filter(|&t| meets(t)).max().unwrap();
        prop_assert_eq!(tuned.threshold, brute);
        prop_assert!(!meets(tuned.threshold + 1) || tuned.threshold + 1 > max);

        let mut last = (f64::INFINITY, f64::INFINITY);
        for t in -2..=max + 2 {
            let d = evaluate(&test, t as f64).unwrap();
            let f = evaluate(&base, t as f64).unwrap();
            prop_assert_eq!(d.detection_rate_pct + d.evasion_rate_pct, 100.0);
            prop_assert!(d.detection_rate_pct <= last.0 && f.detection_rate_pct <= last.1);
            last = (d.detection_rate_pct, f.detection_rate_pct);
        }

        let fit = fit_baseline(&base).unwrap();
        let n = base.len() as f64;
        let mean = base.iter().map(|&c| c as f64).sum::<f64>() / n;
        let var = base.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((fit.mu - mean).abs() <= 1e-9 * mean.abs().max(1.0));
        prop_assert!((fit.sigma - var.sqrt()).abs() <= 1e-9 * var.sqrt().max(1.0));
    }
}

#[test]
fn bin_index_matches_direct_logarithm() {
    let mut rng = darkscope_core::synth::SynthRng::new(99);
    for _ in 0..200_000 {
        let us = 1 + rng.below(2_000_000);
        let ms = us as f64 / 1000.0;
        let direct = ((ms.log10() + 3.0) * 10.0).floor();
        let got = bin_index(ms).unwrap();
        let want = if direct < 0.0 {
            IatBin::Underflow
        } else if direct >= 60.0 {
            IatBin::Overflow
        } else {
            IatBin::Bin(direct as usize)
        };
        if got != want {
            // Only rounding right at an edge may disagree.
            let frac = (ms.log10() + 3.0) * 10.0;
            assert!(
                (frac - frac.round()).abs() < 1e-9,
                "{ms} ms: {got:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn analyzer_matches_generator_ground_truth() {
    let mut spec = preset("baseline-2021-like").unwrap();
    spec.duration_s = 300;
    let (records, truth) = generate(&spec).unwrap();

    let mut ports: BTreeMap<(Transport, u16), u64> = BTreeMap::new();
    let mut sources = FrequencyTable::new();
    let mut dst_ports = FrequencyTable::new();
    let mut iat = IatAccumulator::new();
    for r in &records {
        *ports.entry((r.transport, r.dst_port.unwrap())).or_default() += 1;
        sources.add(r.src_ip);
        dst_ports.add(r.dst_port.unwrap());
        iat.push(r.ts_us);
    }
    let truth_ports: BTreeMap<(Transport, u16), u64> = truth
        .dst_ports
        .iter()
        .map(|p| ((p.transport, p.port), p.count))
        .collect();
    assert_eq!(ports, truth_ports);
    assert_eq!(iat.finish(), truth.iat_histogram);

    let analyzed = DimensionEntropy::from_table(&sources).unwrap().entropy_bits;
    let direct = shannon_entropy(truth.sources.iter().map(|s| s.count)).unwrap();
    assert!((analyzed - direct).abs() < 1e-9);
    let mut by_port: BTreeMap<u16, u64> = BTreeMap::new();
    for p in &truth.dst_ports {
        *by_port.entry(p.port).or_default() += p.count;
    }
    let port_bits = shannon_entropy(by_port.values().copied()).unwrap();
    assert!((dst_ports.shannon_entropy().unwrap() - port_bits).abs() < 1e-9);

    let total: u64 = truth.countries.values().sum();
    assert_eq!(total, truth.total_records);
}
