use darkscope_core::packet_io::{
    write_capture, Endianness, IngestStats, LinkType, PacketRecord, PcapReader, PcapWriter,
    Transport, TsResolution,
};
use darkscope_core::synth::{generate, preset};
use proptest::prelude::*;

fn read_all(bytes: &[u8]) -> (Vec<PacketRecord>, IngestStats) {
    let mut reader = PcapReader::new(bytes).expect("header");
    let mut out = Vec::new();
    let stats = reader.read_records(None, |r| out.push(*r)).expect("read");
    (out, stats)
}

fn encode(records: &[PacketRecord], link: LinkType, e: Endianness, res: TsResolution) -> Vec<u8> {
    let mut w = PcapWriter::with_format(Vec::new(), link, e, res).unwrap();
    for r in records {
        w.write_record(r).unwrap();
    }
    w.finish().unwrap()
}

fn record_strategy() -> impl Strategy<Value = PacketRecord> {
    let transport = prop_oneof![
        Just(Transport::Tcp),
        Just(Transport::Udp),
        Just(Transport::Icmp),
        (0u8..=255)
            .prop_filter("not tcp/udp/icmp", |p| ![1, 6, 17].contains(p))
            .prop_map(Transport::OtherIp),
    ];
    (
        0u64..4_000_000_000_000_000,
        any::<u32>(),
        any::<u32>(),
        transport,
        any::<u16>(),
        any::<u16>(),
        0u16..1400,
    )
        .prop_map(|(ts_us, src_ip, dst_ip, transport, sp, dp, extra)| {
            let (ports, header) = match transport {
                Transport::Tcp => (true, 40),
                Transport::Udp => (true, 28),
                Transport::Icmp => (false, 28),
                Transport::OtherIp(_) => (false, 20),
            };
            PacketRecord {
                ts_us,
                src_ip,
                dst_ip,
                transport,
                src_port: ports.then_some(sp),
                dst_port: ports.then_some(dp),
                ip_len: header + extra,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_records_round_trip(records in prop::collection::vec(record_strategy(), 0..60)) {
        for link in [LinkType::Ethernet, LinkType::RawIp] {
            let bytes = encode(&records, link, Endianness::Little, TsResolution::Micro);
            let (back, stats) = read_all(&bytes);
            prop_assert_eq!(&back, &records);
            prop_assert!(stats.is_balanced());
            prop_assert_eq!(stats.records_yielded, records.len() as u64);
        }
    }

    #[test]
    fn byte_order_and_resolution_do_not_change_records(records in prop::collection::vec(record_strategy(), 1..40)) {
        let reference = read_all(&encode(&records, LinkType::Ethernet, Endianness::Little, TsResolution::Micro)).0;
        for e in [Endianness::Little, Endianness::Big] {
            for res in [TsResolution::Micro, TsResolution::Nano] {
                let (back, _) = read_all(&encode(&records, LinkType::Ethernet, e, res));
                prop_assert_eq!(&back, &reference);
            }
        }
    }

    /// Cutting a capture anywhere yields a prefix of its records with
    /// balanced accounting, never an error.
    #[test]
    fn truncation_yields_a_prefix(records in prop::collection::vec(record_strategy(), 1..20), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&records, LinkType::Ethernet, Endianness::Big, TsResolution::Micro);
        let at = 24 + cut.index(bytes.len() - 24 + 1);
        let (back, stats) = read_all(&bytes[..at]);
        prop_assert!(back.len() <= records.len());
        prop_assert_eq!(&back[..], &records[..back.len()]);
        prop_assert!(stats.is_balanced());
        prop_assert!(stats.skipped_malformed <= 1);
    }

    #[test]
    fn cap_splits_frames_exactly(records in prop::collection::vec(record_strategy(), 0..50), cap in 1u64..60) {
        let bytes = encode(&records, LinkType::RawIp, Endianness::Little, TsResolution::Micro);
        let mut reader = PcapReader::new(&bytes[..]).unwrap();
        let mut seen = Vec::new();
        let stats = reader.read_records(Some(cap), |r| seen.push(*r)).unwrap();
        let kept = (records.len() as u64).min(cap);
        prop_assert_eq!(seen.len() as u64, kept);
        prop_assert_eq!(stats.skipped_cap, records.len() as u64 - kept);
        prop_assert_eq!(stats.packets_read, records.len() as u64);
        prop_assert_eq!(reader.bytes_read(), bytes.len() as u64);
    }
}

#[test]
fn generated_trace_round_trips_through_a_file() {
    let mut spec = preset("paced-botnet-2025-like").unwrap();
    spec.duration_s = 120;
    let (records, truth) = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.pcap");
    let written = write_capture(&path, records.iter().copied(), LinkType::Ethernet).unwrap();
    assert_eq!(written, records.len() as u64);

    let mut reader = darkscope_core::packet_io::open_capture(&path).unwrap();
    let mut back = Vec::with_capacity(records.len());
    let stats = reader.read_records(None, |r| back.push(*r)).unwrap();
    assert_eq!(back, records);
    assert_eq!(stats.records_yielded, truth.total_records);
    assert_eq!(
        back.iter().map(|r| u64::from(r.ip_len)).sum::<u64>(),
        truth.total_bytes
    );
    assert_eq!(reader.bytes_read(), std::fs::metadata(&path).unwrap().len());
}

#[test]
fn non_ip_frames_are_accounted() {
    let rec = PacketRecord {
        ts_us: 1_000_000,
        src_ip: 1,
        dst_ip: 2,
        transport: Transport::Udp,
        src_port: Some(5),
        dst_port: Some(161),
        ip_len: 60,
    };
    let mut bytes = encode(
        &[rec],
        LinkType::Ethernet,
        Endianness::Little,
        TsResolution::Micro,
    );
    // An ARP frame: 14-byte Ethernet header with ethertype 0x0806 and a 28-byte body.
    let mut arp = vec![0u8; 42];
    arp[12] = 0x08;
    arp[13] = 0x06;
    for v in [2u32, 0, 42, 42] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&arp);
    let (back, stats) = read_all(&bytes);
    assert_eq!(back, vec![rec]);
    assert_eq!((stats.packets_read, stats.skipped_non_ip), (2, 1));
    assert!(stats.is_balanced());
}
