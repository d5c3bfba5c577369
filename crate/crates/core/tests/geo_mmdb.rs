use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::path::PathBuf;

use darkscope_core::geo::{
    load_mmdb, parse_prefix_csv, CountryCode, GeoError, GeoKey, PrefixTable,
};
use maxminddb::{geoip2, MaxMindDBError, Reader};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn ip(s: &str) -> u32 {
    u32::from(s.parse::<Ipv4Addr>().unwrap())
}

fn key(s: &str) -> GeoKey {
    s.parse().unwrap()
}

/// Country of `addr` according to the `maxminddb` crate.
fn oracle(reader: &Reader<Vec<u8>>, addr: u32) -> GeoKey {
    match reader.lookup::<geoip2::Country>(IpAddr::V4(Ipv4Addr::from(addr))) {
        Ok(rec) => rec
            .country
            .and_then(|c| c.iso_code)
            .or_else(|| rec.registered_country.and_then(|c| c.iso_code))
            .map_or(GeoKey::Unattributed, key),
        Err(MaxMindDBError::AddressNotFoundError(_)) => GeoKey::Unattributed,
        Err(e) => panic!("oracle lookup failed: {e}"),
    }
}

// ---------------------------------------------------------------------------
// Published fixture expectations
// ---------------------------------------------------------------------------

#[test]
fn geolite2_country_fixture_known_networks() {
    let table = load_mmdb(fixture("GeoLite2-Country-Test.mmdb")).unwrap();
    let expected = [
        ("2.125.160.216", "GB"),
        ("2.125.160.223", "GB"),
        ("50.114.0.1", "US"),
        ("67.43.156.7", "BT"),
        ("81.2.69.142", "GB"),
        ("81.2.69.150", "GB"),
        ("81.2.69.170", "GB"),
        ("81.2.69.200", "GB"),
        ("89.160.20.115", "SE"),
        ("89.160.20.200", "SE"),
        ("111.235.160.5", "CN"),
        ("202.196.224.9", "PH"),
        ("216.160.83.60", "US"),
        ("217.65.48.3", "GI"),
        ("214.78.0.40", "US"),
    ];
    for (addr, cc) in expected {
        assert_eq!(table.lookup(ip(addr)), key(cc), "{addr}");
    }
    assert_eq!(table.lookup(ip("10.0.0.1")), GeoKey::Unattributed);
    assert_eq!(table.lookup(ip("1.1.1.1")), GeoKey::Unattributed);
}

#[test]
fn geoip2_country_fixture_known_networks() {
    let table = load_mmdb(fixture("GeoIP2-Country-Test.mmdb")).unwrap();
    assert_eq!(table.lookup(ip("214.78.120.5")), key("US"));
    assert_eq!(table.lookup(ip("81.2.69.160")), key("GB"));
    // anycast network with traits only, no country
    assert_eq!(table.lookup(ip("214.1.1.1")), GeoKey::Unattributed);
}

#[test]
fn non_country_editions_are_rejected() {
    for name in ["GeoLite2-City-Test.mmdb", "MaxMind-DB-test-ipv4-24.mmdb"] {
        match load_mmdb(fixture(name)) {
            Err(GeoError::UnsupportedFormat(_)) => {}
            other => panic!("{name}: expected UnsupportedFormat, got {other:?}"),
        }
    }
}

#[test]
fn truncated_database_is_unsupported() {
    let bytes = std::fs::read(fixture("GeoLite2-Country-Test.mmdb")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cut in [0, 10, 100, bytes.len() / 2, bytes.len() - 40] {
        let path = dir.path().join(format!("cut{cut}.mmdb"));
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(
            matches!(load_mmdb(&path), Err(GeoError::UnsupportedFormat(_))),
            "cut at {cut}"
        );
    }
}

#[test]
fn official_fixtures_agree_with_reference_reader() {
    for name in ["GeoLite2-Country-Test.mmdb", "GeoIP2-Country-Test.mmdb"] {
        let path = fixture(name);
        let table = load_mmdb(&path).unwrap();
        let reader = Reader::open_readfile(&path).unwrap();
        let mut probes: Vec<u32> = Vec::new();
        for (net, _) in table.entries() {
            let lo = u32::from(net.network());
            let hi = u32::from(net.broadcast());
            probes.extend([
                lo,
                hi,
                lo.wrapping_sub(1),
                hi.wrapping_add(1),
                lo + (hi - lo) / 2,
            ]);
        }
        let mut x = 0x1234_5678u32;
        for _ in 0..10_000 {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            probes.push(x);
        }
        for p in probes {
            assert_eq!(
                table.lookup(p),
                oracle(&reader, p),
                "{name}: {}",
                Ipv4Addr::from(p)
            );
        }
    }
}

// ---------------------------------------------------------------------------
// A minimal MaxMind DB writer for cross-format checks
// ---------------------------------------------------------------------------

#[derive(Default)]
struct BuildNode {
    child: [Option<Box<BuildNode>>; 2],
    value: Option<usize>,
}

enum Rec {
    Node(usize),
    Empty,
    Data(usize),
}

struct MmdbWriter {
    record_size: u32,
    ipv6: bool,
}

fn ctrl(out: &mut Vec<u8>, type_num: u8, size: usize) {
    assert!(size < 29);
    if type_num < 8 {
        out.push((type_num << 5) | size as u8);
    } else {
        out.push(size as u8);
        out.push(type_num - 7);
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    ctrl(out, 2, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_uint(out: &mut Vec<u8>, type_num: u8, v: u64) {
    let bytes = v.to_be_bytes();
    let skip = bytes.iter().take_while(|&&b| b == 0).count();
    ctrl(out, type_num, 8 - skip);
    out.extend_from_slice(&bytes[skip..]);
}

fn put_pointer(out: &mut Vec<u8>, offset: usize) {
    assert!(offset < 2048);
    out.push(0x20 | ((offset >> 8) as u8 & 0x7));
    out.push(offset as u8);
}

impl MmdbWriter {
    fn write(&self, entries: &[(ipnet::Ipv4Net, CountryCode)]) -> Vec<u8> {
        let mut countries: Vec<CountryCode> = entries.iter().map(|e| e.1).collect();
        countries.sort();
        countries.dedup();

        let mut root = BuildNode::default();
        for (net, cc) in entries {
            let addr = u32::from(net.network());
            let mut node = &mut root;
            for d in 0..net.prefix_len() {
                let bit = ((addr >> (31 - d)) & 1) as usize;
                node = node.child[bit].get_or_insert_with(Default::default);
            }
            node.value = Some(countries.binary_search(cc).unwrap());
        }

        // Data section: the shared "iso_code" key first, then one record per
        // country that refers to it through a pointer.
        let mut data = Vec::new();
        put_str(&mut data, "iso_code");
        let mut offsets = Vec::new();
        for cc in &countries {
            offsets.push(data.len());
            ctrl(&mut data, 7, 1);
            put_str(&mut data, "country");
            ctrl(&mut data, 7, 1);
            put_pointer(&mut data, 0);
            put_str(&mut data, cc.as_str());
        }

        let mut nodes: Vec<[Rec; 2]> = Vec::new();
        let prefix_nodes = if self.ipv6 { 96 } else { 0 };
        for i in 0..prefix_nodes {
            nodes.push([Rec::Node(i + 1), Rec::Empty]);
        }
        fn build(n: &BuildNode, inherited: Option<usize>, nodes: &mut Vec<[Rec; 2]>) -> Rec {
            let value = n.value.or(inherited);
            if n.child.iter().all(Option::is_none) {
                return value.map_or(Rec::Empty, Rec::Data);
            }
            let idx = nodes.len();
            nodes.push([Rec::Empty, Rec::Empty]);
            let leaf = BuildNode::default();
            let left = build(n.child[0].as_deref().unwrap_or(&leaf), value, nodes);
            let right = build(n.child[1].as_deref().unwrap_or(&leaf), value, nodes);
            nodes[idx] = [left, right];
            Rec::Node(idx)
        }
        let top = build(&root, None, &mut nodes);
        if nodes.len() == prefix_nodes {
            // The whole space is one record; it still needs a node to hang off.
            nodes.push([Rec::Empty, Rec::Empty]);
            let last = nodes.len() - 1;
            nodes[last] = match top {
                Rec::Data(v) => [Rec::Data(v), Rec::Data(v)],
                _ => [Rec::Empty, Rec::Empty],
            };
        }
        let node_count = nodes.len();
        let resolve = |r: &Rec| -> u64 {
            match *r {
                Rec::Node(i) => i as u64,
                Rec::Empty => node_count as u64,
                Rec::Data(c) => (node_count + 16 + offsets[c]) as u64,
            }
        };

        let mut out = Vec::new();
        for [l, r] in &nodes {
            let (l, r) = (resolve(l), resolve(r));
            match self.record_size {
                24 => {
                    out.extend_from_slice(&l.to_be_bytes()[5..]);
                    out.extend_from_slice(&r.to_be_bytes()[5..]);
                }
                28 => {
                    out.extend_from_slice(&l.to_be_bytes()[5..]);
                    out.push((((l >> 24) & 0xf) << 4) as u8 | ((r >> 24) & 0xf) as u8);
                    out.extend_from_slice(&r.to_be_bytes()[5..]);
                }
                _ => {
                    out.extend_from_slice(&l.to_be_bytes()[4..]);
                    out.extend_from_slice(&r.to_be_bytes()[4..]);
                }
            }
        }
        out.extend_from_slice(&[0u8; 16]);
        out.extend_from_slice(&data);
        out.extend_from_slice(b"\xAB\xCD\xEFMaxMind.com");
        ctrl(&mut out, 7, 9);
        put_str(&mut out, "binary_format_major_version");
        put_uint(&mut out, 5, 2);
        put_str(&mut out, "binary_format_minor_version");
        put_uint(&mut out, 5, 0);
        put_str(&mut out, "build_epoch");
        put_uint(&mut out, 9, 1_700_000_000);
        put_str(&mut out, "database_type");
        put_str(&mut out, "Synthetic-Country");
        put_str(&mut out, "description");
        ctrl(&mut out, 7, 0);
        put_str(&mut out, "ip_version");
        put_uint(&mut out, 5, if self.ipv6 { 6 } else { 4 });
        put_str(&mut out, "languages");
        ctrl(&mut out, 11, 0);
        put_str(&mut out, "node_count");
        put_uint(&mut out, 6, node_count as u64);
        put_str(&mut out, "record_size");
        put_uint(&mut out, 5, u64::from(self.record_size));
        out
    }
}

fn write_db(table: &PrefixTable, record_size: u32, ipv6: bool) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.mmdb");
    std::fs::write(
        &path,
        MmdbWriter { record_size, ipv6 }.write(table.entries()),
    )
    .unwrap();
    (dir, path)
}

fn probes_for(table: &PrefixTable, seed: u32, n: usize) -> Vec<u32> {
    let mut probes = Vec::with_capacity(n + 3 * table.len());
    for (net, _) in table.entries() {
        let lo = u32::from(net.network());
        let hi = u32::from(net.broadcast());
        probes.extend([lo, hi, hi.wrapping_add(1)]);
    }
    let mut x = seed | 1;
    while probes.len() < n + 3 * table.len() {
        x ^= x << 13;
        x ^= x >> 17;
        x ^= x << 5;
        probes.push(x);
    }
    probes
}

#[test]
fn csv_and_mmdb_encodings_agree() {
    let csv = "0.0.0.0/0,ZZ\n10.0.0.0/8,US\n10.1.0.0/16,CA\n10.1.2.0/24,MX\n192.0.2.0/24,JP\n198.51.100.7/32,DE\n";
    let table = parse_prefix_csv(csv, "csv").unwrap();
    for record_size in [24, 28, 32] {
        for ipv6 in [false, true] {
            let (_dir, path) = write_db(&table, record_size, ipv6);
            let from_mmdb = load_mmdb(&path).unwrap();
            let reader = Reader::open_readfile(&path).unwrap();
            for p in probes_for(&table, 77, 10_000) {
                let want = table.lookup(p);
                assert_eq!(
                    from_mmdb.lookup(p),
                    want,
                    "size {record_size} v6 {ipv6} at {}",
                    Ipv4Addr::from(p)
                );
                assert_eq!(
                    oracle(&reader, p),
                    want,
                    "reference reader disagrees with writer"
                );
            }
        }
    }
}

fn arb_table() -> impl Strategy<Value = PrefixTable> {
    let cc = prop::sample::select(vec!["US", "RU", "GB", "CN", "NL", "BG", "SC"]);
    prop::collection::vec((any::<u32>(), 0u8..=32, cc), 0..60).prop_map(|raw| {
        let mut seen = BTreeMap::new();
        for (addr, len, cc) in raw {
            let net = ipnet::Ipv4Net::new(Ipv4Addr::from(addr), len)
                .unwrap()
                .trunc();
            seen.entry(net).or_insert(cc);
        }
        let text: String = seen.iter().map(|(n, c)| format!("{n},{c}\n")).collect();
        parse_prefix_csv(&text, "prop").unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_tables_survive_mmdb_encoding(table in arb_table(), record_size in prop::sample::select(vec![24u32, 28, 32]), ipv6 in any::<bool>()) {
        let (_dir, path) = write_db(&table, record_size, ipv6);
        let from_mmdb = load_mmdb(&path).unwrap();
        for p in probes_for(&table, 99, 2_000) {
            prop_assert_eq!(from_mmdb.lookup(p), table.lookup(p));
        }
    }
}
