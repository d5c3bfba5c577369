//! Source-address geolocation by longest-prefix match and cross-year country
//! deltas.
//!
//! Prefix tables load from `cidr,country` CSV files or from MaxMind DB
//! Country databases. Addresses with no covering prefix are counted as
//! [`GeoKey::Unattributed`].

mod mmdb;
mod trie;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ipnet::Ipv4Net;
use serde::{Serialize, Serializer};
use thiserror::Error;

pub use mmdb::load_mmdb;
use trie::PrefixTrie;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("I/O error reading prefix table: {0}")]
    Io(#[from] std::io::Error),
    #[error("prefix table line {line}: {reason}{}", more_suffix(*.more))]
    Parse {
        line: u64,
        reason: String,
        more: usize,
    },
    #[error("duplicate prefix {prefix} on line {line}")]
    DuplicatePrefix { prefix: Ipv4Net, line: u64 },
    #[error("unsupported database: {0}")]
    UnsupportedFormat(String),
}

fn more_suffix(more: usize) -> String {
    match more {
        0 => String::new(),
        n => format!(" ({n} more malformed lines)"),
    }
}

/// ISO 3166-1 alpha-2 code, stored uppercase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CountryCode([u8; 2]);

impl CountryCode {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ASCII letters")
    }
}

impl FromStr for CountryCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().as_bytes() {
            &[a, b] if a.is_ascii_alphabetic() && b.is_ascii_alphabetic() => Ok(CountryCode([
                a.to_ascii_uppercase(),
                b.to_ascii_uppercase(),
            ])),
            _ => Err(format!("'{s}' is not a two-letter country code")),
        }
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeoKey {
    Country(CountryCode),
    Unattributed,
}

impl GeoKey {
    pub const UNATTRIBUTED_LABEL: &'static str = "Unattributed";
}

impl fmt::Display for GeoKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeoKey::Country(c) => c.fmt(f),
            GeoKey::Unattributed => f.write_str(Self::UNATTRIBUTED_LABEL),
        }
    }
}

impl FromStr for GeoKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case(Self::UNATTRIBUTED_LABEL) {
            Ok(GeoKey::Unattributed)
        } else {
            s.parse().map(GeoKey::Country)
        }
    }
}

impl Serialize for GeoKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Immutable set of (prefix, country) pairs with longest-prefix lookup.
#[derive(Debug, Clone, Default)]
pub struct PrefixTable {
    source_label: String,
    entries: Vec<(Ipv4Net, CountryCode)>,
    countries: Vec<CountryCode>,
    trie: PrefixTrie,
}

impl PrefixTable {
    pub fn new(source_label: impl Into<String>) -> Self {
        PrefixTable {
            source_label: source_label.into(),
            ..Default::default()
        }
    }

    /// Adds a prefix; host bits must be zero and exact duplicates are refused.
    pub fn insert(&mut self, prefix: Ipv4Net, country: CountryCode) -> Result<(), String> {
        if prefix.trunc() != prefix {
            return Err(format!("{prefix} has host bits set"));
        }
        let idx = match self.countries.iter().position(|c| *c == country) {
            Some(i) => i,
            None => {
                self.countries.push(country);
                self.countries.len() - 1
            }
        };
        let addr = u32::from(prefix.network());
        if let Some(prev) = self.trie.insert(addr, prefix.prefix_len(), idx as u32) {
            self.trie.insert(addr, prefix.prefix_len(), prev);
            return Err(format!("duplicate prefix {prefix}"));
        }
        self.entries.push((prefix, country));
        Ok(())
    }

    pub fn source_label(&self) -> &str {
        &self.source_label
    }

    pub fn entries(&self) -> &[(Ipv4Net, CountryCode)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, ip: u32) -> GeoKey {
        match self.trie.lookup(ip) {
            Some(i) => GeoKey::Country(self.countries[i as usize]),
            None => GeoKey::Unattributed,
        }
    }

    #[inline]
    fn lookup_slot(&self, ip: u32) -> usize {
        match self.trie.lookup(ip) {
            Some(i) => i as usize,
            None => self.countries.len(),
        }
    }
}

pub fn lookup(ip: u32, table: &PrefixTable) -> GeoKey {
    table.lookup(ip)
}

/// Parses `cidr,country` lines. Blank lines, `#` comments and a leading
/// `cidr,country` header are ignored. Every malformed line is collected and
/// the first one is reported along with the count of the rest.
pub fn parse_prefix_csv(text: &str, source_label: &str) -> Result<PrefixTable, GeoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());

    let mut table = PrefixTable::new(source_label);
    let mut issues: Vec<(u64, String)> = Vec::new();
    let mut first = true;
    for result in reader.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                issues.push((line, e.to_string()));
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let is_header = first
            && record
                .get(0)
                .is_some_and(|f| f.eq_ignore_ascii_case("cidr"));
        first = false;
        if is_header {
            continue;
        }
        if record.len() != 2 {
            issues.push((line, format!("expected 2 fields, found {}", record.len())));
            continue;
        }
        let prefix = match record[0].parse::<Ipv4Net>() {
            Ok(p) => p,
            Err(_) => {
                issues.push((line, format!("invalid IPv4 prefix '{}'", &record[0])));
                continue;
            }
        };
        let country = match record[1].parse::<CountryCode>() {
            Ok(c) => c,
            Err(reason) => {
                issues.push((line, reason));
                continue;
            }
        };
        if let Err(reason) = table.insert(prefix, country) {
            if reason.starts_with("duplicate") {
                return Err(GeoError::DuplicatePrefix { prefix, line });
            }
            issues.push((line, reason));
        }
    }
    match issues.first() {
        None => Ok(table),
        Some((line, reason)) => Err(GeoError::Parse {
            line: *line,
            reason: reason.clone(),
            more: issues.len() - 1,
        }),
    }
}

pub fn load_prefix_csv(path: impl AsRef<Path>) -> Result<PrefixTable, GeoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_prefix_csv(&text, &path.display().to_string())
}

/// Loads a `.mmdb` database or a CSV prefix table, chosen by file extension.
pub fn load_prefix_table(path: impl AsRef<Path>) -> Result<PrefixTable, GeoError> {
    let path = path.as_ref();
    let is_mmdb = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mmdb"));
    if is_mmdb {
        load_mmdb(path)
    } else {
        load_prefix_csv(path)
    }
}

/// Per-file attribution counts indexed by the table's country slots.
#[derive(Debug, Clone)]
pub struct GeoAccumulator {
    slots: Vec<u64>,
}

impl GeoAccumulator {
    pub fn new(table: &PrefixTable) -> Self {
        GeoAccumulator {
            slots: vec![0; table.countries.len() + 1],
        }
    }

    #[inline]
    pub fn update(&mut self, src_ip: u32, table: &PrefixTable) {
        self.slots[table.lookup_slot(src_ip)] += 1;
    }

    pub fn into_counts(self, table: &PrefixTable) -> GeoCounts {
        let mut counts = GeoCounts::default();
        for (i, n) in self.slots.into_iter().enumerate() {
            let key = match table.countries.get(i) {
                Some(c) => GeoKey::Country(*c),
                None => GeoKey::Unattributed,
            };
            counts.add(key, n);
        }
        counts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeoCounts {
    counts: BTreeMap<GeoKey, u64>,
}

impl GeoCounts {
    pub fn add(&mut self, key: GeoKey, n: u64) {
        if n > 0 {
            *self.counts.entry(key).or_insert(0) += n;
        }
    }

    pub fn get(&self, key: GeoKey) -> u64 {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GeoKey, u64)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn merge(&mut self, other: &GeoCounts) {
        for (k, n) in other.iter() {
            self.add(k, n);
        }
    }
}

impl FromIterator<(GeoKey, u64)> for GeoCounts {
    fn from_iter<I: IntoIterator<Item = (GeoKey, u64)>>(iter: I) -> Self {
        let mut c = GeoCounts::default();
        for (k, n) in iter {
            c.add(k, n);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeoDeltaRow {
    pub country: GeoKey,
    pub baseline_pkts: u64,
    pub test_pkts: u64,
    /// `None` when the baseline count is zero.
    pub pct_delta: Option<f64>,
}

/// The `top_n` countries by larger-year volume, largest first, followed by an
/// Unattributed row when either year has unattributed packets.
pub fn geo_delta(baseline: &GeoCounts, test: &GeoCounts, top_n: usize) -> Vec<GeoDeltaRow> {
    let mut keys: Vec<GeoKey> = baseline
        .counts
        .keys()
        .chain(test.counts.keys())
        .copied()
        .filter(|k| *k != GeoKey::Unattributed)
        .collect();
    keys.sort_unstable();
    keys.dedup();

    let row = |key: GeoKey| {
        let (b, t) = (baseline.get(key), test.get(key));
        GeoDeltaRow {
            country: key,
            baseline_pkts: b,
            test_pkts: t,
            pct_delta: crate::ics::pct_change(b, t),
        }
    };
    let mut rows: Vec<GeoDeltaRow> = keys.into_iter().map(row).collect();
    rows.sort_by(|a, b| {
        let (ma, mb) = (
            a.baseline_pkts.max(a.test_pkts),
            b.baseline_pkts.max(b.test_pkts),
        );
        mb.cmp(&ma).then(a.country.cmp(&b.country))
    });
    rows.truncate(top_n);
    let unattributed = row(GeoKey::Unattributed);
    if unattributed.baseline_pkts > 0 || unattributed.test_pkts > 0 {
        rows.push(unattributed);
    }
    rows
}
