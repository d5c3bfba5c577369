//! ICS/OT port lookup table, per-port counting and cross-year deltas.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::packet_io::{PacketRecord, Transport};

/// Transport selector of a table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PortTransport {
    Tcp,
    Udp,
    Any,
}

impl PortTransport {
    fn covers(self, transport: Transport) -> bool {
        match self {
            PortTransport::Tcp => transport == Transport::Tcp,
            PortTransport::Udp => transport == Transport::Udp,
            PortTransport::Any => transport.has_ports(),
        }
    }
}

impl fmt::Display for PortTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PortTransport::Tcp => "TCP",
            PortTransport::Udp => "UDP",
            PortTransport::Any => "ANY",
        })
    }
}

impl FromStr for PortTransport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TCP" => Ok(PortTransport::Tcp),
            "UDP" => Ok(PortTransport::Udp),
            "ANY" | "TCP/UDP" | "*" => Ok(PortTransport::Any),
            other => Err(format!("unknown transport '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcsEntry {
    pub port: u16,
    pub transport: PortTransport,
    pub name: String,
}

#[derive(Debug, Error)]
pub enum IcsError {
    #[error("I/O error reading ICS table: {0}")]
    Io(#[from] std::io::Error),
    #[error("ICS table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("ICS table has duplicate or overlapping entries for port {port}")]
    DuplicateEntry { port: u16 },
    #[error("ICS table is empty")]
    Empty,
    #[error("ICS table fingerprints differ ({left:016x} vs {right:016x})")]
    TableMismatch { left: u64, right: u64 },
}

const NO_ENTRY: u16 = u16::MAX;

/// Immutable (port, transport) → protocol lookup.
#[derive(Clone)]
pub struct IcsPortTable {
    entries: Vec<IcsEntry>,
    fingerprint: u64,
    tcp_index: Vec<u16>,
    udp_index: Vec<u16>,
}

impl fmt::Debug for IcsPortTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IcsPortTable")
            .field("entries", &self.entries)
            .field("fingerprint", &format_args!("{:016x}", self.fingerprint))
            .finish()
    }
}

const DEFAULT_ENTRIES: [(u16, PortTransport, &str); 17] = [
    (502, PortTransport::Tcp, "Modbus"),
    (20000, PortTransport::Tcp, "DNP3"),
    (44818, PortTransport::Tcp, "EtherNet/IP"),
    (2222, PortTransport::Tcp, "EtherNet/IP (alt)"),
    (2404, PortTransport::Tcp, "IEC 104"),
    (102, PortTransport::Tcp, "S7/ISO-TSAP"),
    (47808, PortTransport::Udp, "BACnet"),
    (4840, PortTransport::Tcp, "OPC UA"),
    (161, PortTransport::Udp, "SNMP (ICS mgmt)"),
    (162, PortTransport::Udp, "SNMP trap (ICS mgmt)"),
    (20547, PortTransport::Tcp, "ProConOS"),
    // Padding beyond the explicitly named services: common OT ports.
    (1911, PortTransport::Tcp, "Niagara Fox"),
    (1962, PortTransport::Tcp, "PCWorx"),
    (789, PortTransport::Tcp, "Red Lion Crimson"),
    (9600, PortTransport::Udp, "Omron FINS"),
    (18245, PortTransport::Tcp, "GE SRTP"),
    (5094, PortTransport::Tcp, "HART-IP"),
];

impl Default for IcsPortTable {
    fn default() -> Self {
        let entries = DEFAULT_ENTRIES
            .iter()
            .map(|&(port, transport, name)| IcsEntry {
                port,
                transport,
                name: name.to_string(),
            })
            .collect();
        IcsPortTable::new(entries).expect("default ICS table is well formed")
    }
}

impl IcsPortTable {
    pub fn new(entries: Vec<IcsEntry>) -> Result<Self, IcsError> {
        if entries.is_empty() {
            return Err(IcsError::Empty);
        }
        if entries.len() >= usize::from(NO_ENTRY) {
            return Err(IcsError::Parse {
                line: 0,
                reason: "too many entries".into(),
            });
        }
        let mut tcp_index = vec![NO_ENTRY; 65536];
        let mut udp_index = vec![NO_ENTRY; 65536];
        for (i, entry) in entries.iter().enumerate() {
            let slot = entry.port as usize;
            let targets: &mut [&mut Vec<u16>] = match entry.transport {
                PortTransport::Tcp => &mut [&mut tcp_index],
                PortTransport::Udp => &mut [&mut udp_index],
                PortTransport::Any => &mut [&mut tcp_index, &mut udp_index],
            };
            for index in targets.iter_mut() {
                if index[slot] != NO_ENTRY {
                    return Err(IcsError::DuplicateEntry { port: entry.port });
                }
                index[slot] = i as u16;
            }
        }
        let mut hasher = Sha256::new();
        for e in &entries {
            hasher.update(format!("{}/{}/{}\n", e.port, e.transport, e.name).as_bytes());
        }
        let digest = hasher.finalize();
        let fingerprint = u64::from_be_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"));
        Ok(IcsPortTable {
            entries,
            fingerprint,
            tcp_index,
            udp_index,
        })
    }

    /// Parses `port,transport,name` lines. Blank lines, `#` comments and an
    /// optional header row are ignored.
    pub fn from_csv_str(text: &str) -> Result<Self, IcsError> {
        let mut entries = Vec::new();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for result in reader.records() {
            let record = result.map_err(|e| IcsError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                reason: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.iter().all(str::is_empty) {
                continue;
            }
            if record
                .get(0)
                .is_some_and(|f| f.eq_ignore_ascii_case("port"))
            {
                continue;
            }
            if record.len() != 3 {
                return Err(IcsError::Parse {
                    line,
                    reason: format!(
                        "expected 3 fields (port,transport,name), found {}",
                        record.len()
                    ),
                });
            }
            let port = record[0].parse::<u16>().map_err(|e| IcsError::Parse {
                line,
                reason: format!("bad port '{}': {e}", &record[0]),
            })?;
            let transport = record[1]
                .parse::<PortTransport>()
                .map_err(|reason| IcsError::Parse { line, reason })?;
            if record[2].is_empty() {
                return Err(IcsError::Parse {
                    line,
                    reason: "empty protocol name".into(),
                });
            }
            entries.push(IcsEntry {
                port,
                transport,
                name: record[2].to_string(),
            });
        }
        IcsPortTable::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IcsError> {
        let text = std::fs::read_to_string(path)?;
        IcsPortTable::from_csv_str(&text)
    }

    pub fn entries(&self) -> &[IcsEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Index of the entry matching the record's destination port and
    /// transport. Records without ports never match.
    #[inline]
    pub fn entry_index(&self, rec: &PacketRecord) -> Option<usize> {
        let port = rec.dst_port? as usize;
        let slot = match rec.transport {
            Transport::Tcp => self.tcp_index[port],
            Transport::Udp => self.udp_index[port],
            _ => return None,
        };
        (slot != NO_ENTRY).then_some(slot as usize)
    }

    /// Protocol label for an ICS-targeted record.
    pub fn classify(&self, rec: &PacketRecord) -> Option<&str> {
        let idx = self.entry_index(rec)?;
        debug_assert!(self.entries[idx].transport.covers(rec.transport));
        Some(self.entries[idx].name.as_str())
    }

    /// Share of traffic (percent) the table's ports would receive if scanning
    /// were uniform over all 65,536 port numbers.
    pub fn random_baseline_fraction(&self) -> Result<f64, IcsError> {
        if self.entries.is_empty() {
            return Err(IcsError::Empty);
        }
        let distinct: HashSet<u16> = self.entries.iter().map(|e| e.port).collect();
        Ok(distinct.len() as f64 / 65536.0 * 100.0)
    }

    pub fn empty_counts(&self) -> IcsCounts {
        IcsCounts {
            fingerprint: self.fingerprint,
            counts: vec![0; self.entries.len()],
        }
    }
}

/// Per-entry packet counts, tagged with the table they were built against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcsCounts {
    pub fingerprint: u64,
    pub counts: Vec<u64>,
}

impl IcsCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &IcsCounts) -> Result<(), IcsError> {
        if self.fingerprint != other.fingerprint {
            return Err(IcsError::TableMismatch {
                left: self.fingerprint,
                right: other.fingerprint,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcsDeltaRow {
    pub port: u16,
    pub transport: PortTransport,
    pub name: String,
    pub baseline_count: u64,
    pub test_count: u64,
    pub abs_delta: i64,
    /// `None` when the baseline count is zero.
    pub pct_delta: Option<f64>,
}

/// Relative change in percent; undefined for a zero baseline.
pub fn pct_change(baseline: u64, test: u64) -> Option<f64> {
    (baseline > 0).then(|| (test as f64 - baseline as f64) / baseline as f64 * 100.0)
}

/// One row per table entry, ordered by absolute change (largest first), then
/// by port.
pub fn delta_table(
    table: &IcsPortTable,
    baseline: &IcsCounts,
    test: &IcsCounts,
) -> Result<Vec<IcsDeltaRow>, IcsError> {
    for counts in [baseline, test] {
        if counts.fingerprint != table.fingerprint() || counts.counts.len() != table.len() {
            return Err(IcsError::TableMismatch {
                left: table.fingerprint(),
                right: counts.fingerprint,
            });
        }
    }
    let mut rows: Vec<IcsDeltaRow> = table
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (b, t) = (baseline.counts[i], test.counts[i]);
            IcsDeltaRow {
                port: e.port,
                transport: e.transport,
                name: e.name.clone(),
                baseline_count: b,
                test_count: t,
                abs_delta: t as i64 - b as i64,
                pct_delta: pct_change(b, t),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.abs_delta
            .unsigned_abs()
            .cmp(&a.abs_delta.unsigned_abs())
            .then(a.port.cmp(&b.port))
            .then(a.transport.cmp(&b.transport))
    });
    Ok(rows)
}
