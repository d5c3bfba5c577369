//! Read-only MaxMind DB (v2) decoder limited to what a Country database
//! needs: the IPv4 part of the search tree and the country ISO code of each
//! data record.

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::path::Path;

use ipnet::Ipv4Net;

use super::{CountryCode, GeoError, PrefixTable};

const METADATA_MARKER: &[u8] = b"\xAB\xCD\xEFMaxMind.com";
const METADATA_MAX: usize = 128 * 1024;
const DATA_SEPARATOR: usize = 16;
const MAX_DEPTH: u32 = 32;

fn unsupported(msg: impl Into<String>) -> GeoError {
    GeoError::UnsupportedFormat(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Uint(u128),
    Int(i32),
    Double(f64),
    Bytes,
    Bool(bool),
    Map(Vec<(String, Value)>),
    Array(Vec<Value>),
}

impl Value {
    fn get(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Map(entries) => entries.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    fn as_uint(&self) -> Option<u128> {
        match self {
            Value::Uint(v) => Some(*v),
            Value::Int(v) if *v >= 0 => Some(*v as u128),
            _ => None,
        }
    }

    fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

/// Decoder over one section; pointers are offsets from `base`.
struct Decoder<'a> {
    buf: &'a [u8],
    base: usize,
}

impl<'a> Decoder<'a> {
    fn bytes(&self, at: usize, n: usize) -> Result<&'a [u8], GeoError> {
        at.checked_add(n)
            .and_then(|end| self.buf.get(at..end))
            .ok_or_else(|| unsupported("data section truncated"))
    }

    fn be_uint(&self, at: usize, n: usize) -> Result<u128, GeoError> {
        Ok(self
            .bytes(at, n)?
            .iter()
            .fold(0u128, |acc, &b| (acc << 8) | u128::from(b)))
    }

    /// Decodes the value at absolute offset `at`; returns it and the offset
    /// just past it.
    fn decode(&self, at: usize, depth: u32) -> Result<(Value, usize), GeoError> {
        if depth > MAX_DEPTH {
            return Err(unsupported("data nesting too deep"));
        }
        let ctrl = self.bytes(at, 1)?[0];
        let mut pos = at + 1;
        let mut type_num = ctrl >> 5;
        if type_num == 1 {
            let size_class = (ctrl >> 3) & 0x3;
            let low = u128::from(ctrl & 0x7);
            let target = match size_class {
                0 => (low << 8) | self.be_uint(pos, 1)?,
                1 => ((low << 16) | self.be_uint(pos, 2)?) + 2048,
                2 => ((low << 24) | self.be_uint(pos, 3)?) + 526_336,
                _ => self.be_uint(pos, 4)?,
            };
            pos += usize::from(size_class) + 1;
            let (value, _) = self.decode(self.base + target as usize, depth + 1)?;
            return Ok((value, pos));
        }
        if type_num == 0 {
            type_num = 7 + self.bytes(pos, 1)?[0];
            pos += 1;
        }
        let mut size = usize::from(ctrl & 0x1f);
        if size >= 29 {
            let extra = size - 28;
            let v = self.be_uint(pos, extra)? as usize;
            pos += extra;
            size = match extra {
                1 => 29 + v,
                2 => 285 + v,
                _ => 65_821 + v,
            };
        }
        let value = match type_num {
            2 => {
                let raw = self.bytes(pos, size)?;
                pos += size;
                Value::Str(String::from_utf8_lossy(raw).into_owned())
            }
            3 => {
                if size != 8 {
                    return Err(unsupported("double with bad size"));
                }
                let raw = self.bytes(pos, 8)?;
                pos += 8;
                Value::Double(f64::from_be_bytes(raw.try_into().expect("8 bytes")))
            }
            4 => {
                self.bytes(pos, size)?;
                pos += size;
                Value::Bytes
            }
            5 | 6 | 9 | 10 => {
                let max = match type_num {
                    5 => 2,
                    6 => 4,
                    9 => 8,
                    _ => 16,
                };
                if size > max {
                    return Err(unsupported("unsigned integer too wide"));
                }
                let v = self.be_uint(pos, size)?;
                pos += size;
                Value::Uint(v)
            }
            7 => {
                let mut entries = Vec::with_capacity(size.min(64));
                for _ in 0..size {
                    let (k, next) = self.decode(pos, depth + 1)?;
                    let (v, next) = self.decode(next, depth + 1)?;
                    pos = next;
                    let key = k
                        .as_str()
                        .ok_or_else(|| unsupported("map key is not a string"))?;
                    entries.push((key.to_string(), v));
                }
                Value::Map(entries)
            }
            8 => {
                if size > 4 {
                    return Err(unsupported("int32 too wide"));
                }
                let v = self.be_uint(pos, size)? as u32;
                pos += size;
                let shift = 32 - 8 * size as u32;
                Value::Int(if size == 0 {
                    0
                } else {
                    ((v << shift) as i32) >> shift
                })
            }
            11 => {
                let mut items = Vec::with_capacity(size.min(64));
                for _ in 0..size {
                    let (v, next) = self.decode(pos, depth + 1)?;
                    pos = next;
                    items.push(v);
                }
                Value::Array(items)
            }
            14 => Value::Bool(size != 0),
            15 => {
                if size != 4 {
                    return Err(unsupported("float with bad size"));
                }
                let raw = self.bytes(pos, 4)?;
                pos += 4;
                Value::Double(f64::from(f32::from_be_bytes(
                    raw.try_into().expect("4 bytes"),
                )))
            }
            other => return Err(unsupported(format!("unexpected data type {other}"))),
        };
        Ok((value, pos))
    }
}

struct Metadata {
    node_count: usize,
    record_size: usize,
    ip_version: u128,
}

fn read_metadata(buf: &[u8]) -> Result<(Metadata, usize), GeoError> {
    let window_start = buf.len().saturating_sub(METADATA_MAX);
    let marker_at = buf[window_start..]
        .windows(METADATA_MARKER.len())
        .rposition(|w| w == METADATA_MARKER)
        .map(|p| p + window_start)
        .ok_or_else(|| unsupported("metadata marker not found"))?;
    let meta_start = marker_at + METADATA_MARKER.len();
    let decoder = Decoder {
        buf,
        base: meta_start,
    };
    let (meta, _) = decoder.decode(meta_start, 0)?;

    let field = |name: &str| meta.get(name).and_then(Value::as_uint);
    let major = field("binary_format_major_version")
        .ok_or_else(|| unsupported("missing format version"))?;
    if major != 2 {
        return Err(unsupported(format!("binary format major version {major}")));
    }
    let database_type = meta
        .get("database_type")
        .and_then(Value::as_str)
        .ok_or_else(|| unsupported("missing database_type"))?;
    if !database_type.contains("Country") {
        return Err(unsupported(format!(
            "database type '{database_type}' is not a Country edition"
        )));
    }
    let node_count = field("node_count").ok_or_else(|| unsupported("missing node_count"))?;
    let record_size = field("record_size").ok_or_else(|| unsupported("missing record_size"))?;
    let ip_version = field("ip_version").ok_or_else(|| unsupported("missing ip_version"))?;
    if !matches!(record_size, 24 | 28 | 32) {
        return Err(unsupported(format!("record size {record_size}")));
    }
    if !matches!(ip_version, 4 | 6) {
        return Err(unsupported(format!("ip_version {ip_version}")));
    }
    Ok((
        Metadata {
            node_count: usize::try_from(node_count)
                .map_err(|_| unsupported("node_count overflow"))?,
            record_size: record_size as usize,
            ip_version,
        },
        marker_at,
    ))
}

struct Tree<'a> {
    nodes: &'a [u8],
    record_size: usize,
}

impl Tree<'_> {
    fn child(&self, node: usize, bit: usize) -> usize {
        let width = self.record_size / 4;
        let b = &self.nodes[node * width..(node + 1) * width];
        let be = |s: &[u8]| s.iter().fold(0usize, |acc, &x| (acc << 8) | usize::from(x));
        match (self.record_size, bit) {
            (24, 0) => be(&b[0..3]),
            (24, _) => be(&b[3..6]),
            (28, 0) => (usize::from(b[3] & 0xf0) << 20) | be(&b[0..3]),
            (28, _) => (usize::from(b[3] & 0x0f) << 24) | be(&b[4..7]),
            (_, 0) => be(&b[0..4]),
            (_, _) => be(&b[4..8]),
        }
    }
}

/// Reads the IPv4 networks of a MaxMind DB Country database into a
/// [`PrefixTable`]. Records without a country (or registered-country) ISO
/// code are left out and therefore look up as unattributed.
pub fn load_mmdb(path: impl AsRef<Path>) -> Result<PrefixTable, GeoError> {
    let path = path.as_ref();
    let buf = std::fs::read(path)?;
    parse_mmdb(&buf, &path.display().to_string())
}

pub(crate) fn parse_mmdb(buf: &[u8], source_label: &str) -> Result<PrefixTable, GeoError> {
    let (meta, marker_at) = read_metadata(buf)?;
    let tree_size = meta
        .node_count
        .checked_mul(meta.record_size / 4)
        .filter(|&s| s + DATA_SEPARATOR <= marker_at)
        .ok_or_else(|| unsupported("search tree larger than file"))?;
    let tree = Tree {
        nodes: &buf[..tree_size],
        record_size: meta.record_size,
    };
    let data_start = tree_size + DATA_SEPARATOR;
    let decoder = Decoder {
        buf: &buf[..marker_at],
        base: data_start,
    };

    // IPv4 lives under ::/96 in an IPv6 tree.
    let mut root = 0usize;
    if meta.ip_version == 6 {
        for _ in 0..96 {
            if root >= meta.node_count {
                break;
            }
            root = tree.child(root, 0);
        }
    }

    let mut table = PrefixTable::new(source_label);
    let mut countries: HashMap<usize, Option<CountryCode>> = HashMap::new();
    let mut stack: Vec<(usize, u32, u8)> = vec![(root, 0, 0)];
    while let Some((record, addr, depth)) = stack.pop() {
        if record < meta.node_count {
            if depth >= 32 {
                return Err(unsupported(
                    "search tree deeper than 32 bits below the IPv4 root",
                ));
            }
            stack.push((tree.child(record, 1), addr | (1 << (31 - depth)), depth + 1));
            stack.push((tree.child(record, 0), addr, depth + 1));
            continue;
        }
        if record == meta.node_count {
            continue;
        }
        let offset = record - meta.node_count - DATA_SEPARATOR;
        let country = match countries.get(&offset) {
            Some(c) => *c,
            None => {
                let (value, _) = decoder.decode(data_start + offset, 0)?;
                let c = country_of(&value);
                countries.insert(offset, c);
                c
            }
        };
        if let Some(country) = country {
            let net = Ipv4Net::new(Ipv4Addr::from(addr), depth).expect("depth <= 32");
            table
                .insert(net, country)
                .map_err(|e| unsupported(format!("inconsistent search tree: {e}")))?;
        }
    }
    Ok(table)
}

fn country_of(record: &Value) -> Option<CountryCode> {
    ["country", "registered_country"]
        .iter()
        .find_map(|section| record.get(section)?.get("iso_code")?.as_str()?.parse().ok())
}
