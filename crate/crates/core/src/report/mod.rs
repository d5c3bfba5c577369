//! CSV row types for every emitted artifact, plus SVG charts.
//!
//! Floats are written in shortest round-trip form so artifacts read back
//! bit-exactly.

pub mod svg;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::entropy::{DimensionEntropy, EntropyDelta};
use crate::iat::{bin_edges, bin_label, IatBin, IatHistogram, PacingSummary, BIN_COUNT};
use crate::ics::PortTransport;
use crate::overview::OverviewStats;

pub use csv::Error as CsvError;

pub fn write_rows<T: Serialize>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), CsvError> {
    let file = BufWriter::new(File::create(path.as_ref())?);
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header and string records, for tables whose columns are year
/// labels.
pub fn write_table(
    path: impl AsRef<Path>,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path.as_ref())?));
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, CsvError> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().collect()
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path.as_ref())?);
    f.write_all(text.as_bytes())?;
    f.flush()
}

// ---------------------------------------------------------------------------
// Per-year artifacts
// ---------------------------------------------------------------------------

pub const OVERVIEW_CSV: &str = "overview.csv";
pub const ENTROPY_CSV: &str = "entropy.csv";
pub const IAT_HISTOGRAM_CSV: &str = "iat_histogram.csv";
pub const PACING_SUMMARY_CSV: &str = "pacing_summary.csv";
pub const SCAN_PATTERNS_CSV: &str = "scan_patterns.csv";
pub const ICS_PORTS_CSV: &str = "ics_ports.csv";
pub const GEO_COUNTS_CSV: &str = "geo_counts.csv";
pub const RATE_SERIES_CSV: &str = "rate_series.csv";
pub const INGEST_CSV: &str = "ingest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverviewRow {
    pub year: String,
    pub files_analyzed: u64,
    pub initial_start_utc: Option<String>,
    pub initial_start_ts_us: Option<u64>,
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
    pub tcp_packets: u64,
    pub udp_packets: u64,
    pub icmp_packets: u64,
    pub other_ip_packets: u64,
}

impl OverviewRow {
    pub fn new(year: &str, s: &OverviewStats) -> Self {
        let transport = |name: &str| s.per_transport.get(name).copied().unwrap_or(0);
        let other = s
            .per_transport
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "TCP" | "UDP" | "ICMP"))
            .map(|(_, v)| v)
            .sum();
        OverviewRow {
            year: year.to_string(),
            files_analyzed: s.files_analyzed,
            initial_start_utc: s.initial_start_utc.clone(),
            initial_start_ts_us: s.initial_start_ts_us,
            active_duration_s: s.active_duration_s,
            total_packets: s.total_packets,
            total_bytes: s.total_bytes,
            total_volume_mib: s.total_volume_mib,
            avg_packet_rate_pps: s.avg_packet_rate_pps,
            avg_bandwidth_mbps: s.avg_bandwidth_mbps,
            dominant_ics_protocol: s.dominant_ics_protocol.clone(),
            ics_packets: s.ics_packets,
            ics_fraction_pct: s.ics_fraction_pct,
            non_ics_packets: s.non_ics_packets,
            non_ics_fraction_pct: s.non_ics_fraction_pct,
            unique_src_ips: s.unique_src_ips,
            unique_dst_ips: s.unique_dst_ips,
            unique_dst_ports: s.unique_dst_ports,
            tcp_packets: transport("TCP"),
            udp_packets: transport("UDP"),
            icmp_packets: transport("ICMP"),
            other_ip_packets: other,
        }
    }

    /// Table I layout: (metric, display value) pairs.
    pub fn table_one(&self) -> Vec<(&'static str, String)> {
        vec![
            ("Files Analyzed", self.files_analyzed.to_string()),
            (
                "Initial Start (UTC)",
                self.initial_start_utc.clone().unwrap_or_default(),
            ),
            (
                "Active Duration (s)",
                format!("{:.1}", self.active_duration_s),
            ),
            ("Total Packets", self.total_packets.to_string()),
            (
                "Total Volume (MiB)",
                format!("{:.2}", self.total_volume_mib),
            ),
            (
                "Avg Packet Rate (pkts/s)",
                format!("{:.1}", self.avg_packet_rate_pps),
            ),
            (
                "Avg Bandwidth (Mbps)",
                format!("{:.3}", self.avg_bandwidth_mbps),
            ),
            (
                "Dominant ICS Protocol",
                self.dominant_ics_protocol.clone().unwrap_or_default(),
            ),
            ("ICS Traffic (%)", format!("{:.4}", self.ics_fraction_pct)),
            (
                "Non-ICS Traffic (%)",
                format!("{:.4}", self.non_ics_fraction_pct),
            ),
            ("Unique Src IPs", self.unique_src_ips.to_string()),
            ("Unique Dst IPs", self.unique_dst_ips.to_string()),
            ("Unique Dst Ports", self.unique_dst_ports.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub year: String,
    pub dimension: String,
    pub entropy_bits: f64,
    pub max_entropy_bits: f64,
    pub normalized: f64,
    pub distinct_keys: u64,
    pub total: u64,
}

impl EntropyRow {
    pub fn new(
        year: &str,
        dimension: &str,
        e: &DimensionEntropy,
        distinct_keys: u64,
        total: u64,
    ) -> Self {
        EntropyRow {
            year: year.to_string(),
            dimension: dimension.to_string(),
            entropy_bits: e.entropy_bits,
            max_entropy_bits: e.max_entropy_bits,
            normalized: e.normalized,
            distinct_keys,
            total,
        }
    }

    pub fn dimension_entropy(&self) -> DimensionEntropy {
        DimensionEntropy {
            entropy_bits: self.entropy_bits,
            max_entropy_bits: self.max_entropy_bits,
            normalized: self.normalized,
        }
    }
}

pub const SRC_IP_DIMENSION: &str = "src_ip";
pub const DST_PORT_DIMENSION: &str = "dst_port";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IatBinRow {
    pub year: String,
    pub bin: String,
    pub bin_label: String,
    pub lower_ms: Option<f64>,
    pub upper_ms: Option<f64>,
    pub count: u64,
    pub fraction: f64,
}

fn all_bins() -> impl Iterator<Item = IatBin> {
    std::iter::once(IatBin::Underflow)
        .chain((0..BIN_COUNT).map(IatBin::Bin))
        .chain(std::iter::once(IatBin::Overflow))
}

fn bin_key(bin: IatBin) -> String {
    match bin {
        IatBin::Underflow => "underflow".into(),
        IatBin::Overflow => "overflow".into(),
        IatBin::Bin(j) => j.to_string(),
    }
}

pub fn iat_rows(year: &str, hist: &IatHistogram) -> Vec<IatBinRow> {
    let total = hist.total();
    let edges = bin_edges();
    all_bins()
        .map(|bin| {
            let count = hist.count(bin);
            let (lower_ms, upper_ms) = match bin {
                IatBin::Underflow => (None, Some(edges[0])),
                IatBin::Overflow => (Some(edges[BIN_COUNT]), None),
                IatBin::Bin(j) => (Some(edges[j]), Some(edges[j + 1])),
            };
            IatBinRow {
                year: year.to_string(),
                bin: bin_key(bin),
                bin_label: bin_label(bin),
                lower_ms,
                upper_ms,
                count,
                fraction: if total == 0 {
                    0.0
                } else {
                    count as f64 / total as f64
                },
            }
        })
        .collect()
}

/// Rebuilds a histogram from its rows; the disorder count comes from the
/// pacing summary.
pub fn histogram_from_rows(rows: &[IatBinRow], disorder: u64) -> Result<IatHistogram, String> {
    let mut h = IatHistogram::new();
    for r in rows {
        match r.bin.as_str() {
            "underflow" => h.underflow = r.count,
            "overflow" => h.overflow = r.count,
            j => {
                let j: usize = j.parse().map_err(|_| format!("bad histogram bin '{j}'"))?;
                *h.bins
                    .get_mut(j)
                    .ok_or_else(|| format!("bin {j} out of range"))? = r.count;
            }
        }
    }
    h.disorder = disorder;
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacingRow {
    pub year: String,
    pub total_iats: u64,
    pub micro_pacing_fraction: f64,
    pub modal_bin: Option<usize>,
    pub modal_bin_label: Option<String>,
    pub underflow_fraction: f64,
    #[serde(rename = "mass_1e-3_1e-2_ms")]
    pub mass_d0: f64,
    #[serde(rename = "mass_1e-2_1e-1_ms")]
    pub mass_d1: f64,
    #[serde(rename = "mass_1e-1_1e0_ms")]
    pub mass_d2: f64,
    #[serde(rename = "mass_1e0_1e1_ms")]
    pub mass_d3: f64,
    #[serde(rename = "mass_1e1_1e2_ms")]
    pub mass_d4: f64,
    #[serde(rename = "mass_1e2_1e3_ms")]
    pub mass_d5: f64,
    pub overflow_fraction: f64,
    pub disorder: u64,
}

impl PacingRow {
    pub fn new(year: &str, s: &PacingSummary) -> Self {
        let d = s.decade_fractions;
        PacingRow {
            year: year.to_string(),
            total_iats: s.total,
            micro_pacing_fraction: s.micro_pacing_fraction,
            modal_bin: s.modal_bin,
            modal_bin_label: s.modal_bin.map(|j| bin_label(IatBin::Bin(j))),
            underflow_fraction: s.underflow_fraction,
            mass_d0: d[0],
            mass_d1: d[1],
            mass_d2: d[2],
            mass_d3: d[3],
            mass_d4: d[4],
            mass_d5: d[5],
            overflow_fraction: s.overflow_fraction,
            disorder: s.disorder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPatternRow {
    pub year: String,
    pub port: u16,
    pub transport: PortTransport,
    pub protocol_name: String,
    pub n_packets: u64,
    pub n_gaps: u64,
    pub mean_gap: Option<f64>,
    pub median_gap: Option<u64>,
    pub span: u64,
    pub threshold: f64,
    pub class: String,
    pub approximate: bool,
}

impl ScanPatternRow {
    pub fn new(year: &str, r: &crate::scan_gap::ScanRow) -> Self {
        ScanPatternRow {
            year: year.to_string(),
            port: r.port,
            transport: r.transport,
            protocol_name: r.protocol_name.clone(),
            n_packets: r.profile.n_packets,
            n_gaps: r.profile.n_gaps,
            mean_gap: r.profile.mean_gap,
            median_gap: r.profile.median_gap,
            span: r.profile.observed_span,
            threshold: r.classification.threshold_used,
            class: r.classification.class.as_str().to_string(),
            approximate: r.profile.approximate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcsPortRow {
    pub year: String,
    pub port: u16,
    pub transport: PortTransport,
    pub protocol_name: String,
    pub packets: u64,
    pub share_of_total_pct: f64,
    pub table_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoCountRow {
    pub year: String,
    pub country: String,
    pub packets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub year: String,
    pub file: usize,
    pub second: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRow {
    pub year: String,
    pub file: String,
    pub packets_read: u64,
    pub records_yielded: u64,
    pub skipped_non_ip: u64,
    pub skipped_malformed: u64,
    pub skipped_cap: u64,
    pub first_ts_us: Option<u64>,
    pub last_ts_us: Option<u64>,
}

// ---------------------------------------------------------------------------
// Cross-year artifacts
// ---------------------------------------------------------------------------

pub const OVERVIEW_COMPARISON_CSV: &str = "overview_comparison.csv";
pub const ENTROPY_DELTA_CSV: &str = "entropy_delta.csv";
pub const ICS_DELTA_CSV: &str = "ics_delta.csv";
pub const GEO_DELTA_CSV: &str = "geo_delta.csv";
pub const IDS_REPORT_CSV: &str = "ids_report.csv";
pub const IAT_COMPARISON_CSV: &str = "iat_comparison.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDeltaRow {
    pub dimension: String,
    pub baseline_bits: f64,
    pub test_bits: f64,
    pub delta_bits: f64,
    pub direction: String,
    pub baseline_normalized: f64,
    pub test_normalized: f64,
}

pub fn entropy_delta_rows(
    delta: &EntropyDelta,
    baseline_normalized: [f64; 2],
    test_normalized: [f64; 2],
) -> Vec<EntropyDeltaRow> {
    [
        (SRC_IP_DIMENSION, &delta.src_ip, 0),
        (DST_PORT_DIMENSION, &delta.dst_port, 1),
    ]
    .into_iter()
    .map(|(name, d, i)| EntropyDeltaRow {
        dimension: name.to_string(),
        baseline_bits: d.baseline_bits,
        test_bits: d.test_bits,
        delta_bits: d.delta_bits,
        direction: d.direction.as_str().to_string(),
        baseline_normalized: baseline_normalized[i],
        test_normalized: test_normalized[i],
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoDeltaCsvRow {
    pub rank: Option<usize>,
    pub country: String,
    pub baseline_pkts: u64,
    pub test_pkts: u64,
    pub pct_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IatComparisonRow {
    pub bin: String,
    pub bin_label: String,
    pub baseline_fraction: f64,
    pub test_fraction: f64,
}

pub fn iat_comparison_rows(baseline: &[IatBinRow], test: &[IatBinRow]) -> Vec<IatComparisonRow> {
    baseline
        .iter()
        .zip(test)
        .map(|(b, t)| IatComparisonRow {
            bin: b.bin.clone(),
            bin_label: b.bin_label.clone(),
            baseline_fraction: b.fraction,
            test_fraction: t.fraction,
        })
        .collect()
}
