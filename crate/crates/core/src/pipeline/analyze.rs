use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::entropy::{DimensionEntropy, FrequencyTable};
use crate::geo::{load_prefix_table, GeoAccumulator, GeoCounts, GeoError, PrefixTable};
use crate::iat::{pacing_summary, IatAccumulator, IatHistogram, PacingSummary};
use crate::ics::IcsPortTable;
use crate::ids::RateBucketizer;
use crate::overview::{OverviewError, OverviewStats, TrafficAccumulator};
use crate::packet_io::{open_capture, IngestStats, PcapError};
use crate::report::{self, *};
use crate::scan_gap::ScanAccumulator;

use super::config::{RunConfig, YearSource};
use super::synth::cmd_synth;
use super::PipelineError;

/// Everything one file contributes, built in a single read.
pub struct FilePartial {
    pub path: PathBuf,
    pub traffic: TrafficAccumulator,
    pub src_ips: FrequencyTable<u32>,
    pub dst_ports: FrequencyTable<u16>,
    pub iat: IatHistogram,
    pub scan: ScanAccumulator,
    pub geo: Option<GeoCounts>,
    pub rate: Vec<(u64, u64)>,
    pub ingest: IngestStats,
    pub bytes_read: u64,
}

fn input_error(path: &Path, e: PcapError) -> PipelineError {
    PipelineError::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Reads one capture once, feeding every accumulator.
pub fn process_file(
    path: &Path,
    cap: u64,
    table: &IcsPortTable,
    geo: Option<&PrefixTable>,
) -> Result<FilePartial, PipelineError> {
    let mut reader = open_capture(path).map_err(|e| input_error(path, e))?;
    let mut traffic = TrafficAccumulator::new(table);
    let mut src_ips = FrequencyTable::new();
    let mut dst_ports = FrequencyTable::new();
    let mut iat = IatAccumulator::new();
    let mut scan = ScanAccumulator::new(table);
    let mut geo_acc = geo.map(GeoAccumulator::new);
    let mut rate = RateBucketizer::new();

    let ingest = reader
        .read_records(Some(cap), |rec| {
            let entry = table.entry_index(rec);
            traffic.update_classified(rec, entry);
            scan.update_classified(rec, entry);
            src_ips.add(rec.src_ip);
            if let Some(port) = rec.dst_port {
                dst_ports.add(port);
            }
            iat.push(rec.ts_us);
            rate.push(rec.ts_us);
            if let (Some(acc), Some(t)) = (geo_acc.as_mut(), geo) {
                acc.update(rec.src_ip, t);
            }
        })
        .map_err(|e| input_error(path, e))?;
    traffic.close_file_from(&ingest);
    scan.end_file();
    if ingest.skipped_malformed > 0 {
        log::warn!(
            "{}: {} malformed packets skipped",
            path.display(),
            ingest.skipped_malformed
        );
    }

    Ok(FilePartial {
        path: path.to_path_buf(),
        traffic,
        src_ips,
        dst_ports,
        iat: iat.finish(),
        scan,
        geo: geo_acc.zip(geo).map(|(acc, t)| acc.into_counts(t)),
        rate: rate.finish(),
        ingest,
        bytes_read: reader.bytes_read(),
    })
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub label: String,
    pub dir: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub files_opened: usize,
    pub bytes_read: u64,
    pub ingest: IngestStats,
    pub overview: OverviewStats,
}

fn expand_globs(patterns: &[String]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for pattern in patterns {
        let entries = glob::glob(pattern)
            .map_err(|e| PipelineError::Config(format!("bad input glob '{pattern}': {e}")))?;
        let before = files.len();
        for entry in entries {
            let path = entry.map_err(|e| PipelineError::Input {
                path: e.path().to_path_buf(),
                reason: e.error().to_string(),
            })?;
            if path.is_file() {
                files.push(path);
            }
        }
        if files.len() == before {
            return Err(PipelineError::NoMatch(pattern.clone()));
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

fn load_geo(path: &Path) -> Result<PrefixTable, PipelineError> {
    load_prefix_table(path).map_err(|e| match e {
        GeoError::Io(io) => PipelineError::Input {
            path: path.to_path_buf(),
            reason: io.to_string(),
        },
        other => PipelineError::Config(format!("geo table {}: {other}", path.display())),
    })
}

fn worker_count(jobs: usize, files: usize) -> usize {
    let wanted = if jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        jobs
    };
    wanted.clamp(1, files.max(1))
}

/// Analyzes one year: one pass per input file, parallel across files, merged
/// in sorted path order, written atomically into `output_dir/<label>`.
pub fn cmd_analyze(config: &RunConfig, label: &str) -> Result<AnalyzeSummary, PipelineError> {
    config.validate()?;
    let year = config.year(label)?;
    let table = config.ics_table()?;

    let (inputs, geo_path) = match &year.source {
        YearSource::Globs(patterns) => (expand_globs(patterns)?, year.geo.clone()),
        YearSource::Synth { spec, files } => {
            let out = config
                .output_dir
                .join(".synth")
                .join(label)
                .join(format!("{label}.pcap"));
            let generated = cmd_synth(spec, &out, None, *files)?;
            (generated.pcaps, year.geo.clone().or(generated.geo_path))
        }
    };
    let geo = match &geo_path {
        Some(p) => Some(load_geo(p)?),
        None => {
            log::warn!("year '{label}' has no geo table; attribution skipped");
            None
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(config.jobs, inputs.len()))
        .build()
        .map_err(|e| PipelineError::Other(e.to_string()))?;
    let partials: Vec<Result<FilePartial, PipelineError>> = pool.install(|| {
        inputs
            .par_iter()
            .map(|p| process_file(p, config.cap, &table, geo.as_ref()))
            .collect()
    });

    let merged = merge_partials(label, &table, geo.is_some(), partials)?;
    let overview = merged.traffic.finalize(&table).map_err(|e| match e {
        OverviewError::EmptyCapture | OverviewError::ZeroDuration => {
            PipelineError::Empty(format!("year '{label}': {e}"))
        }
        other => PipelineError::Other(other.to_string()),
    })?;

    let dir = config.year_dir(label);
    write_atomically(&dir, |tmp| {
        write_year(tmp, label, &table, &merged, &overview)
    })?;
    log::info!(
        "analyzed {} file(s) for '{label}' into {}",
        inputs.len(),
        dir.display()
    );

    Ok(AnalyzeSummary {
        label: label.to_string(),
        dir,
        files_opened: merged.files_opened,
        bytes_read: merged.bytes_read,
        ingest: merged.ingest_total,
        overview,
        inputs,
    })
}

struct Merged {
    traffic: TrafficAccumulator,
    src_ips: FrequencyTable<u32>,
    dst_ports: FrequencyTable<u16>,
    iat: IatHistogram,
    scan: ScanAccumulator,
    geo: Option<GeoCounts>,
    rate_rows: Vec<RateRow>,
    ingest_rows: Vec<IngestRow>,
    ingest_total: IngestStats,
    files_opened: usize,
    bytes_read: u64,
}

fn merge_partials(
    label: &str,
    table: &IcsPortTable,
    with_geo: bool,
    partials: Vec<Result<FilePartial, PipelineError>>,
) -> Result<Merged, PipelineError> {
    let mut m = Merged {
        traffic: TrafficAccumulator::new(table),
        src_ips: FrequencyTable::new(),
        dst_ports: FrequencyTable::new(),
        iat: IatHistogram::new(),
        scan: ScanAccumulator::new(table),
        geo: with_geo.then(GeoCounts::default),
        rate_rows: Vec::new(),
        ingest_rows: Vec::new(),
        ingest_total: IngestStats::default(),
        files_opened: 0,
        bytes_read: 0,
    };
    for (file, partial) in partials.into_iter().enumerate() {
        let p = partial?;
        m.traffic = m
            .traffic
            .merge(p.traffic)
            .map_err(|e| PipelineError::Other(e.to_string()))?;
        m.src_ips.merge(p.src_ips);
        m.dst_ports.merge(p.dst_ports);
        m.iat.merge(&p.iat);
        m.scan
            .merge(p.scan)
            .map_err(|e| PipelineError::Other(e.to_string()))?;
        if let (Some(acc), Some(g)) = (m.geo.as_mut(), p.geo.as_ref()) {
            acc.merge(g);
        }
        m.rate_rows
            .extend(p.rate.iter().map(|&(second, count)| RateRow {
                year: label.to_string(),
                file,
                second,
                count,
            }));
        m.ingest_rows.push(IngestRow {
            year: label.to_string(),
            file: p
                .path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            packets_read: p.ingest.packets_read,
            records_yielded: p.ingest.records_yielded,
            skipped_non_ip: p.ingest.skipped_non_ip,
            skipped_malformed: p.ingest.skipped_malformed,
            skipped_cap: p.ingest.skipped_cap,
            first_ts_us: p.ingest.file_first_ts_us,
            last_ts_us: p.ingest.file_last_ts_us,
        });
        m.ingest_total.add_counts(&p.ingest);
        m.files_opened += 1;
        m.bytes_read += p.bytes_read;
    }
    Ok(m)
}

/// Runs `fill` against a scratch directory, then swaps it into `dir`. The
/// scratch directory is removed on failure.
pub(crate) fn write_atomically(
    dir: &Path,
    fill: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| PipelineError::output(parent, e))?;
    let name = dir.file_name().unwrap_or_default().to_string_lossy();
    let tmp = parent.join(format!(".{name}.partial"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| PipelineError::output(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| PipelineError::output(&tmp, e))?;
    let result = fill(&tmp).and_then(|()| {
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| PipelineError::output(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| PipelineError::output(dir, e))
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    result
}

fn empty_pacing(hist: &IatHistogram) -> PacingSummary {
    PacingSummary {
        total: 0,
        micro_pacing_fraction: 0.0,
        modal_bin: None,
        underflow_fraction: 0.0,
        decade_fractions: [0.0; 6],
        overflow_fraction: 0.0,
        disorder: hist.disorder,
    }
}

fn csv_out<T: serde::Serialize>(
    dir: &Path,
    name: &str,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), PipelineError> {
    let path = dir.join(name);
    report::write_rows(&path, rows).map_err(|e| PipelineError::output(path, e))
}

fn write_year(
    dir: &Path,
    label: &str,
    table: &IcsPortTable,
    m: &Merged,
    overview: &OverviewStats,
) -> Result<(), PipelineError> {
    csv_out(dir, OVERVIEW_CSV, [OverviewRow::new(label, overview)])?;

    let mut entropy_rows = Vec::new();
    if m.src_ips.total() > 0 {
        let e = DimensionEntropy::from_table(&m.src_ips)
            .map_err(|e| PipelineError::Other(e.to_string()))?;
        entropy_rows.push(EntropyRow::new(
            label,
            SRC_IP_DIMENSION,
            &e,
            m.src_ips.distinct() as u64,
            m.src_ips.total(),
        ));
    }
    if m.dst_ports.total() > 0 {
        let e = DimensionEntropy::from_table(&m.dst_ports)
            .map_err(|e| PipelineError::Other(e.to_string()))?;
        entropy_rows.push(EntropyRow::new(
            label,
            DST_PORT_DIMENSION,
            &e,
            m.dst_ports.distinct() as u64,
            m.dst_ports.total(),
        ));
    }
    csv_out(dir, ENTROPY_CSV, entropy_rows)?;

    csv_out(dir, IAT_HISTOGRAM_CSV, iat_rows(label, &m.iat))?;
    let pacing = pacing_summary(&m.iat).unwrap_or_else(|_| empty_pacing(&m.iat));
    csv_out(dir, PACING_SUMMARY_CSV, [PacingRow::new(label, &pacing)])?;

    csv_out(
        dir,
        SCAN_PATTERNS_CSV,
        m.scan
            .rows(table)
            .iter()
            .map(|r| ScanPatternRow::new(label, r)),
    )?;

    let fingerprint = format!("{:016x}", table.fingerprint());
    let total = overview.total_packets;
    let counts = &m.traffic.per_ics_port_counts.counts;
    csv_out(
        dir,
        ICS_PORTS_CSV,
        table
            .entries()
            .iter()
            .zip(counts)
            .map(|(e, &n)| IcsPortRow {
                year: label.to_string(),
                port: e.port,
                transport: e.transport,
                protocol_name: e.name.clone(),
                packets: n,
                share_of_total_pct: if total == 0 {
                    0.0
                } else {
                    n as f64 / total as f64 * 100.0
                },
                table_fingerprint: fingerprint.clone(),
            }),
    )?;

    if let Some(geo) = &m.geo {
        csv_out(
            dir,
            GEO_COUNTS_CSV,
            geo.iter().map(|(k, n)| GeoCountRow {
                year: label.to_string(),
                country: k.to_string(),
                packets: n,
            }),
        )?;
    }
    csv_out(dir, RATE_SERIES_CSV, &m.rate_rows)?;
    csv_out(dir, INGEST_CSV, &m.ingest_rows)?;
    Ok(())
}
