use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::entropy::{entropy_delta, DimensionEntropy, EntropySummary};
use crate::geo::{geo_delta, GeoCounts, GeoKey};
use crate::ics::{delta_table, IcsCounts, IcsDeltaRow, IcsPortTable};
use crate::ids::{ids_report, IdsReport, RateSeries};
use crate::report::{self, svg, *};

use super::analyze::{cmd_analyze, write_atomically};
use super::config::RunConfig;
use super::PipelineError;

/// Subdirectory of the output directory holding cross-year artifacts.
pub const COMPARE_DIR: &str = "compare";
const GEO_TOP_N: usize = 15;

const REQUIRED: [&str; 6] = [
    OVERVIEW_CSV,
    ENTROPY_CSV,
    IAT_HISTOGRAM_CSV,
    PACING_SUMMARY_CSV,
    ICS_PORTS_CSV,
    RATE_SERIES_CSV,
];

#[derive(Debug, Clone)]
pub struct CompareSummary {
    pub dir: PathBuf,
    pub baseline_label: String,
    pub test_label: String,
    pub overview: [OverviewRow; 2],
    pub pacing: [PacingRow; 2],
    pub entropy: Vec<EntropyDeltaRow>,
    pub ics: Vec<IcsDeltaRow>,
    pub geo: Option<Vec<GeoDeltaCsvRow>>,
    pub ids: IdsReport,
    /// Artifact sets that had to be rebuilt first.
    pub rebuilt: Vec<String>,
}

struct YearArtifacts {
    overview: OverviewRow,
    entropy: EntropySummary,
    iat: Vec<IatBinRow>,
    pacing: PacingRow,
    ics: IcsCounts,
    geo: Option<GeoCounts>,
    rates: RateSeries,
}

fn read<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<Vec<T>, PipelineError> {
    let path = dir.join(name);
    report::read_rows(&path).map_err(|e| PipelineError::Other(format!("{}: {e}", path.display())))
}

fn single<T>(mut rows: Vec<T>, dir: &Path, name: &str) -> Result<T, PipelineError> {
    if rows.len() != 1 {
        return Err(PipelineError::Other(format!(
            "{}: expected one row, found {}",
            dir.join(name).display(),
            rows.len()
        )));
    }
    Ok(rows.remove(0))
}

fn ics_counts(
    rows: &[IcsPortRow],
    table: &IcsPortTable,
    dir: &Path,
) -> Result<IcsCounts, PipelineError> {
    let fingerprint = format!("{:016x}", table.fingerprint());
    let matches = rows.len() == table.len()
        && rows.iter().zip(table.entries()).all(|(r, e)| {
            r.table_fingerprint == fingerprint && r.port == e.port && r.transport == e.transport
        });
    if !matches {
        return Err(PipelineError::Other(format!(
            "{} was built with a different ICS table; rerun analyze",
            dir.join(ICS_PORTS_CSV).display()
        )));
    }
    Ok(IcsCounts {
        fingerprint: table.fingerprint(),
        counts: rows.iter().map(|r| r.packets).collect(),
    })
}

fn entropy_summary(rows: &[EntropyRow]) -> EntropySummary {
    let pick = |dim: &str| {
        rows.iter()
            .find(|r| r.dimension == dim)
            .map(EntropyRow::dimension_entropy)
            .unwrap_or(DimensionEntropy {
                entropy_bits: 0.0,
                max_entropy_bits: 0.0,
                normalized: 0.0,
            })
    };
    EntropySummary {
        src_ip: pick(SRC_IP_DIMENSION),
        dst_port: pick(DST_PORT_DIMENSION),
    }
}

fn load_year(
    label: &str,
    dir: &Path,
    table: &IcsPortTable,
) -> Result<YearArtifacts, PipelineError> {
    let geo_path = dir.join(GEO_COUNTS_CSV);
    let geo = if geo_path.exists() {
        let rows: Vec<GeoCountRow> = read(dir, GEO_COUNTS_CSV)?;
        let mut counts = GeoCounts::default();
        for r in rows {
            let key: GeoKey = r.country.parse().map_err(|_| {
                PipelineError::Other(format!(
                    "{}: bad country '{}'",
                    geo_path.display(),
                    r.country
                ))
            })?;
            counts.add(key, r.packets);
        }
        Some(counts)
    } else {
        None
    };
    let mut rates = RateSeries::new(label);
    rates.buckets = read::<RateRow>(dir, RATE_SERIES_CSV)?
        .into_iter()
        .map(|r| (r.second, r.count))
        .collect();
    Ok(YearArtifacts {
        overview: single(read(dir, OVERVIEW_CSV)?, dir, OVERVIEW_CSV)?,
        entropy: entropy_summary(&read::<EntropyRow>(dir, ENTROPY_CSV)?),
        iat: read(dir, IAT_HISTOGRAM_CSV)?,
        pacing: single(read(dir, PACING_SUMMARY_CSV)?, dir, PACING_SUMMARY_CSV)?,
        ics: ics_counts(&read::<IcsPortRow>(dir, ICS_PORTS_CSV)?, table, dir)?,
        geo,
        rates,
    })
}

fn missing_artifact(dir: &Path) -> Option<PathBuf> {
    REQUIRED
        .iter()
        .map(|name| dir.join(name))
        .find(|p| !p.is_file())
}

/// Builds the cross-year artifact set for the configured baseline and test
/// years, analyzing either year first when its artifacts are missing and
/// rebuilding is enabled.
pub fn cmd_compare(config: &RunConfig) -> Result<CompareSummary, PipelineError> {
    config.validate()?;
    let ids = config.ids()?;
    let table = config.ics_table()?;

    let mut rebuilt = Vec::new();
    for label in [&ids.baseline, &ids.test] {
        if let Some(missing) = missing_artifact(&config.year_dir(label)) {
            if !config.rebuild {
                return Err(PipelineError::MissingArtifact(missing));
            }
            log::info!("artifacts for '{label}' missing; analyzing");
            cmd_analyze(config, label)?;
            rebuilt.push(label.clone());
        }
    }

    let base = load_year(&ids.baseline, &config.year_dir(&ids.baseline), &table)?;
    let test = load_year(&ids.test, &config.year_dir(&ids.test), &table)?;

    let delta = entropy_delta(&base.entropy, &test.entropy);
    let entropy = entropy_delta_rows(
        &delta,
        [
            base.entropy.src_ip.normalized,
            base.entropy.dst_port.normalized,
        ],
        [
            test.entropy.src_ip.normalized,
            test.entropy.dst_port.normalized,
        ],
    );
    let ics = delta_table(&table, &base.ics, &test.ics)
        .map_err(|e| PipelineError::Other(e.to_string()))?;
    let geo = match (&base.geo, &test.geo) {
        (Some(b), Some(t)) => Some(
            geo_delta(b, t, GEO_TOP_N)
                .into_iter()
                .enumerate()
                .map(|(i, r)| GeoDeltaCsvRow {
                    rank: (r.country != GeoKey::Unattributed).then_some(i + 1),
                    country: r.country.to_string(),
                    baseline_pkts: r.baseline_pkts,
                    test_pkts: r.test_pkts,
                    pct_delta: r.pct_delta,
                })
                .collect::<Vec<_>>(),
        ),
        _ => {
            log::warn!(
                "geo counts missing for '{}' or '{}'; geo comparison skipped",
                ids.baseline,
                ids.test
            );
            None
        }
    };
    let report = ids_report(
        &base.rates,
        &test.rates,
        ids.target,
        ids.include_zero_buckets,
    )
    .map_err(|e| PipelineError::Empty(format!("IDS simulation: {e}")))?;
    let iat = iat_comparison_rows(&base.iat, &test.iat);

    let dir = config.output_dir.join(COMPARE_DIR);
    write_atomically(&dir, |tmp| {
        let out = |name: &str| tmp.join(name);
        let wrap = |name: &str, r: Result<(), report::CsvError>| {
            r.map_err(|e| PipelineError::output(out(name), e))
        };

        let header = vec!["metric".to_string(), ids.baseline.clone(), ids.test.clone()];
        let table_rows: Vec<Vec<String>> = base
            .overview
            .table_one()
            .into_iter()
            .zip(test.overview.table_one())
            .map(|((metric, b), (_, t))| vec![metric.to_string(), b, t])
            .collect();
        wrap(
            OVERVIEW_COMPARISON_CSV,
            write_table(out(OVERVIEW_COMPARISON_CSV), &header, &table_rows),
        )?;
        wrap(
            ENTROPY_DELTA_CSV,
            write_rows(out(ENTROPY_DELTA_CSV), &entropy),
        )?;
        wrap(ICS_DELTA_CSV, write_rows(out(ICS_DELTA_CSV), &ics))?;
        if let Some(rows) = &geo {
            wrap(GEO_DELTA_CSV, write_rows(out(GEO_DELTA_CSV), rows))?;
        }
        wrap(IDS_REPORT_CSV, write_rows(out(IDS_REPORT_CSV), [&report]))?;
        wrap(
            IAT_COMPARISON_CSV,
            write_rows(out(IAT_COMPARISON_CSV), &iat),
        )?;

        let charts = [
            (
                "ics_dumbbell.svg",
                svg::ics_dumbbell(&ics, &ids.baseline, &ids.test),
            ),
            (
                "iat_histogram.svg",
                svg::iat_histogram(&iat, &ids.baseline, &ids.test),
            ),
            (
                "ids_thresholds.svg",
                svg::threshold_band(
                    &test.rates.counts(ids.include_zero_buckets),
                    report.baseline_mu,
                    report.standard_threshold_pps,
                    report.tuned_threshold_pps as f64,
                    &ids.test,
                ),
            ),
            (
                "entropy.svg",
                svg::entropy_bars(&entropy, &ids.baseline, &ids.test),
            ),
        ];
        for (name, body) in charts {
            write_text(out(name), &body).map_err(|e| PipelineError::output(out(name), e))?;
        }
        Ok(())
    })?;

    Ok(CompareSummary {
        dir,
        baseline_label: ids.baseline.clone(),
        test_label: ids.test.clone(),
        overview: [base.overview, test.overview],
        pacing: [base.pacing, test.pacing],
        entropy,
        ics,
        geo,
        ids: report,
        rebuilt,
    })
}
