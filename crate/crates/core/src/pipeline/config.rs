use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::PipelineError;

pub const DEFAULT_CAP: u64 = 2_000_000;
const DEFAULT_TARGET: f64 = 0.90;

/// Where a year's packets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum YearSource {
    /// Glob patterns, already resolved against the config directory.
    Globs(Vec<String>),
    /// A preset name or a spec file path, generated into `files` captures.
    Synth { spec: String, files: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct YearConfig {
    pub label: String,
    pub source: YearSource,
    pub geo: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdsSection {
    pub baseline: String,
    pub test: String,
    pub target: f64,
    pub include_zero_buckets: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub years: Vec<YearConfig>,
    /// Raw frames considered per file.
    pub cap: u64,
    pub ics_table: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 picks available parallelism.
    pub jobs: usize,
    /// Rebuild missing per-year artifacts during compare.
    pub rebuild: bool,
    pub ids: Option<IdsSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    years: Vec<RawYear>,
    cap: Option<u64>,
    ics_table: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    jobs: usize,
    #[serde(default = "yes")]
    rebuild: bool,
    ids: Option<RawIds>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawYear {
    label: String,
    #[serde(default)]
    inputs: Vec<String>,
    synth: Option<String>,
    synth_files: Option<usize>,
    geo: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIds {
    baseline: String,
    test: String,
    target: Option<f64>,
    #[serde(default = "yes")]
    include_zero_buckets: bool,
}

fn yes() -> bool {
    true
}

fn is_preset(name: &str) -> bool {
    crate::synth::PRESET_NAMES.contains(&name)
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parses a config; relative paths are taken relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };

        let mut years = Vec::with_capacity(raw.years.len());
        for y in raw.years {
            let source = match (y.inputs.is_empty(), y.synth) {
                (false, None) => YearSource::Globs(
                    y.inputs
                        .iter()
                        .map(|g| resolve(Path::new(g)).to_string_lossy().into_owned())
                        .collect(),
                ),
                (true, Some(spec)) => YearSource::Synth {
                    spec: if is_preset(&spec) {
                        spec
                    } else {
                        resolve(Path::new(&spec)).to_string_lossy().into_owned()
                    },
                    files: y.synth_files.unwrap_or(1),
                },
                (false, Some(_)) => {
                    return Err(PipelineError::Config(format!(
                        "year '{}' sets both inputs and synth",
                        y.label
                    )))
                }
                (true, None) => {
                    return Err(PipelineError::Config(format!(
                        "year '{}' needs inputs or synth",
                        y.label
                    )))
                }
            };
            years.push(YearConfig {
                label: y.label,
                source,
                geo: y.geo.as_deref().map(resolve),
            });
        }

        let config = RunConfig {
            years,
            cap: raw.cap.unwrap_or(DEFAULT_CAP),
            ics_table: raw.ics_table.as_deref().map(resolve),
            output_dir: resolve(&raw.output_dir.unwrap_or_else(|| PathBuf::from("out"))),
            jobs: raw.jobs,
            rebuild: raw.rebuild,
            ids: raw.ids.map(|i| IdsSection {
                baseline: i.baseline,
                test: i.test,
                target: i.target.unwrap_or(DEFAULT_TARGET),
                include_zero_buckets: i.include_zero_buckets,
            }),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.cap == 0 {
            return bad("cap must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for y in &self.years {
            let clean = !y.label.is_empty()
                && !y.label.starts_with('.')
                && y.label
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !clean {
                return bad(format!(
                    "year label '{}' must be alphanumeric, '-', '_' or '.'",
                    y.label
                ));
            }
            if y.label == super::COMPARE_DIR {
                return bad(format!("year label '{}' is reserved", y.label));
            }
            if !seen.insert(y.label.as_str()) {
                return bad(format!("duplicate year label '{}'", y.label));
            }
            if let YearSource::Synth { files, .. } = y.source {
                if files == 0 {
                    return bad(format!(
                        "year '{}': synth_files must be at least 1",
                        y.label
                    ));
                }
            }
        }
        if let Some(ids) = &self.ids {
            for label in [&ids.baseline, &ids.test] {
                if !seen.contains(label.as_str()) {
                    return bad(format!("ids refers to unknown year '{label}'"));
                }
            }
            if ids.baseline == ids.test {
                return bad("ids baseline and test must be different years".into());
            }
            if !(ids.target > 0.0 && ids.target <= 1.0) {
                return bad(format!("ids target {} outside (0, 1]", ids.target));
            }
        }
        Ok(())
    }

    pub fn year(&self, label: &str) -> Result<&YearConfig, PipelineError> {
        self.years
            .iter()
            .find(|y| y.label == label)
            .ok_or_else(|| PipelineError::Config(format!("no year labelled '{label}'")))
    }

    pub fn ids(&self) -> Result<&IdsSection, PipelineError> {
        self.ids
            .as_ref()
            .ok_or_else(|| PipelineError::Config("compare needs an [ids] section".into()))
    }

    pub fn year_dir(&self, label: &str) -> PathBuf {
        self.output_dir.join(label)
    }

    pub fn ics_table(&self) -> Result<crate::ics::IcsPortTable, PipelineError> {
        match &self.ics_table {
            None => Ok(crate::ics::IcsPortTable::default()),
            Some(p) => crate::ics::IcsPortTable::load(p)
                .map_err(|e| PipelineError::Config(format!("ICS table {}: {e}", p.display()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
        output_dir = "results"
        [[years]]
        label = "2021"
        inputs = ["caps/2021/*.pcap"]
        geo = "geo/2021.csv"
        [[years]]
        label = "2025"
        synth = "paced-botnet-2025-like"
        [ids]
        baseline = "2021"
        test = "2025"
    "#;

    #[test]
    fn parses_and_resolves() {
        let c = RunConfig::from_toml_str(GOOD, Path::new("/cfg")).unwrap();
        assert_eq!(c.cap, DEFAULT_CAP);
        assert_eq!(c.output_dir, PathBuf::from("/cfg/results"));
        assert_eq!(
            c.years[0].source,
            YearSource::Globs(vec!["/cfg/caps/2021/*.pcap".into()])
        );
        assert_eq!(
            c.years[0].geo.as_deref(),
            Some(Path::new("/cfg/geo/2021.csv"))
        );
        assert_eq!(
            c.years[1].source,
            YearSource::Synth {
                spec: "paced-botnet-2025-like".into(),
                files: 1
            }
        );
        let ids = c.ids().unwrap();
        assert_eq!((ids.target, ids.include_zero_buckets), (0.90, true));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new(".");
        for text in [
            "cap = 0",
            "[[years]]\nlabel = \"a\"",
            "[[years]]\nlabel = \"a\"\ninputs=[\"x\"]\nsynth=\"y\"",
            "[[years]]\nlabel = \"a\"\ninputs=[\"x\"]\n[[years]]\nlabel = \"a\"\ninputs=[\"x\"]",
            "[[years]]\nlabel = \"a\"\ninputs=[\"x\"]\n[ids]\nbaseline=\"a\"\ntest=\"b\"",
            "[[years]]\nlabel = \"../a\"\ninputs=[\"x\"]",
            "bogus = 1",
        ] {
            assert!(
                matches!(
                    RunConfig::from_toml_str(text, base),
                    Err(PipelineError::Config(_))
                ),
                "{text}"
            );
        }
    }
}
