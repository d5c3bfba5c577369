use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::packet_io::{LinkType, PcapWriter};
use crate::synth::{preset, GroundTruth, SynthSpec, SynthStream, PRESET_NAMES};

use super::PipelineError;

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub pcaps: Vec<PathBuf>,
    pub truth_path: PathBuf,
    /// Prefix table matching the generated source countries.
    pub geo_path: Option<PathBuf>,
    pub truth: GroundTruth,
}

/// A preset name or a TOML spec path.
pub fn resolve_spec(spec: &str) -> Result<SynthSpec, PipelineError> {
    let parsed = if PRESET_NAMES.contains(&spec) {
        preset(spec)
    } else {
        SynthSpec::load(spec)
    };
    let spec_value =
        parsed.map_err(|e| PipelineError::Config(format!("synth spec '{spec}': {e}")))?;
    spec_value
        .validate()
        .map_err(|e| PipelineError::Config(format!("synth spec '{spec}': {e}")))?;
    Ok(spec_value)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name: OsString = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn shard_path(out: &Path, index: usize, files: usize) -> PathBuf {
    if files == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    let ext = out
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    out.with_file_name(format!("{stem}-{index:03}{ext}"))
}

type ShardWriter = PcapWriter<BufWriter<File>>;

fn open_shard(path: &Path) -> Result<ShardWriter, PipelineError> {
    let file = File::create(path).map_err(|e| PipelineError::output(path, e))?;
    PcapWriter::new(BufWriter::with_capacity(1 << 16, file), LinkType::Ethernet)
        .map_err(|e| PipelineError::output(path, e))
}

fn close_shard(w: ShardWriter, path: &Path) -> Result<(), PipelineError> {
    w.finish()
        .map_err(|e| PipelineError::output(path, e))?
        .flush()
        .map_err(|e| PipelineError::output(path, e))
}

/// Writes the trace as `files` captures split on whole seconds, plus a
/// ground-truth JSON sidecar and, when the spec has countries, a prefix CSV.
pub fn cmd_synth(
    spec: &str,
    out: &Path,
    seed: Option<u64>,
    files: usize,
) -> Result<SynthOutput, PipelineError> {
    let mut spec_value = resolve_spec(spec)?;
    if let Some(s) = seed {
        spec_value.seed = s;
    }
    if files == 0 || files as u64 > spec_value.duration_s {
        return Err(PipelineError::Config(format!(
            "cannot split a {} s trace into {files} files",
            spec_value.duration_s
        )));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::output(dir, e))?;
    }

    let duration = spec_value.duration_s;
    let start = spec_value.start_ts_s;
    let pcaps: Vec<PathBuf> = (0..files).map(|i| shard_path(out, i, files)).collect();
    let mut stream =
        SynthStream::new(spec_value.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut current = 0usize;
    let mut writer = open_shard(&pcaps[0])?;
    for rec in stream.by_ref() {
        let shard = ((rec.second() - start) * files as u64 / duration) as usize;
        while current < shard {
            close_shard(writer, &pcaps[current])?;
            current += 1;
            writer = open_shard(&pcaps[current])?;
        }
        writer
            .write_record(&rec)
            .map_err(|e| PipelineError::output(&pcaps[current], e))?;
    }
    close_shard(writer, &pcaps[current])?;
    for path in &pcaps[current + 1..] {
        close_shard(open_shard(path)?, path)?;
    }

    let truth = stream.ground_truth();
    let truth_path = with_suffix(out, ".truth.json");
    truth
        .save(&truth_path)
        .map_err(|e| PipelineError::output(&truth_path, e))?;

    let geo_path = match spec_value.prefix_table_csv() {
        Some(csv) => {
            let p = with_suffix(out, ".geo.csv");
            std::fs::write(&p, csv).map_err(|e| PipelineError::output(&p, e))?;
            Some(p)
        }
        None => None,
    };
    log::info!(
        "wrote {} records into {} capture(s)",
        truth.total_records,
        pcaps.len()
    );
    Ok(SynthOutput {
        pcaps,
        truth_path,
        geo_path,
        truth,
    })
}
