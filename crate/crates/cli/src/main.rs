use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use darkscope_core::pipeline::{cmd_analyze, cmd_compare, cmd_synth, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "darkscope", about = "Darknet traffic characterization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one year (or every configured year) into per-year CSVs.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        /// Year label to analyze; all years when omitted.
        #[arg(long)]
        year: Option<String>,
    },
    /// Compare the configured baseline and test years.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Fail instead of analyzing years whose artifacts are missing.
        #[arg(long)]
        no_rebuild: bool,
    },
    /// Generate a synthetic capture from a preset name or spec file.
    Synth {
        /// Preset name or path to a TOML spec.
        spec: String,
        /// Output capture path.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Split the trace into this many captures by whole seconds.
        #[arg(long, default_value_t = 1)]
        files: usize,
    },
    /// Print the version.
    Version,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Raw frames considered per file.
    #[arg(long)]
    cap: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(cap) = self.cap {
            config.cap = cap;
        }
        if let Some(jobs) = self.jobs {
            config.jobs = jobs;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { run, year } => {
            let config = run.load()?;
            let labels: Vec<String> = match year {
                Some(y) => vec![y],
                None => config.years.iter().map(|y| y.label.clone()).collect(),
            };
            if labels.is_empty() {
                return Err(PipelineError::Config("config lists no years".into()).into());
            }
            for label in labels {
                let s =
                    cmd_analyze(&config, &label).with_context(|| format!("analyzing '{label}'"))?;
                println!(
                    "{}: {} packets from {} file(s), {:.1} pps -> {}",
                    s.label,
                    s.overview.total_packets,
                    s.files_opened,
                    s.overview.avg_packet_rate_pps,
                    s.dir.display()
                );
            }
        }
        Command::Compare { run, no_rebuild } => {
            let mut config = run.load()?;
            if no_rebuild {
                config.rebuild = false;
            }
            let s = cmd_compare(&config)?;
            println!(
                "{} vs {}: evasion {:.2}% at {:.1} pps; tuned {} pps -> FPR {:.2}% -> {}",
                s.baseline_label,
                s.test_label,
                s.ids.evasion_rate_pct,
                s.ids.standard_threshold_pps,
                s.ids.tuned_threshold_pps,
                s.ids.false_positive_rate_pct,
                s.dir.display()
            );
        }
        Command::Synth {
            spec,
            out,
            seed,
            files,
        } => {
            let s = cmd_synth(&spec, &out, seed, files)?;
            println!(
                "{} records written to {} file(s); ground truth in {}",
                s.truth.total_records,
                s.pcaps.len(),
                s.truth_path.display()
            );
        }
        Command::Version => println!("darkscope {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<PipelineError>()
                .map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
