use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncld_core::data_stream::{parse_dataset, write_dense, write_sparse, DatasetFormat};
use ncld_core::harness::{
    default_beta_grid, default_gamma_grid, emit_grid, emit_reports, load_dataset, prepare_stream, run_repeats,
    ExperimentConfig, Pipeline,
};
use ncld_core::online_model::Checkpoint;
use ncld_core::selftest::run_selftest;
use ncld_core::{Error, Result};

/// Online multi-label learning on noisy, drifting label streams.
#[derive(Parser)]
#[command(name = "ncld", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Takes precedence over the file and
    /// `NCLD_*` environment variables.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    overrides: Vec<(String, String)>,
    /// Output directory (same as `--set output=DIR`).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the chunk loop and write chunks.csv, summary.csv, events.csv and config.echo.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also save the final model of the first repeat.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Search beta and gamma by mean GM and write grid.csv.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated beta values (default 0.30..=0.80 step 0.05).
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        /// Comma-separated gamma values (default 0 and 2^-8..=2^-3).
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Convert between the sparse multi-label format and dense CSV.
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// sparse | csv
        #[arg(long)]
        from: DatasetFormat,
        /// sparse | csv
        #[arg(long)]
        to: DatasetFormat,
    },
    /// Write the synthetic dataset described by the `synth_*` keys.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// File to write.
        path: PathBuf,
        /// sparse | csv
        #[arg(long, default_value = "sparse")]
        format: DatasetFormat,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(out) = &args.output {
        overrides.push(("output".into(), out.display().to_string()));
    }
    ExperimentConfig::load(args.config.as_deref(), std::env::vars(), &overrides)
}

fn write_dataset(ds: &ncld_core::data_stream::Dataset, path: &PathBuf, format: DatasetFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let out = BufWriter::new(file);
    match format {
        DatasetFormat::SparseMultilabel => write_sparse(ds, out),
        DatasetFormat::DenseCsv => write_dense(ds, out),
    }
    .map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let reports = run_repeats(&cfg)?;
            for path in emit_reports(&reports, &cfg.output)? {
                println!("wrote {}", path.display());
            }
            let first = &reports[0];
            println!(
                "chunks {}  HL {:.4}  F1 {:.4}  GM {:.4}  detections {}",
                first.chunks.len(),
                first.summary.hamming_loss,
                first.summary.micro_f1,
                first.summary.gm,
                first.events.len()
            );
            if let Some(path) = checkpoint {
                let ds = load_dataset(&cfg)?;
                let (chunks, spec, _) = prepare_stream(&cfg, &ds)?;
                let pipe = Pipeline::new(&cfg, &chunks[0], spec)?;
                Checkpoint::capture(&first.final_state, cfg.seed_model, ds.n_features(), &pipe.standardizer).save(&path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Grid { config, betas, gammas } => {
            let cfg = load_config(&config)?;
            let betas = betas.unwrap_or_else(default_beta_grid);
            let gammas = gammas.unwrap_or_else(default_gamma_grid);
            let grid = ncld_core::harness::grid_search(&cfg, &betas, &gammas)?;
            let path = emit_grid(&grid, &cfg.output)?;
            println!("wrote {}", path.display());
            println!("best beta {} gamma {} (mean GM {:.4})", grid.best.beta, grid.best.gamma, grid.best.mean_gm);
        }
        Command::Convert { input, output, from, to } => {
            let ds = parse_dataset(&input, from)?;
            write_dataset(&ds, &output, to)?;
            println!("converted {} instances", ds.len());
        }
        Command::Synth { config, path, format } => {
            let cfg = load_config(&config)?;
            let ds = ncld_core::synthetic::generate(&cfg.synthetic, cfg.seed_data)?;
            write_dataset(&ds, &path, format)?;
            println!("wrote {} instances to {}", ds.len(), path.display());
        }
        Command::Selftest => {
            let checks = run_selftest()?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{}  {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Error::Numerical {
                    chunk: None,
                    message: format!("{failed} self-test check(s) failed"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
