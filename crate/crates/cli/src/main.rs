//! `fpl`: run federated prompt-learning experiments, print cost tables and
//! generate synthetic backbones.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpl_core::backbone::SyntheticSpec;
use fpl_core::experiment::{
    cost_summary_json, generate_into, parse_toml, run_experiment, CostConfig, ExperimentConfig, RunOptions,
};
use fpl_core::Error;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "FPL_OUT_DIR";

#[derive(Parser)]
#[command(name = "fpl", version, about = "Federated prompt learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep cell of an experiment config.
    Run {
        #[command(flatten)]
        common: Common,
        /// Cells to run concurrently (0 = one per core).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Replace the config's top-level seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Print closed-form communication, compute and storage costs.
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic backbone file.
    Gen {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a previous run's output directory.
    #[arg(long)]
    force: bool,
}

/// `--out`, then the config's own choice, then `$FPL_OUT_DIR/<stem>`, then `./runs/<stem>`.
fn output_dir(flag: Option<&Path>, from_config: Option<&Path>, config: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = from_config {
        return config.parent().unwrap_or(Path::new(".")).join(p);
    }
    let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(stem),
        _ => PathBuf::from("runs").join(stem),
    }
}

fn read_config(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { common, jobs, seed_override } => {
            let mut cfg = ExperimentConfig::load(&common.config)?;
            if let Some(seed) = seed_override {
                cfg.seed = seed;
            }
            let out = output_dir(common.out.as_deref(), cfg.output_dir.as_deref(), &common.config);
            let dir = common.config.parent().unwrap_or(Path::new("."));
            log::info!("running {} cell(s) into {}", cfg.cells().len(), out.display());
            let manifest = run_experiment(&cfg, dir, &out, RunOptions { force: common.force, jobs })?;
            for rec in &manifest.cells {
                println!(
                    "{:<50} final accuracy {}",
                    rec.cell.key,
                    rec.final_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            println!("wrote {}", out.join(fpl_core::experiment::MANIFEST_FILE).display());
        }
        Command::Cost { common } => {
            let src = read_config(&common.config)?;
            let cfg = CostConfig::parse(&src, &common.config.display().to_string())?;
            let reports = cfg.evaluate()?;
            for (name, report) in &reports {
                println!("== {name}");
                print!("{}", report.summary());
            }
            if let Some(out) = common.out {
                fpl_core::experiment::prepare_output_dir(&out, common.force)?;
                fs::write(out.join("cost.json"), cost_summary_json(&reports)?)?;
                fs::write(out.join(fpl_core::experiment::MANIFEST_FILE), "{\n  \"files\": [\"cost.json\"]\n}\n")?;
            }
        }
        Command::Gen { common } => {
            let src = read_config(&common.config)?;
            let spec: SyntheticSpec = parse_toml(&src, &common.config.display().to_string())?;
            spec.validate().map_err(|e| Error::Config(format!("{}: {e}", common.config.display())))?;
            let out = output_dir(common.out.as_deref(), None, &common.config);
            let path = generate_into(&spec, &out, common.force)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
