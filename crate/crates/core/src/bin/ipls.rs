use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ipls_core::harness::{
    compare, data_dir_from_env, preset, presets, run_variants, write_outputs, ConfigError, HarnessError,
    ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "ipls", version, about = "Decentralized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a config file or a preset.
    Run {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Output directory for the metric files.
        #[arg(long, default_value = "ipls-out")]
        out: PathBuf,
        /// Master seed; sub-seeds not pinned explicitly derive from it.
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` overrides applied to every variant.
        overrides: Vec<String>,
    },
    /// Per-round accuracy gap between two metric files.
    Compare { a: PathBuf, b: PathBuf },
    /// List the built-in presets.
    Presets,
}

fn read(path: &PathBuf) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })
}

fn run(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    out: PathBuf,
    seed: Option<u64>,
    overrides: Vec<String>,
) -> Result<(), HarnessError> {
    let mut variants = match (config, preset_name) {
        (Some(path), _) => vec![ScenarioConfig::parse(&read(&path)?)?],
        (None, Some(name)) => {
            preset(&name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown preset `{name}`")))?
                .variants
        }
        (None, None) => return Err(ConfigError::Invalid("need --config or --preset".into()).into()),
    };
    for v in variants.iter_mut() {
        if let Some(s) = seed {
            v.seed = s;
        }
        for o in &overrides {
            let (k, val) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("override `{o}` is not key=value")))?;
            v.set(k.trim(), val.trim())?;
        }
    }
    let data_dir = data_dir_from_env();
    let summary = run_variants(&variants, data_dir.as_deref())?;
    for path in write_outputs(&summary, &out)? {
        eprintln!("wrote {}", path.display());
    }
    print!("{}", summary.text);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            preset,
            out,
            seed,
            overrides,
        } => run(config, preset, out, seed, overrides),
        Command::Compare { a, b } => read(&a)
            .and_then(|ta| Ok((ta, read(&b)?)))
            .and_then(|(ta, tb)| compare(&ta, &tb))
            .map(|report| println!("{report}")),
        Command::Presets => {
            for p in presets() {
                println!("{:<16} {}", p.name, p.description);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
