use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use pointforge::commands;
use pointforge::config::RunConfig;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    GenSynthetic,
    Densify,
    Train,
    Infer,
    Eval,
    PlotPr,
}

#[derive(Debug, Parser)]
#[command(name = "pointforge", version, about = "LiDAR-camera 3D detection: data, training, inference and evaluation")]
struct Cli {
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; `gen-synthetic` defaults to the data root, everything else to `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads() -> Result<Option<usize>, String> {
    match std::env::var("POINTFORGE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("POINTFORGE_THREADS must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), String> {
    if let Some(n) = threads()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let mut cfg = RunConfig::load(&cli.config).map_err(|e| e.to_string())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = match (&cli.out, cli.command) {
        (Some(o), _) => o.clone(),
        (None, Command::GenSynthetic) => cfg.data.root.clone(),
        (None, _) => PathBuf::from("out"),
    };
    let r = match cli.command {
        Command::GenSynthetic => commands::cmd_gen_synthetic(&cfg, &out),
        Command::Densify => commands::cmd_densify(&cfg, &out),
        Command::Train => commands::cmd_train(&cfg, &out),
        Command::Infer => commands::cmd_infer(&cfg, &out),
        Command::Eval => commands::cmd_eval(&cfg, &out),
        Command::PlotPr => commands::cmd_plot_pr(&cfg, &out),
    };
    r.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
