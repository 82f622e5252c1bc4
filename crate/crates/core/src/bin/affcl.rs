use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affcl::runner::{emit_plot_data, run, sweep_noisy, ExperimentConfig, Method, DATA_ROOT_ENV};
use affcl::Error;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "affcl", version, about = "Federated continual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over every configured seed.
    Run(Overrides),
    /// Run every sweep method for each number of noisy clients.
    SweepNoisy {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated noisy-client counts; defaults to `[sweep].m_values`.
        #[arg(long, value_delimiter = ',')]
        m_values: Option<Vec<usize>>,
    },
    /// Recompute plot-ready CSV series from completed runs.
    EmitPlots {
        /// Output directory holding experiment runs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a config, then print it fully resolved.
    ValidateConfig(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// TOML config; the `paper` profile is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method name, e.g. af_fcl, fedavg, fedprox, af_wo_gr, af_wo_kd, af_wo_af.
    #[arg(long)]
    method: Option<Method>,
}

impl Overrides {
    fn load(&self) -> affcl::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path)?,
            None => ExperimentConfig::from_toml_str("")?,
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_config(path: &Path) -> affcl::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml_str(&text)
}

fn dispatch(cmd: Command) -> affcl::Result<()> {
    match cmd {
        Command::Run(o) => {
            let cfg = o.load()?;
            let s = run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::SweepNoisy { overrides, m_values } => {
            let cfg = overrides.load()?;
            let ms = m_values.unwrap_or_else(|| cfg.sweep.m_values.clone());
            for r in sweep_noisy(&cfg, &ms)? {
                println!(
                    "{} M={} clean_accuracy={:.4} ± {:.4}",
                    r.method, r.noisy_clients, r.clean_accuracy.mean, r.clean_accuracy.std
                );
            }
        }
        Command::EmitPlots { out } => {
            for path in emit_plot_data(&out)? {
                println!("{}", path.display());
            }
        }
        Command::ValidateConfig(o) => {
            let cfg = o.load()?;
            println!("# config_hash = {}", cfg.hash());
            print!("{}", cfg.to_toml_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = format!("Relative data paths in the config resolve against ${DATA_ROOT_ENV} when it is set.");
    let parsed = Cli::command()
        .after_help(help)
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
