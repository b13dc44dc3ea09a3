use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_rl_lab::harness::{
    cli_run, cli_sweep, cli_verify, export_env, EnvSpec, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "latent-rl-lab", about = "Tabular laboratory for RL under latent dynamics")]
struct Cli {
    /// Worker threads for parallel sections (falls back to LATENT_RL_LAB_JOBS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the structural-identity suite on random instances.
    Verify {
        /// Equality tolerance / inequality slack.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 50)]
        num_instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// JSONL report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment config (one CSV + summary JSON per seed).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Record wall-clock timings (makes outputs non-reproducible).
        #[arg(long, default_value_t = false)]
        timing: bool,
    },
    /// Sweep one config parameter over a list of values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted path of the parameter, e.g. env.n.
        #[arg(long)]
        param: String,
        /// Comma-separated JSON values, e.g. 4,8,16.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        timing: bool,
    },
    /// Environment utilities.
    Env {
        #[command(subcommand)]
        command: EnvCommand,
    },
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Write a generated environment bundle as JSON.
    Export(ExportArgs),
}

#[derive(Args)]
struct ExportArgs {
    /// Family name: tree, cb, lock, random_pushforward.
    #[arg(long)]
    name: String,
    /// Family size parameter (tree/cb) or horizon (lock).
    #[arg(long = "N", alias = "n", default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn configure_jobs(jobs: Option<usize>) {
    let jobs = jobs.or_else(|| {
        std::env::var("LATENT_RL_LAB_JOBS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_jobs(cli.jobs);
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, latent_rl_lab::LabError> {
    match command {
        Command::Verify { tol, num_instances, seed, out } => {
            let (lines, _all_pass) = cli_verify(tol, num_instances, seed, out.as_deref())?;
            let total = lines.len();
            let failed: Vec<_> = lines.iter().filter(|l| !l.pass).collect();
            if let Some(first) = failed.first() {
                println!(
                    "FAIL {}/{} checks; first failure: instance {} identity {} residual {}",
                    failed.len(),
                    total,
                    first.instance_seed,
                    first.identity_name,
                    first.max_residual
                );
                Ok(ExitCode::from(1))
            } else {
                println!("PASS {total} checks across {num_instances} instances (tol {tol})");
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Run { config, out, seed, timing } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.protocol.seeds = vec![s];
            }
            let summaries = cli_run(&cfg, &out, timing)?;
            for s in &summaries {
                println!(
                    "run {} seed {} mixture_risk {:.6} est_class {:.4} -> {}",
                    s.run_id, s.seed, s.mixture_risk, s.est_class, s.csv_path
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, param, values, out, timing } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let parsed: Result<Vec<serde_json::Value>, _> =
                values.split(',').map(serde_json::from_str).collect();
            let parsed = parsed.map_err(latent_rl_lab::LabError::Json)?;
            let rows = cli_sweep(&cfg, &param, &parsed, &out, timing)?;
            println!("{param},median,q25,q75,runs");
            for r in &rows {
                println!("{},{},{},{},{}", r.value, r.median, r.q25, r.q75, r.runs);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Env { command } => match command {
            EnvCommand::Export(args) => {
                let spec = match args.name.as_str() {
                    "tree" => EnvSpec::Tree { n: args.n },
                    "cb" => EnvSpec::Cb { n: args.n },
                    "lock" => EnvSpec::Lock { horizon: args.n, decoys: 2 },
                    "random_pushforward" => EnvSpec::RandomPushforward {
                        states: 3,
                        observations: 8,
                        actions: 2,
                        horizon: 3,
                        mix: 0.5,
                        models: 3,
                        decoders: 3,
                    },
                    other => {
                        return Err(latent_rl_lab::LabError::Config {
                            path: "name".into(),
                            msg: format!("unknown family '{other}'"),
                        })
                    }
                };
                let path = export_env(&spec, args.seed, &args.out)?;
                println!("wrote {}", path.display());
                Ok(ExitCode::SUCCESS)
            }
        },
    }
}
