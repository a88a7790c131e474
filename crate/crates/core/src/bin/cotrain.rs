use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cotrain::harness::{ablate, lambda_sweep, parse_modes, parse_seeds, train_to_dir, RunConfig, Trainer};
use cotrain::task_env::load_tasks;
use cotrain::verify::{self, VerifyReport};
use cotrain::Result;

#[derive(Parser)]
#[command(
    name = "cotrain",
    about = "Policy / reward model / environment co-training on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Task set JSON; defaults to the built-in reference set.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        policy_init: Option<PathBuf>,
        #[arg(long)]
        rm_checkpoint: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train every mode/seed pair and write summary.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated modes.
        #[arg(long, default_value = "policy_only,policy_reward,policy_reward_env")]
        modes: String,
        /// Inclusive range `a..b` or comma list; defaults to the config's seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Run the two λ sub-sweeps over these values instead of the mode grid.
        #[arg(long)]
        lambda_sweep: Option<String>,
    },
    /// Numerical checks; exits non-zero on any violation.
    Verify {
        #[command(subcommand)]
        check: Check,
        /// Directory for `<check>.json` and `<check>.txt`.
        #[arg(long, global = true, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Check {
    /// Exact majority precision against the concentration bound
    Thm1 {
        #[arg(long, default_value = "default")]
        grid: String,
    },
    /// Monte Carlo check of the reward-model objective decomposition
    Thm2 {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Nonnegative-weight threshold in the reward mix λ
    Remark1,
    /// Rates form of the unit-test reward against the direct count
    #[command(name = "coding_equiv")]
    CodingEquiv {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_report(out: &Path, rep: &VerifyReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join(format!("{}.json", rep.check)),
        serde_json::to_string_pretty(rep)?,
    )?;
    std::fs::write(out.join(format!("{}.txt", rep.check)), rep.text())?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            tasks,
            policy_init,
            rm_checkpoint,
            workers,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.tasks_path = tasks.or(cfg.tasks_path);
            cfg.policy_init = policy_init.or(cfg.policy_init);
            cfg.rm_checkpoint = rm_checkpoint.or(cfg.rm_checkpoint);
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let task_set = cfg.load_task_set()?;
            let mut trainer = Trainer::new(cfg, task_set, seed)?;
            let s = train_to_dir(&mut trainer, &out)?;
            println!("{}", serde_json::to_string(&s)?);
            Ok(true)
        }
        Command::Ablate {
            config,
            modes,
            seeds,
            out,
            tasks,
            lambda_sweep: sweep,
        } => {
            let cfg = load_config(config.as_deref())?;
            let task_set = match tasks {
                Some(p) => load_tasks(&p)?,
                None => cfg.load_task_set()?,
            };
            let seeds = match seeds {
                Some(s) => parse_seeds(&s)?,
                None => cfg.seeds.clone(),
            };
            if let Some(values) = sweep {
                let lambdas = values
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| cotrain::Error::Argument(format!("bad lambda list: {e}")))?;
                lambda_sweep(&cfg, &task_set, &lambdas, &seeds, Some(&out))?;
                print!("{}", std::fs::read_to_string(out.join("lambda_sweep.csv"))?);
            } else {
                ablate(&cfg, &task_set, &parse_modes(&modes)?, &seeds, Some(&out))?;
                print!("{}", std::fs::read_to_string(out.join("summary.csv"))?);
            }
            Ok(true)
        }
        Command::Verify { check, out } => {
            let rep = match check {
                Check::Thm1 { grid } => {
                    if grid != "default" {
                        return Err(cotrain::Error::Argument(format!("unknown grid `{grid}`")));
                    }
                    verify::thm1()?
                }
                Check::Thm2 { samples, seed } => verify::thm2(samples, seed)?,
                Check::Remark1 => verify::remark1()?,
                Check::CodingEquiv { instances, seed } => verify::coding_equiv(instances, seed)?,
            };
            write_report(&out, &rep)?;
            print!("{}", rep.text());
            Ok(rep.passed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
