use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixrts::commands::{cmd_ablate, cmd_dump_tree, cmd_evaluate, cmd_explain, cmd_train, AblationPlan};
use mixrts::config::RunConfig;
use mixrts::envs::EnvChoice;
use mixrts::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "mixrts", version, about = "Train, evaluate and explain tree-based cooperative multi-agent Q-learners")]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write curves, checkpoints and traces.
    Train(RunArgs),
    /// Greedy evaluation of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the env recorded in the checkpoint.
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        payoff_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the summary as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll one greedy episode and export importance, mixing weights and
    /// decision traces.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        payoff_csv: Option<PathBuf>,
        /// confidence, sum-path, sum-all or gradient.
        #[arg(long, default_value = "confidence")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "explain")]
        out: PathBuf,
    },
    /// Export the structure and parameters of every tree as JSON.
    DumpTree {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep agent tree depth and ensemble size.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
        h_values: Vec<usize>,
        /// Refuse grids whose summed environment steps exceed this.
        #[arg(long, default_value_t = 2_000_000)]
        budget_steps: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    depth_agent: Option<String>,
    #[arg(long)]
    depth_mix: Option<String>,
    #[arg(long)]
    h_agent: Option<String>,
    #[arg(long)]
    h_mix: Option<String>,
    /// mixrts, vdn or independent.
    #[arg(long)]
    mixer: Option<String>,
    /// rtc or sdt.
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("env", &self.env),
            ("seed", &self.seed),
            ("steps", &self.steps),
            ("depth_agent", &self.depth_agent),
            ("depth_mix", &self.depth_mix),
            ("h_agent", &self.h_agent),
            ("h_mix", &self.h_mix),
            ("mixer", &self.mixer),
            ("agent", &self.agent),
            ("out", &self.out),
            ("run_name", &self.run_name),
            ("method", &self.method),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn env_choice(env: &Option<String>, payoff: &Option<PathBuf>) -> Result<Option<EnvChoice>> {
    env.as_deref().map(|e| EnvChoice::from_name(e, payoff.as_deref())).transpose()
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let a = cmd_train(&cfg, exec)?;
            let last = a.outcome.curve.last().expect("at least one record");
            println!(
                "steps {} episodes {} final test return {} (best {}) -> {}",
                last.step,
                last.episodes,
                last.mean_test_return,
                a.outcome.best_return,
                a.dir.display()
            );
        }
        Command::Evaluate { checkpoint, env, payoff_csv, episodes, seed, out } => {
            let env = env_choice(&env, &payoff_csv)?;
            let r = cmd_evaluate(&checkpoint, env.as_ref(), episodes, seed, out.as_deref(), exec)?;
            println!(
                "env {} episodes {} mean return {} success rate {} mean length {}",
                r.env, r.episodes, r.mean_return, r.success_rate, r.mean_length
            );
        }
        Command::Explain { checkpoint, env, payoff_csv, method, seed, out } => {
            let env = env_choice(&env, &payoff_csv)?;
            let a = cmd_explain(&checkpoint, env.as_ref(), &method, seed, &out)?;
            println!("{} steps traced -> {}", a.trace.steps.len(), out.display());
        }
        Command::DumpTree { checkpoint, out } => {
            let dump = cmd_dump_tree(&checkpoint, out.as_deref())?;
            if out.is_none() {
                println!("{}", dump.to_json()?);
            }
        }
        Command::Ablate { run, depths, h_values, budget_steps, jobs } => {
            let cfg = run.resolve()?;
            let plan = AblationPlan { depths, h_values, budget_steps, jobs };
            let rows = cmd_ablate(&cfg, &plan)?;
            print!("{}", mixrts::commands::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
