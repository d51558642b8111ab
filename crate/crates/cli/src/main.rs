use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eqm_cli::config::parse_assignment;
use eqm_cli::{
    cmd_compare_budget, cmd_gen_data, cmd_scan_threshold, cmd_solve, cmd_train, cmd_verify_prop1,
    cmd_warm_start_study, compare_csv, keys_for, CliError, RunConfig,
};

/// Equilibrium-matching action decoder experiments.
#[derive(Parser, Debug)]
#[command(name = "eqm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// Flat key=value configuration file; '#' starts a comment.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (output file for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll the scripted expert and write a demonstration dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Overwrite an existing dataset file.
        #[arg(long)]
        force: bool,
    },
    /// Train an equilibrium or flow field; writes checkpoint.eqmf and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// eqm or flow.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Closed-loop success of expert, equilibrium and flow decoders at a matched evaluation budget.
    CompareBudget {
        #[command(flatten)]
        common: Common,
        /// Comma-separated env names.
        #[arg(long)]
        env: Option<String>,
        /// Comma-separated equilibrium checkpoints, one per env.
        #[arg(long)]
        eqm: Option<String>,
        /// Comma-separated flow checkpoints, one per env.
        #[arg(long)]
        flow: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Closed-loop success and solver iterations across a residual-threshold grid.
    ScanThreshold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        env: Option<String>,
        /// Comma-separated ascending thresholds.
        #[arg(long)]
        taus: Option<String>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Warm versus cold solver initialization on paired episodes.
    WarmStartStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Check the descent and contraction bounds on analytic fields.
    VerifyProp1 {
        #[command(flatten)]
        common: Common,
    },
    /// Decode one chunk for a literal condition; writes chunk.csv and trace.csv.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated condition features.
        #[arg(long)]
        cond: Option<String>,
        /// cold or zero.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut v = common
            .set
            .iter()
            .map(|s| parse_assignment(s))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(s) = common.seed {
            v.push(("seed".into(), s.to_string()));
        }
        if let Some(o) = &common.out {
            v.push(("out".into(), o.display().to_string()));
        }
        Ok(Self(v))
    }

    fn opt<T: ToString>(mut self, key: &str, value: &Option<T>) -> Self {
        if let Some(v) = value {
            self.0.push((key.into(), v.to_string()));
        }
        self
    }

    fn path(self, key: &str, value: &Option<PathBuf>) -> Self {
        let shown = value.as_ref().map(|p| p.display().to_string());
        self.opt(key, &shown)
    }
}

fn resolve(name: &str, common: &Common, overrides: Overrides) -> Result<RunConfig, CliError> {
    let keys = keys_for(name).expect("subcommand has a key table");
    RunConfig::resolve(name, keys, common.config.as_deref(), &overrides.0)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            common,
            env,
            episodes,
            force,
        } => {
            let force = force.then_some(true);
            let o = Overrides::new(&common)?.opt("env", &env).opt("episodes", &episodes).opt("force", &force);
            let out = cmd_gen_data(&resolve("gen-data", &common, o)?)?;
            println!("wrote {} records to {}", out.records, out.path.display());
        }
        Command::Train {
            common,
            dataset,
            objective,
            steps,
        } => {
            let o = Overrides::new(&common)?
                .path("dataset", &dataset)
                .opt("objective", &objective)
                .opt("steps", &steps);
            let out = cmd_train(&resolve("train", &common, o)?)?;
            match out.losses.last() {
                Some(l) => println!("trained {} steps, final loss {l}", out.losses.len()),
                None => println!("wrote initial checkpoint"),
            }
            println!("checkpoint: {}", out.checkpoint_path.display());
        }
        Command::CompareBudget {
            common,
            env,
            eqm,
            flow,
            budget,
            episodes,
        } => {
            let o = Overrides::new(&common)?
                .opt("env", &env)
                .opt("eqm", &eqm)
                .opt("flow", &flow)
                .opt("budget", &budget)
                .opt("episodes", &episodes);
            let rows = cmd_compare_budget(&resolve("compare-budget", &common, o)?)?;
            print!("{}", compare_csv(&rows));
        }
        Command::ScanThreshold {
            common,
            checkpoint,
            env,
            taus,
            max_iters,
            episodes,
        } => {
            let o = Overrides::new(&common)?
                .path("checkpoint", &checkpoint)
                .opt("env", &env)
                .opt("taus", &taus)
                .opt("max_iters", &max_iters)
                .opt("episodes", &episodes);
            let out = cmd_scan_threshold(&resolve("scan-threshold", &common, o)?)?;
            print!("{}", out.to_csv());
            println!("success non-monotone in tau: {}", out.success_non_monotone);
        }
        Command::WarmStartStudy {
            common,
            checkpoint,
            env,
            tau,
            episodes,
        } => {
            let o = Overrides::new(&common)?
                .path("checkpoint", &checkpoint)
                .opt("env", &env)
                .opt("tau", &tau)
                .opt("episodes", &episodes);
            let out = cmd_warm_start_study(&resolve("warm-start-study", &common, o)?)?;
            println!("cold median {} success {}", out.cold_median, out.cold_success);
            println!("warm median {} success {}", out.warm_median, out.warm_success);
            println!(
                "paired cycles {}: warm <= cold in {:.3}, median ratio {:.3}",
                out.pairs.len(),
                out.warm_le_cold_fraction(),
                out.paired_median_ratio()
            );
        }
        Command::VerifyProp1 { common } => {
            let o = Overrides::new(&common)?;
            let suite = cmd_verify_prop1(&resolve("verify-prop1", &common, o)?)?;
            print!("{}", suite.render());
        }
        Command::Solve {
            common,
            checkpoint,
            cond,
            init,
            tau,
            max_iters,
        } => {
            let o = Overrides::new(&common)?
                .path("checkpoint", &checkpoint)
                .opt("cond", &cond)
                .opt("init", &init)
                .opt("tau", &tau)
                .opt("max_iters", &max_iters);
            let out = cmd_solve(&resolve("solve", &common, o)?)?;
            println!(
                "stopped at k = {} ({:?}), final residual {}",
                out.trace.iterations,
                out.trace.stop_reason,
                out.trace.residuals.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
