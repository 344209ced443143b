use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use etpd::harness::{run_experiment, ExperimentConfig, ExperimentReport, FinalState, HarnessError};
use etpd::metrics::read_trace_csv;
use etpd::solver::Mode;

#[derive(Parser)]
#[command(name = "etpd", version, about = "Event-triggered distributed primal-dual solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML file.
    Run { config: PathBuf },
    /// Run the randomized scalar benchmark on a ring.
    Benchmark {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n_agents: usize,
        #[arg(long, default_value_t = 0.15)]
        alpha: f64,
        #[arg(long, default_value_t = 1.2)]
        beta: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value_t = 20_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-10)]
        accuracy: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the KKT certificate of a saved final state.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Optional trace to summarize alongside.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EventTriggered,
    Periodic,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::EventTriggered => vec![Mode::EventTriggered],
            ModeArg::Periodic => vec![Mode::Periodic],
            ModeArg::Both => vec![Mode::EventTriggered, Mode::Periodic],
        }
    }
}

fn print_report(report: &ExperimentReport) {
    println!("instance        {}", report.instance);
    println!("kappa_c         {:.6} ({})", report.kappa_c, report.kappa_source);
    println!("step sizes ok   {}", report.step_sizes.ok);
    println!("f*              {:.15e}", report.oracle.objective);
    println!("oracle KKT      {:.3e}", report.oracle.certificate.worst());
    for m in &report.modes {
        println!(
            "{:<16}iters {}  gap {:.3e}  viol {:.3e}  consensus {:.3e}  KKT {:.3e}  C_s {:.2}  C_s@acc {}",
            m.mode.as_str(),
            m.iterations,
            m.final_objective_gap,
            m.final_constraint_violation,
            m.final_dual_consensus,
            m.final_certificate.worst(),
            m.communication.average,
            m.communication
                .at_accuracy
                .map_or_else(|| "not reached".to_string(), |(k, c)| format!("{c:.2} (k={k})")),
        );
    }
    if let Some(r) = report.reduction_vs_periodic {
        println!("reduction       {:.1}%", 100.0 * r);
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print_report(&run_experiment(&cfg)?);
        }
        Command::Benchmark {
            seed,
            n_agents,
            alpha,
            beta,
            mode,
            max_iters,
            accuracy,
            out_dir,
        } => {
            let mut cfg = ExperimentConfig::benchmark(seed, n_agents, out_dir);
            cfg.solver.alpha = alpha;
            cfg.solver.beta = beta;
            cfg.solver.max_iters = max_iters;
            cfg.comparison.modes = mode.modes();
            cfg.comparison.accuracy = accuracy;
            print_report(&run_experiment(&cfg)?);
        }
        Command::Certify { config, state, trace } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (problem, tag) = cfg.build_problem()?;
            let saved = FinalState::load(&state)?;
            if saved.instance != tag {
                log::warn!("state was produced for `{}`, config describes `{tag}`", saved.instance);
            }
            let cert = saved.certify(&problem)?;
            println!("stationarity    {:.3e}", cert.stationarity_residual);
            println!("primal feas.    {:.3e}", cert.primal_feasibility);
            println!("dual feas.      {:.3e}", cert.dual_feasibility);
            println!("complementarity {:.3e}", cert.complementarity);
            if let Some(path) = trace {
                let file = File::open(&path).map_err(|source| HarnessError::Io {
                    path: path.clone(),
                    source,
                })?;
                let rows = read_trace_csv(file)?;
                if let Some(last) = rows.last() {
                    println!(
                        "trace k={}      gap {:.3e}  viol {:.3e}  C_s {:.2}",
                        last.k, last.objective_gap, last.constraint_violation, last.average_broadcasts
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
