use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distgap::experiments::{
    emit_plot_data, run_audit, run_bounds, run_gap_scan, run_property_suite, run_simulate, write_audit,
    write_bounds, write_properties, write_report, write_simulation, write_trajectory, CheckStatus, RunConfig,
    SimPolicy,
};
use distgap::Result;

#[derive(Parser)]
#[command(name = "distgap", version, about = "Full-information versus distributed control of N interacting agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Audit the instance's assumptions at every N.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Value functions, distributed upper bounds and the gap for every N.
    GapScan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Run every property check; nonzero exit on any failure.
    Properties {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Constants of the gap bound for every N.
    Bounds {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo cost of one policy for every N.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "zero")]
        policy: SimPolicy,
        /// Write the recorded states of the first N to this CSV file.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Recording stride in steps for the trajectory.
        #[arg(long, default_value_t = 1)]
        record_every: usize,
        /// Paths included in the trajectory file.
        #[arg(long, default_value_t = 10)]
        dump_paths: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated agent counts, e.g. 2,4,8,16.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Particles in the flow ensemble.
    #[arg(long)]
    paths: Option<usize>,
    /// Fresh paths for policy evaluation.
    #[arg(long)]
    eval_paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Run the values of N concurrently.
    #[arg(long)]
    parallel: bool,
    /// Fill the wall_ms column (makes reruns differ).
    #[arg(long)]
    record_timings: bool,
}

impl Common {
    fn load(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(l) = &self.n_list {
            cfg.n_list = l.clone();
        }
        if let Some(p) = self.paths {
            cfg.paths = p;
        }
        if let Some(p) = self.eval_paths {
            cfg.eval_paths = p;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        cfg.parallel |= self.parallel;
        cfg.record_timings |= self.record_timings;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_written(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Audit { common, seed } => {
            let cfg = common.load(Some(seed))?;
            let audits = run_audit(&cfg)?;
            print_written(&write_audit(&audits, &cfg.output_dir)?);
            let mut code = 0;
            for a in &audits {
                for f in a.report.failures() {
                    println!("N={}: FAIL {} (worst {}, declared {})", a.n, f.name, f.worst, f.declared);
                    code = 1;
                }
            }
            println!("audit {}", if code == 0 { "passed" } else { "failed" });
            Ok(code)
        }
        Command::GapScan { common, seed } => {
            let cfg = common.load(Some(seed))?;
            let report = run_gap_scan(&cfg)?;
            print_written(&write_report(&report, &cfg.output_dir)?);
            print_written(&emit_plot_data(&report, &cfg.output_dir)?);
            for r in &report.records {
                match (&r.error, r.gap) {
                    (Some(e), _) => println!("N={}: failed: {e}", r.n),
                    (None, Some(g)) => println!("N={}: gap {} ± {}", r.n, g.value, g.std_err),
                    (None, None) => println!("N={}: no gap", r.n),
                }
            }
            if let Some(s) = report.slope {
                println!("slope of ln(gap) on ln(N): {s}");
            }
            Ok(report.exit_code())
        }
        Command::Properties { common, seed } => {
            let cfg = common.load(Some(seed))?;
            let summary = run_property_suite(&cfg)?;
            print_written(&write_properties(&summary, &cfg.output_dir)?);
            if summary.aborted {
                println!("audit failed; property checks skipped");
            }
            for c in summary.checks.iter().filter(|c| c.failed()) {
                println!("N={}: FAIL {} (worst {}, bound {}): {}", c.n, c.name, c.worst, c.bound, c.note);
            }
            let passed = summary.checks.iter().filter(|c| c.status == CheckStatus::Pass).count();
            println!("{passed} of {} checks passed", summary.checks.len());
            Ok(summary.exit_code())
        }
        Command::Bounds { common } => {
            let cfg = common.load(None)?;
            let out = run_bounds(&cfg)?;
            print_written(&write_bounds(&out, &cfg.output_dir)?);
            for b in &out.reports {
                println!(
                    "N={}: K_1 {} K_f {} K_g {} rhs {}",
                    b.n_agents, b.k1, b.k_f, b.k_g_t, b.rhs_theorem
                );
            }
            Ok(0)
        }
        Command::Simulate {
            common,
            seed,
            policy,
            trajectory,
            record_every,
            dump_paths,
        } => {
            let cfg = common.load(Some(seed))?;
            let (records, traj) = run_simulate(&cfg, policy, trajectory.as_ref().map(|_| record_every))?;
            let path = cfg.output_dir.join("simulate.csv");
            write_simulation(&records, &path)?;
            print_written(&[path]);
            if let (Some(p), Some(t)) = (trajectory, traj) {
                write_trajectory(&t, dump_paths, &p)?;
                print_written(&[p]);
            }
            for r in &records {
                println!("N={}: cost {} ± {}", r.n, r.value.value, r.value.std_err);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
