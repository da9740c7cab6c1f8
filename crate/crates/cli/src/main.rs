use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lmk::harness::{
    compare, noise_sweep, run_experiment, verify_suite, ConfigOverrides, ExperimentSpec, SolverKind, VerifyInput,
};
use lmk::kaczmarz::AlphaMode;
use lmk::problems::PROBLEM_IDS;

const DEFAULT_OUT_DIR: &str = "lmk-out";

#[derive(Parser)]
#[command(name = "lmk", version, about = "Loping Levenberg-Marquardt-Kaczmarz experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment and write its artifacts.
    Run(SpecArgs),
    /// Run l-LMK and l-LK on the same instance and compare.
    Compare(SpecArgs),
    /// Rerun l-LMK at decreasing noise amplitudes along a fixed direction.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.04, 0.02, 0.01, 0.005])]
        amplitudes: Vec<f64>,
    },
    /// Check the invariants of a fresh run or of stored run records.
    Verify {
        #[command(flatten)]
        spec: SpecArgs,
        /// `run-record.json` files; when given, nothing is rerun.
        #[arg(long, num_args = 1..)]
        records: Vec<PathBuf>,
    },
    /// List the registered problems.
    ListProblems,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Llmk,
    LmkExact,
    Llk,
}

impl From<SolverArg> for SolverKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Llmk => SolverKind::Llmk,
            SolverArg::LmkExact => SolverKind::LmkExact,
            SolverArg::Llk => SolverKind::Llk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaModeArg {
    Fixed,
    ResidualMatched,
}

impl From<AlphaModeArg> for AlphaMode {
    fn from(m: AlphaModeArg) -> Self {
        match m {
            AlphaModeArg::Fixed => AlphaMode::Fixed,
            AlphaModeArg::ResidualMatched => AlphaMode::ResidualMatched,
        }
    }
}

/// Experiment spec from an optional TOML file, with flags taking precedence.
#[derive(Args)]
struct SpecArgs {
    /// TOML experiment spec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Relative noise level, `δ_i = noise·‖y_i‖`.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    max_cycles: Option<usize>,
    #[arg(long)]
    cg_iters: Option<usize>,
    #[arg(long)]
    cg_tol: Option<f64>,
    #[arg(long, value_enum)]
    alpha_mode: Option<AlphaModeArg>,
    /// Start each inner CG from the previous correction of the same equation.
    #[arg(long)]
    warm_start: bool,
    #[arg(long, env = "LMK_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

impl SpecArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_file(path)?,
            None => {
                let problem = self
                    .problem
                    .clone()
                    .context("either --config or --problem is required")?;
                ExperimentSpec::new(problem, SolverKind::Llmk, 0.01, 0)
            }
        };
        if let Some(p) = &self.problem {
            spec.problem = p.clone();
        }
        if let Some(s) = self.solver {
            spec.solver = s.into();
        }
        if let Some(n) = self.noise {
            spec.rel_noise = n;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        spec.overrides.merge(&ConfigOverrides {
            alpha: self.alpha,
            tau: self.tau,
            q: self.q,
            max_cycles: self.max_cycles,
            cg_iters: self.cg_iters,
            cg_tol: self.cg_tol,
            alpha_mode: self.alpha_mode.map(Into::into),
            warm_start: self.warm_start.then_some(true),
            ..ConfigOverrides::default()
        });
        spec.validate()?;
        Ok(spec)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

fn print_artifacts(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn print_verify(reports: &[(String, lmk::harness::SuiteReport)]) -> bool {
    let mut ok = true;
    for (label, report) in reports {
        println!("{label}");
        print!("{report}");
        ok &= report.passed();
    }
    ok
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let out = run_experiment(&args.spec()?, Some(&args.out_dir()))?;
            print!("{}", out.report);
            print_artifacts(&out.artifacts);
        }
        Command::Compare(args) => {
            let out = compare(&args.spec()?, Some(&args.out_dir()))?;
            print!("{}", out.report);
            print_artifacts(&out.artifacts);
        }
        Command::Sweep { spec, amplitudes } => {
            let out_dir = spec.out_dir();
            let report = noise_sweep(&spec.spec()?, &amplitudes, Some(&out_dir))?;
            print!("{report}");
        }
        Command::Verify { spec, records } => {
            let input = if records.is_empty() {
                VerifyInput::Spec(spec.spec()?)
            } else {
                if spec.config.is_some() || spec.problem.is_some() {
                    bail!("--records cannot be combined with a spec");
                }
                VerifyInput::Records(records)
            };
            return Ok(print_verify(&verify_suite(&input)?));
        }
        Command::ListProblems => {
            for (id, description) in PROBLEM_IDS {
                println!("{id:<26} {description}");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
