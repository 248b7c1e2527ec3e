use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pushflow::experiment::{self, GradcheckArgs, TheoryCase, GRADCHECK_TOL};
use pushflow::exec;

#[derive(Parser)]
#[command(name = "pushflow", version, about = "Particle gradient flows for distributional inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config (or a preset name) and write its outputs.
    Run { config: PathBuf },
    /// Compare adjoint gradients with central finite differences.
    Gradcheck {
        /// linear, elliptic1d or elliptic2d
        forward: String,
        /// Evaluation point, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        u: Option<Vec<f64>>,
        #[arg(long)]
        h: Option<f64>,
        /// Matrix for `linear`, rows separated by ';' and entries by ','.
        #[arg(long, allow_hyphen_values = true)]
        matrix: Option<String>,
        #[arg(long, default_value_t = 32)]
        n_cells: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a linear well-posedness check and print its report as JSON.
    Theory {
        /// under, over or gd
        case: String,
        config: PathBuf,
    },
    /// List the shipped presets.
    Presets,
}

fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>, String> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad matrix entry '{x}': {e}")))
                .collect()
        })
        .collect()
}

fn fail(err: pushflow::Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(experiment::exit_code(&err) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("PUSHFLOW_THREADS") {
        match n.trim().parse::<usize>() {
            Ok(n) => exec::init_threads(n),
            Err(_) => {
                eprintln!("error: PUSHFLOW_THREADS must be a nonnegative integer");
                return ExitCode::from(2);
            }
        }
    }
    match cli.command {
        Command::Run { config } => match experiment::cmd_run(&config) {
            Ok(out) => {
                let cfg = experiment::load_config(&config).expect("loaded once already");
                println!("wrote {}", cfg.output_dir.display());
                for (name, v) in &out.report.verdicts {
                    println!("{name}: {} (value {:.6}, threshold {})", if v.pass { "pass" } else { "FAIL" }, v.value, v.threshold);
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Gradcheck { forward, u, h, matrix, n_cells, seed } => {
            let matrix = match matrix.as_deref().map(parse_matrix).transpose() {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let args = GradcheckArgs { forward, u, h, matrix, n_cells, seed };
            match experiment::cmd_gradcheck(&args) {
                Ok(g) => {
                    println!("probes: {}", g.probes);
                    println!("max relative error: {:.3e}", g.max_rel_err);
                    if g.max_rel_err < GRADCHECK_TOL {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Theory { case, config } => {
            let case: TheoryCase = match case.parse() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match experiment::cmd_theory(case, &config) {
                Ok(report) => {
                    println!("{}", report.to_json());
                    if report.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Presets => {
            for name in experiment::presets::names() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
    }
}
