use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use addsep::evaluate::parse_methods;
use addsep::pipeline::{
    cmd_evaluate, cmd_generate, cmd_report, cmd_train, EvaluateOptions, Overrides, RunConfig, RunDir,
};
use addsep::selftest::{run_selftest, SelftestOptions};

/// Test functions for additive separability through trained surrogates.
#[derive(Parser, Debug)]
#[command(name = "addsep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write config, corpus manifest and training data into the run directory.
    Generate {
        /// JSON run config; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one surrogate per function, skipping ones already trained.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score every function with the selected methods.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Score the analytic functions instead of their surrogates.
        #[arg(long)]
        oracle: bool,
        /// Skip functions without a trained model.
        #[arg(long)]
        partial: bool,
    },
    /// Print accuracy and timing tables for an evaluated run.
    Report {
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods and ranges, e.g. `1,5-8`, or `all`.
    #[arg(long, value_parser = methods_arg)]
    methods: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

fn methods_arg(s: &str) -> Result<String, String> {
    parse_methods(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            methods: self.methods.clone(),
            workers: self.workers,
        }
    }
}

fn run(cmd: Command) -> addsep::Result<bool> {
    match cmd {
        Command::Generate { config, common } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.apply(&common.overrides())?;
            let corpus = cmd_generate(&cfg, &RunDir::new(&common.out))?;
            println!("generated {} functions in {}", corpus.len(), common.out.display());
        }
        Command::Train { common } => {
            let s = cmd_train(&RunDir::new(&common.out), &common.overrides())?;
            println!("trained {}, skipped {}, failed {}", s.trained, s.skipped, s.failed);
            for row in s.log.iter().filter(|r| r.status != "ok") {
                eprintln!("{}: {}", row.function_id, row.status);
            }
        }
        Command::Evaluate {
            common,
            oracle,
            partial,
        } => {
            let rep = cmd_evaluate(
                &RunDir::new(&common.out),
                &common.overrides(),
                EvaluateOptions { oracle, partial },
            )?;
            for s in &rep.summaries {
                println!(
                    "method {}: accuracy {:.4} threshold {:.4e}",
                    s.method, s.accuracy, s.threshold
                );
            }
            for f in &rep.failures {
                eprintln!("{} method {}: {}", f.function_id, f.method, f.error);
            }
        }
        Command::Report { out } => print!("{}", cmd_report(&RunDir::new(out))?),
        Command::Selftest { seed } => {
            let results = run_selftest(&SelftestOptions {
                seed,
                ..Default::default()
            });
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!(
                    "{} {:<15} {:<52} {:>7.2}s  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.module,
                    r.name,
                    r.seconds,
                    r.detail
                );
            }
            println!("{} checks, {} failed", results.len(), failed);
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
