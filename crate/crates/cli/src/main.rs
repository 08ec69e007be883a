//! `plain` command-line runner.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plain::dataset::{
    generate_synthetic, load_dataset, save_dataset, synthesize_pml, LabelStats, SynthConfig,
    SyntheticSpec,
};
use plain::experiment::{
    ablation_table, run_ablation, run_cv, run_grid, run_timing, run_train, write_ablation_outputs,
    write_cv_outputs, write_timing_csv, write_train_outputs, ExperimentConfig, RunResult,
};
use plain::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "plain", version, about = "Partial multi-label learning with label propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inject r false-positive candidates into a clean dataset.
    Synth {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long = "out", value_name = "FILE")]
        output: PathBuf,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a clean synthetic multi-label dataset.
    Generate {
        #[arg(long = "out", value_name = "FILE")]
        output: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        labels: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the whole dataset.
    Train {
        /// Held-out file evaluated after every epoch.
        #[arg(long, value_name = "FILE")]
        test: Option<PathBuf>,
        /// Where to save the trained network.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Cross-validate one variant.
    Cv {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Cross-validate the full method and its three ablations.
    Ablate {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Time graph building, propagation and training on one or more files.
    Timing {
        /// Datasets to time; defaults to the configured one.
        files: Vec<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Grid search over alpha, beta and eta.
    Grid {
        #[command(flatten)]
        opts: Overrides,
    },
}

macro_rules! overrides {
    ($($key:ident),* $(,)?) => {
        /// `--config FILE` plus one flag per configuration key.
        #[derive(Args)]
        struct Overrides {
            /// Flat key=value configuration file.
            #[arg(long, value_name = "FILE")]
            config: Option<PathBuf>,
            $(
                #[arg(long = stringify!($key), value_name = "VALUE")]
                $key: Option<String>,
            )*
        }

        impl Overrides {
            fn resolve(&self) -> plain::Result<ExperimentConfig> {
                let mut cfg = match &self.config {
                    Some(path) => {
                        let text = fs::read_to_string(path).map_err(|e| {
                            Error::InvalidConfig(format!("{}: {e}", path.display()))
                        })?;
                        ExperimentConfig::parse(&text)?
                    }
                    None => ExperimentConfig::default(),
                };
                $(
                    if let Some(v) = &self.$key {
                        cfg.set(stringify!($key), v)?;
                    }
                )*
                Ok(cfg)
            }
        }
    };
}

overrides!(
    dataset,
    variant,
    k,
    rho,
    alpha,
    beta,
    eta,
    gamma,
    steps,
    lr,
    weight_decay,
    loss,
    epochs,
    batch_size,
    hidden,
    folds,
    seed,
    r,
    normalize,
    normalize_features,
    mse_on_logits,
    propagate_on_logits,
    label_graph_self_loops,
    resample_per_fold,
    grid,
    threshold,
    jobs,
    out_dir,
    dump_graphs,
);

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn require_dataset(cfg: &ExperimentConfig) -> plain::Result<()> {
    if cfg.dataset.as_os_str().is_empty() {
        return Err(Error::InvalidConfig("no dataset given (set dataset=...)".into()));
    }
    Ok(())
}

fn print_run(r: &RunResult) {
    match &r.aggregate {
        Some(a) => println!(
            "{}: ranking_loss {:.4}±{:.4}  average_precision {:.4}±{:.4}  hamming_loss {:.4}±{:.4}  ({} folds)",
            r.variant,
            a.ranking_loss.mean,
            a.ranking_loss.std,
            a.average_precision.mean,
            a.average_precision.std,
            a.hamming_loss.mean,
            a.hamming_loss.std,
            r.folds.len()
        ),
        None => println!("{}: no completed folds", r.variant),
    }
}

/// Turns a partially failed run into its error exit after outputs are saved.
fn finish(runs: &[RunResult]) -> Result<(), (ErrorKind, String)> {
    match runs.iter().find(|r| r.truncated) {
        Some(r) => Err((
            r.failure_kind().unwrap_or(ErrorKind::Data),
            format!("{}: {}", r.variant, r.error.as_deref().unwrap_or("fold failed")),
        )),
        None => Ok(()),
    }
}

fn run(cmd: Command) -> Result<(), (ErrorKind, String)> {
    let fail = |e: Error| (e.kind(), e.to_string());
    match cmd {
        Command::Synth { input, output, r, seed } => {
            let clean = load_dataset(&input, false).map_err(fail)?;
            let pml = synthesize_pml(&clean, &SynthConfig { r, seed }).map_err(fail)?;
            save_dataset(&pml, &output).map_err(fail)?;
            let s = LabelStats::of(&pml);
            println!(
                "mean candidates {:.3}, mean true labels {:.3}, rows with every label {}",
                s.mean_candidates, s.mean_truth, s.full_rows
            );
            Ok(())
        }
        Command::Generate { output, n, d, labels, noise, seed } => {
            let data = generate_synthetic(&SyntheticSpec { n, d, labels, noise, seed }).map_err(fail)?;
            save_dataset(&data, &output).map_err(fail)
        }
        Command::Train { test, checkpoint, opts } => {
            let cfg = opts.resolve().map_err(fail)?;
            require_dataset(&cfg).map_err(fail)?;
            let test = test
                .map(|p| load_dataset(p, cfg.normalize_features))
                .transpose()
                .map_err(fail)?;
            let run = run_train(&cfg, test.as_ref()).map_err(fail)?;
            write_train_outputs(&cfg, &run, &cfg.out_dir).map_err(fail)?;
            if let Some(path) = checkpoint {
                save_checkpoint(&run.state.model, &path).map_err(fail)?;
            }
            if let Some(r) = run.report {
                println!(
                    "test: ranking_loss {:.4}  average_precision {:.4}  hamming_loss {:.4}",
                    r.ranking_loss, r.average_precision, r.hamming_loss
                );
            }
            Ok(())
        }
        Command::Cv { opts } => {
            let cfg = opts.resolve().map_err(fail)?;
            require_dataset(&cfg).map_err(fail)?;
            let result = run_cv(&cfg).map_err(fail)?;
            write_cv_outputs(&result, &cfg.out_dir).map_err(fail)?;
            print_run(&result);
            finish(std::slice::from_ref(&result))
        }
        Command::Ablate { opts } => {
            let cfg = opts.resolve().map_err(fail)?;
            require_dataset(&cfg).map_err(fail)?;
            let results = run_ablation(&cfg).map_err(fail)?;
            write_ablation_outputs(&results, &cfg.out_dir).map_err(fail)?;
            print!("{}", ablation_table(&results));
            finish(&results)
        }
        Command::Timing { files, opts } => {
            let cfg = opts.resolve().map_err(fail)?;
            let files = if files.is_empty() {
                require_dataset(&cfg).map_err(fail)?;
                vec![cfg.dataset.clone()]
            } else {
                files
            };
            let mut reports = Vec::new();
            for file in files {
                let c = ExperimentConfig {
                    dataset: file,
                    ..cfg.clone()
                };
                reports.push(run_timing(&c).map_err(fail)?);
            }
            fs::create_dir_all(&cfg.out_dir).map_err(|e| fail(e.into()))?;
            let file = File::create(cfg.out_dir.join("timing.csv")).map_err(|e| fail(e.into()))?;
            write_timing_csv(&reports, BufWriter::new(file)).map_err(fail)?;
            write_timing_csv(&reports, std::io::stdout().lock()).map_err(fail)
        }
        Command::Grid { opts } => {
            let cfg = opts.resolve().map_err(fail)?;
            require_dataset(&cfg).map_err(fail)?;
            let grid = run_grid(&cfg).map_err(fail)?;
            for p in &grid.points {
                println!(
                    "alpha={} beta={} eta={} average_precision={:.4}",
                    p.hyper.alpha, p.hyper.beta, p.hyper.eta, p.average_precision
                );
            }
            let b = grid.best.hyper;
            println!("best: alpha={} beta={} eta={}", b.alpha, b.beta, b.eta);
            Ok(())
        }
    }
}

fn save_checkpoint(model: &plain::network::Mlp, path: &Path) -> plain::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    model.write_checkpoint(&mut w)?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((kind, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(kind))
        }
    }
}
