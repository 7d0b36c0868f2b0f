use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mistlab_cli::pipeline::{self, AblateOptions, RunOptions, TrainOptions};
use mistlab_cli::snapshot::FloatWidth;
use mistlab_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "mistlab", version, about = "MIST training, membership inference attacks and low-FPR metrics")]
struct Cli {
    /// Experiment config (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 forces the serial path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output root; results go to `<out>/<experiment>/`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Store snapshots with 64-bit floats instead of 32-bit.
    #[arg(long = "f64", global = true)]
    full_width: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the dataset and its split as CSV.
    GenData,
    /// Train the target model.
    Train {
        /// Sweep the submodel count over `a..b` (inclusive) by validation accuracy.
        #[arg(long = "sweep-C", value_parser = parse_range)]
        sweep_c: Option<RangeInclusive<usize>>,
        /// Pick the largest λ in `lambda_grid` within 1% validation accuracy of λ = 0.
        #[arg(long)]
        tune_lambda: bool,
    },
    /// Train shadow models and write the scores file.
    Shadow,
    /// Run the configured attacks against the trained target.
    Attack,
    /// No defense vs phase 1 only vs phase 1 + 2, for each configured variant.
    Ablate {
        #[arg(long)]
        tune_lambda: bool,
    },
    /// Leave-one-out invariance oracle on a micro dataset.
    Oracle,
    /// Merge the per-experiment report.csv files under `--out`.
    Report,
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().trim_start_matches('=').parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a == 0 || a > b {
        return Err(format!("need 1 <= a <= b, got {a}..{b}"));
    }
    Ok(a..=b)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let run = RunOptions {
        parallel: threads > 1,
        width: if cli.full_width { FloatWidth::F64 } else { FloatWidth::F32 },
    };
    let out = &cli.out;
    match cli.command {
        Command::GenData => {
            let (data, split) = pipeline::gen_data(&cfg, out)?;
            println!("wrote {} and {}", data.display(), split.display());
        }
        Command::Train { sweep_c, tune_lambda } => {
            let opts = TrainOptions { sweep_c, tune_lambda };
            let t = pipeline::train(&cfg, out, &opts, &run)?;
            for (c, acc) in &t.sweep {
                println!("C={c} val_acc={acc:.4}");
            }
            for (l, acc) in &t.tuning {
                println!("lambda={l} val_acc={acc:.4}");
            }
            if let Some(c) = t.selected_c {
                println!("selected C={c}");
            }
            if let Some(l) = t.selected_lambda {
                println!("selected lambda={l}");
            }
            match t.test_accuracy {
                Some(a) => println!("test_acc={a:.4}"),
                None => println!("no test split"),
            }
        }
        Command::Shadow => {
            let ens = pipeline::shadow(&cfg, out, &run)?;
            println!("trained {} shadows, {} observations", ens.shadows(), ens.observations.len());
        }
        Command::Attack => {
            for r in pipeline::attack(&cfg, out)? {
                let at: Vec<String> = r
                    .at
                    .iter()
                    .map(|e| format!("plr@{}={:.3}", e.target_fpr, e.plr))
                    .collect();
                println!("{} auc={:.4} {}", r.attack_name, r.auc, at.join(" "));
            }
        }
        Command::Ablate { tune_lambda } => {
            for r in pipeline::ablate(&cfg, out, &AblateOptions { tune_lambda }, &run)? {
                let acc = r.test_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
                println!(
                    "{} {} C={} lambda={} test_acc={acc} lira_auc={:.4}",
                    r.arm, r.variant, r.submodels, r.lambda, r.lira.auc
                );
            }
        }
        Command::Oracle => {
            for r in pipeline::oracle(&cfg, out)? {
                println!(
                    "lambda={} mean_gap={:.6} duplicate_gap={:.3e}",
                    r.lambda, r.report.mean_gap, r.duplicate_gap
                );
            }
        }
        Command::Report => {
            println!("wrote {}", pipeline::report(out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mistlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
