use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use s3pool::harness::bench::cmd_bench;
use s3pool::harness::demo::{cmd_demo_downsample, DemoMode};
use s3pool::harness::sweep::{cmd_sweep_grid, sweep_csv};
use s3pool::harness::verify::{cmd_verify, off_by_one_weights, Level, VerifyOptions};
use s3pool::harness::{cmd_eval, cmd_train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "s3pool", version, about = "S3Pool pooling experiments")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DownsampleMode {
    Uniform,
    Stochastic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VerifyLevel {
    Fast,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fault {
    /// Shift expectation weights by one cell.
    ExpectationOffByOne,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Downsample a PGM/PPM image uniformly or stochastically.
    DemoDownsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2)]
        s: usize,
        /// Grid size; defaults to the image width.
        #[arg(long)]
        g: Option<usize>,
        #[arg(long, value_enum, default_value_t = DownsampleMode::Stochastic)]
        mode: DownsampleMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the self-check suite.
    Verify {
        #[arg(long, value_enum, default_value_t = VerifyLevel::Fast)]
        level: VerifyLevel,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Train a model; writes metrics.csv, results.json and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Test error of a checkpoint on the dataset of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Seconds per epoch for several pooling variants.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "max,zeiler,s3pool-16-8")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Training batches per epoch.
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per grid configuration and seed; seed-averaged table.
    SweepGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2-2,8-8,16-8")]
        grids: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const VERIFY_FAILED: u8 = 1;
const USAGE: u8 = 2;

fn load_config(path: &Path, seed: Option<u64>) -> s3pool::Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn write_out(dir: &Option<PathBuf>, name: &str, text: &str) -> s3pool::Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}

fn run(command: Command) -> s3pool::Result<u8> {
    match command {
        Command::DemoDownsample { input, output, s, g, mode, seed } => {
            let mode = match mode {
                DownsampleMode::Uniform => DemoMode::Uniform,
                DownsampleMode::Stochastic => {
                    let g = match g {
                        Some(g) => g,
                        None => s3pool::data::read_pnm(&input)?.width(),
                    };
                    DemoMode::Stochastic { g }
                }
            };
            let img = cmd_demo_downsample(&input, &output, s, mode, seed)?;
            println!("wrote {} ({}x{})", output.display(), img.width(), img.height());
        }
        Command::Verify { level, seed, inject_fault } => {
            let mut options = VerifyOptions::new(match level {
                VerifyLevel::Fast => Level::Fast,
                VerifyLevel::Full => Level::Full,
            });
            if let Some(seed) = seed {
                options.seed = seed;
            }
            if let Some(Fault::ExpectationOffByOne) = inject_fault {
                options.weights = off_by_one_weights;
            }
            let report = cmd_verify(&options);
            print!("{}", report.table());
            if !report.passed() {
                return Ok(VERIFY_FAILED);
            }
        }
        Command::Train { config, seed, out } => {
            let config = load_config(&config, seed)?;
            let metrics = cmd_train(&config, &out)?;
            print!("{}", metrics.to_csv());
            println!(
                "final train error {:.2}%, test error {:.2}%, {:.3} s/epoch",
                metrics.final_train_error, metrics.final_test_error, metrics.mean_seconds_per_epoch
            );
        }
        Command::Eval { checkpoint, config } => {
            let config = load_config(&config, None)?;
            let error = cmd_eval(&checkpoint, &config)?;
            println!("test error {error}%");
        }
        Command::Bench { config, variants, repeats, batches, seed, out } => {
            let config = load_config(&config, seed)?;
            let report = cmd_bench(&config, &variants, repeats, batches)?;
            let csv = report.to_csv();
            write_out(&out, "bench.csv", &csv)?;
            print!("{csv}");
        }
        Command::SweepGrid { config, grids, seeds, seed, out } => {
            let config = load_config(&config, seed)?;
            let seeds = seeds.unwrap_or_else(|| vec![config.seed]);
            let rows = cmd_sweep_grid(&config, &grids, &seeds)?;
            let csv = sweep_csv(&rows);
            write_out(&out, "sweep.csv", &csv)?;
            print!("{csv}");
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let work = move || match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(USAGE)
        }
    };
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(work),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(USAGE)
            }
        },
        None => work(),
    }
}
