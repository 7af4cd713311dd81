use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use recipcrystal::config::RunConfig;
use recipcrystal::formats::{synth_records, write_jsonl};
use recipcrystal::preprocess::cmd_preprocess;
use recipcrystal::recover::cmd_recover;
use recipcrystal::sample::{cmd_sample, SampleArgs};
use recipcrystal::screen::cmd_screen;
use recipcrystal::train::{cmd_train, TrainArgs, TrainKind};
use recipcrystal::{init_threads, CliError};
use recipcrystal_core::Truncation;

#[derive(Parser)]
#[command(name = "recipcrystal", version, about = "Reciprocal-space crystal generation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TruncationArg {
    Cubic,
    Spherical,
}

#[derive(Subcommand)]
enum Command {
    /// Snap XTL-JSON crystals to a grid and attach Fourier coefficients.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        denominator: u32,
        #[arg(long, default_value_t = 4)]
        jmax: u32,
        #[arg(long, value_enum, default_value = "cubic")]
        truncation: TruncationArg,
    },
    /// Run exact recovery over an archive; writes a JSON report and a CSV.
    Screen {
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recover from a truncated wave set; defaults to the stored one.
        #[arg(long)]
        jmax: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the autoencoder or the latent diffuser.
    Train {
        #[arg(value_enum)]
        kind: TrainKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Metrics file (JSON lines); stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Autoencoder checkpoint; required for diffusion.
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Stop once this many optimizer steps have been taken in total.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Generate structures from trained checkpoints.
    Sample {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long, short = 'n', default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        denominator: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Write seeded synthetic crystals as XTL-JSON lines.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        max_species: usize,
        #[arg(long, default_value_t = 3)]
        max_atoms: usize,
        #[arg(long, default_value_t = 24)]
        denominator: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover coordinates from coefficient records.
    Recover {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.cmd {
        Command::Preprocess { input, out, denominator, jmax, truncation } => {
            let t = match truncation {
                TruncationArg::Cubic => Truncation::Cubic,
                TruncationArg::Spherical => Truncation::Spherical,
            };
            print_json(&cmd_preprocess(&input, &out, denominator, jmax, t)?);
        }
        Command::Screen { archive, out, jmax, seed } => {
            print_json(&cmd_screen(&archive, &out, jmax, seed)?.aggregate);
        }
        Command::Train { kind, config, corpus, seed, out, metrics, resume, vae, until } => {
            let config = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let args = TrainArgs { kind, config, corpus, seed, out, metrics, resume, vae, until };
            let step = cmd_train(&args)?;
            eprintln!("trained to step {step}");
        }
        Command::Sample { vae, diffusion, n, steps, seed, denominator, out, stats } => {
            let args = SampleArgs {
                vae: &vae,
                diffusion: &diffusion,
                n,
                steps,
                seed,
                denominator,
                out: &out,
                stats: stats.as_deref(),
            };
            let s = cmd_sample(&args)?;
            eprintln!("{} recovered, {} rejected", s.recovered, s.rejected);
        }
        Command::Synth { count, seed, max_species, max_atoms, denominator, out } => {
            let records = synth_records(count, seed, max_species, max_atoms, denominator)?;
            write_jsonl(&out, &records)?;
        }
        Command::Recover { input, out, seed } => {
            let res = cmd_recover(&input, &out, seed)?;
            let ok = res.iter().filter(|r| r.success).count();
            eprintln!("{ok} of {} recovered", res.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
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
