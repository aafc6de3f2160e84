use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdtm::data::Split;
use sdtm::harness::commands::{inspect_laplacian, inspect_wavelet, SWEEP_LAMBDAS};
use sdtm::harness::{
    cmd_eval, cmd_generate, cmd_sweep, cmd_train, run_selftest, EvalOptions, RunConfig,
};
use sdtm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sdtm",
    version,
    about = "Few-shot image generation with textural modulation and structural/frequency discriminators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root, or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    no_texmod: bool,
    #[arg(long)]
    no_structd: bool,
    #[arg(long)]
    no_fred: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_env()?;
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(d) = &self.data {
            cfg.set("data", d)?;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(n) = self.iters {
            cfg.total_iters = n;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        cfg.use_texmod &= !self.no_texmod;
        cfg.use_structd &= !self.no_structd;
        cfg.use_fred &= !self.no_fred;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images from 1..K conditioning images of one category.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Proxy metrics of a checkpoint on the seen or unseen split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "unseen")]
        split: Split,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        #[arg(long, default_value_t = 4)]
        per_episode: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where a synthetic corpus is materialized (defaults next to the checkpoint).
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Run the invariant battery.
    Selftest {
        /// Inject a known defect (`haar-normalization`).
        #[arg(long)]
        fault: Option<String>,
    },
    /// Write the Laplacian magnitude of an image.
    InspectLaplacian { input: PathBuf, output: PathBuf },
    /// Write the four Haar bands of an image.
    InspectWavelet { input: PathBuf, out_dir: PathBuf },
    /// Train one short run per (lambda_str, lambda_fre) pair.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 100)]
        cell_iters: u64,
        #[arg(long, default_value_t = 8)]
        eval_episodes: usize,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            let outcome = cmd_train(&cfg, resume.as_deref())?;
            if let Some(r) = &outcome.last_report {
                println!("{}", r.log_line());
            }
            println!("checkpoint={}", outcome.final_checkpoint.display());
        }
        Command::Generate {
            checkpoint,
            inputs,
            count,
            seed,
            out,
        } => {
            for path in cmd_generate(&checkpoint, &inputs, count, seed, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            episodes,
            per_episode,
            seed,
            workdir,
        } => {
            let mut opts = EvalOptions::new(checkpoint);
            opts.data = data;
            opts.split = split;
            opts.n_episodes = episodes;
            opts.per_episode = per_episode;
            opts.seed = seed;
            if let Some(w) = workdir {
                opts.workdir = w;
            }
            print!("{}", cmd_eval(&opts)?.to_text());
        }
        Command::Selftest { fault } => {
            let checks = run_selftest(fault.as_deref())?;
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
        Command::InspectLaplacian { input, output } => inspect_laplacian(&input, &output)?,
        Command::InspectWavelet { input, out_dir } => {
            for path in inspect_wavelet(&input, &out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Sweep {
            run,
            cell_iters,
            eval_episodes,
        } => {
            let cfg = run.resolve()?;
            for row in cmd_sweep(&cfg, &SWEEP_LAMBDAS, cell_iters, eval_episodes)? {
                println!("{}", row.line());
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
