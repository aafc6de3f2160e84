//! The CLI commands as library functions.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::metrics::{evaluate_sets, SetMetrics};
use super::RunConfig;
use crate::data::{decode_image, encode_image, sample_episode, Split};
use crate::error::{Error, Result};
use crate::frequency::haar_dwt;
use crate::gan::{generate, StepReport, TrainState};
use crate::structural::laplacian;
use crate::tensor::{Tape, Tensor};

pub const METRICS_LOG: &str = "metrics.log";
pub const FINAL_CHECKPOINT: &str = "final.sdtm";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.sdtm")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub last_report: Option<StepReport>,
}

fn load_reporting(path: &Path) -> Result<super::Loaded> {
    let loaded = load_checkpoint(path)?;
    for name in &loaded.checksum_mismatches {
        eprintln!(
            "warning: {}: checksum mismatch in tensor {name}",
            path.display()
        );
    }
    Ok(loaded)
}

fn log_iteration(line: &str) -> Option<u64> {
    line.split(' ').next()?.strip_prefix("iter=")?.parse().ok()
}

/// Trains for `run.total_iters` iterations, optionally continuing from a
/// checkpoint. Writes `metrics.log`, periodic `ckpt_NNNNNN.sdtm` files and
/// `final.sdtm` under `run.out`.
pub fn cmd_train(run: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let index = run.resolve_data(&run.out)?;
    let n_classes = index.seen.len();
    if n_classes == 0 {
        return Err(Error::InsufficientSamples {
            category: "<seen split>".into(),
            available: 0,
            required: 1,
        });
    }
    let sample = index.image(index.seen[0], 0)?;
    let [c, h, w] = *sample.shape() else {
        return Err(Error::shape(format!(
            "unexpected image shape {:?}",
            sample.shape()
        )));
    };
    if h != w {
        return Err(Error::shape(format!("images must be square, got {h}x{w}")));
    }
    let gan = run.gan_config(n_classes, c, h);
    gan.validate()?;
    let mut state = match resume {
        Some(path) => {
            let loaded = load_reporting(path)?;
            if loaded.state.config != gan {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            loaded.state
        }
        None => TrainState::new(gan)?,
    };

    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    let log_path = run.out.join(METRICS_LOG);
    let kept = if resume.is_some() {
        fs::read_to_string(&log_path)
            .unwrap_or_default()
            .lines()
            .filter(|l| log_iteration(l).is_some_and(|i| i <= state.iteration))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    } else {
        String::new()
    };
    fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
    let config_text: String = run
        .pairs()
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let config_path = run.out.join("config.txt");
    fs::write(&config_path, config_text).map_err(|e| Error::io(&config_path, e))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut last = None;
    while state.iteration < run.total_iters {
        let batch = state.sample_batch(&index, Split::Seen)?;
        let report = state.train_step(&batch)?;
        let done = state.iteration;
        if done % run.log_every == 0 || done == run.total_iters {
            writeln!(log, "{}", report.log_line()).map_err(|e| Error::io(&log_path, e))?;
        }
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 {
            save_checkpoint(&state, Some(run), &run.out.join(checkpoint_name(done)))?;
        }
        last = Some(report);
    }
    let final_checkpoint = run.out.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, Some(run), &final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics_log: log_path,
        last_report: last,
    })
}

/// Generates `count` images from the 1..K conditioning images, writing
/// `sample_NNN.ppm` into `out`.
pub fn cmd_generate(
    checkpoint: &Path,
    inputs: &[PathBuf],
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let state = load_reporting(checkpoint)?.state;
    if inputs.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    let images = inputs
        .iter()
        .map(|p| decode_image(p))
        .collect::<Result<Vec<_>>>()?;
    if images[0].shape()[0] != state.config.image_channels {
        return Err(Error::shape(format!(
            "model expects {} channels, input has {}",
            state.config.image_channels,
            images[0].shape()[0]
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let img = generate(&state.generator, &images, &mut rng)?;
        let path = out.join(format!("sample_{i:03}.ppm"));
        encode_image(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Dataset root overriding the one recorded in the checkpoint.
    pub data: Option<PathBuf>,
    pub split: Split,
    pub n_episodes: usize,
    pub per_episode: usize,
    pub seed: u64,
    /// Where a synthetic corpus is materialized.
    pub workdir: PathBuf,
}

impl EvalOptions {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        let checkpoint = checkpoint.into();
        let workdir = checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        EvalOptions {
            checkpoint,
            data: None,
            split: Split::Seen,
            n_episodes: 16,
            per_episode: 4,
            seed: 0,
            workdir,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iteration: u64,
    pub split: Split,
    pub n_real: usize,
    pub n_fake: usize,
    pub metrics: SetMetrics,
}

impl EvalReport {
    /// Line-oriented `key=value` text; every metric is marked as a proxy.
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        format!(
            "kind=proxy\niteration={}\nsplit={}\nn_real={}\nn_fake={}\nproxy_frechet={}\nproxy_pairwise_l1={}\nproxy_laplacian_energy_gap={}\nproxy_highfreq_energy_gap={}\n",
            self.iteration,
            self.split,
            self.n_real,
            self.n_fake,
            m.frechet,
            m.pairwise_l1,
            m.laplacian_gap,
            m.highfreq_gap
        )
    }
}

/// Parses `key=value` lines into a map.
pub fn parse_report(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad report line `{l}`")))
        })
        .collect()
}

/// Generates over `n_episodes` episodes of the split and compares with all
/// real images of the split's categories. Features come from the
/// discriminator as initialized for the checkpoint's configuration, so
/// checkpoints of one run are measured in the same feature space.
pub fn cmd_eval(opts: &EvalOptions) -> Result<EvalReport> {
    let loaded = load_reporting(&opts.checkpoint)?;
    let state = loaded.state;
    let mut run = loaded.run.unwrap_or_default();
    if let Some(d) = &opts.data {
        run.data = Some(d.clone());
    }
    run.k = state.config.k;
    let index = run.resolve_data(&opts.workdir)?;
    let cats = index.split(opts.split);
    let mut reals = Vec::new();
    for &c in cats {
        reals.extend(index.category_images(c)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut fakes = Vec::with_capacity(opts.n_episodes);
    for _ in 0..opts.n_episodes {
        let ep = sample_episode(&index, opts.split, state.config.k, &mut rng)?;
        let group = (0..opts.per_episode)
            .map(|_| generate(&state.generator, &ep.images, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        fakes.push(group);
    }
    let features = TrainState::new(state.config.clone())?.discriminator;
    let metrics = evaluate_sets(&features, &reals, &fakes)?;
    Ok(EvalReport {
        iteration: state.iteration,
        split: opts.split,
        n_real: reals.len(),
        n_fake: fakes.iter().map(Vec::len).sum(),
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda_str: f32,
    pub lambda_fre: f32,
    pub iters: u64,
    pub d_total: f32,
    pub g_total: f32,
    pub proxy_frechet: f64,
}

impl SweepRow {
    pub fn line(&self) -> String {
        format!(
            "lambda_str={} lambda_fre={} iters={} d_total={} g_total={} proxy_frechet={}",
            self.lambda_str,
            self.lambda_fre,
            self.iters,
            self.d_total,
            self.g_total,
            self.proxy_frechet
        )
    }
}

pub const SWEEP_LAMBDAS: [f32; 5] = [0.0, 0.1, 1.0, 10.0, 100.0];

/// Trains one run per `(lambda_str, lambda_fre)` pair for `iters`
/// iterations under `base.out/sweep/`, and writes one summary row per pair
/// to `base.out/sweep_summary.txt`.
pub fn cmd_sweep(
    base: &RunConfig,
    lambdas: &[f32],
    iters: u64,
    eval_episodes: usize,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    let mut rows = Vec::new();
    fs::create_dir_all(&base.out).map_err(|e| Error::io(&base.out, e))?;
    let summary = base.out.join("sweep_summary.txt");
    fs::write(&summary, "").map_err(|e| Error::io(&summary, e))?;
    for &ls in lambdas {
        for &lf in lambdas {
            let mut cell = base.clone();
            cell.lambda_str = ls;
            cell.lambda_fre = lf;
            cell.total_iters = iters;
            cell.checkpoint_every = 0;
            cell.out = base.out.join("sweep").join(format!("str_{ls}_fre_{lf}"));
            let outcome = cmd_train(&cell, None)?;
            let report = outcome
                .last_report
                .ok_or_else(|| Error::Config("sweep cell ran no iterations".into()))?;
            let mut opts = EvalOptions::new(&outcome.final_checkpoint);
            opts.n_episodes = eval_episodes;
            opts.seed = base.seed;
            let eval = cmd_eval(&opts)?;
            let row = SweepRow {
                lambda_str: ls,
                lambda_fre: lf,
                iters,
                d_total: report.d_total,
                g_total: report.g_total,
                proxy_frechet: eval.metrics.frechet,
            };
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&summary)
                .map_err(|e| Error::io(&summary, e))?;
            writeln!(f, "{}", row.line()).map_err(|e| Error::io(&summary, e))?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Writes the per-channel Laplacian magnitude of `input`, scaled so the
/// strongest response is white.
pub fn inspect_laplacian(input: &Path, output: &Path) -> Result<()> {
    let img = decode_image(input)?;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let lap = laplacian(&img.reshape(&[1, c, h, w])?)?;
    let max = lap.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { 2.0 / max } else { 0.0 };
    let mag = lap.map(|v| v.abs() * scale - 1.0).reshape(&[c, h, w])?;
    encode_image(&mag, output)
}

/// Writes `ll`, `lh`, `hl` and `hh` band images (values halved to fit the
/// pixel range) into `out_dir`.
pub fn inspect_wavelet(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let img = decode_image(input)?;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let tape = Tape::new();
    let bands = haar_dwt(tape.constant(img.reshape(&[1, c, h, w])?))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, band) in [
        ("ll", bands.ll),
        ("lh", bands.lh),
        ("hl", bands.hl),
        ("hh", bands.hh),
    ] {
        let v: Tensor = band.value().map(|x| 0.5 * x).reshape(&[c, h / 2, w / 2])?;
        let path = out_dir.join(format!("{name}.ppm"));
        encode_image(&v, &path)?;
        written.push(path);
    }
    Ok(written)
}
