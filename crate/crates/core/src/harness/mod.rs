//! Run configuration, checkpoints, proxy metrics and the CLI commands.

pub mod checkpoint;
pub mod commands;
pub mod metrics;
pub mod selftest;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_dataset_dir, synth_generate, DatasetIndex, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gan::{AdamConfig, GanConfig};
use crate::modulation::RefReduce;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Loaded,
};
pub use commands::{
    cmd_eval, cmd_generate, cmd_sweep, cmd_train, EvalOptions, EvalReport, SweepRow, TrainOutcome,
};
pub use metrics::{evaluate_sets, pairwise_l1, proxy_frechet};
pub use selftest::{run_selftest, Check};

/// Environment variable that overrides the seed.
pub const SEED_ENV: &str = "SDTM_SEED";

/// Everything a training run needs. Text form is `key=value` per line.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Dataset root; `None` means the procedural shapes corpus.
    pub data: Option<PathBuf>,
    pub split_file: Option<PathBuf>,
    pub seen_fraction: f64,
    pub split_seed: u64,
    pub synth: SyntheticSpec,
    pub k: usize,
    pub total_iters: u64,
    pub batch_size: usize,
    pub base_lr: f32,
    pub lambda_str: f32,
    pub lambda_fre: f32,
    pub use_texmod: bool,
    pub use_structd: bool,
    pub use_fred: bool,
    pub ref_reduce: RefReduce,
    pub seed: u64,
    pub out: PathBuf,
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub tap_layer: usize,
    pub enc_widths: Vec<usize>,
    pub d_widths: Vec<usize>,
    pub d_downsample: usize,
    pub structd_widths: [usize; 2],
    pub fred_width: usize,
    pub fred_pool: usize,
    pub adam: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gan = GanConfig::default();
        RunConfig {
            data: None,
            split_file: None,
            seen_fraction: 0.75,
            split_seed: 0,
            synth: SyntheticSpec::default(),
            k: gan.k,
            total_iters: gan.total_iters,
            batch_size: gan.batch_size,
            base_lr: gan.base_lr,
            lambda_str: gan.lambda_str,
            lambda_fre: gan.lambda_fre,
            use_texmod: true,
            use_structd: true,
            use_fred: true,
            ref_reduce: RefReduce::Sum,
            seed: 0,
            out: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_every: 1,
            tap_layer: gan.tap_layer,
            enc_widths: gan.enc_widths,
            d_widths: gan.d_widths,
            d_downsample: gan.d_downsample,
            structd_widths: gan.structd_widths,
            fred_width: gan.fred_width,
            fred_pool: gan.fred_pool,
            adam: gan.adam,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

pub(crate) fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = (value != "synthetic").then(|| PathBuf::from(value)),
            "split_file" => self.split_file = (!value.is_empty()).then(|| PathBuf::from(value)),
            "seen_fraction" => self.seen_fraction = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "synth_categories" => self.synth.n_categories = parse(key, value)?,
            "synth_images" => self.synth.images_per_category = parse(key, value)?,
            "synth_size" => self.synth.image_size = parse(key, value)?,
            "synth_hue_jitter" => self.synth.hue_jitter = parse(key, value)?,
            "synth_position_sigma" => self.synth.position_sigma = parse(key, value)?,
            "synth_scale_min" => self.synth.scale_range.0 = parse(key, value)?,
            "synth_scale_max" => self.synth.scale_range.1 = parse(key, value)?,
            "synth_seed" => self.synth.seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "total_iters" => self.total_iters = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "lambda_str" => self.lambda_str = parse(key, value)?,
            "lambda_fre" => self.lambda_fre = parse(key, value)?,
            "texmod" => self.use_texmod = parse_bool(key, value)?,
            "structd" => self.use_structd = parse_bool(key, value)?,
            "fred" => self.use_fred = parse_bool(key, value)?,
            "ref_reduce" => self.ref_reduce = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "tap_layer" => self.tap_layer = parse(key, value)?,
            "enc_widths" => self.enc_widths = parse_list(key, value)?,
            "d_widths" => self.d_widths = parse_list(key, value)?,
            "d_downsample" => self.d_downsample = parse(key, value)?,
            "structd_widths" => {
                let w = parse_list(key, value)?;
                self.structd_widths = w
                    .try_into()
                    .map_err(|_| Error::Config("structd_widths needs two values".into()))?;
            }
            "fred_width" => self.fred_width = parse(key, value)?,
            "fred_pool" => self.fred_pool = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", v.trim()),
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    /// Every setting except `out`, in a fixed order; feeding these back
    /// through [`RunConfig::set`] reproduces the configuration.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        vec![
            (
                "data",
                opt_path(&self.data).unwrap_or_else(|| "synthetic".into()),
            ),
            ("split_file", opt_path(&self.split_file).unwrap_or_default()),
            ("seen_fraction", self.seen_fraction.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("synth_categories", self.synth.n_categories.to_string()),
            ("synth_images", self.synth.images_per_category.to_string()),
            ("synth_size", self.synth.image_size.to_string()),
            ("synth_hue_jitter", self.synth.hue_jitter.to_string()),
            (
                "synth_position_sigma",
                self.synth.position_sigma.to_string(),
            ),
            ("synth_scale_min", self.synth.scale_range.0.to_string()),
            ("synth_scale_max", self.synth.scale_range.1.to_string()),
            ("synth_seed", self.synth.seed.to_string()),
            ("k", self.k.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lambda_str", self.lambda_str.to_string()),
            ("lambda_fre", self.lambda_fre.to_string()),
            ("texmod", self.use_texmod.to_string()),
            ("structd", self.use_structd.to_string()),
            ("fred", self.use_fred.to_string()),
            ("ref_reduce", self.ref_reduce.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("tap_layer", self.tap_layer.to_string()),
            ("enc_widths", join_list(&self.enc_widths)),
            ("d_widths", join_list(&self.d_widths)),
            ("d_downsample", self.d_downsample.to_string()),
            ("structd_widths", join_list(&self.structd_widths)),
            ("fred_width", self.fred_width.to_string()),
            ("fred_pool", self.fred_pool.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.seen_fraction) {
            return Err(Error::Config(format!(
                "seen_fraction {} outside [0, 1]",
                self.seen_fraction
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        // architecture checks that do not depend on the data
        self.gan_config(1, 3, 64).validate()
    }

    /// Model and optimizer settings for data with `n_classes` seen
    /// categories and `[channels, size, size]` images.
    pub fn gan_config(&self, n_classes: usize, channels: usize, size: usize) -> GanConfig {
        GanConfig {
            image_channels: channels,
            image_size: size,
            enc_widths: self.enc_widths.clone(),
            d_widths: self.d_widths.clone(),
            d_downsample: self.d_downsample,
            structd_widths: self.structd_widths,
            fred_width: self.fred_width,
            fred_pool: self.fred_pool,
            n_classes,
            tap_layer: self.tap_layer,
            lambda_str: self.lambda_str,
            lambda_fre: self.lambda_fre,
            use_texmod: self.use_texmod,
            use_structd: self.use_structd,
            use_fred: self.use_fred,
            ref_reduce: self.ref_reduce,
            base_lr: self.base_lr,
            total_iters: self.total_iters,
            batch_size: self.batch_size,
            k: self.k,
            adam: self.adam,
            seed: self.seed,
        }
    }

    /// Loads (or, for the synthetic corpus, writes under `workdir` and then
    /// loads) the dataset, checking every category holds `k` images.
    pub fn resolve_data(&self, workdir: &Path) -> Result<DatasetIndex> {
        let index = match &self.data {
            None => {
                let spec = SyntheticSpec {
                    seen_fraction: self.seen_fraction,
                    ..self.synth.clone()
                };
                let root = workdir.join("synthetic");
                synth_generate(&spec, &root)?;
                load_dataset_dir(
                    &root,
                    &SplitSpec::Fraction {
                        seen: spec.seen_fraction,
                        seed: spec.seed,
                    },
                    self.k,
                )?
            }
            Some(root) => {
                let split = match &self.split_file {
                    Some(f) => SplitSpec::File(f.clone()),
                    None => SplitSpec::Fraction {
                        seen: self.seen_fraction,
                        seed: self.split_seed,
                    },
                };
                load_dataset_dir(root, &split, self.k)?
            }
        };
        index.preload()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(
            (c.batch_size, c.k, c.base_lr, c.lambda_str, c.lambda_fre),
            (8, 3, 1e-4, 1.0, 1.0)
        );
        assert!(c.validate().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# run\nk = 1\nlambda_fre=0.1\nstructd=false\nd_widths=8,16\ndata=/tmp/x\n\n")
            .unwrap();
        assert_eq!((c.k, c.lambda_fre, c.use_structd), (1, 0.1, false));
        assert_eq!(c.d_widths, vec![8, 16]);
        let text: String = c
            .pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let mut back = RunConfig {
            out: c.out.clone(),
            ..RunConfig::default()
        };
        back.apply_text(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("nope", "1"),
            ("k", "x"),
            ("texmod", "maybe"),
            ("structd_widths", "1,2,3"),
        ] {
            assert!(matches!(c.set(k, v), Err(Error::Config(_))), "{k}");
        }
        assert!(matches!(c.apply_text("k"), Err(Error::Config(_))));
        for bad in ["lambda_str=-1", "k=0", "total_iters=0", "seen_fraction=2"] {
            let mut c = RunConfig::default();
            c.apply_text(bad).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{bad}");
        }
    }
}
