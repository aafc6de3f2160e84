#![allow(dead_code)]

use std::path::Path;

use sdtm::data::SyntheticSpec;
use sdtm::harness::RunConfig;

/// A run small enough for a few seconds of training: 16x16 shapes, narrow
/// networks, batches of two 3-shot episodes.
pub fn tiny_run(out: &Path, iters: u64) -> RunConfig {
    RunConfig {
        synth: SyntheticSpec {
            images_per_category: 12,
            image_size: 16,
            ..SyntheticSpec::default()
        },
        total_iters: iters,
        batch_size: 2,
        enc_widths: vec![8, 16],
        d_widths: vec![8, 16, 16],
        d_downsample: 2,
        structd_widths: [4, 4],
        fred_width: 4,
        base_lr: 1e-3,
        seed: 3,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Every `key=value` field of a metrics log line that parses as a float.
pub fn log_values(line: &str) -> Vec<(String, f64)> {
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .filter_map(|(k, v)| v.parse::<f64>().ok().map(|x| (k.to_string(), x)))
        .collect()
}
