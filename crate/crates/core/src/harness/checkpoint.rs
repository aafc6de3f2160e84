//! Checkpoint container: a text header followed by little-endian f32 data.
//!
//! ```text
//! SDTM
//! version=1
//! iteration=...
//! rng.seed=<hex> / rng.stream=... / rng.word_pos=...
//! g_opt.step=... (and skipped, d_opt.*)
//! model.<key>=<value>      one per model setting
//! run.<key>=<value>        run settings, if known
//! tensor=<name> shape=AxB offset=<bytes> bytes=<n> crc32=<hex>
//! payload
//! <raw f32 data in manifest order>
//! ```

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{join_list, parse_bool, parse_list, RunConfig};
use crate::error::{Error, Result};
use crate::gan::{AdamConfig, GanConfig, TrainState};
use crate::modulation::RefReduce;
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &str = "SDTM";
pub const VERSION: u32 = 1;

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub state: TrainState,
    pub run: Option<RunConfig>,
    /// Tensors whose stored checksum disagrees with their payload bytes.
    pub checksum_mismatches: Vec<String>,
}

fn model_pairs(c: &GanConfig) -> Vec<(&'static str, String)> {
    vec![
        ("image_channels", c.image_channels.to_string()),
        ("image_size", c.image_size.to_string()),
        ("enc_widths", join_list(&c.enc_widths)),
        ("d_widths", join_list(&c.d_widths)),
        ("d_downsample", c.d_downsample.to_string()),
        ("structd_widths", join_list(&c.structd_widths)),
        ("fred_width", c.fred_width.to_string()),
        ("fred_pool", c.fred_pool.to_string()),
        ("n_classes", c.n_classes.to_string()),
        ("tap_layer", c.tap_layer.to_string()),
        ("lambda_str", c.lambda_str.to_string()),
        ("lambda_fre", c.lambda_fre.to_string()),
        ("texmod", c.use_texmod.to_string()),
        ("structd", c.use_structd.to_string()),
        ("fred", c.use_fred.to_string()),
        ("ref_reduce", c.ref_reduce.to_string()),
        ("base_lr", c.base_lr.to_string()),
        ("total_iters", c.total_iters.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("k", c.k.to_string()),
        ("adam_beta1", c.adam.beta1.to_string()),
        ("adam_beta2", c.adam.beta2.to_string()),
        ("adam_eps", c.adam.eps.to_string()),
        ("seed", c.seed.to_string()),
    ]
}

fn model_from(map: &HashMap<String, String>) -> Result<GanConfig> {
    let get = |k: &str| {
        map.get(&format!("model.{k}"))
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks model.{k}")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Format(format!("bad checkpoint value `{v}` for model.{k}")))
    }
    let fmt = |e: Error| Error::Format(e.to_string());
    let sw = parse_list("structd_widths", get("structd_widths")?).map_err(fmt)?;
    Ok(GanConfig {
        image_channels: num("image_channels", get("image_channels")?)?,
        image_size: num("image_size", get("image_size")?)?,
        enc_widths: parse_list("enc_widths", get("enc_widths")?).map_err(fmt)?,
        d_widths: parse_list("d_widths", get("d_widths")?).map_err(fmt)?,
        d_downsample: num("d_downsample", get("d_downsample")?)?,
        structd_widths: sw
            .try_into()
            .map_err(|_| Error::Format("model.structd_widths needs two values".into()))?,
        fred_width: num("fred_width", get("fred_width")?)?,
        fred_pool: num("fred_pool", get("fred_pool")?)?,
        n_classes: num("n_classes", get("n_classes")?)?,
        tap_layer: num("tap_layer", get("tap_layer")?)?,
        lambda_str: num("lambda_str", get("lambda_str")?)?,
        lambda_fre: num("lambda_fre", get("lambda_fre")?)?,
        use_texmod: parse_bool("texmod", get("texmod")?).map_err(fmt)?,
        use_structd: parse_bool("structd", get("structd")?).map_err(fmt)?,
        use_fred: parse_bool("fred", get("fred")?).map_err(fmt)?,
        ref_reduce: get("ref_reduce")?.parse::<RefReduce>().map_err(fmt)?,
        base_lr: num("base_lr", get("base_lr")?)?,
        total_iters: num("total_iters", get("total_iters")?)?,
        batch_size: num("batch_size", get("batch_size")?)?,
        k: num("k", get("k")?)?,
        adam: AdamConfig {
            beta1: num("adam_beta1", get("adam_beta1")?)?,
            beta2: num("adam_beta2", get("adam_beta2")?)?,
            eps: num("adam_eps", get("adam_eps")?)?,
        },
        seed: num("seed", get("seed")?)?,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// Named tensors in storage order: parameters, then generator and
/// discriminator-group Adam moments.
fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = state
        .all_params()
        .into_iter()
        .map(|p| (p.name().to_string(), &p.value))
        .collect();
    let groups = [
        ("g", state.generator.params(), &state.g_opt),
        ("d", state.d_params(), &state.d_opt),
    ];
    for (tag, params, opt) in groups {
        for (i, p) in params.iter().enumerate() {
            out.push((format!("adam.{tag}.m.{}", p.name()), &opt.m[i]));
            out.push((format!("adam.{tag}.v.{}", p.name()), &opt.v[i]));
        }
    }
    out
}

/// Serializes `state` (and the run settings, if given).
pub fn encode_checkpoint(state: &TrainState, run: Option<&RunConfig>) -> Vec<u8> {
    let mut header = format!(
        "{MAGIC}\nversion={VERSION}\niteration={}\n",
        state.iteration
    );
    header += &format!(
        "rng.seed={}\nrng.stream={}\nrng.word_pos={}\n",
        hex(&state.rng.get_seed()),
        state.rng.get_stream(),
        state.rng.get_word_pos()
    );
    for (tag, opt) in [("g_opt", &state.g_opt), ("d_opt", &state.d_opt)] {
        header += &format!("{tag}.step={}\n{tag}.skipped={}\n", opt.step, opt.skipped);
    }
    for (k, v) in model_pairs(&state.config) {
        header += &format!("model.{k}={v}\n");
    }
    if let Some(run) = run {
        for (k, v) in run.pairs() {
            header += &format!("run.{k}={v}\n");
        }
    }
    let mut payload = Vec::new();
    for (name, t) in named_tensors(state) {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let shape = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x")
        };
        header += &format!(
            "tensor={name} shape={shape} offset={} bytes={} crc32={:08x}\n",
            payload.len(),
            bytes.len(),
            crc32fast::hash(&bytes)
        );
        payload.extend(bytes);
    }
    header += "payload\n";
    let mut out = header.into_bytes();
    out.extend(payload);
    out
}

pub fn save_checkpoint(state: &TrainState, run: Option<&RunConfig>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state, run)).map_err(|e| Error::io(path, e))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
    crc: u32,
}

fn parse_entry(line: &str) -> Result<Entry> {
    let bad = || Error::Format(format!("bad tensor line `{line}`"));
    let mut f: HashMap<&str, &str> = HashMap::new();
    for part in line.split(' ') {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        f.insert(k, v);
    }
    let get = |k: &str| f.get(k).copied().ok_or_else(bad);
    let shape = match get("shape")? {
        "-" => Vec::new(),
        s => s
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?,
    };
    Ok(Entry {
        name: get("tensor")?.to_string(),
        shape,
        offset: get("offset")?.parse().map_err(|_| bad())?,
        bytes: get("bytes")?.parse().map_err(|_| bad())?,
        crc: u32::from_str_radix(get("crc32")?, 16).map_err(|_| bad())?,
    })
}

/// Parses a checkpoint. `origin` names the source in I/O errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Loaded> {
    if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let marker = b"\npayload\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| {
            Error::io(
                origin,
                io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint header truncated"),
            )
        })?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let payload = &bytes[end + marker.len()..];

    let mut map = HashMap::new();
    let mut entries = Vec::new();
    for line in header.lines().skip(1) {
        if line.starts_with("tensor=") {
            entries.push(parse_entry(line)?);
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line `{line}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
    }
    let field = |k: &str| {
        map.get(k)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")))
    };
    let num = |k: &str| -> Result<u128> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad value for {k}")))
    };
    if num("version")? != VERSION as u128 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            field("version")?
        )));
    }

    let mut expected = 0usize;
    for e in &entries {
        if e.offset != expected || e.bytes != 4 * e.shape.iter().product::<usize>() {
            return Err(Error::Format(format!(
                "manifest gap or overlap at tensor {}",
                e.name
            )));
        }
        expected += e.bytes;
    }
    if payload.len() < expected {
        return Err(Error::io(
            origin,
            io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!(
                    "payload has {} bytes, manifest needs {expected}",
                    payload.len()
                ),
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }

    let config = model_from(&map)?;
    let run = if map.contains_key("run.seed") {
        let mut run = RunConfig::default();
        for (k, _) in RunConfig::default().pairs() {
            if let Some(v) = map.get(&format!("run.{k}")) {
                run.set(k, v).map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        Some(run)
    } else {
        None
    };

    let mut state = TrainState::new(config).map_err(|e| Error::Format(e.to_string()))?;
    state.iteration = num("iteration")? as u64;
    let seed = unhex(field("rng.seed")?).ok_or_else(|| Error::Format("bad rng.seed".into()))?;
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_stream(num("rng.stream")? as u64);
    state.rng.set_word_pos(num("rng.word_pos")?);
    state.g_opt.step = num("g_opt.step")? as u64;
    state.g_opt.skipped = num("g_opt.skipped")? as u64;
    state.d_opt.step = num("d_opt.step")? as u64;
    state.d_opt.skipped = num("d_opt.skipped")? as u64;

    let mut stored: HashMap<&str, (&Entry, Tensor)> = HashMap::new();
    let mut checksum_mismatches = Vec::new();
    for e in &entries {
        let raw = &payload[e.offset..e.offset + e.bytes];
        if crc32fast::hash(raw) != e.crc {
            checksum_mismatches.push(e.name.clone());
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        stored.insert(e.name.as_str(), (e, Tensor::new(&e.shape, data)?));
    }

    let names: Vec<String> = named_tensors(&state).into_iter().map(|(n, _)| n).collect();
    if names.len() != entries.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model needs {}",
            entries.len(),
            names.len()
        )));
    }
    let mut take = |name: &str, target: &mut Tensor| -> Result<()> {
        let (_, t) = stored
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != target.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model needs {:?}",
                t.shape(),
                target.shape()
            )));
        }
        *target = t;
        Ok(())
    };
    for p in state.all_params_mut() {
        let name = p.name().to_string();
        take(&name, &mut p.value)?;
    }
    let g_names: Vec<String> = state
        .generator
        .params()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    let d_names: Vec<String> = state
        .d_params()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    for (tag, names, opt) in [
        ("g", g_names, &mut state.g_opt),
        ("d", d_names, &mut state.d_opt),
    ] {
        for (i, n) in names.iter().enumerate() {
            take(&format!("adam.{tag}.m.{n}"), &mut opt.m[i])?;
            take(&format!("adam.{tag}.v.{n}"), &mut opt.v[i])?;
        }
    }
    Ok(Loaded {
        state,
        run,
        checksum_mismatches,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
