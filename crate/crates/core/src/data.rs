//! Image files, category splits, episodic sampling and the procedural
//! shapes dataset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// PGM / PPM codec

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                    pos += 1;
                }
            }
            _ => return pos,
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad {what} in image header")))
}

/// Decodes binary PGM (`P5`, one channel) or PPM (`P6`, three channels) into
/// `[C, H, W]` with values `x / (maxval / 2) - 1`, i.e. `[-1, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after header".into()));
    }
    pos += 1;
    let plane = width * height;
    let raw = bytes
        .get(pos..pos + plane * channels)
        .ok_or_else(|| Error::Format("pixel data truncated".into()))?;
    let half = maxval as f64 / 2.0;
    let mut data = vec![0.0f32; raw.len()];
    for (i, &v) in raw.iter().enumerate() {
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * plane + pixel] = (v as f64 / half - 1.0) as f32;
    }
    Tensor::new(&[channels, height, width], data)
}

/// Encodes `[1, H, W]` as PGM or `[3, H, W]` as PPM with maxval 255,
/// rounding half away from zero and clamping.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "image must be [1|3, H, W], got {:?}",
                image.shape()
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(plane * c);
    for pixel in 0..plane {
        for ch in 0..c {
            let x = image.data()[ch * plane + pixel] as f64;
            out.push(((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn encode_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pnm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Dataset index

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Seen,
    Unseen,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// How categories are partitioned into seen and unseen.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Fraction of categories that are seen, chosen by a seeded shuffle of
    /// the sorted category names.
    Fraction { seen: f64, seed: u64 },
    /// Text file listing category names under `[seen]` and `[unseen]`.
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Category {
    pub name: String,
    pub files: Vec<PathBuf>,
}

/// Immutable view of `root/<category>/<image>` with a seen/unseen split.
/// Category ids index `categories` (sorted by name); labels are positions
/// within a split's list.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub categories: Vec<Category>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    cache: Option<Vec<Vec<Tensor>>>,
}

/// K conditioning images of one category.
#[derive(Clone, Debug)]
pub struct Episode {
    /// Each `[C, H, W]` in `[-1, 1]`.
    pub images: Vec<Tensor>,
    pub category: usize,
    /// Position of the category inside its split.
    pub label: usize,
    pub split: Split,
    pub files: Vec<usize>,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("ppm" | "pgm" | "pnm")
    )
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn parse_split_file(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    let mut section = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "[seen]" => section = Some(Split::Seen),
            "[unseen]" => section = Some(Split::Unseen),
            name => match section {
                Some(Split::Seen) => seen.push(name.to_string()),
                Some(Split::Unseen) => unseen.push(name.to_string()),
                None => {
                    return Err(Error::Format(format!(
                        "{}:{}: category listed before a [seen]/[unseen] header",
                        path.display(),
                        n + 1
                    )))
                }
            },
        }
    }
    Ok((seen, unseen))
}

/// Scans `root`, partitions categories and checks each used category has at
/// least `k` images.
pub fn load_dataset_dir(root: &Path, split: &SplitSpec, k: usize) -> Result<DatasetIndex> {
    let mut categories = Vec::new();
    for dir in read_dir_sorted(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Format(format!("non UTF-8 category name {}", dir.display())))?
            .to_string();
        let files = read_dir_sorted(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        categories.push(Category { name, files });
    }

    let lookup = |name: &str| {
        categories
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("split names unknown category `{name}`")))
    };
    let (mut seen, mut unseen) = match split {
        SplitSpec::Fraction { seen: frac, seed } => {
            if !(0.0..=1.0).contains(frac) {
                return Err(Error::Config(format!(
                    "seen fraction {frac} outside [0, 1]"
                )));
            }
            let n_seen = (categories.len() as f64 * frac).round() as usize;
            let mut order: Vec<usize> = (0..categories.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let unseen = order.split_off(n_seen);
            (order, unseen)
        }
        SplitSpec::File(path) => {
            let (s, u) = parse_split_file(path)?;
            let s = s.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
            let u = u.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
            if let Some(&dup) = s.iter().find(|i| u.contains(i)) {
                return Err(Error::Format(format!(
                    "category `{}` is both seen and unseen",
                    categories[dup].name
                )));
            }
            (s, u)
        }
    };
    seen.sort_unstable();
    seen.dedup();
    unseen.sort_unstable();
    unseen.dedup();

    for &c in seen.iter().chain(&unseen) {
        let cat = &categories[c];
        if cat.files.len() < k {
            return Err(Error::InsufficientSamples {
                category: cat.name.clone(),
                available: cat.files.len(),
                required: k,
            });
        }
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        categories,
        seen,
        unseen,
        cache: None,
    })
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Seen => &self.seen,
            Split::Unseen => &self.unseen,
        }
    }

    /// Decodes every image of the split categories once and keeps them in
    /// memory for sampling.
    pub fn preload(mut self) -> Result<Self> {
        let mut cache = vec![Vec::new(); self.categories.len()];
        for &c in self.seen.iter().chain(&self.unseen) {
            cache[c] = self.categories[c]
                .files
                .iter()
                .map(|p| decode_image(p))
                .collect::<Result<_>>()?;
        }
        self.cache = Some(cache);
        Ok(self)
    }

    pub fn image(&self, category: usize, file: usize) -> Result<Tensor> {
        match &self.cache {
            Some(cache) if !cache[category].is_empty() => Ok(cache[category][file].clone()),
            _ => decode_image(&self.categories[category].files[file]),
        }
    }

    /// All images of one category.
    pub fn category_images(&self, category: usize) -> Result<Vec<Tensor>> {
        (0..self.categories[category].files.len())
            .map(|f| self.image(category, f))
            .collect()
    }
}

/// A uniformly chosen category of `split` and `k` distinct images from it.
pub fn sample_episode<R: Rng + ?Sized>(
    index: &DatasetIndex,
    split: Split,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    let cats = index.split(split);
    if cats.is_empty() {
        return Err(Error::InsufficientSamples {
            category: format!("<{split} split>"),
            available: 0,
            required: 1,
        });
    }
    if k == 0 {
        return Err(Error::EmptyEpisode);
    }
    let label = rng.random_range(0..cats.len());
    let category = cats[label];
    let available = index.categories[category].files.len();
    if k > available {
        return Err(Error::InsufficientSamples {
            category: index.categories[category].name.clone(),
            available,
            required: k,
        });
    }
    let files = index::sample(rng, available, k).into_vec();
    let images = files
        .iter()
        .map(|&f| index.image(category, f))
        .collect::<Result<_>>()?;
    Ok(Episode {
        images,
        category,
        label,
        split,
        files,
    })
}

// ---------------------------------------------------------------------------
// Synthetic shapes

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// Procedural dataset: category `c` draws shape `c % 4` in a base hue
/// spread evenly around the colour wheel, jittered per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub images_per_category: usize,
    pub image_size: usize,
    /// Uniform hue offset range in degrees, `±hue_jitter`.
    pub hue_jitter: f32,
    /// Standard deviation of the centre offset in pixels.
    pub position_sigma: f32,
    /// Uniform range of the size multiplier.
    pub scale_range: (f32, f32),
    pub seen_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_categories: 4,
            images_per_category: 50,
            image_size: 32,
            hue_jitter: 12.0,
            position_sigma: 1.5,
            scale_range: (0.85, 1.15),
            seen_fraction: 0.75,
            seed: 7,
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= 0.8 * r,
        2 => {
            // apex up, base at r/2
            let half_width = (dy + r) * 0.577_35;
            dy >= -r && dy <= 0.5 * r && dx.abs() <= half_width
        }
        _ => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Renders one image `[3, S, S]` in `[-1, 1]` with 4x4 supersampling.
pub fn render_shape(
    shape: usize,
    hue: f32,
    centre: (f32, f32),
    radius: f32,
    size: usize,
) -> Tensor {
    let fg = hsv_to_rgb(hue, 0.8, 0.95);
    let bg = [0.1f32, 0.1, 0.12];
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0u32;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f32 + (sx as f32 + 0.5) / 4.0 - centre.0;
                    let py = y as f32 + (sy as f32 + 0.5) / 4.0 - centre.1;
                    cover += inside(shape, px, py, radius) as u32;
                }
            }
            let a = cover as f32 / 16.0;
            for ch in 0..3 {
                let v = a * fg[ch] + (1.0 - a) * bg[ch];
                data[ch * plane + y * size + x] = v * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape")
}

/// Writes `out/<cNN_shape>/<iii>.ppm` for every image and returns the index
/// (seen fraction and shuffle seed taken from `spec`).
pub fn synth_generate(spec: &SyntheticSpec, out: &Path) -> Result<DatasetIndex> {
    if spec.n_categories == 0 || spec.images_per_category == 0 || spec.image_size < 4 {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    let (lo, hi) = spec.scale_range;
    if !(lo > 0.0 && lo <= hi) || spec.position_sigma < 0.0 || spec.hue_jitter < 0.0 {
        return Err(Error::Config(format!(
            "invalid jitter parameters in {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offset = Normal::new(0.0f32, spec.position_sigma).expect("finite sigma");
    let size = spec.image_size as f32;
    for c in 0..spec.n_categories {
        let shape = c % SHAPES.len();
        let dir = out.join(format!("c{c:02}_{}", SHAPES[shape]));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let base_hue = 360.0 * c as f32 / spec.n_categories as f32;
        for i in 0..spec.images_per_category {
            let hue = base_hue + spec.hue_jitter * rng.random_range(-1.0f32..=1.0);
            let centre = (
                size / 2.0 + offset.sample(&mut rng),
                size / 2.0 + offset.sample(&mut rng),
            );
            let scale = if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            };
            let img = render_shape(shape, hue, centre, 0.3 * size * scale, spec.image_size);
            encode_image(&img, &dir.join(format!("{i:03}.ppm")))?;
        }
    }
    load_dataset_dir(
        out,
        &SplitSpec::Fraction {
            seen: spec.seen_fraction,
            seed: spec.seed,
        },
        1,
    )
}
