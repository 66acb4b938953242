//! Synthetic paired corpus: shapes rendered as static RGB images and as
//! moving-shape clips converted to DVS events.
//!
//! Layout under the corpus root:
//!
//! ```text
//! static/<category>/<id>.ppm
//! event/<category>/<split>_<id>.evt
//! labels.csv      path,category_id,domain,split
//! manifest.txt    geometry, time steps, categories, entry count
//! ```
//!
//! Every sample is drawn from its own ChaCha stream selected by the sample
//! index, so the corpus is reproducible regardless of generation order.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::events::{
    decode_event_file, encode_event_file, integrate_frames, simulate_dvs, EventError, FrameTensor,
    LuminanceFrame,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LABELS_FILE: &str = "labels.csv";

/// Microseconds between rendered motion frames.
const FRAME_INTERVAL_US: u32 = 1000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid corpus configuration: {0}")]
    InvalidConfig(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Event { path: PathBuf, source: EventError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Cross,
    Bar,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Cross,
        ShapeKind::Bar,
        ShapeKind::Triangle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Cross => "cross",
            ShapeKind::Bar => "bar",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `s`. `y` grows downwards.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Square => ax <= s && ay <= s,
            ShapeKind::Disk => dx * dx + dy * dy <= s * s,
            ShapeKind::Cross => (ax <= s / 3.0 && ay <= s) || (ay <= s / 3.0 && ax <= s),
            ShapeKind::Bar => ax <= s && ay <= s / 3.0,
            ShapeKind::Triangle => dy >= -s && dy <= s && ax <= (dy + s) / 2.0,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown shape {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub categories: Vec<ShapeKind>,
    pub height: usize,
    pub width: usize,
    pub statics_per_category: usize,
    pub events_train_per_category: usize,
    pub events_test_per_category: usize,
    pub motion_frames: usize,
    pub contrast_threshold: f64,
    /// Relative luminance jitter per frame; spurious events come from it.
    pub noise: f64,
    /// Time steps recorded in the manifest for loaders.
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: ShapeKind::ALL.to_vec(),
            height: 16,
            width: 16,
            statics_per_category: 200,
            events_train_per_category: 20,
            events_test_per_category: 50,
            motion_frames: 12,
            contrast_threshold: 0.2,
            noise: 0.05,
            timesteps: 6,
            seed: 0,
        }
    }
}

pub const SYNTH_KEYS: [&str; 11] = [
    "categories",
    "height",
    "width",
    "statics_per_category",
    "events_train_per_category",
    "events_test_per_category",
    "motion_frames",
    "contrast_threshold",
    "noise",
    "timesteps",
    "seed",
];

impl SynthConfig {
    /// Sets one field from its text form. Categories are comma-separated
    /// shape names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DatasetError> {
        let v = value.trim();
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, DatasetError> {
            v.parse()
                .map_err(|_| DatasetError::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        match key.trim() {
            "categories" => {
                self.categories = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(DatasetError::InvalidConfig))
                    .collect::<Result<_, _>>()?
            }
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "statics_per_category" => self.statics_per_category = num(key, v)?,
            "events_train_per_category" => self.events_train_per_category = num(key, v)?,
            "events_test_per_category" => self.events_test_per_category = num(key, v)?,
            "motion_frames" => self.motion_frames = num(key, v)?,
            "contrast_threshold" => self.contrast_threshold = num(key, v)?,
            "noise" => self.noise = num(key, v)?,
            "timesteps" => self.timesteps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(DatasetError::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let cats: Vec<&str> = self.categories.iter().map(|c| c.name()).collect();
        let values = [
            cats.join(","),
            self.height.to_string(),
            self.width.to_string(),
            self.statics_per_category.to_string(),
            self.events_train_per_category.to_string(),
            self.events_test_per_category.to_string(),
            self.motion_frames.to_string(),
            self.contrast_threshold.to_string(),
            self.noise.to_string(),
            self.timesteps.to_string(),
            self.seed.to_string(),
        ];
        SYNTH_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.categories.is_empty() {
            return bad("no categories");
        }
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].contains(c) {
                return bad("duplicate category");
            }
        }
        if self.height < 8 || self.width < 8 {
            return bad("images must be at least 8x8");
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad("images too large for the event format");
        }
        // A corpus without a test split is allowed; training splits are not
        // optional.
        if self.statics_per_category == 0 || self.events_train_per_category == 0 {
            return bad("training sample counts must be at least 1");
        }
        if self.motion_frames < 2 {
            return bad("motion clips need at least 2 frames");
        }
        if !(self.contrast_threshold > 0.0) || !self.contrast_threshold.is_finite() {
            return bad("contrast threshold must be positive");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1)");
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Static,
    Event,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Static => "static",
            Domain::Event => "event",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the corpus root, `/`-separated.
    pub path: String,
    pub category: usize,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub categories: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub timesteps: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, domain: Domain, split: Split) -> usize {
        self.entries
            .iter()
            .filter(|e| e.domain == domain && e.split == split)
            .count()
    }
}

/// RGB or grayscale image with channel-major `[C, H, W]` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl StaticImage {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), channels * height * width, "image buffer size");
        StaticImage {
            channels,
            height,
            width,
            values,
        }
    }
}

/// Writes a binary 8-bit PPM.
pub fn encode_ppm(img: &StaticImage) -> Vec<u8> {
    assert_eq!(img.channels, 3, "PPM stores RGB");
    let n = img.height * img.width;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for i in 0..n {
        for c in 0..3 {
            out.push((img.values[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Reads a binary PPM (`P6`) with any maxval up to 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<StaticImage, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let mut num = |what: &str| -> Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = width * height;
    let raster = bytes
        .get(start..)
        .filter(|r| r.len() == 3 * n)
        .ok_or_else(|| format!("raster has {} bytes, expected {}", bytes.len().saturating_sub(start), 3 * n))?;
    let mut values = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            values[c * n + i] = raster[3 * i + c] as f64 / maxval as f64;
        }
    }
    Ok(StaticImage::new(3, height, width, values))
}

/// Fraction of a 4x4 grid of sub-pixel samples that falls inside the shape.
fn coverage(kind: ShapeKind, x: usize, y: usize, cx: f64, cy: f64, s: f64) -> f64 {
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let px = x as f64 + (sx as f64 + 0.5) / 4.0;
            let py = y as f64 + (sy as f64 + 0.5) / 4.0;
            if kind.contains(px - cx, py - cy, s) {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn half_extent(rng: &mut ChaCha8Rng, h: usize, w: usize) -> f64 {
    let m = h.min(w) as f64;
    rng.gen_range(0.2 * m..0.3 * m)
}

fn render_static(kind: ShapeKind, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> StaticImage {
    let (h, w) = (cfg.height, cfg.width);
    let s = half_extent(rng, h, w);
    let cx = rng.gen_range(s..w as f64 - s);
    let cy = rng.gen_range(s..h as f64 - s);
    let base = rng.gen_range(0.1..0.4);
    let tint: [f64; 3] = [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)];
    // Random colour whose brightest channel is well above the background.
    let mut color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let top = rng.gen_range(0.7..1.0);
    let peak = color.iter().cloned().fold(1e-6, f64::max);
    color.iter_mut().for_each(|c| *c = *c / peak * top);
    let n = h * w;
    let mut values = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let texture = base + rng.gen_range(-0.08..0.08);
            let a = coverage(kind, x, y, cx, cy, s);
            for c in 0..3 {
                let bg = (texture * tint[c]).clamp(0.0, 1.0);
                values[c * n + y * w + x] = (1.0 - a) * bg + a * color[c];
            }
        }
    }
    StaticImage::new(3, h, w, values)
}

/// Renders a clip of the shape gliding across a static textured background.
fn render_clip(kind: ShapeKind, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<LuminanceFrame> {
    let (h, w) = (cfg.height, cfg.width);
    let frames = cfg.motion_frames;
    let s = half_extent(rng, h, w);
    let speed = rng.gen_range(0.5..1.0) * (h.min(w) as f64 / 16.0);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
    let travel = |v: f64| v * (frames - 1) as f64;
    // Pick a start so that the whole path stays inside the image when it
    // fits, centred otherwise.
    let span = |extent: usize, v: f64| {
        let lo = s - travel(v).min(0.0);
        let hi = extent as f64 - s - travel(v).max(0.0);
        if lo < hi {
            (lo, hi)
        } else {
            let mid = extent as f64 / 2.0 - travel(v) / 2.0;
            (mid, mid + 1e-9)
        }
    };
    let (x0, x1) = span(w, vx);
    let (y0, y1) = span(h, vy);
    let (sx, sy) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
    let background: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.15..0.35)).collect();
    let level = rng.gen_range(0.7..1.0);
    (0..frames)
        .map(|k| {
            let (cx, cy) = (sx + vx * k as f64, sy + vy * k as f64);
            let values = (0..h * w)
                .map(|i| {
                    let a = coverage(kind, i % w, i / w, cx, cy, s);
                    let v = (1.0 - a) * background[i] + a * level;
                    v * (1.0 + cfg.noise * rng.gen_range(-1.0..1.0))
                })
                .collect();
            LuminanceFrame::new(k as u32 * FRAME_INTERVAL_US, h, w, values)
        })
        .collect()
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Renders the corpus under `root` and returns its manifest.
pub fn generate_synthetic_pair_set(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    let mut entries = Vec::new();
    let mut index = 0u64;
    for (label, &kind) in cfg.categories.iter().enumerate() {
        for i in 0..cfg.statics_per_category {
            let mut rng = sample_rng(cfg.seed, index);
            index += 1;
            let path = format!("static/{kind}/{i:04}.ppm");
            write_file(&root.join(&path), &encode_ppm(&render_static(kind, cfg, &mut rng)))?;
            entries.push(ManifestEntry {
                path,
                category: label,
                domain: Domain::Static,
                split: Split::Train,
            });
        }
        let splits = [
            (Split::Train, cfg.events_train_per_category),
            (Split::Test, cfg.events_test_per_category),
        ];
        for (split, count) in splits {
            for i in 0..count {
                let mut rng = sample_rng(cfg.seed, index);
                index += 1;
                let path = format!("event/{kind}/{}_{i:04}.evt", split.name());
                let clip = render_clip(kind, cfg, &mut rng);
                let stream = simulate_dvs(&clip, cfg.contrast_threshold).map_err(|source| DatasetError::Event {
                    path: root.join(&path),
                    source,
                })?;
                write_file(&root.join(&path), &encode_event_file(&stream))?;
                entries.push(ManifestEntry {
                    path,
                    category: label,
                    domain: Domain::Event,
                    split,
                });
            }
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        categories: cfg.categories.iter().map(|k| k.name().to_string()).collect(),
        height: cfg.height,
        width: cfg.width,
        timesteps: cfg.timesteps,
        entries,
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

fn write_manifest(m: &DatasetManifest) -> Result<(), DatasetError> {
    let labels_path = m.root.join(LABELS_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| decode_err(&labels_path, e.to_string());
    w.write_record(["path", "category_id", "domain", "split"]).map_err(csv_err)?;
    for e in &m.entries {
        w.write_record([&e.path, &e.category.to_string(), e.domain.name(), e.split.name()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| decode_err(&labels_path, e.to_string()))?;
    write_file(&labels_path, &bytes)?;

    let text = format!(
        "height = {}\nwidth = {}\ntimesteps = {}\ncategories = {}\nentries = {}\nlabels = {LABELS_FILE}\n",
        m.height,
        m.width,
        m.timesteps,
        m.categories.join(","),
        m.entries.len()
    );
    write_file(&m.root.join(MANIFEST_FILE), text.as_bytes())
}

/// Reads `manifest.txt` and the `labels.csv` it names.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut fields = std::collections::BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| decode_err(path, format!("line {}: expected key = value", n + 1)))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| decode_err(path, format!("missing key {k}")));
    let num = |k: &str| -> Result<usize, DatasetError> {
        let v = get(k)?;
        v.parse().map_err(|_| decode_err(path, format!("{k}: bad value {v:?}")))
    };
    let categories: Vec<String> = get("categories")?.split(',').map(|s| s.trim().to_string()).collect();
    let (height, width, timesteps, expected) = (num("height")?, num("width")?, num("timesteps")?, num("entries")?);
    let labels_path = root.join(get("labels")?);
    let bytes = fs::read(&labels_path).map_err(io_err(&labels_path))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut entries = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let row = n + 2;
        let rec = rec.map_err(|e| decode_err(&labels_path, e.to_string()))?;
        if rec.len() != 4 {
            return Err(decode_err(&labels_path, format!("row {row}: expected 4 fields")));
        }
        let category: usize = rec[1]
            .parse()
            .ok()
            .filter(|&c| c < categories.len())
            .ok_or_else(|| decode_err(&labels_path, format!("row {row}: bad category {:?}", &rec[1])))?;
        let domain = match &rec[2] {
            "static" => Domain::Static,
            "event" => Domain::Event,
            d => return Err(decode_err(&labels_path, format!("row {row}: bad domain {d:?}"))),
        };
        let split = match &rec[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            s => return Err(decode_err(&labels_path, format!("row {row}: bad split {s:?}"))),
        };
        entries.push(ManifestEntry {
            path: rec[0].to_string(),
            category,
            domain,
            split,
        });
    }
    if entries.len() != expected {
        return Err(decode_err(
            path,
            format!("{} rows in {LABELS_FILE}, manifest lists {expected}", entries.len()),
        ));
    }
    Ok(DatasetManifest {
        root,
        categories,
        height,
        width,
        timesteps,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled<X> {
    pub input: X,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub categories: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub statics: Vec<Labeled<StaticImage>>,
    pub event_train: Vec<Labeled<FrameTensor>>,
    pub event_test: Vec<Labeled<FrameTensor>>,
}

pub fn load_static(path: &Path) -> Result<StaticImage, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|reason| decode_err(path, reason))
}

pub fn load_events(path: &Path, timesteps: usize) -> Result<FrameTensor, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let event = |source| DatasetError::Event {
        path: path.to_path_buf(),
        source,
    };
    let stream = decode_event_file(&bytes).map_err(event)?;
    integrate_frames(&stream, timesteps).map_err(event)
}

/// Loads every sample of the manifest at `path`, integrating event streams
/// into `timesteps` frames.
pub fn load_dataset(path: &Path, timesteps: usize) -> Result<LoadedDataset, DatasetError> {
    let m = read_manifest(path)?;
    let mut out = LoadedDataset {
        categories: m.categories.clone(),
        height: m.height,
        width: m.width,
        statics: Vec::new(),
        event_train: Vec::new(),
        event_test: Vec::new(),
    };
    for e in &m.entries {
        let file = m.root.join(&e.path);
        match (e.domain, e.split) {
            (Domain::Static, _) => {
                let img = load_static(&file)?;
                if (img.height, img.width) != (m.height, m.width) {
                    return Err(decode_err(&file, format!("{}x{} image in a {}x{} corpus", img.height, img.width, m.height, m.width)));
                }
                out.statics.push(Labeled {
                    input: img,
                    label: e.category,
                });
            }
            (Domain::Event, split) => {
                let frames = load_events(&file, timesteps)?;
                if (frames.height(), frames.width()) != (m.height, m.width) {
                    return Err(decode_err(&file, "event geometry differs from the corpus"));
                }
                let item = Labeled {
                    input: frames,
                    label: e.category,
                };
                match split {
                    Split::Train => out.event_train.push(item),
                    Split::Test => out.event_test.push(item),
                }
            }
        }
    }
    Ok(out)
}
