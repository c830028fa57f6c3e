//! Synthetic multi-scale toy datasets.
//!
//! Two binary tasks over 256×256 grayscale base regions, each tiled into
//! co-centered patch triplets at three magnifications:
//!
//! * **micro**: positives carry a few small saturated crosses. The pattern
//!   is only resolvable at the finest scale.
//! * **macro**: every region holds one large bright blob, a circle for
//!   negatives and an elongated ellipse for positives. The shape is only
//!   recognizable at the coarsest scale.
//!
//! Background texture is two-octave value noise standardized to mean 128 and
//! std 20, plus sparse bright speckles whose 2× downsampled footprint is
//! similar to a downsampled cross. Everything is a pure function of
//! `(kind, sizes, seed)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const REGION_SIZE: usize = 256;
pub const PATCH_SIZE: usize = 64;
pub const DEFAULT_GRID_STEP: usize = 64;

pub const TEXTURE_MEAN: f64 = 128.0;
pub const TEXTURE_STD: f64 = 20.0;
/// Texture (and speckles) never reach this value; only crosses do.
pub const TEXTURE_CEIL: f64 = 235.0;
/// Per-region brightness and contrast variation (uniform half-widths).
pub const TEXTURE_MEAN_JITTER: f64 = 6.0;
pub const TEXTURE_STD_JITTER: f64 = 3.0;

pub const CROSS_SIZE: usize = 5;
pub const CROSS_VALUE: u8 = 255;
pub const CROSS_COUNT: (usize, usize) = (3, 6);

pub const SHAPE_DIAMETER: (f64, f64) = (120.0, 200.0);
pub const ELLIPSE_RATIO: (f64, f64) = (1.6, 2.4);
pub const SHAPE_BOOST: f64 = 80.0;

/// Number of bright background speckles per region (inclusive range).
pub const SPECKLE_COUNT: (usize, usize) = (40, 160);
pub const SPECKLE_SIDE: (usize, usize) = (1, 4);
pub const SPECKLE_VALUE: (f64, f64) = (185.0, 232.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Micro,
    Macro,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Micro => "micro",
            DatasetKind::Macro => "macro",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(DatasetKind::Micro),
            "macro" => Ok(DatasetKind::Macro),
            _ => Err(Error::Config(format!("unknown dataset kind {s:?} (micro|macro)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|val|test)"))),
        }
    }
}

/// The three magnifications, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "s20")]
    X20,
    #[serde(rename = "s10")]
    X10,
    #[serde(rename = "s5")]
    X5,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::X20, Scale::X10, Scale::X5];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Side of the base-region window this scale covers.
    pub fn window(self) -> usize {
        PATCH_SIZE * self.factor()
    }

    pub fn factor(self) -> usize {
        match self {
            Scale::X20 => 1,
            Scale::X10 => 2,
            Scale::X5 => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Scale::X20 => "s20",
            Scale::X10 => "s10",
            Scale::X5 => "s5",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::X20 => "20x",
            Scale::X10 => "10x",
            Scale::X5 => "5x",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "20x" | "20" | "s20" => Ok(Scale::X20),
            "10x" | "10" | "s10" => Ok(Scale::X10),
            "5x" | "5" | "s5" => Ok(Scale::X5),
            _ => Err(Error::Config(format!("unknown scale {s:?} (20x|10x|5x)"))),
        }
    }
}

/// Regions per class in each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 60,
            val: 20,
            test: 40,
        }
    }
}

impl SplitSizes {
    /// Splits `n` regions per class 3:1:2, keeping at least one region in
    /// every split when `n >= 3`.
    pub fn from_total(n: usize) -> Self {
        let val = (n / 6).max(usize::from(n >= 3));
        let test = (n / 3).max(usize::from(n >= 2));
        let train = n.saturating_sub(val + test);
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along `theta`.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn axis_ratio(&self) -> f64 {
        self.a.max(self.b) / self.a.min(self.b)
    }

    /// Point on the boundary at parameter `t` (radians).
    pub fn boundary_point(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }
}

/// What was drawn into a region, kept for diagnostics and oracles.
#[derive(Clone, Debug, PartialEq)]
pub enum RegionTruth {
    Background,
    Crosses(Vec<(usize, usize)>),
    Shape(Ellipse),
}

#[derive(Clone, Debug)]
pub struct BaseRegion {
    pub region_id: usize,
    pub label: u8,
    pub split: Split,
    pub pixels: GrayImage,
    pub truth: RegionTruth,
}

#[derive(Clone, Debug)]
pub struct PatchTriplet {
    pub patch_id: usize,
    pub region_id: usize,
    pub label: u8,
    pub split: Split,
    /// Center in base-region pixels.
    pub center: (usize, usize),
    /// Indexed by [`Scale::index`].
    pub images: [GrayImage; 3],
    /// Whether the finest-scale crop contains a whole cross (micro only).
    pub has_pattern: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub grid_step: usize,
}

impl ToyConfig {
    pub fn new(kind: DatasetKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            sizes: SplitSizes::default(),
            grid_step: DEFAULT_GRID_STEP,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub regions: Vec<BaseRegion>,
    pub patches: Vec<PatchTriplet>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

fn kind_stream(kind: DatasetKind) -> u64 {
    match kind {
        DatasetKind::Micro => 0x6D69_6372,
        DatasetKind::Macro => 0x6D61_6372,
    }
}

/// Region layout: splits in order train/val/test, and within a split the
/// classes alternate negative/positive.
fn region_plan(sizes: &SplitSizes) -> Vec<(Split, u8)> {
    let mut plan = Vec::with_capacity(2 * sizes.total());
    for split in Split::ALL {
        for _ in 0..sizes.get(split) {
            plan.push((split, 0));
            plan.push((split, 1));
        }
    }
    plan
}

pub fn generate(cfg: &ToyConfig) -> Result<ToyDataset> {
    if cfg.sizes.total() == 0 {
        return Err(Error::Config("need at least one region per class".into()));
    }
    let plan = region_plan(&cfg.sizes);
    let stream = kind_stream(cfg.kind);
    let regions: Vec<BaseRegion> = plan
        .par_iter()
        .enumerate()
        .map(|(id, &(split, label))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream, id as u64));
            let (pixels, truth) = match cfg.kind {
                DatasetKind::Micro => render_micro(&mut rng, label == 1),
                DatasetKind::Macro => render_macro(&mut rng, label == 1),
            };
            BaseRegion {
                region_id: id,
                label,
                split,
                pixels,
                truth,
            }
        })
        .collect();

    let mut patches = Vec::new();
    for region in &regions {
        for mut p in tile_region(region, cfg.grid_step)? {
            p.patch_id = patches.len();
            patches.push(p);
        }
    }
    Ok(ToyDataset {
        kind: cfg.kind,
        seed: cfg.seed,
        regions,
        patches,
    })
}

pub fn gen_micro(n_regions_per_class: usize, seed: u64) -> Result<ToyDataset> {
    if n_regions_per_class == 0 {
        return Err(Error::Config("n_regions_per_class must be >= 1".into()));
    }
    let mut cfg = ToyConfig::new(DatasetKind::Micro, seed);
    cfg.sizes = SplitSizes::from_total(n_regions_per_class);
    generate(&cfg)
}

pub fn gen_macro(n_regions_per_class: usize, seed: u64) -> Result<ToyDataset> {
    if n_regions_per_class == 0 {
        return Err(Error::Config("n_regions_per_class must be >= 1".into()));
    }
    let mut cfg = ToyConfig::new(DatasetKind::Macro, seed);
    cfg.sizes = SplitSizes::from_total(n_regions_per_class);
    generate(&cfg)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise_octave(rng: &mut ChaCha8Rng, spacing: usize, out: &mut [f64], amp: f64) {
    let cells = REGION_SIZE / spacing + 1;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.sample(StandardNormal)).collect();
    for y in 0..REGION_SIZE {
        let gy = y / spacing;
        let ty = smoothstep((y % spacing) as f64 / spacing as f64);
        for x in 0..REGION_SIZE {
            let gx = x / spacing;
            let tx = smoothstep((x % spacing) as f64 / spacing as f64);
            let v00 = lattice[gy * cells + gx];
            let v10 = lattice[gy * cells + gx + 1];
            let v01 = lattice[(gy + 1) * cells + gx];
            let v11 = lattice[(gy + 1) * cells + gx + 1];
            let top = v00 + (v10 - v00) * tx;
            let bottom = v01 + (v11 - v01) * tx;
            out[y * REGION_SIZE + x] += amp * (top + (bottom - top) * ty);
        }
    }
}

/// Background texture as floats: standardized value noise plus speckles.
fn texture(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = REGION_SIZE * REGION_SIZE;
    let mut field = vec![0.0; n];
    value_noise_octave(rng, 32, &mut field, 1.0);
    value_noise_octave(rng, 8, &mut field, 0.6);
    for v in field.iter_mut() {
        *v += 0.25 * rng.sample::<f64, _>(StandardNormal);
    }
    let mean = field.iter().sum::<f64>() / n as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-12);
    let level = TEXTURE_MEAN + rng.gen_range(-TEXTURE_MEAN_JITTER..=TEXTURE_MEAN_JITTER);
    let contrast = TEXTURE_STD + rng.gen_range(-TEXTURE_STD_JITTER..=TEXTURE_STD_JITTER);
    for v in field.iter_mut() {
        *v = level + contrast * (*v - mean) / sd;
    }

    let count = rng.gen_range(SPECKLE_COUNT.0..=SPECKLE_COUNT.1);
    for _ in 0..count {
        let side = rng.gen_range(SPECKLE_SIDE.0..=SPECKLE_SIDE.1);
        let value = rng.gen_range(SPECKLE_VALUE.0..SPECKLE_VALUE.1);
        let x0 = rng.gen_range(0..=REGION_SIZE - side);
        let y0 = rng.gen_range(0..=REGION_SIZE - side);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                field[y * REGION_SIZE + x] = value;
            }
        }
    }
    for v in field.iter_mut() {
        *v = v.clamp(0.0, TEXTURE_CEIL);
    }
    field
}

fn quantize(field: &[f64]) -> GrayImage {
    GrayImage::new(
        REGION_SIZE,
        REGION_SIZE,
        field.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )
}

/// Pixels lit by a cross centered at `(cx, cy)`.
pub fn cross_pixels(cx: usize, cy: usize) -> Vec<(usize, usize)> {
    let r = CROSS_SIZE / 2;
    let mut px = Vec::with_capacity(2 * CROSS_SIZE - 1);
    for d in 0..CROSS_SIZE {
        px.push((cx + d - r, cy));
        if d != r {
            px.push((cx, cy + d - r));
        }
    }
    px
}

fn render_micro(rng: &mut ChaCha8Rng, positive: bool) -> (GrayImage, RegionTruth) {
    let tex = texture(rng);
    let mut img = quantize(&tex);
    if !positive {
        return (img, RegionTruth::Background);
    }
    let r = CROSS_SIZE / 2;
    let count = rng.gen_range(CROSS_COUNT.0..=CROSS_COUNT.1);
    let mut centers = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = rng.gen_range(r..REGION_SIZE - r);
        let cy = rng.gen_range(r..REGION_SIZE - r);
        for (x, y) in cross_pixels(cx, cy) {
            img.set(x, y, CROSS_VALUE);
        }
        centers.push((cx, cy));
    }
    (img, RegionTruth::Crosses(centers))
}

fn render_macro(rng: &mut ChaCha8Rng, positive: bool) -> (GrayImage, RegionTruth) {
    let mut tex = texture(rng);
    let d = rng.gen_range(SHAPE_DIAMETER.0..SHAPE_DIAMETER.1);
    let ratio = if positive {
        rng.gen_range(ELLIPSE_RATIO.0..ELLIPSE_RATIO.1)
    } else {
        1.0
    };
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    // Equal-area parametrization: `d` is the diameter of the circle with the
    // same area, so the blob size carries no class signal.
    let a = 0.5 * d * ratio.sqrt();
    let b = 0.5 * d / ratio.sqrt();
    let margin = 0.5 * d;
    let cx = rng.gen_range(margin..REGION_SIZE as f64 - margin);
    let cy = rng.gen_range(margin..REGION_SIZE as f64 - margin);
    let shape = Ellipse { cx, cy, a, b, theta };
    for y in 0..REGION_SIZE {
        for x in 0..REGION_SIZE {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                tex[y * REGION_SIZE + x] += SHAPE_BOOST;
            }
        }
    }
    (quantize(&tex), RegionTruth::Shape(shape))
}

/// Top-left corner of a `window`-sized crop centered at `c`, clamped inside
/// the region.
fn clamped_origin(c: usize, window: usize) -> usize {
    let half = window / 2;
    c.saturating_sub(half).min(REGION_SIZE - window)
}

/// Renders the three co-centered views around `center`.
pub fn render_triplet(region: &GrayImage, center: (usize, usize)) -> [GrayImage; 3] {
    Scale::ALL.map(|s| {
        let w = s.window();
        let x0 = clamped_origin(center.0, w);
        let y0 = clamped_origin(center.1, w);
        region.crop(x0, y0, w, w).box_downsample(s.factor())
    })
}

/// Tiles a region on a regular grid of centers `step/2 + k·step`, keeping
/// the centers whose finest-scale window lies inside the region.
pub fn tile_region(region: &BaseRegion, grid_step: usize) -> Result<Vec<PatchTriplet>> {
    if grid_step == 0 || grid_step > REGION_SIZE {
        return Err(Error::Config(format!(
            "grid step {grid_step} must be in 1..={REGION_SIZE}"
        )));
    }
    if REGION_SIZE % grid_step != 0 {
        return Err(Error::Config(format!(
            "grid step {grid_step} does not divide {REGION_SIZE}"
        )));
    }
    let half = PATCH_SIZE / 2;
    let centers: Vec<usize> = (0..REGION_SIZE / grid_step)
        .map(|k| grid_step / 2 + k * grid_step)
        .filter(|&c| c >= half && c + half <= REGION_SIZE)
        .collect();
    let mut out = Vec::with_capacity(centers.len() * centers.len());
    for &cy in &centers {
        for &cx in &centers {
            let has_pattern = match &region.truth {
                RegionTruth::Crosses(cs) => cs.iter().any(|&(x, y)| {
                    let r = CROSS_SIZE / 2;
                    x >= cx - half + r && x + r < cx + half && y >= cy - half + r && y + r < cy + half
                }),
                _ => false,
            };
            out.push(PatchTriplet {
                patch_id: 0,
                region_id: region.region_id,
                label: region.label,
                split: region.split,
                center: (cx, cy),
                images: render_triplet(&region.pixels, (cx, cy)),
                has_pattern,
            });
        }
    }
    Ok(out)
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub region_id: usize,
    pub split: Split,
    pub label: u8,
    pub cx: usize,
    pub cy: usize,
    pub path_s20: String,
    pub path_s10: String,
    pub path_s5: String,
}

impl ManifestRecord {
    pub fn path(&self, scale: Scale) -> &str {
        match scale {
            Scale::X20 => &self.path_s20,
            Scale::X10 => &self.path_s10,
            Scale::X5 => &self.path_s5,
        }
    }
}

/// Sidecar with dataset-level metadata, written next to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub kind: DatasetKind,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub grid_step: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub info: Option<DatasetInfo>,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.json";

impl DatasetManifest {
    pub fn from_dataset(ds: &ToyDataset) -> Self {
        let records = ds
            .patches
            .iter()
            .map(|p| {
                let path = |s: Scale| format!("patches/{:06}_{}.pgm", p.patch_id, s.tag());
                ManifestRecord {
                    id: p.patch_id,
                    region_id: p.region_id,
                    split: p.split,
                    label: p.label,
                    cx: p.center.0,
                    cy: p.center.1,
                    path_s20: path(Scale::X20),
                    path_s10: path(Scale::X10),
                    path_s5: path(Scale::X5),
                }
            })
            .collect();
        Self {
            root: PathBuf::new(),
            info: None,
            records,
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    /// Loads `manifest.jsonl` (or the given file) and its optional sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                    path: path.clone(),
                    offset,
                    msg: e.to_string(),
                })?;
                records.push(rec);
            }
            offset += line.len();
        }
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id) {
                return Err(Error::Data(format!("{}: duplicate id {}", path.display(), r.id)));
            }
        }
        let info_path = root.join(INFO_FILE);
        let info = if info_path.exists() {
            let s = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
            Some(serde_json::from_str(&s).map_err(|e| Error::Parse {
                path: info_path.clone(),
                offset: 0,
                msg: e.to_string(),
            })?)
        } else {
            None
        };
        Ok(Self {
            root,
            info,
            records,
        })
    }

    /// Reads the three images of record `i`, checking their size.
    pub fn load_images(&self, i: usize) -> Result<[GrayImage; 3]> {
        let rec = &self.records[i];
        let mut out = Vec::with_capacity(3);
        for s in Scale::ALL {
            let p = self.resolve(rec.path(s));
            let img = GrayImage::load_pgm(&p)?;
            if img.width() != PATCH_SIZE || img.height() != PATCH_SIZE {
                return Err(Error::Data(format!(
                    "{}: expected {PATCH_SIZE}x{PATCH_SIZE}, found {}x{}",
                    p.display(),
                    img.width(),
                    img.height()
                )));
            }
            out.push(img);
        }
        Ok(out.try_into().unwrap())
    }
}

/// Writes every patch image, `manifest.jsonl`, and `dataset.json` under `dir`.
pub fn write_dataset(ds: &ToyDataset, cfg: &ToyConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let patch_dir = dir.join("patches");
    fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let mut manifest = DatasetManifest::from_dataset(ds);
    manifest.root = dir.to_path_buf();
    for (p, rec) in ds.patches.iter().zip(&manifest.records) {
        for s in Scale::ALL {
            p.images[s.index()].save_pgm(dir.join(rec.path(s)))?;
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_jsonl()).map_err(|e| Error::io(&mpath, e))?;
    let info = DatasetInfo {
        kind: ds.kind,
        seed: ds.seed,
        sizes: cfg.sizes,
        grid_step: cfg.grid_step,
    };
    let ipath = dir.join(INFO_FILE);
    let text = serde_json::to_string_pretty(&info).expect("info serializes") + "\n";
    fs::write(&ipath, text).map_err(|e| Error::io(&ipath, e))?;
    manifest.info = Some(info);
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: DatasetKind, seed: u64) -> ToyDataset {
        let mut cfg = ToyConfig::new(kind, seed);
        cfg.sizes = SplitSizes {
            train: 2,
            val: 1,
            test: 1,
        };
        generate(&cfg).unwrap()
    }

    #[test]
    fn step_256_gives_one_centered_triplet() {
        let ds = small(DatasetKind::Micro, 1);
        let region = &ds.regions[1];
        let t = tile_region(region, 256).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].center, (128, 128));
        assert_eq!(t[0].images[Scale::X5.index()], region.pixels.box_downsample(4));
        assert_eq!(t[0].images[Scale::X20.index()], region.pixels.crop(96, 96, 64, 64));
    }

    #[test]
    fn step_64_gives_sixteen() {
        let ds = small(DatasetKind::Macro, 2);
        let t = tile_region(&ds.regions[0], 64).unwrap();
        assert_eq!(t.len(), 16);
        assert!(t.iter().all(|p| p.label == ds.regions[0].label));
        assert!(t.iter().all(|p| p.images.iter().all(|i| i.width() == 64 && i.height() == 64)));
    }

    #[test]
    fn clamped_grid_count_matches_enumeration() {
        // Independent count: centers k*step + step/2 whose 64-wide window fits.
        for step in [16usize, 32, 64, 128, 256] {
            let per_axis = (0..256 / step)
                .filter(|k| {
                    let c = (k * step + step / 2) as i64;
                    c - 32 >= 0 && c + 32 <= 256
                })
                .count();
            let ds = small(DatasetKind::Micro, 3);
            assert_eq!(tile_region(&ds.regions[0], step).unwrap().len(), per_axis * per_axis);
        }
    }

    #[test]
    fn bad_steps() {
        let ds = small(DatasetKind::Micro, 0);
        assert!(tile_region(&ds.regions[0], 512).is_err());
        assert!(tile_region(&ds.regions[0], 48).is_err());
        assert!(tile_region(&ds.regions[0], 0).is_err());
    }

    #[test]
    fn deterministic() {
        let a = small(DatasetKind::Micro, 9);
        let b = small(DatasetKind::Micro, 9);
        for (x, y) in a.patches.iter().zip(&b.patches) {
            assert_eq!(x.images, y.images);
        }
        let c = small(DatasetKind::Micro, 10);
        assert_ne!(a.regions[0].pixels, c.regions[0].pixels);
    }

    #[test]
    fn labels_balanced_per_split() {
        let ds = small(DatasetKind::Macro, 4);
        for split in Split::ALL {
            let pos = ds.regions.iter().filter(|r| r.split == split && r.label == 1).count();
            let neg = ds.regions.iter().filter(|r| r.split == split && r.label == 0).count();
            assert!(pos.abs_diff(neg) <= 1);
        }
    }

    #[test]
    fn micro_pixels_and_crosses() {
        let ds = small(DatasetKind::Micro, 5);
        for r in &ds.regions {
            let saturated = r.pixels.pixels().iter().filter(|&&v| v >= 240).count();
            match &r.truth {
                RegionTruth::Background => {
                    assert_eq!(r.label, 0);
                    assert_eq!(saturated, 0);
                }
                RegionTruth::Crosses(cs) => {
                    assert_eq!(r.label, 1);
                    assert!((3..=6).contains(&cs.len()));
                    assert!(saturated >= 9 && saturated <= 9 * cs.len());
                }
                RegionTruth::Shape(_) => panic!("micro region with a shape"),
            }
        }
    }

    #[test]
    fn macro_shapes() {
        let ds = small(DatasetKind::Macro, 6);
        for r in &ds.regions {
            let RegionTruth::Shape(e) = &r.truth else { panic!("no shape") };
            let ratio = e.axis_ratio();
            if r.label == 0 {
                assert!((ratio - 1.0).abs() < 1e-12);
            } else {
                assert!((1.6..=2.4).contains(&ratio));
            }
            let d = 2.0 * (e.a * e.b).sqrt();
            assert!((120.0..=200.0).contains(&d));
        }
    }

    #[test]
    fn split_sizes_from_total() {
        assert_eq!(
            SplitSizes::from_total(120),
            SplitSizes {
                train: 60,
                val: 20,
                test: 40
            }
        );
        let one = SplitSizes::from_total(1);
        assert_eq!(one.total(), 1);
        assert_eq!(SplitSizes::from_total(3).total(), 3);
    }

    #[test]
    fn cross_shape() {
        let px = cross_pixels(10, 10);
        assert_eq!(px.len(), 9);
        assert!(px.contains(&(8, 10)) && px.contains(&(10, 12)) && px.contains(&(10, 10)));
    }
}
