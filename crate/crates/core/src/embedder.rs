//! Label-free patch embedder.
//!
//! A fixed hand-crafted descriptor (160 values) is standardized with
//! training-split statistics, mapped to `D` dimensions by a seeded Gaussian
//! projection, and standardized again. Nothing here looks at labels.
//!
//! Descriptor layout for a 64×64 patch with intensities scaled to `[0, 1]`.
//! "Cells" are the 16 non-overlapping 16×16 blocks in row-major order;
//! gradients are forward differences inside the patch.
//!
//! | range     | content                                                  |
//! |-----------|----------------------------------------------------------|
//! | 0..80     | per cell: mean, std, max, mean abs x-gradient, mean abs y-gradient |
//! | 80..96    | per cell: min                                            |
//! | 96..112   | per cell: max abs 4-neighbour Laplacian (interior pixels)|
//! | 112..128  | global 16-bin intensity histogram (fractions)            |
//! | 128..144  | per cell: fraction of pixels above [`BRIGHT_LEVEL`]      |
//! | 144..160  | global block, see [`GLOBAL_NAMES`]                       |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;
use crate::toydata::{DatasetManifest, Scale, Split, ToyDataset, PATCH_SIZE};

pub const DESCRIPTOR_LEN: usize = 160;
pub const DEFAULT_DIM: usize = 64;
const CELL: usize = 16;
const GRID: usize = PATCH_SIZE / CELL;

/// Intensity (0–255) above which a pixel counts as bright.
pub const BRIGHT_LEVEL: u8 = 191;
/// Intensity (0–255) used to segment blobs for the moment features.
pub const MASK_LEVEL: u8 = 180;
/// Intensity (0–255) counted as saturated.
pub const SATURATED_LEVEL: u8 = 240;

pub const GLOBAL_NAMES: [&str; 16] = [
    "mean",
    "std",
    "min",
    "max",
    "saturated_fraction",
    "bright_fraction",
    "mean_gradient_magnitude",
    "mean_abs_laplacian",
    "mask_major_axis",
    "mask_minor_axis",
    "mask_log_axis_ratio",
    "mask_mu20",
    "mask_mu02",
    "mask_anisotropy",
    "mask_area",
    "mask_compactness",
];

pub const FEATURE_NAMES: [&str; 3] = ["feat_s20", "feat_s10", "feat_s5"];

/// Computes the raw 160-value descriptor of a 64×64 patch.
pub fn describe(image: &GrayImage) -> Result<[f64; DESCRIPTOR_LEN]> {
    if image.width() != PATCH_SIZE || image.height() != PATCH_SIZE {
        return Err(Error::Data(format!(
            "embedder expects {PATCH_SIZE}x{PATCH_SIZE} patches, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let n = PATCH_SIZE;
    let px: Vec<f64> = image.pixels().iter().map(|&v| v as f64 / 255.0).collect();
    let at = |x: usize, y: usize| px[y * n + x];
    let mut d = [0.0; DESCRIPTOR_LEN];

    for cy in 0..GRID {
        for cx in 0..GRID {
            let cell = cy * GRID + cx;
            let (x0, y0) = (cx * CELL, cy * CELL);
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut mx = f64::NEG_INFINITY;
            let mut mn = f64::INFINITY;
            let (mut gx, mut ngx, mut gy, mut ngy) = (0.0, 0usize, 0.0, 0usize);
            let mut lap_max = 0.0f64;
            let mut bright = 0usize;
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    let v = at(x, y);
                    sum += v;
                    sq += v * v;
                    mx = mx.max(v);
                    mn = mn.min(v);
                    if image.get(x, y) > BRIGHT_LEVEL {
                        bright += 1;
                    }
                    if x + 1 < n {
                        gx += (at(x + 1, y) - v).abs();
                        ngx += 1;
                    }
                    if y + 1 < n {
                        gy += (at(x, y + 1) - v).abs();
                        ngy += 1;
                    }
                    if x > 0 && y > 0 && x + 1 < n && y + 1 < n {
                        let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * v;
                        lap_max = lap_max.max(lap.abs());
                    }
                }
            }
            let area = (CELL * CELL) as f64;
            let mean = sum / area;
            let var = (sq / area - mean * mean).max(0.0);
            d[cell * 5] = mean;
            d[cell * 5 + 1] = var.sqrt();
            d[cell * 5 + 2] = mx;
            d[cell * 5 + 3] = gx / ngx.max(1) as f64;
            d[cell * 5 + 4] = gy / ngy.max(1) as f64;
            d[80 + cell] = mn;
            d[96 + cell] = lap_max;
            d[128 + cell] = bright as f64 / area;
        }
    }

    let total = (n * n) as f64;
    for &v in image.pixels() {
        d[112 + (v as usize >> 4)] += 1.0 / total;
    }

    let mean = px.iter().sum::<f64>() / total;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total;
    let mut grad_sum = 0.0;
    let mut lap_sum = 0.0;
    let mut lap_n = 0usize;
    for y in 0..n {
        for x in 0..n {
            let v = at(x, y);
            let dx = if x + 1 < n { at(x + 1, y) - v } else { 0.0 };
            let dy = if y + 1 < n { at(x, y + 1) - v } else { 0.0 };
            grad_sum += (dx * dx + dy * dy).sqrt();
            if x > 0 && y > 0 && x + 1 < n && y + 1 < n {
                lap_sum +=
                    (at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * v).abs();
                lap_n += 1;
            }
        }
    }

    // Moments of the thresholded blob mask after a 3×3 opening, which drops
    // specks narrower than three pixels. Coordinates scaled to [-0.5, 0.5].
    let mask = open3(&image.pixels().iter().map(|&v| v > MASK_LEVEL).collect::<Vec<_>>(), n);
    let on = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < n && mask[y as usize * n + x as usize];
    let mut m = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] {
                m += 1.0;
                sx += (x as f64 + 0.5) / n as f64 - 0.5;
                sy += (y as f64 + 0.5) / n as f64 - 0.5;
            }
        }
    }
    let (mut mu20, mut mu02, mut mu11, mut aniso, mut compact) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut major, mut minor, mut log_ratio) = (0.0, 0.0, 0.0);
    if m > 0.0 {
        let cxm = sx / m;
        let cym = sy / m;
        let mut edge = 0usize;
        for y in 0..n {
            for x in 0..n {
                if mask[y * n + x] {
                    let u = (x as f64 + 0.5) / n as f64 - 0.5 - cxm;
                    let v = (y as f64 + 0.5) / n as f64 - 0.5 - cym;
                    mu20 += u * u;
                    mu02 += v * v;
                    mu11 += u * v;
                    let (xi, yi) = (x as isize, y as isize);
                    if !(on(xi - 1, yi) && on(xi + 1, yi) && on(xi, yi - 1) && on(xi, yi + 1)) {
                        edge += 1;
                    }
                }
            }
        }
        mu20 /= m;
        mu02 /= m;
        mu11 /= m;
        let tr = mu20 + mu02;
        let det_term = ((mu20 - mu02).powi(2) + 4.0 * mu11 * mu11).sqrt();
        if tr > 0.0 {
            aniso = det_term / tr;
        }
        let l1 = 0.5 * (tr + det_term);
        let l2 = (0.5 * (tr - det_term)).max(0.0);
        major = l1.sqrt();
        minor = l2.sqrt();
        // one-pixel floor keeps the ratio finite for lines
        let floor = 1.0 / (12.0 * (n * n) as f64);
        log_ratio = 0.5 * ((l1 + floor) / (l2 + floor)).ln();
        compact = edge as f64 / m.sqrt();
    }

    let g = [
        mean,
        var.sqrt(),
        px.iter().cloned().fold(f64::INFINITY, f64::min),
        px.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        image.pixels().iter().filter(|&&v| v >= SATURATED_LEVEL).count() as f64 / total,
        image.pixels().iter().filter(|&&v| v > BRIGHT_LEVEL).count() as f64 / total,
        grad_sum / total,
        lap_sum / lap_n.max(1) as f64,
        major,
        minor,
        log_ratio,
        mu20,
        mu02,
        aniso,
        m / total,
        compact,
    ];
    d[144..160].copy_from_slice(&g);
    Ok(d)
}

/// 3×3 erosion then dilation of an `n×n` mask; outside pixels count as off.
fn open3(mask: &[bool], n: usize) -> Vec<bool> {
    let pass = |src: &[bool], all: bool| {
        let mut out = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut hit = all;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (xx, yy) = (x as isize + dx, y as isize + dy);
                        let v = xx >= 0 && yy >= 0 && (xx as usize) < n && (yy as usize) < n && src[yy as usize * n + xx as usize];
                        if all {
                            hit &= v;
                        } else {
                            hit |= v;
                        }
                    }
                }
                out[y * n + x] = hit;
            }
        }
        out
    };
    pass(&pass(mask, true), false)
}

/// Mean and standard deviation per column; zero-variance columns get std 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let rows: Vec<&[f64]> = rows.collect();
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Data("no training rows to fit normalization on".into()));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbedderSpec {
    pub seed: u64,
    pub dim: usize,
    /// `DESCRIPTOR_LEN × dim`, row-major, entries N(0, 1/160).
    pub projection: Vec<f64>,
    /// Per scale, fitted on the training split.
    pub descriptor_stats: Option<[Standardizer; 3]>,
    pub output_stats: Option<[Standardizer; 3]>,
}

impl EmbedderSpec {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / DESCRIPTOR_LEN as f64).sqrt()).unwrap();
        let projection = (0..DESCRIPTOR_LEN * dim).map(|_| normal.sample(&mut rng)).collect();
        Self {
            seed,
            dim,
            projection,
            descriptor_stats: None,
            output_stats: None,
        }
    }

    fn project(&self, desc: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, &v) in desc.iter().enumerate() {
            let row = &self.projection[i * self.dim..(i + 1) * self.dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += v * w;
            }
        }
        out
    }

    /// Embeds one patch at `scale`. Requires fitted statistics.
    pub fn embed_patch(&self, image: &GrayImage, scale: Scale) -> Result<Vec<f64>> {
        let (Some(ds), Some(os)) = (&self.descriptor_stats, &self.output_stats) else {
            return Err(Error::Config("embedder statistics have not been fitted".into()));
        };
        let mut d = describe(image)?.to_vec();
        ds[scale.index()].apply(&mut d);
        let mut y = self.project(&d);
        os[scale.index()].apply(&mut y);
        Ok(y)
    }

    /// Fits both normalization stages on the training rows of `descriptors`
    /// and returns the embedded features for every row.
    fn fit_and_embed(
        &mut self,
        descriptors: &[[Vec<f64>; 3]],
        is_train: &[bool],
    ) -> Result<[Vec<f64>; 3]> {
        let mut dstats = Vec::with_capacity(3);
        let mut ostats = Vec::with_capacity(3);
        let mut out: [Vec<f64>; 3] = Default::default();
        for s in 0..3 {
            let train_rows = descriptors
                .iter()
                .zip(is_train)
                .filter(|(_, &t)| t)
                .map(|(d, _)| d[s].as_slice());
            let st = Standardizer::fit(train_rows, DESCRIPTOR_LEN)?;
            let projected: Vec<Vec<f64>> = descriptors
                .iter()
                .map(|d| {
                    let mut z = d[s].clone();
                    st.apply(&mut z);
                    self.project(&z)
                })
                .collect();
            let train_rows = projected
                .iter()
                .zip(is_train)
                .filter(|(_, &t)| t)
                .map(|(p, _)| p.as_slice());
            let os = Standardizer::fit(train_rows, self.dim)?;
            let mut flat = Vec::with_capacity(projected.len() * self.dim);
            for mut p in projected {
                os.apply(&mut p);
                flat.extend_from_slice(&p);
            }
            out[s] = flat;
            dstats.push(st);
            ostats.push(os);
        }
        self.descriptor_stats = Some(dstats.try_into().unwrap());
        self.output_stats = Some(ostats.try_into().unwrap());
        Ok(out)
    }
}

/// Embedded patches, row `i` for patch `i` of the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    /// Per scale, `n × dim` row-major.
    pub feats: [Vec<f64>; 3],
    pub labels: Vec<u8>,
    pub region_ids: Vec<usize>,
    pub splits: Vec<Split>,
    pub centers: Vec<(usize, usize)>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, scale: usize, i: usize) -> &[f64] {
        &self.feats[scale][i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_container(&self) -> Container {
        let n = self.len();
        let mut c = Container::new();
        for (s, name) in FEATURE_NAMES.iter().enumerate() {
            c.insert(*name, Tensor::matrix(n, self.dim, self.feats[s].clone()).unwrap());
        }
        c.insert("labels", Tensor::vector(self.labels.iter().map(|&l| l as f64).collect()));
        c.insert(
            "region_ids",
            Tensor::vector(self.region_ids.iter().map(|&r| r as f64).collect()),
        );
        c.insert(
            "splits",
            Tensor::vector(self.splits.iter().map(|&s| s as u8 as f64).collect()),
        );
        c.insert(
            "centers",
            Tensor::matrix(n, 2, self.centers.iter().flat_map(|&(x, y)| [x as f64, y as f64]).collect()).unwrap(),
        );
        c
    }

    /// Reads a feature cache written by [`FeatureSet::to_container`].
    pub fn from_container(c: &Container) -> Result<Self> {
        let n = c.require("labels")?.len();
        let mut feats: [Vec<f64>; 3] = Default::default();
        let mut dim = 0;
        for (s, name) in FEATURE_NAMES.iter().enumerate() {
            let t = c.require(name)?;
            if t.rank() != 2 || t.dims2().0 != n {
                return Err(Error::Data(format!("{name} has shape {:?} for {n} patches", t.shape())));
            }
            dim = t.dims2().1;
            feats[s] = t.data().to_vec();
        }
        let ints = |name: &str| -> Result<Vec<usize>> {
            let t = c.require(name)?;
            if t.data().iter().any(|v| !(v.fract() == 0.0 && *v >= 0.0)) {
                return Err(Error::Data(format!("{name} holds non-integer values")));
            }
            Ok(t.data().iter().map(|&v| v as usize).collect())
        };
        let labels: Vec<u8> = ints("labels")?.into_iter().map(|v| v as u8).collect();
        let region_ids = ints("region_ids")?;
        let splits = ints("splits")?
            .into_iter()
            .map(|v| {
                Split::ALL
                    .get(v)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("split code {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let c2 = ints("centers")?;
        if region_ids.len() != n || splits.len() != n || c2.len() != 2 * n {
            return Err(Error::Data("feature cache columns differ in length".into()));
        }
        Ok(Self {
            dim,
            feats,
            labels,
            region_ids,
            splits,
            centers: c2.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    /// Checks that row `i` describes manifest record `i`.
    pub fn check_manifest(&self, manifest: &DatasetManifest) -> Result<()> {
        if manifest.records.len() != self.len() {
            return Err(Error::Data(format!(
                "{} feature rows for {} manifest records",
                self.len(),
                manifest.records.len()
            )));
        }
        for (i, r) in manifest.records.iter().enumerate() {
            if r.region_id != self.region_ids[i]
                || r.label != self.labels[i]
                || r.split != self.splits[i]
                || (r.cx, r.cy) != self.centers[i]
            {
                return Err(Error::Data(format!("feature row {i} does not match manifest record {}", r.id)));
            }
        }
        Ok(())
    }
}

fn embed_descriptors(
    spec: &mut EmbedderSpec,
    descriptors: Vec<[Vec<f64>; 3]>,
    labels: Vec<u8>,
    region_ids: Vec<usize>,
    splits: Vec<Split>,
    centers: Vec<(usize, usize)>,
) -> Result<FeatureSet> {
    let is_train: Vec<bool> = splits.iter().map(|&s| s == Split::Train).collect();
    let feats = spec.fit_and_embed(&descriptors, &is_train)?;
    Ok(FeatureSet {
        dim: spec.dim,
        feats,
        labels,
        region_ids,
        splits,
        centers,
    })
}

fn describe_triplet(images: &[GrayImage; 3]) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for s in 0..3 {
        out[s] = describe(&images[s])?.to_vec();
    }
    Ok(out)
}

/// Embeds an in-memory dataset.
pub fn embed_toy(ds: &ToyDataset, spec: &mut EmbedderSpec) -> Result<FeatureSet> {
    let descriptors = ds
        .patches
        .par_iter()
        .map(|p| describe_triplet(&p.images))
        .collect::<Result<Vec<_>>>()?;
    embed_descriptors(
        spec,
        descriptors,
        ds.patches.iter().map(|p| p.label).collect(),
        ds.patches.iter().map(|p| p.region_id).collect(),
        ds.patches.iter().map(|p| p.split).collect(),
        ds.patches.iter().map(|p| p.center).collect(),
    )
}

/// Embeds every patch referenced by a manifest, reading images from disk.
pub fn embed_dataset(manifest: &DatasetManifest, spec: &mut EmbedderSpec) -> Result<FeatureSet> {
    let descriptors = (0..manifest.records.len())
        .into_par_iter()
        .map(|i| describe_triplet(&manifest.load_images(i)?))
        .collect::<Result<Vec<_>>>()?;
    let r = &manifest.records;
    embed_descriptors(
        spec,
        descriptors,
        r.iter().map(|x| x.label).collect(),
        r.iter().map(|x| x.region_id).collect(),
        r.iter().map(|x| x.split).collect(),
        r.iter().map(|x| (x.cx, x.cy)).collect(),
    )
}
