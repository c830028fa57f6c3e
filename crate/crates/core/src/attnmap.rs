//! Attention maps: per-patch attention filled back onto the region's
//! patch-center grid, plus distribution summaries per scale.
//!
//! A map keeps every sample per cell; the cell value is the mean of the
//! samples, summed in sorted order so the result does not depend on the
//! order the traces arrive in.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bagging::Bag;
use crate::embedder::FeatureSet;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::net::ForwardTrace;
use crate::toydata::{Scale, REGION_SIZE};

/// Regular grid of patch centers `step/2 + k·step` over one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub step: usize,
    pub side: usize,
}

impl PatchGrid {
    pub fn new(step: usize) -> Result<Self> {
        if step == 0 || step > REGION_SIZE || REGION_SIZE % step != 0 {
            return Err(Error::Config(format!("grid step {step} does not tile {REGION_SIZE}")));
        }
        Ok(Self {
            step,
            side: REGION_SIZE / step,
        })
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Row-major cell of a patch center.
    pub fn cell(&self, center: (usize, usize)) -> Result<usize> {
        let h = self.step / 2;
        let coord = |c: usize| {
            if c < h || (c - h) % self.step != 0 || (c - h) / self.step >= self.side {
                None
            } else {
                Some((c - h) / self.step)
            }
        };
        match (coord(center.0), coord(center.1)) {
            (Some(x), Some(y)) => Ok(y * self.side + x),
            _ => Err(Error::Data(format!(
                "center {center:?} is not on the step-{} grid",
                self.step
            ))),
        }
    }
}

/// What a map accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    /// Cross-scale attention at this position of the model's scale list.
    Scale(usize),
    /// Instance pooling weight.
    Instance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub source: MapSource,
    pub grid: PatchGrid,
    samples: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn new(source: MapSource, grid: PatchGrid) -> Self {
        Self {
            source,
            grid,
            samples: vec![Vec::new(); grid.cells()],
        }
    }

    pub fn add(&mut self, center: (usize, usize), value: f64) -> Result<()> {
        let c = self.grid.cell(center)?;
        self.samples[c].push(value);
        Ok(())
    }

    /// Folds another map's samples into this one.
    pub fn merge(&mut self, other: &AttentionMap) -> Result<()> {
        if other.grid != self.grid || other.source != self.source {
            return Err(Error::Data("maps do not share a grid and source".into()));
        }
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            a.extend_from_slice(b);
        }
        Ok(())
    }

    pub fn count(&self, cell: usize) -> usize {
        self.samples[cell].len()
    }

    pub fn sum(&self, cell: usize) -> f64 {
        let mut v = self.samples[cell].clone();
        v.sort_by(f64::total_cmp);
        v.iter().sum()
    }

    /// Mean per cell, `None` where nothing was sampled.
    pub fn means(&self) -> Vec<Option<f64>> {
        (0..self.grid.cells())
            .map(|c| match self.count(c) {
                0 => None,
                n => Some(self.sum(c) / n as f64),
            })
            .collect()
    }

    pub fn covered(&self) -> usize {
        self.samples.iter().filter(|s| !s.is_empty()).count()
    }

    /// Smallest sample count over covered cells.
    pub fn min_count(&self) -> Option<usize> {
        self.samples.iter().map(Vec::len).filter(|&n| n > 0).min()
    }

    /// Per-map min-max scaling; a constant map sits at 0.5.
    pub fn normalized(&self) -> Vec<Option<f64>> {
        let m = self.means();
        let present = m.iter().flatten();
        let lo = present.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = present.copied().fold(f64::NEG_INFINITY, f64::max);
        m.into_iter()
            .map(|v| v.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }))
            .collect()
    }

    /// Raw means as comma-separated rows, `NA` for absent cells.
    pub fn to_csv(&self) -> String {
        let m = self.means();
        let mut out = String::new();
        for row in m.chunks(self.grid.side) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or_else(|| "NA".to_string(), |v| v.to_string()))
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// One pixel per cell: `round(255·normalized)`, absent cells black.
    pub fn to_image(&self) -> GrayImage {
        let px = self
            .normalized()
            .into_iter()
            .map(|v| v.map_or(0, |v| (255.0 * v).round() as u8))
            .collect();
        GrayImage::new(self.grid.side, self.grid.side, px)
    }

    /// Writes `{stem}.csv` and `{stem}.pgm` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        self.to_image().save_pgm(dir.join(format!("{stem}.pgm")))
    }
}

/// Parses a grid written by [`AttentionMap::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<Vec<Option<f64>>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|t| match t.trim() {
                    "NA" => Ok(None),
                    t => t
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Data(format!("bad map cell {t:?}: {e}"))),
                })
                .collect()
        })
        .collect()
}

/// Accumulates one map from forward traces and the centers of each
/// trace's instances.
pub fn fill_back(
    traces: &[ForwardTrace],
    centers: &[Vec<(usize, usize)>],
    source: MapSource,
    grid: PatchGrid,
) -> Result<AttentionMap> {
    if traces.is_empty() {
        return Err(Error::Data("no traces to fill back".into()));
    }
    if traces.len() != centers.len() {
        return Err(Error::Data(format!("{} traces but {} center lists", traces.len(), centers.len())));
    }
    let mut map = AttentionMap::new(source, grid);
    for (tr, cs) in traces.iter().zip(centers) {
        if cs.len() != tr.instance_weights.len() {
            return Err(Error::Data(format!(
                "trace has {} instances but {} centers",
                tr.instance_weights.len(),
                cs.len()
            )));
        }
        for (i, &c) in cs.iter().enumerate() {
            let v = match source {
                MapSource::Scale(s) if s < tr.n_scales => tr.attention(i)[s],
                MapSource::Scale(s) => {
                    return Err(Error::Data(format!("scale position {s} of {}", tr.n_scales)));
                }
                MapSource::Instance => tr.instance_weights[i],
            };
            map.add(c, v)?;
        }
    }
    Ok(map)
}

/// Scale maps (in the model's scale order) followed by the instance
/// weight map for one region of an evaluation.
pub fn region_maps(
    bags: &[Bag],
    traces: &[ForwardTrace],
    fs: &FeatureSet,
    region: usize,
    grid: PatchGrid,
) -> Result<Vec<AttentionMap>> {
    let mut tr = Vec::new();
    let mut cs = Vec::new();
    for (bag, t) in bags.iter().zip(traces) {
        if bag.group_id == region {
            tr.push(t.clone());
            cs.push(bag.instances.iter().map(|&i| fs.centers[i]).collect());
        }
    }
    if tr.is_empty() {
        return Err(Error::Data(format!("region {region} has no traces")));
    }
    let mut maps = Vec::new();
    for s in 0..tr[0].n_scales {
        maps.push(fill_back(&tr, &cs, MapSource::Scale(s), grid)?);
    }
    maps.push(fill_back(&tr, &cs, MapSource::Instance, grid)?);
    Ok(maps)
}

/// File stem of a scale map.
pub fn map_stem(scale: Scale) -> String {
    format!("attn_{}", scale.tag())
}

pub const INSTANCE_STEM: &str = "instance_b";

/// Min, quartiles and max of a sample.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct FiveNumber {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    /// Linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            n: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ScaleStats {
    pub scale: usize,
    pub label: u8,
    pub summary: FiveNumber,
}

/// Distribution of `a_s` over all instances, split by scale position and
/// bag label. `labels` holds one label per trace.
pub fn scale_attention_stats(traces: &[ForwardTrace], labels: &[u8]) -> Result<Vec<ScaleStats>> {
    if traces.len() != labels.len() {
        return Err(Error::Data(format!("{} traces but {} labels", traces.len(), labels.len())));
    }
    let s = traces.first().map_or(0, |t| t.n_scales);
    let mut out = Vec::new();
    for scale in 0..s {
        for label in [0u8, 1] {
            let vals: Vec<f64> = traces
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == label)
                .flat_map(|(t, _)| (0..t.instance_weights.len()).map(move |i| t.attention(i)[scale]))
                .collect();
            if let Some(summary) = FiveNumber::of(&vals) {
                out.push(ScaleStats { scale, label, summary });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(att: Vec<f64>, s: usize, b: Vec<f64>) -> ForwardTrace {
        ForwardTrace {
            scale_attention: att,
            n_scales: s,
            instance_weights: b,
            logits: [0.0, 0.0],
            probs: [0.5, 0.5],
        }
    }

    #[test]
    fn grid_cells() {
        let g = PatchGrid::new(64).unwrap();
        assert_eq!(g.side, 4);
        assert_eq!(g.cell((32, 32)).unwrap(), 0);
        assert_eq!(g.cell((224, 96)).unwrap(), 7);
        assert!(g.cell((33, 32)).is_err());
        assert!(g.cell((288, 32)).is_err());
        assert!(g.cell((0, 32)).is_err());
        assert!(PatchGrid::new(48).is_err());
    }

    #[test]
    fn single_instance_covers_one_cell() {
        let g = PatchGrid::new(64).unwrap();
        let t = trace(vec![0.2, 0.3, 0.5], 3, vec![1.0]);
        let m = fill_back(&[t], &[vec![(96, 160)]], MapSource::Scale(1), g).unwrap();
        assert_eq!(m.covered(), 1);
        let means = m.means();
        assert_eq!(means[2 * 4 + 1], Some(0.3));
        assert_eq!(means.iter().flatten().count(), 1);
    }

    #[test]
    fn samples_average() {
        let g = PatchGrid::new(64).unwrap();
        let a = trace(vec![0.2, 0.8], 2, vec![1.0]);
        let b = trace(vec![0.4, 0.6], 2, vec![1.0]);
        let m = fill_back(&[a, b], &[vec![(32, 32)], vec![(32, 32)]], MapSource::Scale(0), g).unwrap();
        assert!((m.means()[0].unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(m.min_count(), Some(2));
    }

    #[test]
    fn errors() {
        let g = PatchGrid::new(64).unwrap();
        assert!(fill_back(&[], &[], MapSource::Instance, g).is_err());
        let t = trace(vec![1.0], 1, vec![1.0]);
        assert!(fill_back(&[t.clone()], &[vec![(31, 32)]], MapSource::Instance, g).is_err());
        assert!(fill_back(&[t.clone()], &[vec![(32, 32)]], MapSource::Scale(1), g).is_err());
        assert!(fill_back(&[t], &[vec![]], MapSource::Instance, g).is_err());
    }

    #[test]
    fn image_scaling() {
        let g = PatchGrid::new(128).unwrap();
        let mut m = AttentionMap::new(MapSource::Instance, g);
        m.add((64, 64), 0.1).unwrap();
        m.add((192, 64), 0.4).unwrap();
        m.add((64, 192), 0.3).unwrap();
        let px = m.to_image();
        assert_eq!(px.pixels(), &[0, 255, 170, 0]);
        assert_eq!(m.to_csv(), "0.1,0.4\n0.3,NA\n");
    }

    #[test]
    fn constant_map_is_mid_gray() {
        let g = PatchGrid::new(64).unwrap();
        let mut m = AttentionMap::new(MapSource::Instance, g);
        for y in 0..4 {
            for x in 0..4 {
                m.add((32 + 64 * x, 32 + 64 * y), 0.7).unwrap();
            }
        }
        assert!(m.to_image().pixels().iter().all(|&p| p == 128));
    }

    #[test]
    fn csv_round_trip() {
        let g = PatchGrid::new(64).unwrap();
        let mut m = AttentionMap::new(MapSource::Scale(0), g);
        m.add((32, 32), 1.0 / 3.0).unwrap();
        m.add((160, 224), 0.123456789).unwrap();
        let back = parse_csv(&m.to_csv()).unwrap();
        let flat: Vec<Option<f64>> = back.into_iter().flatten().collect();
        assert_eq!(flat, m.means());
    }

    #[test]
    fn five_numbers() {
        let f = FiveNumber::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((f.min, f.q1, f.median, f.q3, f.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        let f = FiveNumber::of(&[1.0, 2.0]).unwrap();
        assert_eq!(f.median, 1.5);
        assert!(FiveNumber::of(&[]).is_none());
    }

    #[test]
    fn single_scale_stats_sit_at_one() {
        let t = trace(vec![1.0, 1.0], 1, vec![0.5, 0.5]);
        let st = scale_attention_stats(&[t.clone(), t], &[0, 1]).unwrap();
        assert_eq!(st.len(), 2);
        for s in st {
            assert_eq!((s.summary.min, s.summary.max), (1.0, 1.0));
        }
    }
}
